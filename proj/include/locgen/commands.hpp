// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace locgen {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitInvariant = 2, kExitNumeric = 3 };

/// Entry point of the `locgen` tool: gen-data, train, dpo, sample, eval,
/// sweep-k, sweep-topk, bench. Maps exceptions onto exit codes.
int run_cli(int argc, char** argv);

}  // namespace locgen
