// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/commands.hpp"

int main(int argc, char** argv) { return locgen::run_cli(argc, argv); }
