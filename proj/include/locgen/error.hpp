// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace locgen {

// Exception hierarchy. The CLI maps each type onto a process exit code.

/// Bad input from the caller: malformed config, out-of-range value, missing file.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A data or counting invariant was violated at runtime.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite loss, gradient or probability.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace locgen
