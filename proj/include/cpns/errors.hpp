// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cpns {

/// Invalid configuration (bad hyperparameters, infeasible geometry, shape
/// mismatch between layers).
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid input data (out-of-range labels, wrong input dimension, empty
/// batches).
class InputError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// An operation was called in a state where it is not defined (e.g. the
/// auxiliary head before any previous task exists).
class UsageError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// Malformed text in a data file. Carries the 1-based line number.
class ParseError : public std::runtime_error {
  public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

/// Structurally inconsistent file (dimension disagreements, bad magic).
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered in gradients or parameters.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A theorem-backed invariant failed. Always a bug.
class InvariantViolation : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

} // namespace cpns
