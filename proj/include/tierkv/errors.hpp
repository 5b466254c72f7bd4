// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tierkv {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad profile, policy flags or inconsistent inputs detected before any work starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed text input (trace rows, profile files). Carries the 1-based line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Codec input that cannot be encoded (non-finite values, layout mismatch).
class InputError : public Error {
 public:
  using Error::Error;
};

// Truncated or corrupt compressed stream.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Engine and policy disagree about what is stored where.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Exhaustive search refused because the instance is too large.
class TooLargeError : public Error {
 public:
  using Error::Error;
};

}  // namespace tierkv
