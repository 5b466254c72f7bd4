// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>

namespace tierkv::detail {

// Shortest representation that parses back to the same double; locale independent.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// NaN and infinities become an empty field.
inline std::string format_metric(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace tierkv::detail
