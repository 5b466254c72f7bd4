// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tierkv/errors.hpp"

namespace tierkv {

using Bytes = std::uint64_t;

/// Opaque identifier of a reusable context (and of its KV cache entry).
struct EntryId {
  std::uint64_t value = 0;

  friend constexpr auto operator<=>(const EntryId&, const EntryId&) = default;
};

inline std::string to_string(EntryId id) { return std::to_string(id.value); }

/// Shape of the attention KV cache of one model.
struct ModelShape {
  std::uint32_t num_layers = 32;
  std::uint32_t num_kv_heads = 8;
  std::uint32_t head_dim = 128;
  std::uint32_t bytes_per_element = 2;

  void validate() const {
    if (num_layers < 1 || num_kv_heads < 1 || head_dim < 1)
      throw ConfigError("model shape fields must be >= 1");
    if (bytes_per_element != 1 && bytes_per_element != 2 && bytes_per_element != 4)
      throw ConfigError("bytes_per_element must be 1, 2 or 4");
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Keys and values for every layer and KV head.
constexpr Bytes bytes_per_token(const ModelShape& shape) {
  return Bytes{2} * shape.num_layers * shape.num_kv_heads * shape.head_dim * shape.bytes_per_element;
}

enum class MethodKind : std::uint8_t { Quantize = 0, TokenDrop = 1 };

inline constexpr std::size_t kNumMethods = 2;
inline constexpr std::array<MethodKind, kNumMethods> kAllMethods{MethodKind::Quantize,
                                                                 MethodKind::TokenDrop};

constexpr std::size_t index_of(MethodKind kind) { return static_cast<std::size_t>(kind); }

inline std::string_view to_string(MethodKind kind) {
  return kind == MethodKind::Quantize ? "quantize" : "tokendrop";
}

inline std::optional<MethodKind> parse_method(std::string_view name) {
  if (name == "quantize") return MethodKind::Quantize;
  if (name == "tokendrop") return MethodKind::TokenDrop;
  return std::nullopt;
}

/// A compression family and the rates it can be run at. Rate 1.0 (FULL) is always offered.
struct CompressionMethod {
  MethodKind kind = MethodKind::Quantize;
  std::vector<double> available_rates{1.0};

  void validate() const {
    if (available_rates.empty() || available_rates.back() != 1.0)
      throw ConfigError(std::string(to_string(kind)) + ": rate 1.0 must be available");
    for (std::size_t i = 0; i < available_rates.size(); ++i) {
      if (!(available_rates[i] > 0.0 && available_rates[i] <= 1.0))
        throw ConfigError(std::string(to_string(kind)) + ": rates must lie in (0, 1]");
      if (i > 0 && !(available_rates[i - 1] < available_rates[i]))
        throw ConfigError(std::string(to_string(kind)) + ": rates must be strictly ascending");
    }
  }

  bool offers(double rate) const {
    return std::find(available_rates.begin(), available_rates.end(), rate) != available_rates.end();
  }
};

/// What to do with one entry: keep it at (method, rate), or do not store it and recompute on use.
///
/// Rate is compressed bytes over full bytes. FULL (rate 1.0) is method-independent and
/// normalised to the quantize tag so that equal choices compare equal.
class CompressionChoice {
 public:
  constexpr CompressionChoice() = default;

  static constexpr CompressionChoice full() { return CompressionChoice(MethodKind::Quantize, 1.0, false); }
  static constexpr CompressionChoice recompute() { return CompressionChoice(MethodKind::Quantize, 0.0, true); }
  static CompressionChoice compressed(MethodKind method, double rate) {
    if (!(rate > 0.0 && rate <= 1.0)) throw ContractError("compression rate must lie in (0, 1]");
    if (rate == 1.0) return full();
    return CompressionChoice(method, rate, false);
  }

  constexpr bool is_recompute() const { return recompute_; }
  constexpr bool is_full() const { return !recompute_ && rate_ == 1.0; }
  constexpr MethodKind method() const { return method_; }
  /// 0 for RECOMPUTE.
  constexpr double rate() const { return rate_; }

  friend constexpr bool operator==(const CompressionChoice&, const CompressionChoice&) = default;

 private:
  constexpr CompressionChoice(MethodKind m, double r, bool rc) : method_(m), rate_(r), recompute_(rc) {}

  MethodKind method_ = MethodKind::Quantize;
  double rate_ = 1.0;
  bool recompute_ = false;
};

inline std::string to_string(const CompressionChoice& c) {
  if (c.is_recompute()) return "recompute";
  if (c.is_full()) return "full";
  return std::string(to_string(c.method())) + "@" + std::to_string(c.rate());
}

/// ceil(rate * full_size), exact for rates that are representable fractions of full_size.
inline Bytes compressed_size(Bytes full_size, const CompressionChoice& choice) {
  if (choice.is_recompute()) throw ContractError("RECOMPUTE has no stored size");
  if (choice.is_full()) return full_size;
  const long double product = static_cast<long double>(choice.rate()) * static_cast<long double>(full_size);
  const long double nearest = std::nearbyint(product);
  // Absorb binary representation noise of decimal rates (0.1 * 1000 -> 100.00000000000001).
  if (std::fabs(product - nearest) <= 1e-9L * std::max<long double>(1.0L, product))
    return static_cast<Bytes>(nearest);
  return std::min(full_size, static_cast<Bytes>(std::ceil(product)));
}

/// One storage level of the hierarchy.
struct DeviceTier {
  std::string name;
  Bytes capacity = 0;
  double read_bandwidth = 1.0;   // bytes/second
  double write_bandwidth = 1.0;  // bytes/second
  std::array<double, kNumMethods> decompress_s_per_byte{0.0, 0.0};  // per uncompressed byte

  double decompress_coeff(MethodKind kind) const { return decompress_s_per_byte[index_of(kind)]; }

  void validate() const {
    if (name.empty()) throw ConfigError("tier name must not be empty");
    if (!(read_bandwidth > 0.0) || !std::isfinite(read_bandwidth))
      throw ConfigError("tier '" + name + "': read bandwidth must be positive");
    if (!(write_bandwidth > 0.0) || !std::isfinite(write_bandwidth))
      throw ConfigError("tier '" + name + "': write bandwidth must be positive");
    for (double c : decompress_s_per_byte)
      if (!(c >= 0.0) || !std::isfinite(c))
        throw ConfigError("tier '" + name + "': decompression cost must be finite and >= 0");
  }
};

/// One reusable context's KV cache and its request history.
struct CacheEntry {
  EntryId id;
  std::uint64_t token_count = 1;
  Bytes full_size = 0;
  std::string class_tag;
  std::vector<double> hit_history;  // strictly increasing, seconds
  double created_at = 0.0;
  // Hits older than the retained history, as a decayed mass referenced to folded_at.
  double folded_mass = 0.0;
  double folded_at = 0.0;
};

inline CacheEntry make_entry(EntryId id, std::uint64_t token_count, std::string class_tag,
                             const ModelShape& shape, double created_at) {
  if (token_count < 1) throw ContractError("token_count must be >= 1");
  CacheEntry e;
  e.id = id;
  e.token_count = token_count;
  e.full_size = token_count * bytes_per_token(shape);
  e.class_tag = std::move(class_tag);
  e.created_at = created_at;
  return e;
}

inline Bytes compressed_size(const CacheEntry& entry, const CompressionChoice& choice) {
  return compressed_size(entry.full_size, choice);
}

}  // namespace tierkv
