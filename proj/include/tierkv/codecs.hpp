// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"

namespace tierkv::codecs {

/// Serialized cache: token_count blocks of `stride` bytes each.
struct KvLayout {
  std::uint64_t token_count = 0;
  std::uint32_t stride = 0;  // bytes per token
  std::uint32_t element_width = 4;

  Bytes payload_size() const { return token_count * stride; }
};

inline KvLayout layout_for(const ModelShape& shape, std::uint64_t token_count) {
  return {token_count, static_cast<std::uint32_t>(bytes_per_token(shape)), shape.bytes_per_element};
}

struct QuantSpec {
  std::uint8_t bits = 2;
  std::uint32_t group_size = 64;

  /// Groups must pack into whole bytes so the per-group stream layout has no padding.
  void validate() const {
    if (bits != 2 && bits != 4 && bits != 8) throw ContractError("quantization bits must be 2, 4 or 8");
    if (group_size < 1) throw ContractError("group_size must be >= 1");
    if ((static_cast<std::uint64_t>(group_size) * bits) % 8 != 0)
      throw ContractError("group_size * bits must be a multiple of 8");
  }
};

struct DropSpec {
  std::uint32_t sink_tokens = 4;
  std::uint32_t recent_tokens = 0;

  void validate() const {
    if (std::uint64_t{sink_tokens} + recent_tokens < 1) throw ContractError("token dropping must keep at least one token");
  }
};

inline constexpr Bytes kGroupOverhead = 8;  // f32 scale + f32 zero point

inline Bytes num_groups(std::uint64_t n, const QuantSpec& spec) { return (n + spec.group_size - 1) / spec.group_size; }

/// ceil(n * bits / 8) + 8 bytes per group.
inline Bytes quantized_body_size(std::uint64_t n, const QuantSpec& spec) {
  return (n * spec.bits + 7) / 8 + num_groups(n, spec) * kGroupOverhead;
}

/// Body size over the 4n bytes of f32 input.
inline double quantized_rate(std::uint64_t n, const QuantSpec& spec) {
  return static_cast<double>(quantized_body_size(n, spec)) / (4.0 * static_cast<double>(n));
}

/// Rate the body approaches for large inputs.
inline double asymptotic_quantized_rate(const QuantSpec& spec) {
  return (spec.bits / 8.0 + static_cast<double>(kGroupOverhead) / spec.group_size) / 4.0;
}

namespace detail {

inline void put_bytes(std::vector<std::byte>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::byte*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<std::byte>& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  put_bytes(out, &v, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }

  std::span<const std::byte> take(std::size_t n) {
    if (in_.size() - pos_ < n) throw FormatError("truncated stream");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Asymmetric min-max uniform quantization per group of `group_size` elements.
///
/// Each group is written as [scale f32][zero f32][codes], codes packed LSB-first. The codes are
/// computed against the stored f32 step so that reconstruction stays within step/2.
inline std::vector<std::byte> quantize(std::span<const float> values, const QuantSpec& spec) {
  spec.validate();
  const std::uint64_t n = values.size();
  std::vector<std::byte> out;
  out.reserve(quantized_body_size(n, spec));
  const std::uint32_t levels = (1u << spec.bits) - 1u;
  for (std::uint64_t begin = 0; begin < n; begin += spec.group_size) {
    const auto group = values.subspan(begin, std::min<std::uint64_t>(spec.group_size, n - begin));
    float lo = group[0], hi = group[0];
    for (float x : group) {
      if (!std::isfinite(x)) throw InputError("quantize: non-finite element");
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    const float step = static_cast<float>((static_cast<double>(hi) - lo) / levels);
    detail::put_le(out, step);
    detail::put_le(out, lo);

    std::uint8_t acc = 0;
    unsigned filled = 0;
    for (float x : group) {
      std::uint32_t code = 0;
      if (step > 0.0f) {
        const double q = std::nearbyint((static_cast<double>(x) - lo) / step);
        code = static_cast<std::uint32_t>(std::clamp(q, 0.0, static_cast<double>(levels)));
      }
      acc = static_cast<std::uint8_t>(acc | (code << filled));
      filled += spec.bits;
      if (filled == 8) {
        out.push_back(static_cast<std::byte>(acc));
        acc = 0;
        filled = 0;
      }
    }
    if (filled != 0) out.push_back(static_cast<std::byte>(acc));
  }
  return out;
}

/// Inverse of quantize: x = zero + code * scale.
inline std::vector<float> dequantize(std::span<const std::byte> body, const QuantSpec& spec, std::uint64_t n) {
  spec.validate();
  detail::Reader in(body);
  std::vector<float> out;
  out.reserve(n);
  const std::uint32_t mask = (1u << spec.bits) - 1u;
  for (std::uint64_t begin = 0; begin < n; begin += spec.group_size) {
    const std::uint64_t len = std::min<std::uint64_t>(spec.group_size, n - begin);
    const float step = in.get<float>();
    const float zero = in.get<float>();
    const auto codes = in.take((len * spec.bits + 7) / 8);
    for (std::uint64_t i = 0; i < len; ++i) {
      const std::uint64_t bit = i * spec.bits;
      const std::uint32_t code = (std::to_integer<std::uint32_t>(codes[bit / 8]) >> (bit % 8)) & mask;
      out.push_back(static_cast<float>(static_cast<double>(zero) + static_cast<double>(code) * step));
    }
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after quantized groups");
  return out;
}

/// Result of token dropping: kept token blocks back to back, and which tokens they were.
struct DroppedTokens {
  std::vector<std::byte> bytes;
  std::vector<std::uint64_t> kept;
};

/// Sorted union of [0, sink) and [T - recent, T).
inline std::vector<std::uint64_t> kept_tokens(std::uint64_t token_count, const DropSpec& spec) {
  std::vector<std::uint64_t> kept;
  const std::uint64_t sink = std::min<std::uint64_t>(spec.sink_tokens, token_count);
  const std::uint64_t recent_begin = token_count - std::min<std::uint64_t>(spec.recent_tokens, token_count);
  for (std::uint64_t i = 0; i < sink; ++i) kept.push_back(i);
  for (std::uint64_t i = std::max(sink, recent_begin); i < token_count; ++i) kept.push_back(i);
  return kept;
}

inline double drop_rate(std::uint64_t token_count, const DropSpec& spec) {
  if (token_count == 0) return 1.0;
  return static_cast<double>(kept_tokens(token_count, spec).size()) / static_cast<double>(token_count);
}

/// Keeps the attention-sink prefix and the recent window.
inline DroppedTokens drop_tokens(std::span<const std::byte> payload, const KvLayout& layout, const DropSpec& spec) {
  spec.validate();
  if (payload.size() != layout.payload_size()) throw InputError("drop_tokens: payload does not match layout");
  DroppedTokens out;
  out.kept = kept_tokens(layout.token_count, spec);
  out.bytes.reserve(out.kept.size() * layout.stride);
  for (std::uint64_t t : out.kept) {
    const auto block = payload.subspan(t * layout.stride, layout.stride);
    out.bytes.insert(out.bytes.end(), block.begin(), block.end());
  }
  return out;
}

// Stream framing ------------------------------------------------------------

inline constexpr std::array<char, 4> kQuantMagic{'A', 'K', 'V', 'C'};
inline constexpr std::array<char, 4> kDropMagic{'A', 'K', 'V', 'D'};
inline constexpr std::uint8_t kStreamVersion = 1;
inline constexpr Bytes kQuantHeaderSize = 4 + 1 + 1 + 1 + 4 + 8;
inline constexpr Bytes kDropHeaderSize = 4 + 1 + 4 + 4 + 8 + 4;

inline Bytes quantized_stream_size(std::uint64_t n, const QuantSpec& spec) {
  return kQuantHeaderSize + quantized_body_size(n, spec);
}

inline Bytes dropped_stream_size(const KvLayout& layout, const DropSpec& spec) {
  return kDropHeaderSize + kept_tokens(layout.token_count, spec).size() * layout.stride;
}

/// "AKVC" header {version, method, bits, group_size, element_count} then the groups.
inline std::vector<std::byte> encode_quantized(std::span<const float> values, const QuantSpec& spec) {
  std::vector<std::byte> out;
  out.reserve(quantized_stream_size(values.size(), spec));
  detail::put_bytes(out, kQuantMagic.data(), 4);
  detail::put_le<std::uint8_t>(out, kStreamVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(MethodKind::Quantize));
  detail::put_le<std::uint8_t>(out, spec.bits);
  detail::put_le<std::uint32_t>(out, spec.group_size);
  detail::put_le<std::uint64_t>(out, values.size());
  const auto body = quantize(values, spec);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline std::vector<float> decode_quantized(std::span<const std::byte> stream) {
  detail::Reader in(stream);
  const auto magic = in.take(4);
  if (std::memcmp(magic.data(), kQuantMagic.data(), 4) != 0) throw FormatError("bad quantized stream magic");
  if (in.get<std::uint8_t>() != kStreamVersion) throw FormatError("unsupported stream version");
  if (in.get<std::uint8_t>() != static_cast<std::uint8_t>(MethodKind::Quantize)) throw FormatError("not a quantized stream");
  QuantSpec spec;
  spec.bits = in.get<std::uint8_t>();
  spec.group_size = in.get<std::uint32_t>();
  const auto n = in.get<std::uint64_t>();
  try {
    spec.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  return dequantize(stream.subspan(kQuantHeaderSize), spec, n);
}

/// "AKVD" header {version, sink, recent, token_count, stride} then the kept blocks.
inline std::vector<std::byte> encode_dropped(std::span<const std::byte> payload, const KvLayout& layout,
                                             const DropSpec& spec) {
  const DroppedTokens dropped = drop_tokens(payload, layout, spec);
  std::vector<std::byte> out;
  out.reserve(kDropHeaderSize + dropped.bytes.size());
  detail::put_bytes(out, kDropMagic.data(), 4);
  detail::put_le<std::uint8_t>(out, kStreamVersion);
  detail::put_le<std::uint32_t>(out, spec.sink_tokens);
  detail::put_le<std::uint32_t>(out, spec.recent_tokens);
  detail::put_le<std::uint64_t>(out, layout.token_count);
  detail::put_le<std::uint32_t>(out, layout.stride);
  out.insert(out.end(), dropped.bytes.begin(), dropped.bytes.end());
  return out;
}

struct DecodedDrop {
  KvLayout layout;
  DropSpec spec;
  DroppedTokens tokens;
};

inline DecodedDrop decode_dropped(std::span<const std::byte> stream) {
  detail::Reader in(stream);
  const auto magic = in.take(4);
  if (std::memcmp(magic.data(), kDropMagic.data(), 4) != 0) throw FormatError("bad token-drop stream magic");
  if (in.get<std::uint8_t>() != kStreamVersion) throw FormatError("unsupported stream version");
  DecodedDrop d;
  d.spec.sink_tokens = in.get<std::uint32_t>();
  d.spec.recent_tokens = in.get<std::uint32_t>();
  d.layout.token_count = in.get<std::uint64_t>();
  d.layout.stride = in.get<std::uint32_t>();
  d.tokens.kept = kept_tokens(d.layout.token_count, d.spec);
  const auto body = in.take(d.tokens.kept.size() * d.layout.stride);
  if (in.remaining() != 0) throw FormatError("trailing bytes after kept tokens");
  d.tokens.bytes.assign(body.begin(), body.end());
  return d;
}

// Choice -> codec parameters -------------------------------------------------

inline constexpr std::array<std::uint8_t, 3> kSupportedBits{2, 4, 8};
inline constexpr double kRateMatchTolerance = 0.01;

/// Bit width whose achieved rate on `n` f32 elements is within 1% of `rate`.
inline QuantSpec quant_spec_for_rate(double rate, std::uint64_t n, std::uint32_t group_size = 64) {
  for (std::uint8_t bits : kSupportedBits) {
    QuantSpec spec{bits, group_size};
    spec.validate();
    if (std::fabs(quantized_rate(n, spec) - rate) <= kRateMatchTolerance * rate) return spec;
  }
  throw ConfigError("no quantization bit width achieves rate " + std::to_string(rate));
}

inline constexpr std::uint32_t kDefaultSinkTokens = 4;

/// Keeps round(rate * T) tokens (at least one): up to four sinks, the rest from the tail.
inline DropSpec drop_spec_for_rate(double rate, std::uint64_t token_count) {
  const auto kept = static_cast<std::uint64_t>(
      std::clamp<double>(std::nearbyint(rate * static_cast<double>(token_count)), 1.0, static_cast<double>(token_count)));
  DropSpec spec;
  spec.sink_tokens = static_cast<std::uint32_t>(std::min<std::uint64_t>(kDefaultSinkTokens, kept));
  spec.recent_tokens = static_cast<std::uint32_t>(kept - spec.sink_tokens);
  return spec;
}

/// Exact stream size of an entry encoded at `choice`, with f32 elements.
inline Bytes predicted_stream_size(const CacheEntry& entry, const CompressionChoice& choice, const ModelShape& shape) {
  if (choice.is_recompute()) throw ContractError("RECOMPUTE has no stored size");
  if (choice.is_full()) return entry.full_size;
  if (choice.method() == MethodKind::Quantize) {
    const std::uint64_t n = entry.full_size / 4;
    return quantized_stream_size(n, quant_spec_for_rate(choice.rate(), n));
  }
  const KvLayout layout = layout_for(shape, entry.token_count);
  return dropped_stream_size(layout, drop_spec_for_rate(choice.rate(), entry.token_count));
}

/// Encodes a pristine f32 payload at `choice`. FULL stores the payload itself.
inline std::vector<std::byte> encode(std::span<const std::byte> pristine, const CacheEntry& entry,
                                     const CompressionChoice& choice, const ModelShape& shape) {
  if (choice.is_recompute()) throw ContractError("cannot encode RECOMPUTE");
  if (pristine.size() != entry.full_size) throw InputError("payload does not match entry size");
  if (choice.is_full()) return {pristine.begin(), pristine.end()};
  if (choice.method() == MethodKind::Quantize) {
    const std::uint64_t n = entry.full_size / 4;
    std::vector<float> values(n);
    std::memcpy(values.data(), pristine.data(), n * 4);
    return encode_quantized(values, quant_spec_for_rate(choice.rate(), n));
  }
  return encode_dropped(pristine, layout_for(shape, entry.token_count), drop_spec_for_rate(choice.rate(), entry.token_count));
}

}  // namespace tierkv::codecs
