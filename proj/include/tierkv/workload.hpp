// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tierkv/detail/numfmt.hpp"
#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"

namespace tierkv {

/// One request in a trace.
struct TraceEvent {
  double t = 0.0;  // seconds
  EntryId context;
  std::uint64_t token_count = 1;
  std::string class_tag;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct WorkloadSpec {
  double rate = 1.0;        // requests/second
  double duration = 600.0;  // seconds
  std::size_t num_contexts = 200;
  double zipf_s = 1.0;
  std::uint64_t min_tokens = 1024;
  std::uint64_t max_tokens = 32768;
  std::vector<std::string> class_tags{"summarization", "qa", "coding"};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(rate > 0.0) || !std::isfinite(rate)) throw ConfigError("arrival rate must be > 0");
    if (!(duration >= 0.0) || !std::isfinite(duration)) throw ConfigError("duration must be >= 0");
    if (num_contexts < 1) throw ConfigError("need at least one context");
    if (!(zipf_s >= 0.0) || !std::isfinite(zipf_s)) throw ConfigError("zipf exponent must be >= 0");
    if (min_tokens < 1 || max_tokens < min_tokens) throw ConfigError("token bounds must satisfy 1 <= min <= max");
    if (class_tags.empty()) throw ConfigError("need at least one class tag");
  }
};

/// 64-bit Mersenne Twister with portable real-valued draws (std distributions are not portable).
class TraceRng {
 public:
  explicit TraceRng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 engine_;
};

/// Inverse-CDF sampler of ranks 0..n-1 with P(k) proportional to (k+1)^-s.
class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double s) : cdf_(n) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      acc += std::pow(static_cast<double>(k + 1), -s);
      cdf_[k] = acc;
    }
    for (double& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  std::size_t operator()(TraceRng& rng) const {
    const double u = rng.uniform();
    return static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

  double probability(std::size_t k) const { return k == 0 ? cdf_[0] : cdf_[k] - cdf_[k - 1]; }
  std::size_t size() const { return cdf_.size(); }

 private:
  std::vector<double> cdf_;
};

/// Poisson arrivals with Zipf-skewed context reuse. Context ids are a seeded permutation of the
/// popularity ranks; each context's token count and class are fixed when first drawn.
inline std::vector<TraceEvent> gen_trace(const WorkloadSpec& spec) {
  spec.validate();
  TraceRng rng(spec.seed);
  std::vector<std::uint64_t> ids(spec.num_contexts);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);

  const ZipfSampler zipf(spec.num_contexts, spec.zipf_s);
  const double log_lo = std::log(static_cast<double>(spec.min_tokens));
  const double log_hi = std::log(static_cast<double>(spec.max_tokens));
  struct Context {
    std::uint64_t tokens;
    std::size_t tag;
  };
  std::map<std::uint64_t, Context> seen;

  std::vector<TraceEvent> trace;
  double t = 0.0;
  while (true) {
    t += rng.exponential(spec.rate);
    if (t > spec.duration) break;
    const std::uint64_t id = ids[zipf(rng)];
    auto it = seen.find(id);
    if (it == seen.end()) {
      const double tokens = std::exp(log_lo + rng.uniform() * (log_hi - log_lo));
      const auto count = std::clamp<std::uint64_t>(static_cast<std::uint64_t>(std::llround(tokens)), spec.min_tokens,
                                                   spec.max_tokens);
      it = seen.emplace(id, Context{count, static_cast<std::size_t>(rng.below(spec.class_tags.size()))}).first;
    }
    trace.push_back({t, EntryId{id}, it->second.tokens, spec.class_tags[it->second.tag]});
  }
  return trace;
}

inline constexpr std::string_view kTraceHeader = "t_s,context_id,token_count,class_tag";

inline void write_trace(const std::vector<TraceEvent>& events, std::ostream& out) {
  out << kTraceHeader << '\n';
  for (const TraceEvent& e : events) {
    if (e.class_tag.empty() || e.class_tag.find_first_of(",\r\n") != std::string::npos)
      throw ContractError("class tag must be non-empty and free of commas and line breaks");
    out << detail::format_double(e.t) << ',' << e.context.value << ',' << e.token_count << ',' << e.class_tag << '\n';
  }
}

inline void write_trace(const std::vector<TraceEvent>& events, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write trace " + path.string());
  write_trace(events, out);
  if (!out) throw Error("failed writing trace " + path.string());
}

inline std::vector<TraceEvent> read_trace(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty trace file: missing header", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTraceHeader) throw ParseError("expected header '" + std::string(kTraceHeader) + "'", 1);

  std::vector<TraceEvent> events;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 4) throw ParseError("expected 4 fields, got " + std::to_string(fields.size()), lineno);
    TraceEvent e;
    auto t = detail::parse_number<double>(fields[0]);
    if (!t || !std::isfinite(*t) || *t < 0.0) throw ParseError("bad timestamp '" + std::string(fields[0]) + "'", lineno);
    auto id = detail::parse_number<std::uint64_t>(fields[1]);
    if (!id) throw ParseError("bad context_id '" + std::string(fields[1]) + "'", lineno);
    auto tokens = detail::parse_number<std::uint64_t>(fields[2]);
    if (!tokens || *tokens < 1) throw ParseError("bad token_count '" + std::string(fields[2]) + "'", lineno);
    if (fields[3].empty()) throw ParseError("empty class_tag", lineno);
    e.t = *t;
    e.context = EntryId{*id};
    e.token_count = *tokens;
    e.class_tag = std::string(fields[3]);
    if (!events.empty() && e.t < events.back().t) throw ParseError("timestamps must be non-decreasing", lineno);
    events.push_back(std::move(e));
  }
  return events;
}

inline std::vector<TraceEvent> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open trace " + path.string());
  return read_trace(in);
}

}  // namespace tierkv
