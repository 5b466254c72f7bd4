// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"

namespace tierkv {

struct Knot {
  double rate = 1.0;
  double quality = 1.0;

  friend bool operator==(const Knot&, const Knot&) = default;
};

/// Observed answer quality of one profiled context at one compression rate.
struct QualitySample {
  double rate = 1.0;
  double quality = 1.0;
};

/// Quality-vs-rate knots per compression method for one class of contexts.
class QualityCurve {
 public:
  bool has(MethodKind kind) const { return !knots_[index_of(kind)].empty(); }

  std::span<const Knot> knots(MethodKind kind) const { return knots_[index_of(kind)]; }

  /// Knots must be rate-ascending, monotone in quality and end at (1.0, 1.0).
  void set(MethodKind kind, std::vector<Knot> knots) {
    const std::string name(to_string(kind));
    if (knots.empty()) throw ConfigError(name + ": curve needs at least one knot");
    for (std::size_t i = 0; i < knots.size(); ++i) {
      const Knot& k = knots[i];
      if (!(k.rate > 0.0 && k.rate <= 1.0) || !(k.quality >= 0.0 && k.quality <= 1.0))
        throw ConfigError(name + ": knot outside (0,1] x [0,1]");
      if (i > 0 && !(knots[i - 1].rate < k.rate)) throw ConfigError(name + ": knot rates must ascend");
      if (i > 0 && knots[i - 1].quality > k.quality)
        throw ConfigError(name + ": knot qualities must be non-decreasing");
    }
    if (knots.back().rate != 1.0 || knots.back().quality != 1.0)
      throw ConfigError(name + ": curve must end at (1.0, 1.0)");
    knots_[index_of(kind)] = std::move(knots);
  }

  friend bool operator==(const QualityCurve&, const QualityCurve&) = default;

 private:
  std::array<std::vector<Knot>, kNumMethods> knots_;
};

/// Isotonic (pool-adjacent-violators) fit of per-rate sample means, closed with (1.0, 1.0).
///
/// Repeated rates are averaged first and carry their sample count as PAV weight. Quality at
/// rate 1.0 is pinned to 1.0: an uncompressed cache reproduces the reference answer.
inline std::vector<Knot> fit_quality_knots(std::span<const QualitySample> samples) {
  if (samples.empty()) throw ConfigError("quality curve needs at least one sample");
  std::map<double, std::pair<double, double>> by_rate;  // rate -> (sum, count)
  for (const QualitySample& s : samples) {
    if (!(s.rate > 0.0 && s.rate <= 1.0)) throw ConfigError("sample rate outside (0, 1]");
    if (!(s.quality >= 0.0 && s.quality <= 1.0)) throw ConfigError("sample quality outside [0, 1]");
    auto& [sum, count] = by_rate[s.rate];
    sum += s.quality;
    count += 1.0;
  }
  by_rate.erase(1.0);

  struct Block {
    double sum;
    double weight;
    std::size_t first;
    std::size_t last;
    double mean() const { return sum / weight; }
  };
  std::vector<double> rates;
  std::vector<Block> blocks;
  for (const auto& [rate, acc] : by_rate) {
    rates.push_back(rate);
    blocks.push_back({acc.first, acc.second, rates.size() - 1, rates.size() - 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean() > blocks.back().mean()) {
      Block top = blocks.back();
      blocks.pop_back();
      blocks.back().sum += top.sum;
      blocks.back().weight += top.weight;
      blocks.back().last = top.last;
    }
  }

  std::vector<Knot> knots;
  knots.reserve(rates.size() + 1);
  for (const Block& b : blocks)
    for (std::size_t i = b.first; i <= b.last; ++i) knots.push_back({rates[i], std::min(1.0, b.mean())});
  knots.push_back({1.0, 1.0});
  return knots;
}

inline QualityCurve fit_quality_curve(std::span<const QualitySample> samples, MethodKind kind) {
  QualityCurve curve;
  curve.set(kind, fit_quality_knots(samples));
  return curve;
}

/// Piecewise-linear in rate; below the first knot the line runs to the origin.
inline double quality_at(const QualityCurve& curve, MethodKind kind, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ContractError("quality_at: rate must lie in (0, 1]");
  if (!curve.has(kind)) throw ConfigError("no quality curve for method " + std::string(to_string(kind)));
  const auto knots = curve.knots(kind);
  if (rate <= knots.front().rate)
    return std::clamp(knots.front().quality * (rate / knots.front().rate), 0.0, knots.front().quality);
  auto hi = std::lower_bound(knots.begin(), knots.end(), rate,
                             [](const Knot& k, double r) { return k.rate < r; });
  if (hi->rate == rate) return hi->quality;
  auto lo = hi - 1;
  const double w = (rate - lo->rate) / (hi->rate - lo->rate);
  return std::clamp(lo->quality + w * (hi->quality - lo->quality), lo->quality, hi->quality);
}

/// FULL and RECOMPUTE are lossless.
inline double quality_at(const QualityCurve& curve, const CompressionChoice& choice) {
  if (choice.is_recompute() || choice.is_full()) return 1.0;
  return quality_at(curve, choice.method(), choice.rate());
}

/// Exponentially decayed hit counter.
struct FrequencyEstimator {
  double half_life = 300.0;   // seconds
  double prior_weight = 1.0;  // decayed-hit mass credited to every entry

  void validate() const {
    if (!(half_life > 0.0) || !std::isfinite(half_life)) throw ConfigError("half_life must be > 0");
    if (!(prior_weight >= 0.0) || !std::isfinite(prior_weight)) throw ConfigError("prior_weight must be >= 0");
  }
};

/// Hits per second: (prior + sum of 2^-(age/half_life)) * ln2 / half_life.
inline double estimate_freq(const CacheEntry& entry, double now, const FrequencyEstimator& est) {
  double mass = est.prior_weight;
  if (entry.folded_mass > 0.0) mass += entry.folded_mass * std::exp2(-(now - entry.folded_at) / est.half_life);
  for (double t : entry.hit_history) mass += std::exp2(-(now - t) / est.half_life);
  return mass * std::numbers::ln2 / est.half_life;
}

inline constexpr std::size_t kDefaultHistoryCap = 64;

/// Appends a hit at `t`, folding the oldest timestamps into the decayed scalar once the history
/// exceeds `cap`. Folding leaves estimate_freq unchanged up to rounding.
inline void record_hit(CacheEntry& entry, double t, const FrequencyEstimator& est,
                       std::size_t cap = kDefaultHistoryCap) {
  auto fold = [&](double when) {
    const double ref = std::max(entry.folded_at, when);
    entry.folded_mass = entry.folded_mass * std::exp2(-(ref - entry.folded_at) / est.half_life) +
                        std::exp2(-(ref - when) / est.half_life);
    entry.folded_at = ref;
  };
  if (!entry.hit_history.empty() && t <= entry.hit_history.back()) {
    if (t < entry.hit_history.back()) throw ContractError("hit timestamps must not go backwards");
    fold(t);  // same instant twice: history stays strictly increasing
    return;
  }
  entry.hit_history.push_back(t);
  if (cap == 0) cap = 1;
  if (entry.hit_history.size() > cap) {
    const std::size_t excess = entry.hit_history.size() - cap;
    for (std::size_t i = 0; i < excess; ++i) fold(entry.hit_history[i]);
    entry.hit_history.erase(entry.hit_history.begin(), entry.hit_history.begin() + static_cast<std::ptrdiff_t>(excess));
  }
}

/// Storage tiers, fastest first, plus the cost of recomputing a context.
struct DeviceProfile {
  std::vector<DeviceTier> tiers;
  double prefill_s_per_token = 1e-4;

  void validate() const {
    if (tiers.empty()) throw ConfigError("device profile needs at least one tier");
    for (const DeviceTier& t : tiers) t.validate();
    for (std::size_t i = 1; i < tiers.size(); ++i)
      if (tiers[i - 1].read_bandwidth < tiers[i].read_bandwidth)
        throw ConfigError("tiers must be ordered fastest first");
    if (!(prefill_s_per_token > 0.0) || !std::isfinite(prefill_s_per_token))
      throw ConfigError("prefill_s_per_token must be > 0");
  }

  /// Stable reorder by descending read bandwidth.
  void normalize() {
    std::stable_sort(tiers.begin(), tiers.end(),
                     [](const DeviceTier& a, const DeviceTier& b) { return a.read_bandwidth > b.read_bandwidth; });
  }
};

using CurveSet = std::map<std::string, QualityCurve, std::less<>>;

/// Everything the estimator hands to the optimizer.
struct ProfileConfig {
  ModelShape model;
  DeviceProfile device;
  CurveSet curves;
  FrequencyEstimator freq;
  std::vector<CompressionMethod> methods;  // derived from the curves

  const QualityCurve& curve(std::string_view class_tag) const {
    auto it = curves.find(class_tag);
    if (it == curves.end()) throw ConfigError("no quality curve for class '" + std::string(class_tag) + "'");
    return it->second;
  }

  const CompressionMethod* method(MethodKind kind) const {
    for (const CompressionMethod& m : methods)
      if (m.kind == kind) return &m;
    return nullptr;
  }
};

/// Offered rates of each method: the union of its knot rates over all classes.
inline std::vector<CompressionMethod> derive_methods(const CurveSet& curves) {
  std::vector<CompressionMethod> out;
  for (MethodKind kind : kAllMethods) {
    std::vector<double> rates;
    for (const auto& [tag, curve] : curves)
      for (const Knot& k : curve.knots(kind)) rates.push_back(k.rate);
    if (rates.empty()) continue;
    std::sort(rates.begin(), rates.end());
    rates.erase(std::unique(rates.begin(), rates.end()), rates.end());
    CompressionMethod m{kind, std::move(rates)};
    m.validate();
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {

inline double json_number(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_number()) throw ConfigError(std::string("missing numeric field '") + key + "'");
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw ConfigError(std::string("field '") + key + "' is not finite");
  return v;
}

inline Bytes json_bytes(const nlohmann::json& obj, const char* key) {
  const double v = json_number(obj, key);
  if (v < 0.0 || v != std::floor(v) || v > 1.8e19) throw ConfigError(std::string("field '") + key + "' must be a byte count");
  return static_cast<Bytes>(v);
}

}  // namespace detail

/// Builds a profile from its JSON document. Raw curve samples are isotonically fitted.
inline ProfileConfig parse_profile(const nlohmann::json& doc) {
  using detail::json_bytes;
  using detail::json_number;
  if (!doc.is_object()) throw ConfigError("profile must be a JSON object");
  ProfileConfig cfg;

  if (auto it = doc.find("model"); it != doc.end()) {
    const auto& m = *it;
    cfg.model.num_layers = static_cast<std::uint32_t>(json_bytes(m, "num_layers"));
    cfg.model.num_kv_heads = static_cast<std::uint32_t>(json_bytes(m, "num_kv_heads"));
    cfg.model.head_dim = static_cast<std::uint32_t>(json_bytes(m, "head_dim"));
    cfg.model.bytes_per_element = static_cast<std::uint32_t>(json_bytes(m, "bytes_per_element"));
  }
  cfg.model.validate();

  auto tiers = doc.find("tiers");
  if (tiers == doc.end() || !tiers->is_array()) throw ConfigError("profile needs a 'tiers' array");
  for (const auto& t : *tiers) {
    DeviceTier tier;
    if (!t.contains("name") || !t["name"].is_string()) throw ConfigError("tier needs a 'name'");
    tier.name = t["name"].get<std::string>();
    tier.capacity = json_bytes(t, "capacity_bytes");
    tier.read_bandwidth = json_number(t, "read_bw_bytes_per_s");
    tier.write_bandwidth = json_number(t, "write_bw_bytes_per_s");
    if (auto d = t.find("decompress_s_per_byte"); d != t.end()) {
      for (MethodKind kind : kAllMethods) {
        const std::string key(to_string(kind));
        if (d->contains(key)) tier.decompress_s_per_byte[index_of(kind)] = json_number(*d, key.c_str());
      }
    }
    tier.validate();
    cfg.device.tiers.push_back(std::move(tier));
  }
  cfg.device.prefill_s_per_token = json_number(doc, "prefill_s_per_token");
  cfg.device.normalize();
  cfg.device.validate();

  auto curves = doc.find("curves");
  if (curves == doc.end() || !curves->is_object() || curves->empty())
    throw ConfigError("profile needs a non-empty 'curves' object");
  for (const auto& [tag, methods] : curves->items()) {
    QualityCurve curve;
    for (const auto& [method_name, points] : methods.items()) {
      auto kind = parse_method(method_name);
      if (!kind) throw ConfigError("unknown compression method '" + method_name + "'");
      std::vector<QualitySample> samples;
      for (const auto& p : points) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
          throw ConfigError("curve points must be [rate, quality] pairs");
        samples.push_back({p[0].get<double>(), p[1].get<double>()});
      }
      curve.set(*kind, fit_quality_knots(samples));
    }
    cfg.curves.emplace(tag, std::move(curve));
  }
  cfg.methods = derive_methods(cfg.curves);

  if (auto f = doc.find("freq"); f != doc.end()) {
    cfg.freq.half_life = json_number(*f, "half_life_s");
    cfg.freq.prior_weight = json_number(*f, "prior_weight");
  }
  cfg.freq.validate();
  return cfg;
}

inline nlohmann::json profile_to_json(const ProfileConfig& cfg) {
  nlohmann::json doc;
  doc["model"] = {{"num_layers", cfg.model.num_layers},
                  {"num_kv_heads", cfg.model.num_kv_heads},
                  {"head_dim", cfg.model.head_dim},
                  {"bytes_per_element", cfg.model.bytes_per_element}};
  doc["tiers"] = nlohmann::json::array();
  for (const DeviceTier& t : cfg.device.tiers) {
    doc["tiers"].push_back({{"name", t.name},
                            {"capacity_bytes", t.capacity},
                            {"read_bw_bytes_per_s", t.read_bandwidth},
                            {"write_bw_bytes_per_s", t.write_bandwidth},
                            {"decompress_s_per_byte",
                             {{"quantize", t.decompress_coeff(MethodKind::Quantize)},
                              {"tokendrop", t.decompress_coeff(MethodKind::TokenDrop)}}}});
  }
  doc["prefill_s_per_token"] = cfg.device.prefill_s_per_token;
  doc["curves"] = nlohmann::json::object();
  for (const auto& [tag, curve] : cfg.curves) {
    nlohmann::json methods = nlohmann::json::object();
    for (MethodKind kind : kAllMethods) {
      if (!curve.has(kind)) continue;
      nlohmann::json pts = nlohmann::json::array();
      for (const Knot& k : curve.knots(kind)) pts.push_back({k.rate, k.quality});
      methods[std::string(to_string(kind))] = std::move(pts);
    }
    doc["curves"][tag] = std::move(methods);
  }
  doc["freq"] = {{"half_life_s", cfg.freq.half_life}, {"prior_weight", cfg.freq.prior_weight}};
  return doc;
}

inline ProfileConfig load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read profile " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("profile " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_profile(doc);
}

// Microbenchmarks -----------------------------------------------------------

inline constexpr Bytes kMinBenchBytes = Bytes{64} << 20;
inline constexpr int kMinBenchTrials = 5;

namespace detail {

template <typename F>
double median_seconds(int trials, F&& once) {
  std::vector<double> t;
  for (int i = 0; i < trials; ++i) {
    const auto start = std::chrono::steady_clock::now();
    once();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

}  // namespace detail

/// Bytes/second of copying a DRAM buffer, median over `trials`.
inline double benchmark_memory_read(Bytes bytes = kMinBenchBytes, int trials = kMinBenchTrials) {
  std::vector<unsigned char> src(bytes, 0x5a), dst(bytes);
  volatile unsigned char sink = 0;
  const double secs = detail::median_seconds(trials, [&] {
    std::memcpy(dst.data(), src.data(), bytes);
    sink = sink ^ dst[bytes / 2];
  });
  return static_cast<double>(bytes) / std::max(secs, 1e-9);
}

/// Bytes/second of reading back a freshly written file under `dir`, median over `trials`.
inline double benchmark_file_read(const std::filesystem::path& dir, Bytes bytes = kMinBenchBytes,
                                  int trials = kMinBenchTrials) {
  const auto path = dir / "tierkv_bench.bin";
  std::vector<char> buf(bytes, 'k');
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.write(buf.data(), static_cast<std::streamsize>(bytes))) throw ConfigError("cannot write " + path.string());
  }
  const double secs = detail::median_seconds(trials, [&] {
    std::ifstream in(path, std::ios::binary);
    in.read(buf.data(), static_cast<std::streamsize>(bytes));
    if (in.gcount() != static_cast<std::streamsize>(bytes)) throw ConfigError("short read on " + path.string());
  });
  std::filesystem::remove(path);
  return static_cast<double>(bytes) / std::max(secs, 1e-9);
}

enum class MeasureMode { FromConfig, Microbenchmark };

struct BenchOptions {
  Bytes bytes = kMinBenchBytes;
  int trials = kMinBenchTrials;
  std::filesystem::path scratch_dir = std::filesystem::temp_directory_path();
};

/// Loads the device profile; in microbenchmark mode the first tier's read bandwidth is measured
/// from memory copies and every slower tier's from file reads in `scratch_dir`.
inline DeviceProfile measure_device_profile(const std::filesystem::path& config,
                                            MeasureMode mode = MeasureMode::FromConfig,
                                            const BenchOptions& bench = {}) {
  DeviceProfile profile = load_profile(config).device;
  if (mode == MeasureMode::Microbenchmark) {
    if (bench.bytes < kMinBenchBytes || bench.trials < kMinBenchTrials)
      throw ConfigError("microbenchmark needs >= 64 MiB transfers and >= 5 trials");
    profile.tiers.front().read_bandwidth = benchmark_memory_read(bench.bytes, bench.trials);
    if (profile.tiers.size() > 1) {
      const double file_bw = benchmark_file_read(bench.scratch_dir, bench.bytes, bench.trials);
      for (std::size_t i = 1; i < profile.tiers.size(); ++i)
        profile.tiers[i].read_bandwidth = std::min(file_bw, profile.tiers[i - 1].read_bandwidth);
    }
  }
  return profile;
}

}  // namespace tierkv
