// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

// Fixtures shared by the unit tests and the acceptance binary.

#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "tierkv/tierkv.hpp"

namespace tierkv::testing {

inline DeviceTier make_tier(std::string name, Bytes capacity, double read_bw, double quant_cost = 0.0,
                            double drop_cost = 0.0) {
  DeviceTier t;
  t.name = std::move(name);
  t.capacity = capacity;
  t.read_bandwidth = read_bw;
  t.write_bandwidth = read_bw;
  t.decompress_s_per_byte = {quant_cost, drop_cost};
  return t;
}

/// Curve with the given (rate, quality) knots below 1.0, closed with (1.0, 1.0).
inline std::vector<Knot> knots(std::initializer_list<Knot> below_full) {
  std::vector<Knot> k(below_full);
  k.push_back({1.0, 1.0});
  return k;
}

/// Single-class profile ("c") with a quantize curve.
inline ProfileConfig make_profile(std::vector<DeviceTier> tiers, std::vector<Knot> quant_knots,
                                  double prefill_s_per_token = 1e-4) {
  ProfileConfig p;
  p.device.tiers = std::move(tiers);
  p.device.prefill_s_per_token = prefill_s_per_token;
  QualityCurve c;
  c.set(MethodKind::Quantize, std::move(quant_knots));
  p.curves.emplace("c", c);
  p.methods = derive_methods(p.curves);
  return p;
}

/// Entry with an exact full size, independent of any model shape.
inline CacheEntry sized_entry(std::uint64_t id, Bytes full_size, std::uint64_t tokens, std::string tag = "c") {
  CacheEntry e;
  e.id = EntryId{id};
  e.full_size = full_size;
  e.token_count = tokens;
  e.class_tag = std::move(tag);
  return e;
}

/// Small random knapsack instance: entries, a 2-3 tier profile, frequencies.
struct Instance {
  ProfileConfig profile;
  std::vector<CacheEntry> entries;
  std::vector<double> freqs;
  double alpha = 1.0;

  std::vector<PlanItem> items() const {
    std::vector<PlanItem> out;
    for (std::size_t i = 0; i < entries.size(); ++i) out.push_back({&entries[i], freqs[i], std::nullopt});
    return out;
  }
};

struct InstanceShape {
  std::size_t min_entries = 1;
  std::size_t max_entries = 6;
  std::size_t min_tiers = 2;
  std::size_t max_tiers = 2;
  std::size_t max_rates = 3;  // compressed rates per method, FULL comes on top
  bool both_methods = true;
};

/// Rates and qualities are drawn on coarse grids so that ties and dominance actually occur.
inline Instance random_instance(std::mt19937_64& rng, const InstanceShape& shape) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  Instance inst;
  const std::size_t num_tiers = pick(shape.min_tiers, shape.max_tiers);
  const std::size_t num_entries = pick(shape.min_entries, shape.max_entries);
  std::vector<Bytes> sizes(num_entries);
  Bytes total = 0;
  for (auto& s : sizes) {
    s = 1000 * pick(1, 40);
    total += s;
  }
  std::vector<DeviceTier> tiers;
  double bw = uni(5e4, 2e5);
  for (std::size_t t = 0; t < num_tiers; ++t) {
    const Bytes cap = static_cast<Bytes>(static_cast<double>(total) * uni(0.05, 0.7));
    tiers.push_back(make_tier("t" + std::to_string(t), cap, bw, uni(0.0, 2e-6), uni(0.0, 1e-6)));
    bw /= uni(2.0, 10.0);
  }

  // One class per instance; each method gets up to max_rates grid rates.
  const std::vector<double> grid{0.1, 0.125, 0.2, 0.25, 0.4, 0.5, 0.75};
  auto curve_for = [&](std::size_t n) {
    std::vector<double> rates;
    std::sample(grid.begin(), grid.end(), std::back_inserter(rates), n, rng);
    std::vector<Knot> k;
    double q = uni(0.2, 0.6);
    for (double r : rates) {
      q = std::min(1.0, q + std::round(uni(0.0, 0.3) * 20.0) / 20.0);
      k.push_back({r, q});
    }
    k.push_back({1.0, 1.0});
    return k;
  };
  inst.profile.device.tiers = std::move(tiers);
  inst.profile.device.prefill_s_per_token = uni(5e-3, 5e-2);
  QualityCurve c;
  c.set(MethodKind::Quantize, curve_for(pick(1, shape.max_rates)));
  if (shape.both_methods && pick(0, 1) == 1) c.set(MethodKind::TokenDrop, curve_for(pick(1, shape.max_rates)));
  inst.profile.curves.emplace("c", c);
  inst.profile.methods = derive_methods(inst.profile.curves);

  for (std::size_t i = 0; i < num_entries; ++i) {
    inst.entries.push_back(sized_entry(i + 1, sizes[i], pick(5, 60)));
    inst.freqs.push_back(std::round(uni(0.0, 10.0) * 4.0) / 4.0);
  }
  inst.alpha = uni(0.5, 5.0);
  return inst;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("tierkv_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace tierkv::testing
