// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "tierkv/detail/numfmt.hpp"
#include "tierkv/engine.hpp"
#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"
#include "tierkv/policy.hpp"
#include "tierkv/profiler.hpp"
#include "tierkv/workload.hpp"

namespace tierkv {

// Policy configurations ------------------------------------------------------

struct AdaptCacheConfig {
  double alpha = 1.0;
  std::size_t replan_every = 256;  // 0 disables periodic replanning
};

struct FixedLruConfig {
  MethodKind method = MethodKind::Quantize;
  double rate = 1.0;
};

struct NoCompressionLruConfig {};
struct PrefillAlwaysConfig {};

using PolicyConfig = std::variant<AdaptCacheConfig, FixedLruConfig, NoCompressionLruConfig, PrefillAlwaysConfig>;

inline std::string policy_name(const PolicyConfig& cfg) {
  struct {
    std::string operator()(const AdaptCacheConfig&) const { return "adaptcache"; }
    std::string operator()(const FixedLruConfig& c) const {
      return "fixed-lru/" + std::string(to_string(c.method)) + "/" + detail::format_double(c.rate);
    }
    std::string operator()(const NoCompressionLruConfig&) const { return "nocomp-lru"; }
    std::string operator()(const PrefillAlwaysConfig&) const { return "prefill"; }
  } visitor;
  return std::visit(visitor, cfg);
}

// Engine policies ------------------------------------------------------------

/// Utility-driven placement: admission on every miss, full replanning every N arrivals.
class AdaptivePolicy final : public PlacementPolicy {
 public:
  AdaptivePolicy(Alpha alpha, std::size_t replan_every, PlanOptions options = {})
      : alpha_(alpha), replan_every_(replan_every), options_(options) {}

  std::vector<Decision> after_request(const Engine& engine, const EngineState& state, EntryId id, bool hit,
                                      double now) override {
    ++arrivals_;
    const UtilityModel model(engine.profile(), alpha_, engine.size_fn());
    std::vector<PlanItem> items = engine.plan_items(state, now);
    if (replan_every_ > 0 && arrivals_ % replan_every_ == 0) return plan_changes(items, plan(items, model, options_));
    if (hit) return {};

    std::vector<PlanItem> residents;
    std::optional<PlanItem> incoming;
    for (const PlanItem& it : items) {
      if (it.entry->id == id) incoming = it;
      else if (it.current) residents.push_back(it);
    }
    if (!incoming) return {};
    return admit(*incoming, residents, model);
  }

 private:
  Alpha alpha_;
  std::size_t replan_every_;
  PlanOptions options_;
  std::uint64_t arrivals_ = 0;
};

/// Every entry at one fixed choice, inserted into the fastest tier; least recently used
/// residents cascade one tier down and fall out of the last one. Hits on slower tiers promote.
class LruPolicy final : public PlacementPolicy {
 public:
  explicit LruPolicy(CompressionChoice choice) : choice_(choice) {}

  std::vector<Decision> after_request(const Engine& engine, const EngineState& state, EntryId id, bool,
                                      double) override {
    const StoredObject* current = state.resident(id);
    if (current && current->tier == 0) return {};

    const auto& tiers = engine.profile().device.tiers;
    struct Resident {
      std::size_t tier;
      Bytes size;
      double last_access;
      CompressionChoice choice;
    };
    std::map<EntryId, Resident> res;
    std::vector<Bytes> used(tiers.size(), 0);
    for (const auto& [rid, obj] : state.residents) {
      const CacheEntry* e = state.entry(rid);
      res[rid] = {obj.tier, obj.stored_size, e->hit_history.back(), obj.choice};
      used[obj.tier] += obj.stored_size;
    }
    if (auto it = res.find(id); it != res.end()) {
      used[it->second.tier] -= it->second.size;
      res.erase(it);
    }

    const CacheEntry* entry = state.entry(id);
    auto place = [&](auto&& self, EntryId who, Resident r, std::size_t tier) -> void {
      for (; tier < tiers.size(); ++tier) {
        if (r.size > tiers[tier].capacity) continue;
        while (used[tier] + r.size > tiers[tier].capacity) {
          auto victim = res.end();
          for (auto it = res.begin(); it != res.end(); ++it)
            if (it->second.tier == tier && (victim == res.end() || it->second.last_access < victim->second.last_access))
              victim = it;
          const EntryId vid = victim->first;
          Resident v = victim->second;
          used[tier] -= v.size;
          res.erase(victim);
          self(self, vid, v, tier + 1);
        }
        r.tier = tier;
        used[tier] += r.size;
        res[who] = r;
        return;
      }
    };
    place(place, id, Resident{0, engine.stored_size(*entry, choice_), entry->hit_history.back(), choice_}, 0);

    std::vector<Decision> out;
    for (const auto& [rid, obj] : state.residents) {
      auto it = res.find(rid);
      if (it == res.end()) out.push_back({rid, std::nullopt});
      else if (it->second.tier != obj.tier) out.push_back({rid, Placement{it->second.tier, obj.choice}});
    }
    for (const auto& [rid, r] : res)
      if (!state.resident(rid)) out.push_back({rid, Placement{r.tier, r.choice}});
    return out;
  }

 private:
  CompressionChoice choice_;
};

inline std::unique_ptr<PlacementPolicy> make_policy(const PolicyConfig& cfg, const PlanOptions& options = {}) {
  struct {
    const PlanOptions& options;
    std::unique_ptr<PlacementPolicy> operator()(const AdaptCacheConfig& c) const {
      return std::make_unique<AdaptivePolicy>(Alpha{c.alpha}, c.replan_every, options);
    }
    std::unique_ptr<PlacementPolicy> operator()(const FixedLruConfig& c) const {
      return std::make_unique<LruPolicy>(CompressionChoice::compressed(c.method, c.rate));
    }
    std::unique_ptr<PlacementPolicy> operator()(const NoCompressionLruConfig&) const {
      return std::make_unique<LruPolicy>(CompressionChoice::full());
    }
    std::unique_ptr<PlacementPolicy> operator()(const PrefillAlwaysConfig&) const { return nullptr; }
  } visitor{options};
  return std::visit(visitor, cfg);
}

// Metrics --------------------------------------------------------------------

struct MetricsRow {
  double t = 0.0;
  RequestOutcome outcome;
};

struct MetricsSummary {
  std::string policy;
  std::optional<double> alpha;
  std::size_t requests = 0;
  double mean_ttft = std::numeric_limits<double>::quiet_NaN();
  double median_ttft = std::numeric_limits<double>::quiet_NaN();
  double p95_ttft = std::numeric_limits<double>::quiet_NaN();
  double hit_rate_total = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> hit_rate_per_tier;
  double miss_rate = std::numeric_limits<double>::quiet_NaN();
  double mean_quality = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
  std::vector<std::string> tier_names;
  std::vector<MetricsRow> rows;
  MetricsSummary summary;
};

/// Nearest-rank percentile of an ascending sample.
inline double nearest_rank(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline MetricsSummary summarize(const std::vector<MetricsRow>& rows, std::size_t num_tiers, std::string policy,
                                std::optional<double> alpha) {
  MetricsSummary s;
  s.policy = std::move(policy);
  s.alpha = alpha;
  s.requests = rows.size();
  s.hit_rate_per_tier.assign(num_tiers, std::numeric_limits<double>::quiet_NaN());
  if (rows.empty()) return s;

  std::vector<double> delays;
  std::vector<std::size_t> tier_hits(num_tiers, 0);
  std::size_t misses = 0;
  double delay_sum = 0.0, quality_sum = 0.0;
  for (const MetricsRow& r : rows) {
    delays.push_back(r.outcome.delay);
    delay_sum += r.outcome.delay;
    quality_sum += r.outcome.quality;
    if (const Hit* h = r.outcome.hit()) ++tier_hits.at(h->tier);
    else ++misses;
  }
  const auto n = static_cast<double>(rows.size());
  std::sort(delays.begin(), delays.end());
  s.mean_ttft = delay_sum / n;
  s.median_ttft = delays.size() % 2 ? delays[delays.size() / 2]
                                    : 0.5 * (delays[delays.size() / 2 - 1] + delays[delays.size() / 2]);
  s.p95_ttft = nearest_rank(delays, 0.95);
  for (std::size_t t = 0; t < num_tiers; ++t) s.hit_rate_per_tier[t] = static_cast<double>(tier_hits[t]) / n;
  s.hit_rate_total = static_cast<double>(rows.size() - misses) / n;
  s.miss_rate = static_cast<double>(misses) / n;
  s.mean_quality = quality_sum / n;
  return s;
}

struct RunOptions {
  PayloadMode mode = PayloadMode::SizeOnly;
  std::optional<std::filesystem::path> spill_dir;
  PlanOptions plan;
};

/// Checks that every class in the trace has curves the policy can use.
inline void validate_run(const std::vector<TraceEvent>& trace, const ProfileConfig& profile, const PolicyConfig& cfg) {
  std::set<std::string, std::less<>> classes;
  for (const TraceEvent& e : trace) classes.insert(e.class_tag);
  for (const std::string& tag : classes) profile.curve(tag);
  if (const auto* c = std::get_if<AdaptCacheConfig>(&cfg)) {
    if (!(c->alpha >= 0.0) || !std::isfinite(c->alpha)) throw ConfigError("alpha must be finite and >= 0");
  }
  if (const auto* c = std::get_if<FixedLruConfig>(&cfg)) {
    const CompressionMethod* m = profile.method(c->method);
    if (!m || !m->offers(c->rate))
      throw ConfigError("rate " + detail::format_double(c->rate) + " is not offered by " + std::string(to_string(c->method)));
    for (const std::string& tag : classes)
      if (!profile.curve(tag).has(c->method))
        throw ConfigError("class '" + tag + "' has no " + std::string(to_string(c->method)) + " curve");
  }
}

/// Replays a trace against a fresh engine under one policy.
inline MetricsReport run(const std::vector<TraceEvent>& trace, const ProfileConfig& profile, const PolicyConfig& cfg,
                         std::uint64_t seed, const RunOptions& options = {}) {
  validate_run(trace, profile, cfg);
  EngineOptions eo;
  eo.mode = options.mode;
  eo.payload_seed = seed;
  eo.spill_dir = options.spill_dir;
  Engine engine(profile, eo, make_policy(cfg, options.plan));

  MetricsReport report;
  for (const DeviceTier& t : profile.device.tiers) report.tier_names.push_back(t.name);
  report.rows.reserve(trace.size());
  for (const TraceEvent& e : trace)
    report.rows.push_back({e.t, engine.on_request(e.context, e.token_count, e.class_tag, e.t)});

  std::optional<double> alpha;
  if (const auto* c = std::get_if<AdaptCacheConfig>(&cfg)) alpha = c->alpha;
  report.summary = summarize(report.rows, report.tier_names.size(), policy_name(cfg), alpha);
  return report;
}

/// One AdaptCache run per alpha over the same trace; runs are independent and run concurrently.
inline std::vector<std::pair<double, MetricsReport>> sweep(const std::vector<TraceEvent>& trace,
                                                           const ProfileConfig& profile, std::span<const double> alphas,
                                                           std::uint64_t seed, std::size_t replan_every = 256,
                                                           const RunOptions& options = {}) {
  if (alphas.empty()) throw ConfigError("sweep needs at least one alpha");
  for (double a : alphas) validate_run(trace, profile, AdaptCacheConfig{a, replan_every});
  std::vector<std::future<MetricsReport>> jobs;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    RunOptions own = options;
    if (own.spill_dir) own.spill_dir = *own.spill_dir / ("alpha_" + std::to_string(i));
    jobs.push_back(std::async(std::launch::async, [&trace, &profile, a = alphas[i], own, seed, replan_every] {
      return run(trace, profile, AdaptCacheConfig{a, replan_every}, seed, own);
    }));
  }
  std::vector<std::pair<double, MetricsReport>> out;
  for (std::size_t i = 0; i < alphas.size(); ++i) out.emplace_back(alphas[i], jobs[i].get());
  return out;
}

// CSV output -----------------------------------------------------------------

inline constexpr std::string_view kRowsHeader = "t_s,context_id,result,tier,method,rate,delay_s,quality";

inline std::string summary_header(const std::vector<std::string>& tier_names) {
  std::string h = "policy,alpha,mean_ttft_s,p95_ttft_s,hit_rate_total";
  for (const std::string& t : tier_names) h += ",hit_rate_" + t;
  return h + ",mean_quality";
}

inline std::string summary_line(const MetricsSummary& s) {
  std::string line = s.policy + "," + (s.alpha ? detail::format_double(*s.alpha) : std::string()) + "," +
                     detail::format_metric(s.mean_ttft) + "," + detail::format_metric(s.p95_ttft) + "," +
                     detail::format_metric(s.hit_rate_total);
  for (double h : s.hit_rate_per_tier) line += "," + detail::format_metric(h);
  return line + "," + detail::format_metric(s.mean_quality);
}

inline void write_rows(const MetricsReport& report, std::ostream& out) {
  out << kRowsHeader << '\n';
  for (const MetricsRow& r : report.rows) {
    out << detail::format_double(r.t) << ',' << r.outcome.context.value << ',';
    if (const Hit* h = r.outcome.hit()) {
      const std::string method = h->choice.is_full() ? "full" : std::string(to_string(h->choice.method()));
      out << "hit," << report.tier_names.at(h->tier) << ',' << method << ',' << detail::format_double(h->choice.rate());
    } else {
      out << "miss,,,";
    }
    out << ',' << detail::format_double(r.outcome.delay) << ',' << detail::format_double(r.outcome.quality) << '\n';
  }
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(content.data(), static_cast<std::streamsize>(content.size())))
    throw Error("cannot write " + path.string());
}

}  // namespace detail

/// Writes `rows.csv` and `summary.csv` into `dir`.
inline void report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream rows;
  write_rows(report, rows);
  detail::write_file(dir / "rows.csv", rows.str());
  detail::write_file(dir / "summary.csv", summary_header(report.tier_names) + "\n" + summary_line(report.summary) + "\n");
}

/// Per-alpha reports under `dir/alpha_<i>/` plus the Pareto table `dir/sweep.csv`.
inline void report_sweep(const std::vector<std::pair<double, MetricsReport>>& results, const std::filesystem::path& dir) {
  if (results.empty()) return;
  std::string table = summary_header(results.front().second.tier_names) + "\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    report(results[i].second, dir / ("alpha_" + std::to_string(i)));
    table += summary_line(results[i].second.summary) + "\n";
  }
  detail::write_file(dir / "sweep.csv", table);
}

// Default profiles -----------------------------------------------------------

enum class ProfileScale { Full, Desk };

/// Full: 100 GB DRAM / 400 GB SSD with a 1 GB/s disk and a Llama-3.1-8B shaped cache.
/// Desk: every byte quantity (cache size per token, capacities, bandwidths) divided by 102.4,
/// DRAM 1 GB / SSD 4 GB. Delays, and so every policy decision, match the full profile.
inline ProfileConfig default_profile(ProfileScale scale = ProfileScale::Desk) {
  ProfileConfig cfg;
  const double s = scale == ProfileScale::Full ? 1.0 : 1.0 / 102.4;
  if (scale == ProfileScale::Full) cfg.model = ModelShape{32, 8, 128, 2};
  else cfg.model = ModelShape{4, 2, 40, 2};

  DeviceTier dram;
  dram.name = "dram";
  dram.capacity = scale == ProfileScale::Full ? 100'000'000'000ull : 1'000'000'000ull;
  dram.read_bandwidth = 25e9 * s;
  dram.write_bandwidth = 25e9 * s;
  dram.decompress_s_per_byte = {2e-12 / s, 0.0};
  DeviceTier ssd;
  ssd.name = "ssd";
  ssd.capacity = scale == ProfileScale::Full ? 400'000'000'000ull : 4'000'000'000ull;
  ssd.read_bandwidth = 1e9 * s;
  ssd.write_bandwidth = 1e9 * s;
  ssd.decompress_s_per_byte = {2e-12 / s, 0.0};
  cfg.device.tiers = {dram, ssd};
  cfg.device.prefill_s_per_token = 1e-4;

  // Quantization rates for a 16-bit cache: bits/16 plus 64 bits of scale/zero per 64 elements.
  auto curve = [](std::vector<Knot> quant, std::vector<Knot> drop) {
    QualityCurve c;
    quant.push_back({1.0, 1.0});
    drop.push_back({1.0, 1.0});
    c.set(MethodKind::Quantize, std::move(quant));
    c.set(MethodKind::TokenDrop, std::move(drop));
    return c;
  };
  cfg.curves.emplace("summarization", curve({{0.1875, 0.88}, {0.3125, 0.96}, {0.5625, 0.99}},
                                            {{0.05, 0.70}, {0.1, 0.82}, {0.2, 0.91}, {0.5, 0.97}}));
  cfg.curves.emplace("qa", curve({{0.1875, 0.90}, {0.3125, 0.97}, {0.5625, 0.995}},
                                 {{0.05, 0.35}, {0.1, 0.50}, {0.2, 0.68}, {0.5, 0.88}}));
  cfg.curves.emplace("coding", curve({{0.1875, 0.82}, {0.3125, 0.94}, {0.5625, 0.99}},
                                     {{0.05, 0.55}, {0.1, 0.72}, {0.2, 0.86}, {0.5, 0.95}}));
  cfg.methods = derive_methods(cfg.curves);
  return cfg;
}

}  // namespace tierkv
