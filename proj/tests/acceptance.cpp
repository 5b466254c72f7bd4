// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if
// any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <future>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "support.hpp"
#include "tierkv/tierkv.hpp"

namespace {

using namespace tierkv;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

// 1 --------------------------------------------------------------------------

Verdict planner_optimality() {
  std::mt19937_64 rng(20260101);
  testing::InstanceShape shape;
  shape.max_entries = 6;
  shape.max_rates = 3;  // FULL plus up to three rates: at most four choices per tier
  shape.both_methods = false;
  int below_bound = 0, infeasible = 0;
  std::vector<double> ratios;
  for (int i = 0; i < 500; ++i) {
    const testing::Instance inst = testing::random_instance(rng, shape);
    const auto items = inst.items();
    const UtilityModel model(inst.profile, Alpha{inst.alpha});
    const Plan greedy = plan(items, model);
    const Plan best = brute_force_plan(items, model);
    const double step = largest_ladder_step(items, model);
    if (greedy.total_utility < best.total_utility - step - 1e-9 * std::max(1.0, std::fabs(best.total_utility)))
      ++below_bound;
    for (std::size_t t = 0; t < greedy.used.size(); ++t)
      if (greedy.used[t] > inst.profile.device.tiers[t].capacity) ++infeasible;
    if (best.total_utility > 0.0) ratios.push_back(greedy.total_utility / best.total_utility);
  }
  std::sort(ratios.begin(), ratios.end());
  const double median = ratios.empty() ? 1.0 : ratios[ratios.size() / 2];
  const double worst = ratios.empty() ? 1.0 : ratios.front();
  return {below_bound == 0 && infeasible == 0 && median >= 0.95,
          fmt("500 instances, %d below opt-minus-step, %d infeasible, median ratio %.4f, worst %.4f over %zu", below_bound,
              infeasible, median, worst, ratios.size())};
}

// 2 --------------------------------------------------------------------------

Verdict feasibility_fuzzing() {
  std::mt19937_64 rng(42);
  auto pick = [&](std::uint64_t lo, std::uint64_t hi) { return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng); };
  testing::InstanceShape shape;
  shape.min_entries = 3;
  shape.max_entries = 12;
  shape.max_tiers = 3;
  long checks = 0, violations = 0, applied = 0;
  std::string first;
  for (int seq = 0; seq < 1000; ++seq) {
    testing::Instance inst = testing::random_instance(rng, shape);
    ProfileConfig profile = inst.profile;
    profile.model = ModelShape{1, 1, 250, 2};  // 1000 bytes per token
    profile.freq.half_life = std::uniform_real_distribution<double>(5.0, 200.0)(rng);
    const std::size_t replan_every = pick(0, 8);
    Engine engine(profile, {}, std::make_unique<AdaptivePolicy>(Alpha{inst.alpha}, replan_every));

    const std::size_t contexts = inst.entries.size();
    std::vector<std::uint64_t> tokens(contexts);
    for (auto& t : tokens) t = pick(1, 40);
    double now = 0.0;
    const std::size_t events = pick(40, 120);
    for (std::size_t e = 0; e < events; ++e) {
      now += std::exponential_distribution<double>(1.0)(rng);
      const std::uint64_t id = pick(0, contexts - 1);
      try {
        engine.on_request(EntryId{id}, tokens[id], "c", now);
      } catch (const ConsistencyError& err) {
        if (first.empty()) first = err.what();
        ++violations;
        continue;
      }
      const Snapshot s = engine.snapshot();
      std::vector<Bytes> recount(profile.device.tiers.size(), 0);
      for (const auto& [rid, obj] : s->residents) {
        const Bytes expect = compressed_size(s->entry(rid)->full_size, obj.choice);
        if (obj.stored_size != expect) ++violations;
        recount.at(obj.tier) += expect;
        applied += 1;
      }
      if (recount != s->used) ++violations;
      for (std::size_t t = 0; t < recount.size(); ++t)
        if (recount[t] > profile.device.tiers[t].capacity) ++violations;
      ++checks;
    }
  }
  return {violations == 0 && checks > 0,
          fmt("1000 sequences, %ld post-request checks over %ld resident objects, %ld violations%s%s", checks, applied,
              violations, first.empty() ? "" : ": ", first.c_str())};
}

// 3 and 4 --------------------------------------------------------------------

struct Baseline {
  std::string name;
  std::optional<MethodKind> method;
  double rate = 1.0;
  MetricsSummary summary;
};

struct DirectionalResults {
  double working_set_ratio = 0.0;
  std::size_t events = 0;
  std::vector<Baseline> baselines;
  std::vector<std::pair<double, MetricsSummary>> sweep;
  double seconds = 0.0;
};

DirectionalResults directional_runs() {
  const auto start = Clock::now();
  DirectionalResults out;
  const ProfileConfig profile = default_profile(ProfileScale::Desk);
  WorkloadSpec w;
  w.rate = 10.0;
  w.duration = 1700.0;
  w.num_contexts = 1000;
  w.zipf_s = 1.0;
  w.seed = 1;
  const auto trace = gen_trace(w);
  out.events = trace.size();
  std::map<EntryId, std::uint64_t> distinct;
  for (const auto& e : trace) distinct[e.context] = e.token_count;
  double working_set = 0.0;
  for (const auto& [id, t] : distinct) working_set += static_cast<double>(t * bytes_per_token(profile.model));
  out.working_set_ratio = working_set / static_cast<double>(profile.device.tiers[0].capacity);

  std::vector<PolicyConfig> configs{NoCompressionLruConfig{}};
  for (const CompressionMethod& m : profile.methods)
    for (double r : m.available_rates)
      if (r < 1.0) configs.push_back(FixedLruConfig{m.kind, r});
  std::vector<std::future<MetricsReport>> jobs;
  for (const PolicyConfig& c : configs)
    jobs.push_back(std::async(std::launch::async, [&trace, &profile, c] { return run(trace, profile, c, 0); }));

  const std::vector<double> alphas{0.01, 0.1, 1.0, 10.0};
  for (auto& [a, r] : sweep(trace, profile, alphas, 0)) out.sweep.emplace_back(a, r.summary);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    Baseline b;
    b.name = policy_name(configs[i]);
    if (const auto* f = std::get_if<FixedLruConfig>(&configs[i])) {
      b.method = f->method;
      b.rate = f->rate;
    }
    b.summary = jobs[i].get().summary;
    out.baselines.push_back(std::move(b));
  }
  out.seconds = seconds_since(start);
  return out;
}

// Some alpha must beat, by 1.2x in mean TTFT, every fixed-compression LRU baseline whose
// quality is no more than 2 points below its own.
Verdict directional_ttft(const DirectionalResults& r) {
  std::string best_line = "no alpha qualifies";
  bool pass = false;
  double best_ratio = std::numeric_limits<double>::infinity();
  for (const auto& [alpha, s] : r.sweep) {
    const Baseline* rival = nullptr;
    for (const Baseline& b : r.baselines)
      if (b.summary.mean_quality >= s.mean_quality - 0.02 &&
          (!rival || b.summary.mean_ttft < rival->summary.mean_ttft))
        rival = &b;
    if (!rival) continue;
    const double ratio = s.mean_ttft / rival->summary.mean_ttft;
    if (ratio < best_ratio) {
      best_ratio = ratio;
      best_line = fmt("alpha=%g: TTFT %.4f s, quality %.4f vs %s TTFT %.4f s, quality %.4f, ratio %.3f (need <= %.3f)",
                      alpha, s.mean_ttft, s.mean_quality, rival->name.c_str(), rival->summary.mean_ttft,
                      rival->summary.mean_quality, ratio, 1.0 / 1.2);
    }
    pass = pass || ratio <= 1.0 / 1.2;
  }
  return {pass && r.seconds < 300.0,
          fmt("%zu events, working set %.1fx DRAM; ", r.events, r.working_set_ratio) + best_line};
}

Verdict directional_hit_rate(const DirectionalResults& r) {
  bool monotone = true;
  std::string series;
  for (std::size_t i = 0; i < r.sweep.size(); ++i) {
    const double h = r.sweep[i].second.hit_rate_per_tier[0];
    if (i > 0 && h > r.sweep[i - 1].second.hit_rate_per_tier[0]) monotone = false;
    series += fmt("%s%g:%.4f", i ? ", " : "", r.sweep[i].first, h);
  }
  const Baseline* two_bit = nullptr;
  for (const Baseline& b : r.baselines)
    if (b.method == MethodKind::Quantize && (!two_bit || b.rate < two_bit->rate)) two_bit = &b;
  const double extreme = r.sweep.front().second.hit_rate_per_tier[0];
  const double margin = two_bit ? extreme - two_bit->summary.hit_rate_per_tier[0] : -1.0;
  return {monotone && margin >= 0.10 && r.seconds < 300.0,
          std::string("DRAM hit by alpha {") + series +
              fmt("}, %s DRAM hit %.4f, margin %+.1f pp", two_bit ? two_bit->name.c_str() : "none",
                  two_bit ? two_bit->summary.hit_rate_per_tier[0] : 0.0, margin * 100.0)};
}

// 5 --------------------------------------------------------------------------

float ulp(float x) {
  x = std::fabs(x);
  return std::nextafter(x, std::numeric_limits<float>::infinity()) - x;
}

Verdict codec_exactness() {
  std::mt19937_64 rng(5);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::uint64_t lo, std::uint64_t hi) { return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng); };

  long size_mismatch = 0;
  for (int i = 0; i < 10000; ++i) {
    const ModelShape shape{static_cast<std::uint32_t>(pick(1, 3)), static_cast<std::uint32_t>(pick(1, 2)),
                           static_cast<std::uint32_t>(4 * pick(1, 8)), 4};
    const CacheEntry entry = make_entry(EntryId{static_cast<std::uint64_t>(i)}, pick(1, 120), "c", shape, 0.0);
    const std::uint64_t n = entry.full_size / 4;
    CompressionChoice choice = CompressionChoice::full();
    switch (pick(0, 2)) {
      case 0: break;
      case 1: {
        const std::uint8_t bits = codecs::kSupportedBits[pick(0, 2)];
        choice = CompressionChoice::compressed(MethodKind::Quantize, codecs::quantized_rate(n, codecs::QuantSpec{bits, 64}));
        break;
      }
      default: choice = CompressionChoice::compressed(MethodKind::TokenDrop, uni(0.01, 1.0));
    }
    std::vector<std::byte> payload(entry.full_size);
    for (std::uint64_t k = 0; k < n; ++k) {
      const float v = static_cast<float>(uni(-4.0, 4.0));
      std::memcpy(payload.data() + 4 * k, &v, 4);
    }
    try {
      if (codecs::encode(payload, entry, choice, shape).size() != codecs::predicted_stream_size(entry, choice, shape))
        ++size_mismatch;
    } catch (const Error&) {
      ++size_mismatch;
    }
  }

  long bound_violations = 0, groups = 0;
  double worst_excess = -std::numeric_limits<double>::infinity();
  constexpr std::size_t kGroup = 64, kBatch = 1000;
  for (std::uint8_t bits : codecs::kSupportedBits) {
    const codecs::QuantSpec spec{bits, kGroup};
    for (int batch = 0; batch < 100; ++batch) {
      std::vector<float> values(kGroup * kBatch);
      for (std::size_t g = 0; g < kBatch; ++g) {
        const double lo = uni(-100.0, 100.0);
        const double span = std::exp(uni(std::log(1e-3), std::log(1e3)));
        for (std::size_t k = 0; k < kGroup; ++k) values[g * kGroup + k] = static_cast<float>(lo + uni(0.0, span));
      }
      const auto body = codecs::quantize(values, spec);
      const auto back = codecs::dequantize(body, spec, values.size());
      for (std::size_t g = 0; g < kBatch; ++g, ++groups) {
        const auto first = values.begin() + static_cast<std::ptrdiff_t>(g * kGroup);
        const auto [mn, mx] = std::minmax_element(first, first + kGroup);
        const double bound = (static_cast<double>(*mx) - *mn) / (2.0 * ((1 << bits) - 1)) +
                             4.0 * ulp(std::max(std::fabs(*mn), std::fabs(*mx)));
        for (std::size_t k = g * kGroup; k < (g + 1) * kGroup; ++k) {
          const double err = std::fabs(static_cast<double>(values[k]) - back[k]);
          worst_excess = std::max(worst_excess, err - bound);
          if (err > bound) ++bound_violations;
        }
      }
    }
  }

  long constant_mismatch = 0;
  for (int i = 0; i < 3000; ++i) {
    const codecs::QuantSpec spec{codecs::kSupportedBits[i % 3], kGroup};
    const std::size_t n = pick(1, 200);
    const std::vector<float> values(n, static_cast<float>(uni(-1e6, 1e6)));
    if (codecs::dequantize(codecs::quantize(values, spec), spec, n) != values) ++constant_mismatch;
  }
  return {size_mismatch == 0 && bound_violations == 0 && constant_mismatch == 0,
          fmt("size mismatches %ld/10000, bound violations %ld over %ld groups (worst slack %.3g), constant-group "
              "mismatches %ld/3000",
              size_mismatch, bound_violations, groups, -worst_excess, constant_mismatch)};
}

// 6 --------------------------------------------------------------------------

std::string trace_bytes(const WorkloadSpec& w) {
  std::ostringstream out;
  write_trace(gen_trace(w), out);
  return out.str();
}

Verdict workload_statistics() {
  WorkloadSpec w;
  w.rate = 2.0;
  w.duration = 5200.0;
  w.num_contexts = 500;
  w.seed = 6;
  auto trace = gen_trace(w);
  const bool enough = trace.size() >= 10000;
  trace.resize(std::min<std::size_t>(trace.size(), 10000));
  double prev = 0.0, sum = 0.0, sum_sq = 0.0;
  for (const auto& e : trace) {
    const double gap = e.t - prev;
    prev = e.t;
    sum += gap;
    sum_sq += gap * gap;
  }
  const double n = static_cast<double>(trace.size());
  const double mean = sum / n;
  const double cv = std::sqrt(sum_sq / n - mean * mean) / mean;
  const double mean_err = std::fabs(mean * w.rate - 1.0);
  const double cv_err = std::fabs(cv - 1.0);

  const bool same_trace = trace_bytes(w) == trace_bytes(w);
  WorkloadSpec small = w;
  small.rate = 5.0;
  small.duration = 200.0;
  small.num_contexts = 100;
  const auto replay = gen_trace(small);
  testing::TempDir a("acc_a"), b("acc_b");
  bool same_metrics = true;
  for (const PolicyConfig& cfg : std::vector<PolicyConfig>{AdaptCacheConfig{1.0, 64}, FixedLruConfig{MethodKind::Quantize, 0.1875}}) {
    report(run(replay, default_profile(), cfg, 3), a.path());
    report(run(replay, default_profile(), cfg, 3), b.path());
    for (const char* f : {"rows.csv", "summary.csv"}) same_metrics = same_metrics && testing::slurp(a / f) == testing::slurp(b / f);
  }
  return {enough && mean_err <= 0.05 && cv_err <= 0.05 && same_trace && same_metrics,
          fmt("mean inter-arrival %.5f s (1/lambda %.5f, off %.2f%%), CV %.4f (off %.2f%%), traces %s, metrics %s", mean,
              1.0 / w.rate, mean_err * 100.0, cv, cv_err * 100.0, same_trace ? "identical" : "DIFFER",
              same_metrics ? "identical" : "DIFFER")};
}

// 7 --------------------------------------------------------------------------

Verdict estimator_properties() {
  std::mt19937_64 rng(7);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  long curve_failures = 0;
  for (int i = 0; i < 2000; ++i) {
    std::vector<QualitySample> samples(1 + rng() % 30);
    for (auto& s : samples) {
      s.rate = rng() % 8 == 0 ? 1.0 : std::max(1e-3, std::round(uni(0.0, 1.0) * 50.0) / 50.0);
      s.quality = uni(0.0, 1.0);
    }
    const MethodKind kind = i % 2 ? MethodKind::Quantize : MethodKind::TokenDrop;
    const QualityCurve curve = fit_quality_curve(samples, kind);
    if (quality_at(curve, kind, 1.0) != 1.0) ++curve_failures;
    double prev = 0.0;
    for (int k = 1; k <= 400; ++k) {
      const double q = quality_at(curve, kind, k / 400.0);
      if (q < prev || q < 0.0 || q > 1.0) ++curve_failures;
      prev = q;
    }
  }

  long freq_failures = 0;
  double worst_rel = 0.0;
  // Errors are measured against the size of the frequencies involved: differences of nearly
  // equal frequencies carry their rounding.
  auto check = [&](double got, double want, double scale) {
    const double rel = std::fabs(got - want) / std::max(std::fabs(scale), 1e-300);
    worst_rel = std::max(worst_rel, rel);
    if (rel > 1e-12) ++freq_failures;
  };
  for (int i = 0; i < 2000; ++i) {
    FrequencyEstimator est;
    est.half_life = uni(1.0, 1000.0);
    est.prior_weight = uni(0.0, 2.0);
    const std::size_t cap = 1 + rng() % 10;
    CacheEntry e = testing::sized_entry(1, 100, 1);
    std::vector<double> hits;
    double t = 0.0;
    for (std::size_t k = rng() % 25; k > 0; --k) {
      t += uni(0.0, est.half_life);
      hits.push_back(t);
      record_hit(e, t, est, cap);
    }
    const double now = t + uni(0.0, 3.0 * est.half_life);
    const double per_hit = std::numbers::ln2 / est.half_life;
    double mass = est.prior_weight;
    for (double h : hits) mass += std::exp2(-(now - h) / est.half_life);
    check(estimate_freq(e, now, est), mass * per_hit, mass * per_hit);

    const double dt = uni(0.0, 2.0 * est.half_life);
    const double floor = est.prior_weight * per_hit;
    check(estimate_freq(e, now + dt, est) - floor, (estimate_freq(e, now, est) - floor) * std::exp2(-dt / est.half_life),
          estimate_freq(e, now, est));

    const double before = estimate_freq(e, now, est);
    record_hit(e, now, est, cap);
    check(estimate_freq(e, now, est) - before, per_hit, before + per_hit);
  }
  return {curve_failures == 0 && freq_failures == 0,
          fmt("2000 fitted curves with %ld monotonicity/boundary failures; 6000 frequency laws with %ld failures "
              "(worst relative error %.2g)",
              curve_failures, freq_failures, worst_rel)};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double limit_s;
    std::function<Verdict()> check;
  };
  std::optional<DirectionalResults> directional;
  auto shared = [&]() -> const DirectionalResults& {
    if (!directional) directional = directional_runs();
    return *directional;
  };
  const std::vector<Criterion> criteria{
      {"planner optimality", 60.0, planner_optimality},
      {"feasibility fuzzing", 120.0, feasibility_fuzzing},
      {"directional TTFT", 300.0, [&] { return directional_ttft(shared()); }},
      {"directional DRAM hit rate", 300.0, [&] { return directional_hit_rate(shared()); }},
      {"codec exactness", 60.0, codec_exactness},
      {"workload statistics", 60.0, workload_statistics},
      {"estimator properties", 60.0, estimator_properties},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = Clock::now();
    Verdict v;
    try {
      v = criteria[i].check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    double secs = seconds_since(start);
    // Criteria 3 and 4 share one set of runs; both report its cost.
    if ((i == 2 || i == 3) && directional) secs = directional->seconds;
    const bool pass = v.pass && secs < criteria[i].limit_s;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  " << i + 1 << ". " << criteria[i].name << " (" << fmt("%.1f", secs)
              << " s, limit " << criteria[i].limit_s << " s): " << v.detail << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
