// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tierkv/tierkv.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitParse = 3;

tierkv::ProfileConfig resolve_profile(const std::string& arg) {
  if (arg.empty() || arg == "builtin:desk") return tierkv::default_profile(tierkv::ProfileScale::Desk);
  if (arg == "builtin:full") return tierkv::default_profile(tierkv::ProfileScale::Full);
  return tierkv::load_profile(arg);
}

tierkv::PolicyConfig resolve_policy(const std::string& name, const std::string& method, std::optional<double> rate,
                                    double alpha, std::size_t replan_every) {
  if (name == "adaptcache") return tierkv::AdaptCacheConfig{alpha, replan_every};
  if (name == "nocomp-lru") return tierkv::NoCompressionLruConfig{};
  if (name == "prefill") return tierkv::PrefillAlwaysConfig{};
  if (name == "fixed-lru") {
    const auto kind = tierkv::parse_method(method);
    if (!kind) throw tierkv::ConfigError("unknown method '" + method + "'");
    if (!rate) throw tierkv::ConfigError("fixed-lru needs --rate");
    return tierkv::FixedLruConfig{*kind, *rate};
  }
  throw tierkv::ConfigError("unknown policy '" + name + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiered KV-cache placement simulator"};
  app.require_subcommand(1);

  std::string trace_path, profile_arg, out_dir = "out", policy = "adaptcache", method = "quantize";
  std::optional<double> rate;
  double alpha = 1.0;
  std::vector<double> alphas{0.1, 1.0, 10.0, 100.0};
  std::uint64_t seed = 0;
  std::size_t replan_every = 256;
  bool real_codec = false;

  tierkv::WorkloadSpec wl;
  auto* gen = app.add_subcommand("gen", "generate a synthetic trace");
  gen->add_option("--trace", trace_path, "output trace CSV")->required();
  gen->add_option("--lambda", wl.rate, "arrival rate (requests/s)")->capture_default_str();
  gen->add_option("--duration", wl.duration, "trace length (s)")->capture_default_str();
  gen->add_option("--contexts", wl.num_contexts, "context population")->capture_default_str();
  gen->add_option("--zipf", wl.zipf_s, "Zipf exponent of context reuse")->capture_default_str();
  gen->add_option("--min-tokens", wl.min_tokens)->capture_default_str();
  gen->add_option("--max-tokens", wl.max_tokens)->capture_default_str();
  gen->add_option("--classes", wl.class_tags, "class tags")->delimiter(',')->capture_default_str();
  gen->add_option("--seed", wl.seed)->capture_default_str();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--trace", trace_path, "input trace CSV")->required();
    sub->add_option("--profile", profile_arg, "profile JSON, or builtin:desk / builtin:full (default builtin:desk)");
    sub->add_option("--seed", seed, "payload seed for real-codec mode")->capture_default_str();
    sub->add_option("--out-dir", out_dir)->capture_default_str();
    sub->add_option("--replan-every", replan_every, "arrivals between full replans (0 = never)")->capture_default_str();
    sub->add_flag("--real-codec", real_codec, "encode synthetic payloads and spill slow tiers under out-dir");
  };
  auto* run = app.add_subcommand("run", "replay a trace under one policy");
  add_common(run);
  run->add_option("--policy", policy)
      ->check(CLI::IsMember({"adaptcache", "fixed-lru", "nocomp-lru", "prefill"}))
      ->capture_default_str();
  run->add_option("--method", method)->check(CLI::IsMember({"quantize", "tokendrop"}))->capture_default_str();
  run->add_option("--rate", rate, "compression rate for fixed-lru");
  run->add_option("--alpha", alpha, "quality weight for adaptcache")->capture_default_str();
  auto* sweep = app.add_subcommand("sweep", "replay a trace under adaptcache for several alphas");
  add_common(sweep);
  sweep->add_option("--alpha", alphas, "comma-separated alphas")->delimiter(',')->capture_default_str();

  std::string scale = "desk", profile_out;
  auto* prof = app.add_subcommand("profile", "write a built-in profile as JSON");
  prof->add_option("--scale", scale)->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  prof->add_option("--out", profile_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) {
      tierkv::write_trace(tierkv::gen_trace(wl), std::filesystem::path(trace_path));
      return kExitOk;
    }
    if (*prof) {
      const auto cfg = tierkv::default_profile(scale == "full" ? tierkv::ProfileScale::Full : tierkv::ProfileScale::Desk);
      std::ofstream out(profile_out);
      if (!(out << tierkv::profile_to_json(cfg).dump(2) << '\n')) throw tierkv::Error("cannot write " + profile_out);
      return kExitOk;
    }

    const auto profile = resolve_profile(profile_arg);
    const auto trace = tierkv::read_trace(std::filesystem::path(trace_path));
    tierkv::RunOptions options;
    if (real_codec) {
      options.mode = tierkv::PayloadMode::RealCodec;
      options.spill_dir = std::filesystem::path(out_dir) / "spill";
    }
    if (*run) {
      const auto cfg = resolve_policy(policy, method, rate, alpha, replan_every);
      const auto result = tierkv::run(trace, profile, cfg, seed, options);
      tierkv::report(result, out_dir);
      std::cout << tierkv::summary_header(result.tier_names) << '\n' << tierkv::summary_line(result.summary) << '\n';
    } else {
      const auto results = tierkv::sweep(trace, profile, alphas, seed, replan_every, options);
      tierkv::report_sweep(results, out_dir);
      std::cout << tierkv::summary_header(results.front().second.tier_names) << '\n';
      for (const auto& [a, r] : results) std::cout << tierkv::summary_line(r.summary) << '\n';
    }
    return kExitOk;
  } catch (const tierkv::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const tierkv::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitParse;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
