// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <vector>

#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"
#include "tierkv/profiler.hpp"

namespace tierkv {

/// Seconds of delay one unit of quality is worth.
struct Alpha {
  double value = 1.0;
};

/// Bytes an entry occupies when stored at a choice. Defaults to ceil(rate * full_size).
using SizeFn = std::function<Bytes(const CacheEntry&, const CompressionChoice&)>;

/// Where a stored entry lives.
struct Placement {
  std::size_t tier = 0;
  CompressionChoice choice = CompressionChoice::full();

  friend bool operator==(const Placement&, const Placement&) = default;
};

/// Executor instruction: store `entry` at `target` (placing, moving or re-compressing it), or
/// drop it when `target` is empty.
struct Decision {
  EntryId entry;
  std::optional<Placement> target;

  friend bool operator==(const Decision&, const Decision&) = default;
};

/// One (entry, tier, method, rate) option with its size and utility. No tier means RECOMPUTE.
struct ScoredChoice {
  EntryId entry;
  std::optional<std::size_t> tier;
  CompressionChoice choice = CompressionChoice::recompute();
  Bytes size = 0;
  double utility = 0.0;

  bool is_recompute() const { return !tier.has_value(); }
  std::optional<Placement> placement() const {
    if (!tier) return std::nullopt;
    return Placement{*tier, choice};
  }
};

/// Load time of a stored object: transfer plus decompression of the full-size cache.
inline double hit_delay(Bytes stored_size, Bytes full_size, const CompressionChoice& choice, const DeviceTier& tier) {
  double delay = static_cast<double>(stored_size) / tier.read_bandwidth;
  if (!choice.is_full()) delay += tier.decompress_coeff(choice.method()) * static_cast<double>(full_size);
  return delay;
}

inline double prefill_delay(std::uint64_t token_count, const DeviceProfile& profile) {
  return profile.prefill_s_per_token * static_cast<double>(token_count);
}

/// freq * (alpha * quality - delay); RECOMPUTE is full quality at prefill delay.
inline double utility(const CacheEntry& entry, const CompressionChoice& choice, std::optional<std::size_t> tier,
                      Alpha alpha, double freq, const QualityCurve& curve, const DeviceProfile& profile,
                      std::optional<Bytes> stored_size = std::nullopt) {
  if (choice.is_recompute()) return freq * (alpha.value - prefill_delay(entry.token_count, profile));
  if (!tier || *tier >= profile.tiers.size()) throw ContractError("utility: stored choice needs a valid tier");
  const Bytes size = stored_size ? *stored_size : compressed_size(entry, choice);
  const double delay = hit_delay(size, entry.full_size, choice, profile.tiers[*tier]);
  return freq * (alpha.value * quality_at(curve, choice) - delay);
}

/// Utility lost per byte saved when moving from `from` to the smaller `to`, with the saving
/// measured as full_size * (rate_from - rate_to). RECOMPUTE counts as rate 0.
inline double marginal_utility_drop(const CacheEntry& entry, const ScoredChoice& from, const ScoredChoice& to) {
  const double rate_from = from.is_recompute() ? 0.0 : from.choice.rate();
  const double rate_to = to.is_recompute() ? 0.0 : to.choice.rate();
  if (!(rate_from > rate_to)) throw ContractError("marginal_utility_drop needs a strictly smaller target rate");
  return (from.utility - to.utility) / (static_cast<double>(entry.full_size) * (rate_from - rate_to));
}

/// Scores choices for one profile, alpha and size model.
class UtilityModel {
 public:
  UtilityModel(const ProfileConfig& profile, Alpha alpha, SizeFn size = {})
      : profile_(&profile), alpha_(alpha), size_(std::move(size)) {}

  const ProfileConfig& profile() const { return *profile_; }
  const DeviceProfile& device() const { return profile_->device; }
  std::size_t num_tiers() const { return profile_->device.tiers.size(); }
  Alpha alpha() const { return alpha_; }

  Bytes size(const CacheEntry& entry, const CompressionChoice& choice) const {
    return size_ ? size_(entry, choice) : compressed_size(entry, choice);
  }

  ScoredChoice score(const CacheEntry& entry, const CompressionChoice& choice, std::optional<std::size_t> tier,
                     double freq) const {
    ScoredChoice sc;
    sc.entry = entry.id;
    if (choice.is_recompute()) {
      sc.utility = utility(entry, choice, std::nullopt, alpha_, freq, QualityCurve{}, device());
      return sc;
    }
    sc.tier = tier;
    sc.choice = choice;
    sc.size = size(entry, choice);
    sc.utility = utility(entry, choice, tier, alpha_, freq, profile_->curve(entry.class_tag), device(), sc.size);
    return sc;
  }

  ScoredChoice recompute(const CacheEntry& entry, double freq) const {
    return score(entry, CompressionChoice::recompute(), std::nullopt, freq);
  }

  /// Every stored choice that fits its tier, grouped by tier. RECOMPUTE is not included.
  std::vector<std::vector<ScoredChoice>> enumerate(const CacheEntry& entry, double freq) const {
    const QualityCurve& curve = profile_->curve(entry.class_tag);
    std::vector<CompressionChoice> choices{CompressionChoice::full()};
    for (const CompressionMethod& m : profile_->methods) {
      if (!curve.has(m.kind)) continue;
      for (double r : m.available_rates)
        if (r < 1.0) choices.push_back(CompressionChoice::compressed(m.kind, r));
    }
    std::vector<std::vector<ScoredChoice>> out(num_tiers());
    for (std::size_t t = 0; t < num_tiers(); ++t) {
      for (const CompressionChoice& c : choices) {
        ScoredChoice sc = score(entry, c, t, freq);
        if (sc.size <= device().tiers[t].capacity) out[t].push_back(sc);
      }
    }
    return out;
  }

 private:
  const ProfileConfig* profile_;
  Alpha alpha_;
  SizeFn size_;
};

/// Drops IP-dominated choices (no smaller and no better than another) and then LP-dominated
/// ones (below the upper convex hull in (size, utility)). Survivors are size-ascending with
/// strictly increasing utility and strictly decreasing incremental utility per byte.
inline std::vector<ScoredChoice> prune_dominated(std::vector<ScoredChoice> choices) {
  std::stable_sort(choices.begin(), choices.end(), [](const ScoredChoice& a, const ScoredChoice& b) {
    if (a.size != b.size) return a.size < b.size;
    return a.utility > b.utility;
  });
  std::vector<ScoredChoice> kept;
  for (const ScoredChoice& c : choices)
    if (kept.empty() || c.utility > kept.back().utility) kept.push_back(c);

  // Monotone chain over strictly increasing sizes; pop while the slope fails to decrease.
  std::vector<ScoredChoice> hull;
  for (const ScoredChoice& c : kept) {
    while (hull.size() >= 2) {
      const ScoredChoice& a = hull[hull.size() - 2];
      const ScoredChoice& b = hull.back();
      const long double left = static_cast<long double>(b.utility - a.utility) * static_cast<long double>(c.size - b.size);
      const long double right = static_cast<long double>(c.utility - b.utility) * static_cast<long double>(b.size - a.size);
      if (left > right) break;
      hull.pop_back();
    }
    hull.push_back(c);
  }
  return hull;
}

/// Total assignment of known entries to a (tier, choice) or RECOMPUTE.
struct Plan {
  std::map<EntryId, ScoredChoice> assignments;
  std::vector<Bytes> used;
  double total_utility = 0.0;
};

/// One entry as the planner sees it.
struct PlanItem {
  const CacheEntry* entry = nullptr;
  double freq = 0.0;
  std::optional<Placement> current;  // where it is stored now, if anywhere
};

struct PlanOptions {
  // Post-greedy local search: retry blocked upgrades by making room with the cheapest
  // downgrades elsewhere, keeping the move only if total utility rises.
  bool improve = true;
  int max_passes = 2;
  std::size_t max_candidates = 3;
};

namespace detail {

struct Slot {
  const CacheEntry* entry = nullptr;
  double freq = 0.0;
  ScoredChoice rec;
  std::vector<std::vector<ScoredChoice>> ladders;  // per tier, pruned, [0] is RECOMPUTE
  ScoredChoice current;
  std::optional<Placement> original;
};

inline bool same_option(const ScoredChoice& a, const ScoredChoice& b) {
  return a.tier == b.tier && (a.is_recompute() || a.choice == b.choice);
}

/// Mutable planning state with exact per-tier byte accounting.
class Workspace {
  const UtilityModel* model_;

 public:
  Workspace(const UtilityModel& model, std::span<const PlanItem> items, bool start_from_current)
      : model_(&model), used(model.num_tiers(), 0), capacity(model.num_tiers(), 0) {
    for (std::size_t t = 0; t < model.num_tiers(); ++t) capacity[t] = model.device().tiers[t].capacity;
    slots.reserve(items.size());
    for (const PlanItem& item : items) add(item, start_from_current);
    std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.entry->id < b.entry->id; });
    for (std::size_t i = 1; i < slots.size(); ++i)
      if (slots[i - 1].entry->id == slots[i].entry->id) throw ContractError("duplicate entry in plan input");
  }

  std::size_t index_of(EntryId id) const {
    auto it = std::lower_bound(slots.begin(), slots.end(), id,
                               [](const Slot& s, EntryId v) { return s.entry->id < v; });
    return static_cast<std::size_t>(it - slots.begin());
  }

  struct Change {
    std::size_t slot;
    ScoredChoice before;
  };
  using Journal = std::vector<Change>;

  void move(std::size_t s, const ScoredChoice& to, Journal* journal = nullptr) {
    Slot& slot = slots[s];
    if (journal) journal->push_back({s, slot.current});
    if (slot.current.tier) used[*slot.current.tier] -= slot.current.size;
    if (to.tier) used[*to.tier] += to.size;
    total += to.utility - slot.current.utility;
    slot.current = to;
  }

  void rollback(Journal& journal) {
    for (auto it = journal.rbegin(); it != journal.rend(); ++it) move(it->slot, it->before);
    journal.clear();
  }

  /// Resolves tier overflow fastest tier first by repeatedly applying the downgrade with the
  /// smallest utility drop per byte freed on the overflowing tier. `protect` is never touched
  /// when `protect_fixed` is set. Gives up (returns false) once accumulated loss reaches
  /// `loss_budget`.
  bool repair(std::size_t protect, bool protect_fixed, Journal* journal,
              double loss_budget = std::numeric_limits<double>::infinity()) {
    const double start = total;
    for (std::size_t t = 0; t < used.size(); ++t) {
      while (used[t] > capacity[t]) {
        std::optional<std::size_t> best_slot;
        ScoredChoice best_to;
        double best_drop = 0.0;
        for (std::size_t s = 0; s < slots.size(); ++s) {
          const Slot& slot = slots[s];
          if (slot.current.tier != t) continue;
          if (protect_fixed && s == protect) continue;
          for_each_downgrade(slot, t, [&](const ScoredChoice& to) {
            const Bytes freed = slot.current.size - (to.tier == t ? to.size : 0);
            if (freed == 0) return;
            const double drop = (slot.current.utility - to.utility) / static_cast<double>(freed);
            bool better = !best_slot || drop < best_drop;
            if (best_slot && drop == best_drop) {
              const EntryId a = slot.entry->id, b = slots[*best_slot].entry->id;
              better = a < b || (a == b && to.size < best_to.size);
            }
            if (better) {
              best_slot = s;
              best_to = to;
              best_drop = drop;
            }
          });
        }
        if (!best_slot) return false;
        move(*best_slot, best_to, journal);
        if (start - total >= loss_budget) return false;
      }
    }
    return true;
  }

  const UtilityModel& model() const { return *model_; }

  std::vector<Slot> slots;
  std::vector<Bytes> used;
  std::vector<Bytes> capacity;
  double total = 0.0;

 private:
  void add(const PlanItem& item, bool start_from_current) {
    if (!item.entry) throw ContractError("plan item without entry");
    if (!(item.freq >= 0.0) || !std::isfinite(item.freq)) throw ContractError("frequency must be finite and >= 0");
    Slot slot;
    slot.entry = item.entry;
    slot.freq = item.freq;
    slot.original = item.current;
    slot.rec = model_->recompute(*item.entry, item.freq);
    auto per_tier = model_->enumerate(*item.entry, item.freq);
    slot.ladders.resize(per_tier.size());
    for (std::size_t t = 0; t < per_tier.size(); ++t) {
      per_tier[t].push_back(slot.rec);
      slot.ladders[t] = prune_dominated(std::move(per_tier[t]));
      // The hull always starts at RECOMPUTE (size 0) unless a zero-size choice beats it.
      if (slot.ladders[t].empty() || !slot.ladders[t].front().is_recompute())
        slot.ladders[t].insert(slot.ladders[t].begin(), slot.rec);
    }
    slot.current = slot.rec;
    total += slot.rec.utility;
    slots.push_back(std::move(slot));
    if (start_from_current && item.current) {
      const Placement& p = *item.current;
      if (p.tier >= used.size()) throw ContractError("placement on unknown tier");
      move(slots.size() - 1, model_->score(*item.entry, p.choice, p.tier, item.freq));
    }
  }

  template <typename F>
  void for_each_downgrade(const Slot& slot, std::size_t t, F&& visit) const {
    const auto& ladder = slot.ladders[t];
    // Next smaller surviving choice on the same tier.
    for (auto it = ladder.rbegin(); it != ladder.rend(); ++it) {
      if (it->size < slot.current.size) {
        if (!it->is_recompute()) visit(*it);
        break;
      }
    }
    // Same (method, rate) one tier down, if it survived pruning there.
    if (t + 1 < slot.ladders.size()) {
      for (const ScoredChoice& c : slot.ladders[t + 1])
        if (!c.is_recompute() && c.choice == slot.current.choice) {
          visit(c);
          break;
        }
    }
    visit(slot.rec);
  }
};

inline Plan to_plan(const Workspace& ws) {
  Plan plan;
  plan.used = ws.used;
  for (const Slot& s : ws.slots) {
    plan.assignments.emplace(s.entry->id, s.current);
    plan.total_utility += s.current.utility;
  }
  return plan;
}

inline double tolerance(double total) { return 1e-12 * std::max(1.0, std::fabs(total)); }

inline void greedy_fill(Workspace& ws) {
  struct Step {
    double ratio;
    double gain;
    std::size_t slot;
    std::size_t tier;
    std::size_t rung;  // ladder index being moved to
    Bytes delta;
  };
  auto worse = [&](const Step& a, const Step& b) {
    if (a.ratio != b.ratio) return a.ratio < b.ratio;
    if (a.slot != b.slot) return a.slot > b.slot;  // slots are id-sorted: smaller id first
    return a.delta > b.delta;
  };
  std::priority_queue<Step, std::vector<Step>, decltype(worse)> queue(worse);
  auto push = [&](std::size_t s, std::size_t t, std::size_t rung) {
    const auto& ladder = ws.slots[s].ladders[t];
    if (rung >= ladder.size()) return;
    const Bytes delta = ladder[rung].size - ladder[rung - 1].size;
    const double gain = ladder[rung].utility - ladder[rung - 1].utility;
    if (!(gain > 0.0) || delta == 0) return;
    queue.push({gain / static_cast<double>(delta), gain, s, t, rung, delta});
  };
  // Position on the ladder of the tier the slot entered; none while at RECOMPUTE.
  std::vector<std::optional<std::pair<std::size_t, std::size_t>>> pos(ws.slots.size());
  for (std::size_t s = 0; s < ws.slots.size(); ++s)
    for (std::size_t t = 0; t < ws.used.size(); ++t) push(s, t, 1);

  while (!queue.empty()) {
    const Step step = queue.top();
    queue.pop();
    auto& at = pos[step.slot];
    const bool valid = step.rung == 1 ? !at.has_value() : (at && at->first == step.tier && at->second + 1 == step.rung);
    if (!valid) continue;
    if (step.delta > ws.capacity[step.tier] - ws.used[step.tier]) continue;
    ws.move(step.slot, ws.slots[step.slot].ladders[step.tier][step.rung]);
    at = std::pair{step.tier, step.rung};
    push(step.slot, step.tier, step.rung + 1);
  }
}

inline void improve(Workspace& ws, const PlanOptions& options) {
  for (int pass = 0; pass < options.max_passes; ++pass) {
    bool changed = false;
    for (std::size_t s = 0; s < ws.slots.size(); ++s) {
      const Slot& slot = ws.slots[s];
      std::vector<ScoredChoice> better;
      for (const auto& ladder : slot.ladders)
        for (const ScoredChoice& c : ladder)
          if (!c.is_recompute() && c.utility > slot.current.utility + tolerance(slot.current.utility) &&
              !same_option(c, slot.current))
            better.push_back(c);
      std::stable_sort(better.begin(), better.end(),
                       [](const ScoredChoice& a, const ScoredChoice& b) { return a.utility > b.utility; });
      if (better.size() > options.max_candidates) better.resize(options.max_candidates);
      for (const ScoredChoice& target : better) {
        const double before = ws.total;
        const double gain = target.utility - ws.slots[s].current.utility;
        Workspace::Journal journal;
        ws.move(s, target, &journal);
        const bool ok = ws.repair(s, true, &journal, gain);
        if (ok && ws.total - before > tolerance(ws.total)) {
          changed = true;
          break;
        }
        ws.rollback(journal);
      }
    }
    if (!changed) break;
  }
}

}  // namespace detail

/// Greedy multi-choice knapsack over every entry's per-tier choice ladders.
///
/// Every entry starts at RECOMPUTE; the upgrade step with the highest utility gain per byte
/// that fits its tier is applied until none is left. Ties go to the smaller entry id, then the
/// smaller step. The result is always feasible.
inline Plan plan(std::span<const PlanItem> items, const UtilityModel& model, const PlanOptions& options = {}) {
  detail::Workspace ws(model, items, false);
  detail::greedy_fill(ws);
  if (options.improve) detail::improve(ws, options);
  return detail::to_plan(ws);
}

/// Largest utility gain of any single rung on any entry's pruned ladders.
inline double largest_ladder_step(std::span<const PlanItem> items, const UtilityModel& model) {
  detail::Workspace ws(model, items, false);
  double largest = 0.0;
  for (const detail::Slot& s : ws.slots)
    for (const auto& ladder : s.ladders)
      for (std::size_t i = 1; i < ladder.size(); ++i) largest = std::max(largest, ladder[i].utility - ladder[i - 1].utility);
  return largest;
}

inline constexpr double kBruteForceLimit = 1e7;

/// Exact optimum by exhaustive enumeration over every (unpruned) choice of every entry.
inline Plan brute_force_plan(std::span<const PlanItem> items, const UtilityModel& model,
                             double limit = kBruteForceLimit) {
  std::vector<const PlanItem*> order;
  for (const PlanItem& it : items) order.push_back(&it);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->entry->id < b->entry->id; });

  std::vector<std::vector<ScoredChoice>> options;
  double combinations = 1.0;
  for (const PlanItem* it : order) {
    std::vector<ScoredChoice> opts{model.recompute(*it->entry, it->freq)};
    for (auto& tier : model.enumerate(*it->entry, it->freq))
      for (auto& c : tier) opts.push_back(c);
    combinations *= static_cast<double>(opts.size());
    if (combinations > limit) throw TooLargeError("brute force would enumerate more than the allowed assignments");
    options.push_back(std::move(opts));
  }

  const std::size_t tiers = model.num_tiers();
  std::vector<Bytes> capacity(tiers), used(tiers, 0);
  for (std::size_t t = 0; t < tiers; ++t) capacity[t] = model.device().tiers[t].capacity;

  std::vector<std::size_t> pick(order.size(), 0), best_pick;
  double best = -std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, double)> dfs = [&](std::size_t i, double acc) {
    if (i == order.size()) {
      if (acc > best) {
        best = acc;
        best_pick = pick;
      }
      return;
    }
    for (std::size_t k = 0; k < options[i].size(); ++k) {
      const ScoredChoice& c = options[i][k];
      if (c.tier && used[*c.tier] + c.size > capacity[*c.tier]) continue;
      if (c.tier) used[*c.tier] += c.size;
      pick[i] = k;
      dfs(i + 1, acc + c.utility);
      if (c.tier) used[*c.tier] -= c.size;
    }
  };
  dfs(0, 0.0);

  Plan result;
  result.used.assign(tiers, 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const ScoredChoice& c = options[i][best_pick[i]];
    result.assignments.emplace(c.entry, c);
    result.total_utility += c.utility;
    if (c.tier) result.used[*c.tier] += c.size;
  }
  return result;
}

/// Incremental admission of `incoming` into the stored population `residents`.
///
/// The new entry is tentatively placed at its best choice; overflow is then resolved by the
/// downgrades (next smaller choice, demotion one tier down, or eviction) with the smallest
/// marginal utility drop, the new entry included. If total utility does not rise, nothing
/// changes and the entry stays at RECOMPUTE. Returns the placement changes, id-ordered.
inline std::vector<Decision> admit(const PlanItem& incoming, std::span<const PlanItem> residents,
                                   const UtilityModel& model) {
  std::vector<PlanItem> items(residents.begin(), residents.end());
  PlanItem fresh = incoming;
  fresh.current.reset();
  items.push_back(fresh);
  detail::Workspace ws(model, items, true);
  const std::size_t s = ws.index_of(incoming.entry->id);
  const detail::Slot& slot = ws.slots[s];

  std::optional<ScoredChoice> target;
  for (const auto& ladder : slot.ladders)
    for (const ScoredChoice& c : ladder) {
      if (c.is_recompute()) continue;
      if (!target || c.utility > target->utility ||
          (c.utility == target->utility && (c.size < target->size || (c.size == target->size && c.tier < target->tier))))
        target = c;
    }
  if (!target || !(target->utility > slot.rec.utility)) return {};

  const double before = ws.total;
  ws.move(s, *target);
  ws.repair(s, false, nullptr);
  if (ws.slots[s].current.is_recompute() || !(ws.total - before > detail::tolerance(ws.total))) return {};

  std::vector<Decision> out;
  for (const detail::Slot& sl : ws.slots) {
    const auto now = sl.current.placement();
    if (now != sl.original) out.push_back({sl.entry->id, now});
  }
  return out;
}

/// Decisions that turn the stored population described by `items` into `target`.
inline std::vector<Decision> plan_changes(std::span<const PlanItem> items, const Plan& target) {
  std::vector<Decision> out;
  for (const PlanItem& it : items) {
    auto a = target.assignments.find(it.entry->id);
    const std::optional<Placement> want = a == target.assignments.end() ? std::nullopt : a->second.placement();
    if (want != it.current) out.push_back({it.entry->id, want});
  }
  std::sort(out.begin(), out.end(), [](const Decision& a, const Decision& b) { return a.entry < b.entry; });
  return out;
}

}  // namespace tierkv
