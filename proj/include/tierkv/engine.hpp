// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tierkv/codecs.hpp"
#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"
#include "tierkv/policy.hpp"
#include "tierkv/profiler.hpp"

namespace tierkv {

/// Whether stored objects carry real compressed bytes or only their sizes.
enum class PayloadMode { SizeOnly, RealCodec };

struct EngineOptions {
  PayloadMode mode = PayloadMode::SizeOnly;
  std::uint64_t payload_seed = 0;
  // Non-fastest-tier objects are also written here as files (real-codec mode only).
  std::optional<std::filesystem::path> spill_dir;
  std::size_t history_cap = kDefaultHistoryCap;
};

struct StoredObject {
  EntryId entry;
  std::size_t tier = 0;
  CompressionChoice choice = CompressionChoice::full();
  Bytes stored_size = 0;
  std::shared_ptr<const std::vector<std::byte>> payload;  // real-codec mode only
};

struct Hit {
  std::size_t tier = 0;
  CompressionChoice choice = CompressionChoice::full();
};

struct Miss {};

/// What one request cost under the TTFT model.
struct RequestOutcome {
  EntryId context;
  std::variant<Miss, Hit> result;
  double delay = 0.0;    // seconds
  double quality = 1.0;  // [0, 1]

  bool is_hit() const { return std::holds_alternative<Hit>(result); }
  const Hit* hit() const { return std::get_if<Hit>(&result); }
};

/// Immutable point-in-time view of the store.
struct EngineState {
  std::map<EntryId, std::shared_ptr<const CacheEntry>> entries;
  std::map<EntryId, StoredObject> residents;
  std::vector<Bytes> used;
  double clock = -std::numeric_limits<double>::infinity();
  std::uint64_t version = 0;

  const CacheEntry* entry(EntryId id) const {
    auto it = entries.find(id);
    return it == entries.end() ? nullptr : it->second.get();
  }

  const StoredObject* resident(EntryId id) const {
    auto it = residents.find(id);
    return it == residents.end() ? nullptr : &it->second;
  }

  /// Sum of stored sizes per tier, recomputed from the residents.
  std::vector<Bytes> recount() const {
    std::vector<Bytes> sums(used.size(), 0);
    for (const auto& [id, obj] : residents) sums.at(obj.tier) += obj.stored_size;
    return sums;
  }
};

using Snapshot = std::shared_ptr<const EngineState>;

class Engine;

/// Decides placement changes after each served request. Called on the writer thread.
class PlacementPolicy {
 public:
  virtual ~PlacementPolicy() = default;
  virtual std::vector<Decision> after_request(const Engine& engine, const EngineState& state, EntryId id, bool hit,
                                              double now) = 0;
};

/// The executor: owns the tiers, serves requests and applies placement decisions.
///
/// Single writer, many readers. on_request and apply serialize on one mutex; snapshot() and
/// lookup() never take it and always observe a state from before or after a whole apply.
class Engine {
 public:
  explicit Engine(ProfileConfig profile, EngineOptions options = {}, std::unique_ptr<PlacementPolicy> policy = nullptr)
      : profile_(std::move(profile)), options_(std::move(options)), policy_(std::move(policy)) {
    profile_.model.validate();
    profile_.device.validate();
    if (options_.mode == PayloadMode::RealCodec && profile_.model.bytes_per_element != 4)
      throw ConfigError("real-codec mode stores f32 caches: bytes_per_element must be 4");
    if (options_.spill_dir) {
      if (options_.mode != PayloadMode::RealCodec) throw ConfigError("spill directory requires real-codec mode");
      std::filesystem::create_directories(*options_.spill_dir);
    }
    auto initial = std::make_shared<EngineState>();
    initial->used.assign(profile_.device.tiers.size(), 0);
    publish(std::move(initial));
  }

  const ProfileConfig& profile() const { return profile_; }
  const EngineOptions& options() const { return options_; }

  /// Bytes an entry occupies at a choice under this engine's payload mode.
  Bytes stored_size(const CacheEntry& entry, const CompressionChoice& choice) const {
    if (options_.mode == PayloadMode::RealCodec) return codecs::predicted_stream_size(entry, choice, profile_.model);
    return compressed_size(entry, choice);
  }

  SizeFn size_fn() const {
    if (options_.mode == PayloadMode::SizeOnly) return {};
    return [this](const CacheEntry& e, const CompressionChoice& c) { return stored_size(e, c); };
  }

  Snapshot snapshot() const { return std::atomic_load(&state_); }

  std::optional<StoredObject> lookup(EntryId id) const {
    const Snapshot s = snapshot();
    if (const StoredObject* obj = s->resident(id)) return *obj;
    return std::nullopt;
  }

  /// Planner inputs for every known entry of `state`, with frequencies estimated at `now`.
  std::vector<PlanItem> plan_items(const EngineState& state, double now) const {
    std::vector<PlanItem> items;
    items.reserve(state.entries.size());
    for (const auto& [id, entry] : state.entries) {
      PlanItem item{entry.get(), estimate_freq(*entry, now, profile_.freq), std::nullopt};
      if (const StoredObject* obj = state.resident(id)) item.current = Placement{obj->tier, obj->choice};
      items.push_back(item);
    }
    return items;
  }

  /// Serves one request, records the hit in the entry's history and lets the policy react.
  RequestOutcome on_request(EntryId id, std::uint64_t token_count, std::string_view class_tag, double now) {
    std::lock_guard lock(writer_);
    const Snapshot current = snapshot();
    if (now < current->clock) throw ContractError("request timestamps must be non-decreasing");
    const QualityCurve& curve = profile_.curve(class_tag);

    auto next = std::make_shared<EngineState>(*current);
    CacheEntry entry = current->entry(id) ? *current->entry(id)
                                          : make_entry(id, token_count, std::string(class_tag), profile_.model, now);

    RequestOutcome outcome;
    outcome.context = id;
    if (const StoredObject* obj = current->resident(id)) {
      const DeviceTier& tier = profile_.device.tiers[obj->tier];
      if (options_.mode == PayloadMode::RealCodec) verify_payload(entry, *obj);
      outcome.result = Hit{obj->tier, obj->choice};
      outcome.delay = hit_delay(obj->stored_size, entry.full_size, obj->choice, tier);
      outcome.quality = quality_at(curve, obj->choice);
    } else {
      outcome.result = Miss{};
      outcome.delay = prefill_delay(entry.token_count, profile_.device);
      outcome.quality = 1.0;
    }
    record_hit(entry, now, profile_.freq, options_.history_cap);
    next->entries[id] = std::make_shared<const CacheEntry>(std::move(entry));
    next->clock = now;
    next->version += 1;
    publish(next);

    if (policy_) {
      const auto decisions = policy_->after_request(*this, *next, id, outcome.is_hit(), now);
      if (!decisions.empty()) apply_locked(decisions);
    }
    return outcome;
  }

  /// Performs placement changes atomically: either all of them become visible or none.
  void apply(std::span<const Decision> decisions) {
    std::lock_guard lock(writer_);
    apply_locked(decisions);
  }

  /// Deterministic pristine f32 payload of an entry, regenerated on demand.
  std::vector<std::byte> pristine_payload(const CacheEntry& entry) const {
    std::vector<std::byte> out(entry.full_size);
    std::uint64_t state = options_.payload_seed ^ (entry.id.value * 0x9E3779B97F4A7C15ull);
    for (std::size_t i = 0; i + 4 <= out.size(); i += 4) {
      state += 0x9E3779B97F4A7C15ull;
      std::uint64_t z = state;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      z ^= z >> 31;
      const float v = static_cast<float>(static_cast<double>(z >> 40) / static_cast<double>(1ull << 24) * 2.0 - 1.0);
      std::memcpy(out.data() + i, &v, 4);
    }
    return out;
  }

  /// Stored bytes of a resident, from memory or its spill file.
  std::optional<std::vector<std::byte>> read_payload(EntryId id) const {
    const Snapshot s = snapshot();
    const StoredObject* obj = s->resident(id);
    if (!obj || !obj->payload) return std::nullopt;
    return *obj->payload;
  }

  std::filesystem::path spill_path(const StoredObject& obj) const {
    const std::string method = obj.choice.is_full() ? "full" : std::string(to_string(obj.choice.method()));
    const auto milli = static_cast<long long>(std::llround(obj.choice.rate() * 1000.0));
    return *options_.spill_dir / (to_string(obj.entry) + "." + method + "." + std::to_string(milli));
  }

 private:
  void publish(Snapshot next) { std::atomic_store(&state_, std::move(next)); }

  bool spills(const StoredObject& obj) const { return options_.spill_dir && obj.tier > 0; }

  void verify_payload(const CacheEntry& entry, const StoredObject& obj) const {
    std::vector<std::byte> bytes;
    if (spills(obj)) {
      std::ifstream in(spill_path(obj), std::ios::binary);
      for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) bytes.push_back(static_cast<std::byte>(*it));
    } else if (obj.payload) {
      bytes = *obj.payload;
    }
    if (bytes.size() != obj.stored_size) throw ConsistencyError("stored payload of " + to_string(entry.id) + " has wrong length");
    if (!obj.choice.is_full()) {
      if (obj.choice.method() == MethodKind::Quantize) {
        if (codecs::decode_quantized(bytes).size() * 4 != entry.full_size)
          throw ConsistencyError("quantized payload decodes to the wrong size");
      } else {
        codecs::decode_dropped(bytes);
      }
    }
  }

  bool valid_choice(const CacheEntry& entry, const CompressionChoice& choice) const {
    if (choice.is_recompute()) return false;
    if (choice.is_full()) return true;
    const CompressionMethod* m = profile_.method(choice.method());
    return m && m->offers(choice.rate()) && profile_.curve(entry.class_tag).has(choice.method());
  }

  void apply_locked(std::span<const Decision> decisions) {
    const Snapshot current = snapshot();
    auto next = std::make_shared<EngineState>(*current);
    std::vector<StoredObject> removed, added;

    for (const Decision& d : decisions) {
      const CacheEntry* entry = next->entry(d.entry);
      if (!entry) throw ConsistencyError("decision references unknown entry " + to_string(d.entry));
      std::shared_ptr<const std::vector<std::byte>> reuse;
      std::optional<CompressionChoice> previous_choice;
      if (auto it = next->residents.find(d.entry); it != next->residents.end()) {
        next->used[it->second.tier] -= it->second.stored_size;
        reuse = it->second.payload;
        previous_choice = it->second.choice;
        removed.push_back(it->second);
        next->residents.erase(it);
      }
      if (!d.target) continue;
      const Placement& p = *d.target;
      if (p.tier >= next->used.size()) throw ConsistencyError("decision targets unknown tier");
      if (!valid_choice(*entry, p.choice))
        throw ConsistencyError("decision uses an unavailable choice " + to_string(p.choice));
      StoredObject obj{d.entry, p.tier, p.choice, stored_size(*entry, p.choice), nullptr};
      if (options_.mode == PayloadMode::RealCodec) {
        if (reuse && previous_choice == p.choice) {
          obj.payload = reuse;
        } else {
          // Always from the pristine payload; lossy steps are never chained.
          obj.payload = std::make_shared<const std::vector<std::byte>>(
              codecs::encode(pristine_payload(*entry), *entry, p.choice, profile_.model));
        }
        if (obj.payload->size() != obj.stored_size)
          throw ConsistencyError("codec output differs from its predicted size");
      }
      next->used[p.tier] += obj.stored_size;
      added.push_back(obj);
      next->residents[d.entry] = std::move(obj);
    }
    for (std::size_t t = 0; t < next->used.size(); ++t)
      if (next->used[t] > profile_.device.tiers[t].capacity)
        throw ConsistencyError("decisions overflow tier '" + profile_.device.tiers[t].name + "'");

    if (options_.spill_dir) {
      for (const StoredObject& obj : removed)
        if (spills(obj)) std::filesystem::remove(spill_path(obj));
      for (const StoredObject& obj : added) {
        if (!spills(obj)) continue;
        std::ofstream out(spill_path(obj), std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(obj.payload->data()), static_cast<std::streamsize>(obj.payload->size()));
        if (!out) throw Error("cannot write spill file " + spill_path(obj).string());
      }
    }
    next->version += 1;
    publish(std::move(next));
  }

  ProfileConfig profile_;
  EngineOptions options_;
  std::unique_ptr<PlacementPolicy> policy_;
  std::mutex writer_;
  Snapshot state_;
};

}  // namespace tierkv
