#ifndef UCR_LISTBUILDER_HPP
#define UCR_LISTBUILDER_HPP

// Engagement histories and the per-example channel list strategies:
// IC recency, UC reservoir sampling and UC cluster lists.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <unordered_map>

#include "ucr/clustering.hpp"
#include "ucr/core.hpp"

namespace ucr {

struct Engagement {
  Timestamp time = 0;
  EntityId other = 0;
};

/// Append-only, time-ordered histories of positive engagements in both
/// directions of the user-item graph, one channel per engagement type.
class EngagementIndex {
 public:
  explicit EngagementIndex(std::uint32_t num_types = 1) : num_types_(num_types) {
    if (num_types_ == 0) throw ConfigError("engagement index needs at least one type");
  }

  std::uint32_t num_types() const { return num_types_; }

  /// Records a positive event; negative labels carry no engagement. Events
  /// must arrive in non-decreasing time order per entity.
  void append(const InteractionEvent& e) {
    if (e.label == 0) return;
    if (e.engagement_type >= num_types_) throw RangeError("engagement type out of range");
    push(by_user_, e.user_id, e.engagement_type, {e.timestamp, e.item_id});
    push(by_item_, e.item_id, e.engagement_type, {e.timestamp, e.user_id});
  }

  void append_all(std::span<const InteractionEvent> events) {
    for (const auto& e : events) append(e);
  }

  /// Items engaged by `user` with `type` strictly before t, oldest first.
  std::span<const Engagement> user_history(EntityId user, std::uint32_t type, Timestamp t) const {
    return before(by_user_, user, type, t);
  }

  /// Users who engaged `item` with `type` strictly before t, oldest first.
  std::span<const Engagement> item_history(EntityId item, std::uint32_t type, Timestamp t) const {
    return before(by_item_, item, type, t);
  }

  std::size_t num_users() const { return by_user_.size(); }
  std::size_t num_items() const { return by_item_.size(); }

 private:
  using Histories = std::unordered_map<EntityId, std::vector<std::vector<Engagement>>>;

  void push(Histories& h, EntityId key, std::uint32_t type, Engagement entry) {
    auto& per_type = h[key];
    if (per_type.empty()) per_type.resize(num_types_);
    auto& list = per_type[type];
    if (!list.empty() && list.back().time > entry.time) throw RangeError("engagement history must be time-ordered");
    list.push_back(entry);
  }

  std::span<const Engagement> before(const Histories& h, EntityId key, std::uint32_t type, Timestamp t) const {
    if (type >= num_types_) throw RangeError("engagement type out of range");
    auto it = h.find(key);
    if (it == h.end()) return {};
    const auto& list = it->second[type];
    auto end = std::lower_bound(list.begin(), list.end(), t,
                                [](const Engagement& e, Timestamp bound) { return e.time < bound; });
    return {list.data(), static_cast<std::size_t>(end - list.begin())};
  }

  std::uint32_t num_types_;
  Histories by_user_;
  Histories by_item_;
};

/// The `cap` most recent items engaged by `user` with `type` before t,
/// newest last.
inline ChannelList build_ic_list(const EngagementIndex& index, EntityId user, Timestamp t, std::uint32_t type,
                                 std::size_t cap) {
  if (cap < 1) throw ConfigError("list capacity must be >= 1");
  ChannelList out;
  out.capacity = cap;
  auto hist = index.user_history(user, type, t);
  const std::size_t start = hist.size() > cap ? hist.size() - cap : 0;
  out.entity_ids.reserve(hist.size() - start);
  out.time_deltas.reserve(hist.size() - start);
  for (std::size_t i = start; i < hist.size(); ++i) out.push_back(hist[i].other, t - hist[i].time);
  return out;
}

/// Uniform k-subset of {0, ..., n-1} by skip-based reservoir sampling
/// (Li's Algorithm L); returned sorted ascending.
template <class Gen>
std::vector<std::size_t> reservoir_sample_indices(std::size_t n, std::size_t k, Gen& gen) {
  std::vector<std::size_t> res;
  if (k == 0) return res;
  if (n <= k) {
    res.resize(n);
    for (std::size_t i = 0; i < n; ++i) res[i] = i;
    return res;
  }
  res.resize(k);
  for (std::size_t i = 0; i < k; ++i) res[i] = i;
  auto open01 = [&gen] { return (static_cast<double>(gen() >> 11) + 0.5) * 0x1.0p-53; };
  const double inv_k = 1.0 / static_cast<double>(k);
  double w = std::exp(std::log(open01()) * inv_k);
  std::size_t i = k - 1;
  while (true) {
    const double skip = std::floor(std::log(open01()) / std::log1p(-w));
    if (!(skip < static_cast<double>(n))) break;
    i += static_cast<std::size_t>(skip) + 1;
    if (i >= n) break;
    res[std::uniform_int_distribution<std::size_t>(0, k - 1)(gen)] = i;
    w *= std::exp(std::log(open01()) * inv_k);
  }
  std::sort(res.begin(), res.end());
  return res;
}

/// Users who engaged `item` with `type` before t; when the history exceeds
/// `cap` a fresh uniform sample of size cap is drawn from `gen` (callers key
/// the generator per example). Chronological order is preserved.
template <class Gen>
ChannelList build_uc_sampled_list(const EngagementIndex& index, EntityId item, Timestamp t, std::uint32_t type,
                                  std::size_t cap, Gen& gen) {
  if (cap < 1) throw ConfigError("list capacity must be >= 1");
  ChannelList out;
  out.capacity = cap;
  auto hist = index.item_history(item, type, t);
  if (hist.size() <= cap) {
    for (const auto& e : hist) out.push_back(e.other, t - e.time);
    return out;
  }
  for (std::size_t i : reservoir_sample_indices(hist.size(), cap, gen)) out.push_back(hist[i].other, t - hist[i].time);
  return out;
}

/// Users who engaged `item` before t mapped to cluster entities. A run of
/// consecutive engagements from the same cluster collapses to one entry
/// carrying the run's earliest engagement time; the newest `cap` entries are
/// kept.
inline ChannelList build_uc_clustered_list(const EngagementIndex& index, const ClusterMap& clusters, EntityId item,
                                           Timestamp t, std::uint32_t type, std::size_t cap) {
  if (cap < 1) throw ConfigError("list capacity must be >= 1");
  ChannelList out;
  out.capacity = cap;
  auto hist = index.item_history(item, type, t);
  std::vector<std::pair<EntityId, Timestamp>> runs;  // newest first
  std::size_t i = hist.size();
  while (i > 0) {
    const EntityId c = clusters.cluster_of(hist[i - 1].other);
    Timestamp earliest = hist[i - 1].time;
    while (i > 0 && clusters.cluster_of(hist[i - 1].other) == c) {
      earliest = hist[i - 1].time;
      --i;
    }
    runs.emplace_back(cluster_entity(c), earliest);
    if (runs.size() == cap) break;
  }
  for (auto it = runs.rbegin(); it != runs.rend(); ++it) out.push_back(it->first, t - it->second);
  return out;
}

}  // namespace ucr

#endif  // UCR_LISTBUILDER_HPP
