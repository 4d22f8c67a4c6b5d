#ifndef UCR_CLUSTERING_HPP
#define UCR_CLUSTERING_HPP

// Louvain community detection on the user co-engagement graph and the
// incremental, constrained cluster map used by UC-Clustering lists.

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ucr/core.hpp"

namespace ucr {

using ClusterId = std::uint64_t;

inline constexpr ClusterId kUnassignedCluster = (ClusterId{1} << 62) - 1;
/// Cluster entities share the user embedding table; the tag bit keeps them
/// apart from raw user ids.
inline constexpr EntityId kClusterEntityTag = EntityId{1} << 63;

constexpr EntityId cluster_entity(ClusterId c) { return kClusterEntityTag | c; }

// ---------------------------------------------------------------------------
// weighted undirected graph

/// Dense-indexed weighted graph. Self loops are stored separately; a self
/// loop of weight w contributes 2w to its node's degree.
class WeightedGraph {
 public:
  WeightedGraph() = default;
  explicit WeightedGraph(std::size_t n) : adj_(n), self_(n, 0.0) {}

  std::size_t num_nodes() const { return adj_.size(); }

  void add_edge(std::size_t a, std::size_t b, double w) {
    if (a >= adj_.size() || b >= adj_.size()) throw RangeError("graph node out of range");
    if (w < 0.0) throw RangeError("negative edge weight");
    if (a == b) {
      self_[a] += w;
      return;
    }
    adj_[a].emplace_back(b, w);
    adj_[b].emplace_back(a, w);
  }

  const std::vector<std::pair<std::size_t, double>>& neighbors(std::size_t i) const { return adj_[i]; }
  double self_loop(std::size_t i) const { return self_[i]; }

  double degree(std::size_t i) const {
    double k = 2.0 * self_[i];
    for (const auto& [j, w] : adj_[i]) k += w;
    return k;
  }

  double total_weight() const {
    double s = 0.0;
    for (std::size_t i = 0; i < adj_.size(); ++i) s += degree(i);
    return 0.5 * s;
  }

 private:
  std::vector<std::vector<std::pair<std::size_t, double>>> adj_;
  std::vector<double> self_;
};

/// Newman modularity of a node -> community labelling.
inline double modularity(const WeightedGraph& g, std::span<const std::size_t> community) {
  const double m = g.total_weight();
  if (m <= 0.0) return 0.0;
  const std::size_t nc = community.empty() ? 0 : *std::max_element(community.begin(), community.end()) + 1;
  std::vector<double> in(nc, 0.0), tot(nc, 0.0);
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    const auto c = community[i];
    tot[c] += g.degree(i);
    in[c] += g.self_loop(i);
    for (const auto& [j, w] : g.neighbors(i))
      if (community[j] == c) in[c] += 0.5 * w;
  }
  double q = 0.0;
  for (std::size_t c = 0; c < nc; ++c) q += in[c] / m - (tot[c] / (2.0 * m)) * (tot[c] / (2.0 * m));
  return q;
}

struct LouvainResult {
  std::vector<std::size_t> community;  // labels 0..k-1 ordered by smallest member
  double modularity = 0.0;
  std::vector<double> pass_modularity;  // after every local-move sweep
};

namespace detail {

inline std::vector<std::size_t> canonical_labels(std::span<const std::size_t> labels) {
  std::unordered_map<std::size_t, std::size_t> remap;
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = remap.emplace(labels[i], remap.size());
    out[i] = it->second;
  }
  return out;
}

}  // namespace detail

/// Two-phase Louvain. Nodes are visited in index order; a node moves to the
/// neighbouring community with the largest modularity gain (ties go to the
/// lowest community id) only when the gain strictly beats staying. Sweeps
/// repeat until a sweep improves modularity by no more than `min_gain`, then
/// communities are aggregated into super-nodes; the algorithm stops when a
/// level moves nothing. Throws std::logic_error if modularity ever decreases
/// between sweeps.
inline LouvainResult louvain(const WeightedGraph& input, double min_gain = 1e-9) {
  LouvainResult res;
  const std::size_t n0 = input.num_nodes();
  res.community.resize(n0);
  std::iota(res.community.begin(), res.community.end(), 0);
  if (n0 == 0) return res;
  const double m = input.total_weight();
  if (m <= 0.0) {
    res.modularity = 0.0;
    return res;
  }

  WeightedGraph g = input;
  std::vector<std::size_t> node_of_orig(n0);
  std::iota(node_of_orig.begin(), node_of_orig.end(), 0);
  double last_q = modularity(input, res.community);
  res.pass_modularity.push_back(last_q);

  while (true) {
    const std::size_t n = g.num_nodes();
    std::vector<std::size_t> comm(n);
    std::iota(comm.begin(), comm.end(), 0);
    std::vector<double> k(n), tot(n);
    for (std::size_t i = 0; i < n; ++i) tot[i] = k[i] = g.degree(i);

    bool level_moved = false;
    std::vector<double> link(n, 0.0);
    std::vector<std::size_t> touched;
    while (true) {
      bool moved = false;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t own = comm[i];
        touched.clear();
        for (const auto& [j, w] : g.neighbors(i)) {
          const std::size_t c = comm[j];
          if (link[c] == 0.0 && std::find(touched.begin(), touched.end(), c) == touched.end()) touched.push_back(c);
          link[c] += w;
        }
        tot[own] -= k[i];
        auto gain = [&](std::size_t c) { return link[c] / m - tot[c] * k[i] / (2.0 * m * m); };
        const double stay = gain(own);
        std::sort(touched.begin(), touched.end());
        std::size_t best = own;
        double best_gain = stay;
        for (std::size_t c : touched) {
          if (c == own) continue;
          const double gc = gain(c);
          if (gc > best_gain + 1e-15) {
            best = c;
            best_gain = gc;
          }
        }
        tot[best] += k[i];
        if (best != own) {
          comm[i] = best;
          moved = true;
          level_moved = true;
        }
        for (std::size_t c : touched) link[c] = 0.0;
      }
      std::vector<std::size_t> orig_labels(n0);
      for (std::size_t v = 0; v < n0; ++v) orig_labels[v] = comm[node_of_orig[v]];
      const double q = modularity(input, orig_labels);
      if (q < last_q - 1e-12) throw std::logic_error("louvain: modularity decreased between sweeps");
      res.pass_modularity.push_back(q);
      const double improvement = q - last_q;
      last_q = q;
      if (!moved || improvement <= min_gain) break;
    }
    if (!level_moved) break;

    // aggregate
    const auto labels = detail::canonical_labels(comm);
    const std::size_t nc = *std::max_element(labels.begin(), labels.end()) + 1;
    WeightedGraph agg(nc);
    std::map<std::pair<std::size_t, std::size_t>, double> w_between;
    for (std::size_t i = 0; i < n; ++i) {
      if (g.self_loop(i) > 0.0) agg.add_edge(labels[i], labels[i], g.self_loop(i));
      for (const auto& [j, w] : g.neighbors(i)) {
        if (j < i) continue;
        auto a = labels[i], b = labels[j];
        if (a > b) std::swap(a, b);
        w_between[{a, b}] += w;
      }
    }
    for (const auto& [ab, w] : w_between) agg.add_edge(ab.first, ab.second, w);
    for (auto& v : node_of_orig) v = labels[v];
    g = std::move(agg);
    if (nc == n) break;
  }

  std::vector<std::size_t> orig_labels(n0);
  for (std::size_t v = 0; v < n0; ++v) orig_labels[v] = node_of_orig[v];
  res.community = detail::canonical_labels(orig_labels);
  res.modularity = modularity(input, res.community);
  return res;
}

// ---------------------------------------------------------------------------
// user co-engagement graph keyed by raw user id

struct UserPair {
  EntityId a = 0;
  EntityId b = 0;
  friend bool operator<(const UserPair& x, const UserPair& y) { return x.a != y.a ? x.a < y.a : x.b < y.b; }
  friend bool operator==(const UserPair&, const UserPair&) = default;
};

/// Sparse user-user graph; edge weights are co-engagement counts.
class UserGraph {
 public:
  void add(EntityId u, EntityId v, double w) {
    if (u == v) return;
    if (u > v) std::swap(u, v);
    edges_[{u, v}] += w;
  }
  void add_node(EntityId u) { nodes_.insert(u); }

  void scale(double f) {
    for (auto& [p, w] : edges_) w *= f;
  }

  void merge(const UserGraph& other) {
    for (const auto& [p, w] : other.edges_) edges_[p] += w;
    nodes_.insert(other.nodes_.begin(), other.nodes_.end());
  }

  const std::map<UserPair, double>& edges() const { return edges_; }

  /// All users with an edge or an explicit node entry, ascending.
  std::vector<EntityId> users() const {
    std::vector<EntityId> out(nodes_.begin(), nodes_.end());
    for (const auto& [p, w] : edges_) {
      out.push_back(p.a);
      out.push_back(p.b);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  bool empty() const { return edges_.empty() && nodes_.empty(); }

 private:
  std::map<UserPair, double> edges_;
  std::unordered_set<EntityId> nodes_;
};

/// Projects one window of events onto users: weight(u, v) = number of items
/// both positively engaged (any type) in the window. Only the most recent
/// `max_users_per_item` engagers of an item take part, and pairs below
/// `min_weight` are dropped. Users that engaged anything remain as nodes.
inline UserGraph project_coengagement(std::span<const InteractionEvent> events, double min_weight = 2.0,
                                      std::size_t max_users_per_item = 200) {
  std::unordered_map<EntityId, std::vector<EntityId>> engagers;
  for (const auto& e : events) {
    if (e.label == 0) continue;
    auto& v = engagers[e.item_id];
    if (std::find(v.begin(), v.end(), e.user_id) == v.end()) v.push_back(e.user_id);
  }
  std::map<UserPair, double> counts;
  UserGraph out;
  for (auto& [item, users] : engagers) {
    if (users.size() > max_users_per_item) users.erase(users.begin(), users.end() - max_users_per_item);
    std::sort(users.begin(), users.end());
    for (std::size_t i = 0; i < users.size(); ++i) {
      out.add_node(users[i]);
      for (std::size_t j = i + 1; j < users.size(); ++j) counts[{users[i], users[j]}] += 1.0;
    }
  }
  for (const auto& [p, w] : counts)
    if (w >= min_weight) out.add(p.a, p.b, w);
  return out;
}

// ---------------------------------------------------------------------------
// cluster map

struct ClusterConstraints {
  std::size_t max_cluster_size = 256;
  double max_remap_ratio = 0.1;

  void validate() const {
    if (max_cluster_size < 1) throw ConfigError("max_cluster_size must be >= 1");
    if (!(max_remap_ratio >= 0.0 && max_remap_ratio <= 1.0)) throw ConfigError("max_remap_ratio must be in [0, 1]");
  }
};

class ClusterMap {
 public:
  ClusterMap() = default;
  explicit ClusterMap(ClusterConstraints c) : constraints_(c) { constraints_.validate(); }

  ClusterId cluster_of(EntityId user) const {
    auto it = assignment_.find(user);
    return it == assignment_.end() ? kUnassignedCluster : it->second;
  }

  void assign(EntityId user, ClusterId c) {
    auto it = assignment_.find(user);
    if (it != assignment_.end()) {
      if (it->second == c) return;
      if (--sizes_[it->second] == 0) sizes_.erase(it->second);
      it->second = c;
    } else {
      assignment_.emplace(user, c);
    }
    ++sizes_[c];
    next_id_ = std::max(next_id_, c + 1);
  }

  std::size_t size_of(ClusterId c) const {
    auto it = sizes_.find(c);
    return it == sizes_.end() ? 0 : it->second;
  }

  ClusterId fresh_id() { return next_id_++; }

  const std::unordered_map<EntityId, ClusterId>& assignment() const { return assignment_; }
  const std::map<ClusterId, std::size_t>& sizes() const { return sizes_; }
  std::size_t num_assigned() const { return assignment_.size(); }
  std::uint64_t generation() const { return generation_; }
  void bump_generation() { ++generation_; }
  const ClusterConstraints& constraints() const { return constraints_; }

  /// Versioned text file: "ucr-clustermap 1", "generation <g>", then one
  /// "<user_id> <cluster_id>" pair per line sorted by user id.
  void save(std::ostream& os) const {
    os << "ucr-clustermap 1\n"
       << "generation " << generation_ << '\n'
       << "max_cluster_size " << constraints_.max_cluster_size << '\n'
       << "max_remap_ratio " << constraints_.max_remap_ratio << '\n';
    std::vector<std::pair<EntityId, ClusterId>> rows(assignment_.begin(), assignment_.end());
    std::sort(rows.begin(), rows.end());
    for (const auto& [u, c] : rows) os << u << ' ' << c << '\n';
  }

  static ClusterMap load(std::istream& is) {
    std::string tag;
    int version = 0;
    if (!(is >> tag >> version) || tag != "ucr-clustermap") throw ParseError("not a cluster map file");
    if (version != 1) throw ParseError("unsupported cluster map version " + std::to_string(version));
    ClusterMap cm;
    std::string key;
    if (!(is >> key >> cm.generation_) || key != "generation") throw ParseError("cluster map: missing generation");
    if (!(is >> key >> cm.constraints_.max_cluster_size) || key != "max_cluster_size")
      throw ParseError("cluster map: missing max_cluster_size");
    if (!(is >> key >> cm.constraints_.max_remap_ratio) || key != "max_remap_ratio")
      throw ParseError("cluster map: missing max_remap_ratio");
    EntityId u;
    ClusterId c;
    while (is >> u >> c) cm.assign(u, c);
    if (!is.eof()) throw ParseError("cluster map: malformed assignment line");
    return cm;
  }

  /// Histogram of cluster sizes: size -> number of clusters.
  std::map<std::size_t, std::size_t> size_histogram() const {
    std::map<std::size_t, std::size_t> h;
    for (const auto& [c, s] : sizes_) ++h[s];
    return h;
  }

 private:
  ClusterConstraints constraints_{};
  std::unordered_map<EntityId, ClusterId> assignment_;
  std::map<ClusterId, std::size_t> sizes_;
  ClusterId next_id_ = 0;
  std::uint64_t generation_ = 0;
};

struct ClusterUpdateStats {
  std::size_t communities = 0;
  std::size_t remapped = 0;
  std::size_t deferred = 0;
  std::size_t population = 0;
  double modularity = 0.0;
};

namespace detail {

// Louvain on the sub-graph induced by `members`; oversized parts are split
// again and, if Louvain cannot split a part, it is chunked by user id.
inline void split_oversized(const UserGraph& graph, std::vector<EntityId> members, std::size_t max_size,
                            std::vector<std::vector<EntityId>>& out) {
  if (members.size() <= max_size) {
    out.push_back(std::move(members));
    return;
  }
  std::sort(members.begin(), members.end());
  std::unordered_map<EntityId, std::size_t> idx;
  for (std::size_t i = 0; i < members.size(); ++i) idx[members[i]] = i;
  WeightedGraph sub(members.size());
  for (const auto& [p, w] : graph.edges()) {
    auto a = idx.find(p.a), b = idx.find(p.b);
    if (a != idx.end() && b != idx.end()) sub.add_edge(a->second, b->second, w);
  }
  const auto part = louvain(sub);
  const std::size_t k = *std::max_element(part.community.begin(), part.community.end()) + 1;
  if (k <= 1) {
    for (std::size_t s = 0; s < members.size(); s += max_size)
      out.emplace_back(members.begin() + s, members.begin() + std::min(members.size(), s + max_size));
    return;
  }
  std::vector<std::vector<EntityId>> groups(k);
  for (std::size_t i = 0; i < members.size(); ++i) groups[part.community[i]].push_back(members[i]);
  for (auto& g : groups) split_oversized(graph, std::move(g), max_size, out);
}

}  // namespace detail

/// Louvain over a user graph, returning communities as lists of user ids
/// with every community no larger than max_size.
inline std::vector<std::vector<EntityId>> user_communities(const UserGraph& graph, std::size_t max_size,
                                                           double* modularity_out = nullptr) {
  const auto users = graph.users();
  std::unordered_map<EntityId, std::size_t> idx;
  for (std::size_t i = 0; i < users.size(); ++i) idx[users[i]] = i;
  WeightedGraph g(users.size());
  for (const auto& [p, w] : graph.edges()) g.add_edge(idx[p.a], idx[p.b], w);
  const auto part = louvain(g);
  if (modularity_out) *modularity_out = part.modularity;
  std::vector<std::vector<EntityId>> comms;
  if (users.empty()) return comms;
  const std::size_t k = *std::max_element(part.community.begin(), part.community.end()) + 1;
  comms.resize(k);
  for (std::size_t i = 0; i < users.size(); ++i) comms[part.community[i]].push_back(users[i]);
  std::vector<std::vector<EntityId>> out;
  for (auto& c : comms) detail::split_oversized(graph, std::move(c), max_size, out);
  return out;
}

/// Stateful incremental clustering: accumulates daily co-engagement graphs
/// with exponential decay and re-clusters under the map's size and re-mapping
/// constraints.
class IncrementalClusterer {
 public:
  explicit IncrementalClusterer(ClusterConstraints constraints = {}, double decay = 0.5)
      : map_(constraints), decay_(decay) {
    if (!(decay_ >= 0.0 && decay_ <= 1.0)) throw ConfigError("cluster graph decay must be in [0, 1]");
  }

  const ClusterMap& map() const { return map_; }
  ClusterMap& map() { return map_; }
  const UserGraph& accumulated() const { return graph_; }

  /// Folds in a new day's graph and updates the map. New communities take the
  /// id of the old cluster they overlap most (greedy, largest overlap first).
  /// Once a map exists, at most floor(max_remap_ratio * population) users
  /// change cluster per update (population = users known before or in the
  /// graph; first assignments count as changes) and no move may overfill a
  /// cluster; blocked users keep their old cluster until a later update.
  ClusterUpdateStats update(const UserGraph& day_graph) {
    const auto& cons = map_.constraints();
    cons.validate();
    graph_.scale(decay_);
    graph_.merge(day_graph);

    ClusterUpdateStats stats;
    auto comms = user_communities(graph_, cons.max_cluster_size, &stats.modularity);
    stats.communities = comms.size();

    // greedy overlap matching
    struct Overlap {
      std::size_t count;
      std::size_t comm;
      ClusterId old;
    };
    std::vector<Overlap> overlaps;
    for (std::size_t c = 0; c < comms.size(); ++c) {
      std::map<ClusterId, std::size_t> cnt;
      for (EntityId u : comms[c]) {
        const ClusterId o = map_.cluster_of(u);
        if (o != kUnassignedCluster) ++cnt[o];
      }
      for (const auto& [o, n] : cnt) overlaps.push_back({n, c, o});
    }
    std::sort(overlaps.begin(), overlaps.end(), [](const Overlap& a, const Overlap& b) {
      if (a.count != b.count) return a.count > b.count;
      if (a.comm != b.comm) return a.comm < b.comm;
      return a.old < b.old;
    });
    std::vector<ClusterId> target_id(comms.size(), kUnassignedCluster);
    std::unordered_set<ClusterId> used_old;
    for (const auto& o : overlaps) {
      if (target_id[o.comm] != kUnassignedCluster || used_old.count(o.old)) continue;
      target_id[o.comm] = o.old;
      used_old.insert(o.old);
    }
    for (auto& t : target_id)
      if (t == kUnassignedCluster) t = map_.fresh_id();

    std::unordered_set<EntityId> population;
    for (const auto& [u, c] : map_.assignment()) population.insert(u);
    for (const auto& c : comms) population.insert(c.begin(), c.end());
    stats.population = population.size();

    std::vector<std::pair<EntityId, ClusterId>> moves;
    for (std::size_t c = 0; c < comms.size(); ++c)
      for (EntityId u : comms[c])
        if (map_.cluster_of(u) != target_id[c]) moves.emplace_back(u, target_id[c]);
    std::sort(moves.begin(), moves.end());

    const bool initial = map_.num_assigned() == 0;
    std::size_t budget =
        initial ? moves.size()
                : static_cast<std::size_t>(std::floor(cons.max_remap_ratio * static_cast<double>(population.size())));
    std::vector<char> done(moves.size(), 0);
    bool progress = true;
    while (progress && budget > 0) {
      progress = false;
      for (std::size_t i = 0; i < moves.size() && budget > 0; ++i) {
        if (done[i]) continue;
        const auto [u, c] = moves[i];
        if (map_.size_of(c) >= cons.max_cluster_size) continue;
        map_.assign(u, c);
        done[i] = 1;
        --budget;
        ++stats.remapped;
        progress = true;
      }
    }
    stats.deferred = moves.size() - stats.remapped;
    map_.bump_generation();

    for (const auto& [c, s] : map_.sizes())
      if (s > cons.max_cluster_size) throw std::logic_error("cluster map: max_cluster_size violated");
    if (!initial && static_cast<double>(stats.remapped) >
                        cons.max_remap_ratio * static_cast<double>(stats.population) + 1e-9)
      throw std::logic_error("cluster map: max_remap_ratio violated");
    return stats;
  }

 private:
  ClusterMap map_;
  UserGraph graph_;
  double decay_;
};

}  // namespace ucr

#endif  // UCR_CLUSTERING_HPP
