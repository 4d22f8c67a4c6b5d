#include <gtest/gtest.h>

#include <sstream>

#include "ucr/clustering.hpp"
#include "ucr/ingest.hpp"

using namespace ucr;

namespace {

WeightedGraph two_cliques() {
  WeightedGraph g(8);
  for (std::size_t base : {0u, 4u})
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) g.add_edge(base + i, base + j, 1.0);
  g.add_edge(3, 4, 1.0);
  return g;
}

// Modularity from the textbook definition, summed over ordered node pairs.
double reference_modularity(const WeightedGraph& g, const std::vector<std::size_t>& c) {
  const std::size_t n = g.num_nodes();
  std::vector<std::vector<double>> A(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    A[i][i] += 2.0 * g.self_loop(i);
    for (const auto& [j, w] : g.neighbors(i)) A[i][j] += w;
  }
  std::vector<double> k(n, 0.0);
  double two_m = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      k[i] += A[i][j];
      two_m += A[i][j];
    }
  double q = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (c[i] == c[j]) q += A[i][j] - k[i] * k[j] / two_m;
  return q / two_m;
}

// Every set partition of n nodes as restricted growth strings.
void enumerate_partitions(std::size_t n, std::vector<std::size_t>& cur, std::size_t max_label,
                          const std::function<void(const std::vector<std::size_t>&)>& f) {
  if (cur.size() == n) {
    f(cur);
    return;
  }
  for (std::size_t l = 0; l <= max_label + (cur.empty() ? 0 : 1); ++l) {
    cur.push_back(l);
    enumerate_partitions(n, cur, std::max(max_label, l), f);
    cur.pop_back();
  }
}

double adjusted_rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::map<std::pair<std::size_t, std::size_t>, double> nij;
  std::map<std::size_t, double> ai, bj;
  for (std::size_t i = 0; i < a.size(); ++i) {
    nij[{a[i], b[i]}] += 1;
    ai[a[i]] += 1;
    bj[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double sij = 0, sa = 0, sb = 0;
  for (auto& [k, v] : nij) sij += c2(v);
  for (auto& [k, v] : ai) sa += c2(v);
  for (auto& [k, v] : bj) sb += c2(v);
  const double expected = sa * sb / c2(static_cast<double>(a.size()));
  const double maxi = (sa + sb) / 2;
  return (sij - expected) / (maxi - expected);
}

WeightedGraph random_graph(std::size_t n, double p, Rng& rng) {
  WeightedGraph g(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (uniform01(rng) < p) g.add_edge(i, j, 1.0 + std::floor(uniform01(rng) * 3.0));
  return g;
}

}  // namespace

TEST(Modularity, MatchesDefinition) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto g = random_graph(9, 0.4, rng);
    if (t % 3 == 0) g.add_edge(2, 2, 1.5);
    std::vector<std::size_t> c(9);
    for (auto& x : c) x = static_cast<std::size_t>(uniform01(rng) * 3);
    if (g.total_weight() > 0) EXPECT_NEAR(modularity(g, c), reference_modularity(g, c), 1e-12);
  }
}

TEST(Louvain, RecoversPlantedCliquesLikeBruteForce) {
  const auto g = two_cliques();
  std::vector<std::size_t> best, cur;
  double best_q = -1.0;
  std::size_t count = 0;
  enumerate_partitions(8, cur, 0, [&](const std::vector<std::size_t>& p) {
    ++count;
    const double q = reference_modularity(g, p);
    if (q > best_q + 1e-12) {
      best_q = q;
      best = p;
    }
  });
  EXPECT_EQ(count, 4140u);  // Bell(8)
  const auto res = louvain(g);
  EXPECT_EQ(adjusted_rand_index(res.community, best), 1.0);
  EXPECT_EQ(adjusted_rand_index(res.community, {0, 0, 0, 0, 1, 1, 1, 1}), 1.0);
  EXPECT_NEAR(res.modularity, best_q, 1e-12);
}

TEST(Louvain, ModularityNeverDecreasesOnRandomGraphs) {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    const auto g = random_graph(10 + t % 30, 0.05 + 0.3 * uniform01(rng), rng);
    LouvainResult res;
    ASSERT_NO_THROW(res = louvain(g));
    for (std::size_t i = 1; i < res.pass_modularity.size(); ++i)
      EXPECT_GE(res.pass_modularity[i], res.pass_modularity[i - 1] - 1e-12);
    if (g.total_weight() > 0) EXPECT_NEAR(res.modularity, modularity(g, res.community), 1e-9);
  }
}

TEST(Louvain, DeterministicAndCanonical) {
  Rng rng(5);
  const auto g = random_graph(40, 0.1, rng);
  const auto a = louvain(g), b = louvain(g);
  EXPECT_EQ(a.community, b.community);
  EXPECT_EQ(a.community[0], 0u);
  EXPECT_TRUE(louvain(WeightedGraph(0)).community.empty());
  EXPECT_EQ(louvain(WeightedGraph(3)).community, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Projection, CountsSharedPositiveItems) {
  const std::vector<InteractionEvent> ev{{1, 10, 0, 0, 1}, {2, 10, 1, 0, 1}, {1, 11, 2, 0, 1}, {2, 11, 3, 1, 1},
                                         {3, 11, 4, 0, 1}, {3, 12, 5, 0, 0}, {1, 12, 6, 0, 0}};
  const auto g = project_coengagement(ev, 2.0);
  ASSERT_EQ(g.edges().size(), 1u);
  EXPECT_EQ(g.edges().begin()->first.a, 1u);
  EXPECT_EQ(g.edges().begin()->first.b, 2u);
  EXPECT_EQ(g.edges().begin()->second, 2.0);
  EXPECT_EQ(g.users(), (std::vector<EntityId>{1, 2, 3}));
  EXPECT_EQ(project_coengagement(ev, 1.0).edges().size(), 3u);
}

TEST(ClusterMap, SaveLoadRoundTrip) {
  ClusterMap m(ClusterConstraints{4, 0.25});
  m.assign(5, 1);
  m.assign(7, 1);
  m.assign(9, 3);
  m.bump_generation();
  std::stringstream ss;
  m.save(ss);
  const auto back = ClusterMap::load(ss);
  EXPECT_EQ(back.assignment(), m.assignment());
  EXPECT_EQ(back.generation(), 1u);
  EXPECT_EQ(back.constraints().max_cluster_size, 4u);
  EXPECT_EQ(back.size_of(1), 2u);
  EXPECT_EQ(back.cluster_of(42), kUnassignedCluster);
  std::stringstream bad("ucr-clustermap 2\n");
  EXPECT_THROW(ClusterMap::load(bad), ParseError);
}

TEST(Clusterer, IdenticalGraphRemapsNobody) {
  IncrementalClusterer c(ClusterConstraints{8, 0.1});
  UserGraph g;
  for (EntityId u = 0; u < 12; ++u)
    for (EntityId v = u + 1; v < 12; ++v)
      if (u / 4 == v / 4) g.add(u, v, 3.0);
  c.update(g);
  const auto before = c.map().assignment();
  const auto st = c.update(g);
  EXPECT_EQ(st.remapped, 0u);
  EXPECT_EQ(c.map().assignment(), before);
}

TEST(Clusterer, ConstraintsHoldOverTenDayReplay) {
  SyntheticConfig sc;
  sc.num_users = 300;
  sc.num_days = 10;
  sc.items_born_per_day = 100;
  sc.events_per_day = 6000;
  const auto data = generate_synthetic(sc);
  const auto days = split_by_days(data.dataset.events, data.dataset.meta.day_boundaries);
  const ClusterConstraints cons{16, 0.05};
  IncrementalClusterer c(cons);
  for (std::size_t d = 0; d < days.size(); ++d) {
    std::map<EntityId, ClusterId> before(c.map().assignment().begin(), c.map().assignment().end());
    const auto st = c.update(project_coengagement(days[d]));
    for (const auto& [id, size] : c.map().sizes()) EXPECT_LE(size, cons.max_cluster_size);
    if (d > 0) {
      std::size_t changed = 0;
      for (const auto& [u, cl] : c.map().assignment()) {
        auto it = before.find(u);
        if (it == before.end() || it->second != cl) ++changed;
      }
      EXPECT_EQ(changed, st.remapped);
      EXPECT_LE(static_cast<double>(changed), cons.max_remap_ratio * static_cast<double>(st.population));
    }
  }
  EXPECT_GT(c.map().num_assigned(), 0u);
}
