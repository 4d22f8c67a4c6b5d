#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "ucr/listbuilder.hpp"

using namespace ucr;

namespace {

EngagementIndex toy_index() {
  EngagementIndex idx(2);
  idx.append_all(std::vector<InteractionEvent>{{1, 100, 10, 0, 1},
                                               {2, 100, 20, 0, 1},
                                               {1, 101, 30, 0, 0},  // negative: not indexed
                                               {1, 102, 40, 0, 1},
                                               {3, 100, 50, 1, 1},
                                               {1, 103, 60, 0, 1},
                                               {4, 100, 60, 0, 1}});
  return idx;
}

}  // namespace

TEST(EngagementIndex, PositivesOnlyAndStrictlyBefore) {
  const auto idx = toy_index();
  EXPECT_EQ(idx.user_history(1, 0, 1000).size(), 3u);
  EXPECT_EQ(idx.user_history(1, 0, 40).size(), 1u);  // t itself is excluded
  EXPECT_EQ(idx.item_history(100, 0, 61).size(), 3u);
  EXPECT_EQ(idx.item_history(100, 1, 61).size(), 1u);
  EXPECT_TRUE(idx.user_history(99, 0, 1000).empty());
}

TEST(EngagementIndex, RejectsOutOfOrderAppends) {
  EngagementIndex idx(1);
  idx.append({1, 1, 10, 0, 1});
  EXPECT_THROW(idx.append({1, 2, 5, 0, 1}), RangeError);
  EXPECT_THROW(idx.append({1, 2, 20, 3, 1}), RangeError);
}

TEST(IcList, NewestEntriesOldestFirst) {
  const auto idx = toy_index();
  const auto l = build_ic_list(idx, 1, 61, 0, 2);
  EXPECT_EQ(l.entity_ids, (std::vector<EntityId>{102, 103}));
  EXPECT_EQ(l.time_deltas, (std::vector<Timestamp>{21, 1}));
  EXPECT_EQ(l.capacity, 2u);
  EXPECT_TRUE(build_ic_list(idx, 1, 10, 0, 4).empty());
  EXPECT_THROW(build_ic_list(idx, 1, 10, 0, 0), ConfigError);
}

TEST(UcList, SampledListIsSubsetInTimeOrder) {
  EngagementIndex idx(1);
  for (int u = 0; u < 50; ++u) idx.append({static_cast<EntityId>(u), 7, u, 0, 1});
  SplitMix64 g1(derive_seed(1, 7, 3)), g2(derive_seed(1, 7, 3)), g3(derive_seed(1, 7, 4));
  const auto a = build_uc_sampled_list(idx, 7, 100, 0, 10, g1);
  const auto b = build_uc_sampled_list(idx, 7, 100, 0, 10, g2);
  const auto c = build_uc_sampled_list(idx, 7, 100, 0, 10, g3);
  ASSERT_EQ(a.valid_len(), 10u);
  EXPECT_EQ(a.entity_ids, b.entity_ids);
  EXPECT_NE(a.entity_ids, c.entity_ids);
  EXPECT_TRUE(std::is_sorted(a.entity_ids.begin(), a.entity_ids.end()));
  for (std::size_t j = 0; j < a.valid_len(); ++j) EXPECT_EQ(a.time_deltas[j], 100 - static_cast<Timestamp>(a.entity_ids[j]));
  SplitMix64 g4(1);
  EXPECT_EQ(build_uc_sampled_list(idx, 7, 5, 0, 10, g4).valid_len(), 5u);  // short history is kept whole
}

TEST(Reservoir, UniformInclusionChiSquare) {
  // n = 10, k = 3: every index is included with probability 0.3.
  const std::size_t n = 10, k = 3, draws = 100000;
  SplitMix64 gen(2024);
  std::vector<double> counts(n, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    const auto s = reservoir_sample_indices(n, k, gen);
    ASSERT_EQ(s.size(), k);
    for (auto i : s) counts[i] += 1.0;
  }
  const double expected = static_cast<double>(draws) * 0.3;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(static_cast<double>(n - 1));
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01) << "chi2=" << chi2;
}

TEST(Reservoir, SubsetsAreUniform) {
  // All C(5,2) = 10 subsets should be equally likely.
  SplitMix64 gen(77);
  std::map<std::vector<std::size_t>, double> seen;
  const int draws = 50000;
  for (int d = 0; d < draws; ++d) seen[reservoir_sample_indices(5, 2, gen)] += 1.0;
  ASSERT_EQ(seen.size(), 10u);
  double chi2 = 0.0;
  for (const auto& [s, c] : seen) chi2 += (c - draws / 10.0) * (c - draws / 10.0) / (draws / 10.0);
  const boost::math::chi_squared dist(9.0);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
}

TEST(ClusteredList, CollapsesConsecutiveRunsWithEarliestTime) {
  EngagementIndex idx(1);
  // cluster A = {1, 2}, cluster B = {3}
  idx.append_all(std::vector<InteractionEvent>{
      {1, 9, 10, 0, 1}, {2, 9, 20, 0, 1}, {3, 9, 30, 0, 1}, {1, 9, 40, 0, 1}, {5, 9, 45, 0, 1}});
  ClusterMap map(ClusterConstraints{});
  map.assign(1, 0);
  map.assign(2, 0);
  map.assign(3, 1);
  const auto l = build_uc_clustered_list(idx, map, 9, 50, 0, 8);
  EXPECT_EQ(l.entity_ids, (std::vector<EntityId>{cluster_entity(0), cluster_entity(1), cluster_entity(0),
                                                 cluster_entity(kUnassignedCluster)}));
  EXPECT_EQ(l.time_deltas, (std::vector<Timestamp>{40, 20, 10, 5}));
  const auto capped = build_uc_clustered_list(idx, map, 9, 50, 0, 2);
  EXPECT_EQ(capped.entity_ids, (std::vector<EntityId>{cluster_entity(0), cluster_entity(kUnassignedCluster)}));
}
