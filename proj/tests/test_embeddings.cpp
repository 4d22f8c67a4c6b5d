#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ucr/embeddings.hpp"

using namespace ucr;

TEST(Hash, GoldenSlots) {
  // Slots of ids 1..10 with seed 0x5eed in 2^20 slots, computed with an
  // independent big-integer implementation of the finalizer.
  const std::uint64_t expected[10] = {279828, 961143, 705314, 463320, 542633,
                                      839718, 900057, 680855, 903488, 549282};
  for (EntityId id = 1; id <= 10; ++id) EXPECT_EQ(hash_slot(id, 0x5eed, 1u << 20), expected[id - 1]) << "id " << id;
}

TEST(Hash, OccupancyMatchesBallsInBins) {
  const std::uint64_t n_slots = 1u << 20;
  const std::uint64_t n_ids = 1000000;
  SplitMix64 gen(99);
  std::vector<char> hit(n_slots, 0);
  std::uint64_t occupied = 0;
  for (std::uint64_t i = 0; i < n_ids; ++i) {
    const auto s = hash_slot(gen(), 0x1234, n_slots);
    if (!hit[s]) {
      hit[s] = 1;
      ++occupied;
    }
  }
  const double expected = static_cast<double>(n_slots) * (1.0 - std::pow(1.0 - 1.0 / n_slots, static_cast<double>(n_ids)));
  EXPECT_NEAR(static_cast<double>(occupied), expected, 0.01 * expected);
}

TEST(Table, GrowthAndCollisionsAreCounted) {
  HashedEmbeddingTable<double> t(4, 2, 7);
  for (EntityId id = 1; id <= 20; ++id) t.lookup(id);
  t.lookup(3);  // repeat lookups do not count
  const auto g = t.report_growth();
  EXPECT_EQ(g.distinct_raw_ids, 20u);
  EXPECT_EQ(g.distinct_slots, 4u);
  EXPECT_EQ(g.active_parameters, 8u);
  EXPECT_EQ(t.collision_count(), 16u);
  EXPECT_DOUBLE_EQ(g.collision_rate, 1.0 - 4.0 / 20.0);
}

TEST(Table, SketchTracksLargeCardinalities) {
  HashedEmbeddingTable<float> t(1u << 16, 1, 7, DistinctTracking::kSketch);
  for (EntityId id = 0; id < 200000; ++id) t.lookup(id * 31 + 5);
  const auto g = t.report_growth();
  EXPECT_NEAR(static_cast<double>(g.distinct_raw_ids), 200000.0, 200000.0 * 0.03);
  EXPECT_LE(g.distinct_slots, 1u << 16);
}

TEST(Table, AdagradStepByHand) {
  HashedEmbeddingTable<double> t(8, 2, 1);
  Rng rng(1);
  t.init(0.1, rng);
  const std::size_t s = t.slot_of(42);
  const std::vector<double> w0(t.row(s).begin(), t.row(s).end());
  SparseGradients<double> g(2);
  g.add(s, std::vector<double>{0.5, -2.0});
  t.apply_sparse_grads(g, 0.1);
  // first step: acc = g^2, w -= lr * g / sqrt(g^2 + eps)
  EXPECT_NEAR(t.row(s)[0], w0[0] - 0.1 * 0.5 / std::sqrt(0.25 + 1e-8), 1e-12);
  EXPECT_NEAR(t.row(s)[1], w0[1] + 0.1 * 2.0 / std::sqrt(4.0 + 1e-8), 1e-12);
  EXPECT_NEAR(t.accumulator(s)[1], 4.0, 1e-12);
  // second step accumulates
  SparseGradients<double> g2(2);
  g2.add(s, std::vector<double>{0.5, 0.0});
  const double before = t.row(s)[0];
  t.apply_sparse_grads(g2, 0.1);
  EXPECT_NEAR(t.row(s)[0], before - 0.1 * 0.5 / std::sqrt(0.5 + 1e-8), 1e-12);
}

TEST(Table, DuplicateSlotsAreSummedBeforeTheStep) {
  HashedEmbeddingTable<double> a(8, 1, 1), b(8, 1, 1);
  const std::vector<std::pair<std::size_t, std::vector<double>>> pairs{{3, {1.0}}, {3, {2.0}}};
  a.apply_sparse_grads(std::span(pairs), 1.0);
  SparseGradients<double> g(1);
  g.add(3, std::vector<double>{3.0});
  b.apply_sparse_grads(g, 1.0);
  EXPECT_DOUBLE_EQ(a.row(3)[0], b.row(3)[0]);
  EXPECT_DOUBLE_EQ(a.accumulator(3)[0], 9.0);
}

TEST(Table, NonFiniteGradientNamesTheSlot) {
  HashedEmbeddingTable<float> t(8, 2, 1);
  SparseGradients<float> g(2);
  g.add(5, std::vector<float>{1.0f, std::nanf("")});
  try {
    t.apply_sparse_grads(g, 0.1f);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("slot 5"), std::string::npos);
  }
  EXPECT_EQ(t.row(5)[0], 0.0f);  // nothing applied
}

TEST(Table, CheckpointRoundTrip) {
  HashedEmbeddingTable<float> t(16, 3, 99);
  Rng rng(4);
  t.init(0.0f, rng);
  SparseGradients<float> g(3);
  g.add(2, std::vector<float>{1, 2, 3});
  t.apply_sparse_grads(g, 0.05f);
  std::stringstream ss;
  t.save(ss);
  const auto back = HashedEmbeddingTable<float>::load(ss);
  EXPECT_EQ(back.hash_seed(), 99u);
  EXPECT_EQ(back.slot_of(12345), t.slot_of(12345));
  for (std::size_t s = 0; s < 16; ++s)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(back.row(s)[j], t.row(s)[j]);
      EXPECT_EQ(back.accumulator(s)[j], t.accumulator(s)[j]);
    }
  std::stringstream bad("UCREMBEX");
  EXPECT_THROW(HashedEmbeddingTable<float>::load(bad), ParseError);
}

TEST(Table, InitDefaultScale) {
  HashedEmbeddingTable<double> t(256, 16, 1);
  Rng rng(8);
  t.init(0.0, rng);
  double mx = 0.0;
  for (EntityId id = 0; id < 256; ++id)
    for (double v : t.peek(id)) mx = std::max(mx, std::abs(v));
  EXPECT_LE(mx, 0.25);
  EXPECT_GT(mx, 0.2);
}

TEST(Table, InitialVectorsDoNotDependOnLayout) {
  HashedEmbeddingTable<double> small(64, 4, 1), large(1u << 16, 4, 9);
  small.init(0.0, 77);
  large.init(0.0, 77);
  for (EntityId id = 1000; id < 1010; ++id) EXPECT_EQ(small.peek(id), large.peek(id));
  // the first id recorded into a slot fixes its row
  const auto a = small.peek(5);
  small.lookup(5);
  EXPECT_TRUE(small.live(small.slot_of(5)));
  EntityId other = 6;
  while (small.slot_of(other) != small.slot_of(5)) ++other;
  EXPECT_NE(small.peek(other), large.peek(other));
  EXPECT_EQ(small.peek(other), a);
}

TEST(Table, InitBoundMeanAndSeed) {
  HashedEmbeddingTable<double> t(1024, 4, 3), u(1024, 4, 3);
  t.init(0.0, 11);
  u.init(0.0, 11);
  double sum = 0.0, mx = 0.0;
  const std::size_t n_ids = 25000;  // 10^5 entries
  for (EntityId id = 0; id < n_ids; ++id) {
    const auto v = t.peek(id);
    EXPECT_EQ(v, u.peek(id));
    for (double x : v) {
      sum += x;
      mx = std::max(mx, std::abs(x));
    }
  }
  EXPECT_LE(mx, 0.5);
  const double n = 4.0 * n_ids;
  const double sigma = 0.5 / std::sqrt(3.0);
  EXPECT_LE(std::abs(sum / n), 3.0 * sigma / std::sqrt(n));
}

TEST(Table, GrowthSmallCases) {
  HashedEmbeddingTable<float> t(1u << 20, 8, 5);
  auto g = t.report_growth();
  EXPECT_EQ(g.distinct_raw_ids, 0u);
  EXPECT_EQ(g.active_parameters, 0u);
  EXPECT_EQ(g.collision_rate, 0.0);
  for (EntityId id : {11u, 22u, 33u}) t.lookup(id);
  g = t.report_growth();
  EXPECT_EQ(g.distinct_raw_ids, 3u);
  EXPECT_EQ(g.active_parameters, 24u);
  EXPECT_EQ(g.collision_rate, 0.0);
  HashedEmbeddingTable<float> one(1, 2, 5);
  for (EntityId id = 0; id < 7; ++id) one.lookup(id);
  EXPECT_DOUBLE_EQ(one.report_growth().collision_rate, 6.0 / 7.0);
}

TEST(Table, ZeroGradientLeavesRowsUnchanged) {
  HashedEmbeddingTable<double> t(8, 2, 1);
  t.init(0.0, 4);
  t.lookup(3);
  const auto before = t.peek(3);
  SparseGradients<double> g(2);
  g.add(t.slot_of(3), std::vector<double>{0.0, 0.0});
  t.apply_sparse_grads(g, 0.5);
  EXPECT_EQ(t.peek(3), before);
}
