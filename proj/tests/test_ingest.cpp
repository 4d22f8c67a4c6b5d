#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "ucr/ingest.hpp"

using namespace ucr;

namespace {

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.num_users = 100;
  c.num_days = 6;
  c.items_born_per_day = 50;
  c.item_lifespan_days = 2;
  c.events_per_day = 3000;
  return c;
}

}  // namespace

TEST(MovieLens, ParsesThresholdsAndSorts) {
  std::stringstream ss("userId,movieId,rating,timestamp\n1,10,4.0,300\n2,10,3.5,100\n1,11,5,100\n");
  const auto ds = parse_movielens(ss);
  ASSERT_EQ(ds.events.size(), 3u);
  EXPECT_EQ(ds.events[0].user_id, 2u);  // stable among equal timestamps
  EXPECT_EQ(ds.events[1].item_id, 11u);
  EXPECT_EQ(ds.events[0].label, 0);
  EXPECT_EQ(ds.events[1].label, 1);
  EXPECT_EQ(ds.events[2].label, 1);  // 4.0 counts as positive
  EXPECT_EQ(ds.meta.num_tasks, 1u);
}

TEST(MovieLens, MalformedLineIsNamed) {
  std::stringstream ss("userId,movieId,rating,timestamp\n1,10,4.0,300\n1,10,four,300\n");
  try {
    parse_movielens(ss);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  std::stringstream empty("userId,movieId,rating,timestamp\n");
  EXPECT_THROW(parse_movielens(empty), ParseError);
}

TEST(MovieLens, UserSubsampleIsPerUser) {
  std::stringstream text;
  for (int u = 1; u <= 400; ++u)
    for (int r = 0; r < 3; ++r) text << u << ',' << r << ",4," << u * 10 + r << '\n';
  MovieLensProtocolConfig cfg;
  cfg.user_fraction = 0.25;
  std::stringstream a(text.str()), b(text.str());
  const auto da = parse_movielens(a, cfg);
  const auto db = parse_movielens(b, cfg);
  EXPECT_EQ(da.events, db.events);
  std::map<EntityId, int> per_user;
  for (const auto& e : da.events) ++per_user[e.user_id];
  for (const auto& [u, n] : per_user) EXPECT_EQ(n, 3);
  EXPECT_NEAR(static_cast<double>(per_user.size()) / 400.0, 0.25, 0.07);
}

TEST(MovieLens, TemporalSplitPerUser) {
  std::vector<InteractionEvent> ev;
  for (int i = 0; i < 10; ++i) ev.push_back({1, static_cast<EntityId>(100 + i), i, 0, 1});
  ev.push_back({2, 5, 3, 0, 1});
  ev.push_back({3, 5, 4, 0, 1});
  ev.push_back({3, 6, 4, 0, 0});
  std::stable_sort(ev.begin(), ev.end(), [](auto& a, auto& b) { return a.timestamp < b.timestamp; });
  const auto split = movielens_split(ev);
  std::map<EntityId, std::vector<InteractionEvent>> train, test;
  for (const auto& e : split.train) train[e.user_id].push_back(e);
  for (const auto& e : split.test) test[e.user_id].push_back(e);
  EXPECT_EQ(train[1].size(), 8u);
  EXPECT_EQ(test[1].size(), 2u);
  EXPECT_LT(train[1].back().timestamp, test[1].front().timestamp);
  EXPECT_EQ(train[2].size(), 1u);  // single event stays in train
  EXPECT_EQ(test[2].size(), 0u);
  ASSERT_EQ(test[3].size(), 1u);  // same-time tie broken by item id
  EXPECT_EQ(test[3][0].item_id, 6u);
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic(small_config());
  const auto b = generate_synthetic(small_config());
  EXPECT_EQ(a.dataset.events, b.dataset.events);
  auto c = small_config();
  c.rng_seed = 2;
  EXPECT_NE(generate_synthetic(c).dataset.events, a.dataset.events);
}

TEST(Synthetic, ItemsLiveOnlyForTheirLifespan) {
  const auto cfg = small_config();
  const auto data = generate_synthetic(cfg);
  const auto days = split_by_days(data.dataset.events, data.dataset.meta.day_boundaries);
  ASSERT_EQ(days.size(), cfg.num_days);
  for (std::size_t d = 0; d < days.size(); ++d) {
    EXPECT_EQ(days[d].size(), cfg.events_per_day);
    for (const auto& e : days[d]) {
      const auto born = (e.item_id - kSyntheticItemBase) / cfg.items_born_per_day;
      EXPECT_LE(born, d);
      EXPECT_LT(d, born + cfg.item_lifespan_days);
      EXPECT_LT(e.engagement_type, cfg.num_tasks);
    }
  }
  EXPECT_EQ(data.sidecar.days.back().cumulative_born, cfg.items_born_per_day * cfg.num_days);
  EXPECT_EQ(data.sidecar.days[3].live_items, cfg.items_born_per_day * cfg.item_lifespan_days);
}

TEST(Synthetic, ZipfPopularityWithinCohort) {
  auto cfg = small_config();
  cfg.num_days = 1;
  cfg.items_born_per_day = 200;
  cfg.events_per_day = 50000;
  cfg.popularity_skew = 1.1;
  const auto data = generate_synthetic(cfg);
  // Rank of each item recovered from its weight; compare the empirical rank
  // CDF with the Zipf CDF (Kolmogorov-Smirnov, alpha = 0.01).
  const std::size_t n_items = cfg.items_born_per_day;
  std::vector<double> zipf(n_items);
  double total = 0.0;
  for (std::size_t r = 0; r < n_items; ++r) total += zipf[r] = std::pow(static_cast<double>(r + 1), -1.1);
  std::vector<double> hits(n_items, 0.0);
  for (const auto& e : data.dataset.events) {
    const double w = data.item_weight[e.item_id - kSyntheticItemBase];
    const auto rank = static_cast<std::size_t>(std::llround(std::pow(w, -1.0 / 1.1)));
    ASSERT_GE(rank, 1u);
    hits[rank - 1] += 1.0;
  }
  const double n = static_cast<double>(data.dataset.events.size());
  double cdf_e = 0.0, cdf_t = 0.0, d_max = 0.0;
  for (std::size_t r = 0; r < n_items; ++r) {
    cdf_e += hits[r] / n;
    cdf_t += zipf[r] / total;
    d_max = std::max(d_max, std::abs(cdf_e - cdf_t));
  }
  EXPECT_LT(d_max, 1.628 / std::sqrt(n));
}

TEST(Synthetic, DistinctItemsMatchOccupancyFormula) {
  auto cfg = small_config();
  cfg.num_days = 1;
  cfg.items_born_per_day = 2000;
  cfg.events_per_day = 3000;
  // E[distinct] = sum_j 1 - (1 - w_j / W)^N over the live items.
  double mean = 0.0, var = 0.0;
  double observed = 0.0;
  const int reps = 5;
  for (int rep = 0; rep < reps; ++rep) {
    cfg.rng_seed = 100 + rep;
    const auto data = generate_synthetic(cfg);
    double W = 0.0;
    for (double w : data.item_weight) W += w;
    mean = var = 0.0;
    for (double w : data.item_weight) {
      const double miss = std::pow(1.0 - w / W, static_cast<double>(cfg.events_per_day));
      mean += 1.0 - miss;
      var += miss * (1.0 - miss);  // upper bound; occupancies are negatively correlated
    }
    observed += static_cast<double>(data.sidecar.days[0].distinct_items);
  }
  observed /= reps;
  EXPECT_NEAR(observed, mean, 4.0 * std::sqrt(var / reps));
}

TEST(Synthetic, SegmentShares) {
  auto cfg = small_config();
  cfg.num_users = 500;
  cfg.events_per_day = 40000;
  cfg.num_days = 1;
  const auto data = generate_synthetic(cfg);
  std::vector<double> share(5, 0.0);
  for (const auto& e : data.dataset.events) share[data.sidecar.user_segment.at(e.user_id)] += 1.0;
  for (std::size_t s = 0; s < 5; ++s)
    EXPECT_NEAR(share[s] / 40000.0, cfg.activeness_segment_weights[s], 0.01) << "segment " << s;
}

TEST(Synthetic, SidecarRoundTrip) {
  const auto data = generate_synthetic(small_config());
  std::stringstream ss;
  write_sidecar(ss, data.sidecar);
  const auto back = read_sidecar(ss);
  EXPECT_EQ(back.num_users, data.sidecar.num_users);
  EXPECT_EQ(back.days.size(), data.sidecar.days.size());
  EXPECT_EQ(back.days[4].cumulative_items, data.sidecar.days[4].cumulative_items);
  EXPECT_EQ(back.user_segment, data.sidecar.user_segment);
  std::stringstream bad("num_users=12\nbogus=1\n");
  EXPECT_THROW(read_sidecar(bad), ParseError);
}

TEST(Synthetic, ConfigValidation) {
  auto c = small_config();
  c.activeness_segment_weights = {0.5, 0.5, 0.1, 0.1, 0.1};
  EXPECT_THROW(generate_synthetic(c), ConfigError);
  c = small_config();
  c.items_born_per_day = 0;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
}
