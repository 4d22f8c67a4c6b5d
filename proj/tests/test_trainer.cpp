#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ucr/trainer.hpp"

using namespace ucr;

namespace {

SyntheticData small_data(std::uint32_t days = 3, double drift = 0.0, std::uint64_t events = 800) {
  SyntheticConfig sc;
  sc.num_users = 60;
  sc.num_days = days;
  sc.items_born_per_day = 20;
  sc.events_per_day = events;
  sc.drift_rate = drift;
  return generate_synthetic(sc);
}

ExperimentConfig small_experiment(ListStrategy s) {
  ExperimentConfig c;
  c.strategy = s;
  c.model.num_tasks = 2;
  c.model.embed_dim = 8;
  c.model.hash_size = 1024;
  c.model.list_capacity = 16;
  c.model.interaction_hidden_dims = {8};
  c.schedule.eval_head_size = 300;
  c.metric_window = 2;
  return c;
}

}  // namespace

TEST(Strategy, NamesRoundTrip) {
  for (auto s : {ListStrategy::kICSampling, ListStrategy::kUCSampling, ListStrategy::kUCClustering,
                 ListStrategy::kHybrid})
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_THROW(parse_strategy("UC"), ConfigError);
  EXPECT_EQ(formulation_for(ListStrategy::kUCClustering), Formulation::kUserCentric);
}

TEST(ExampleBuilder, ListsOnlySeeThePast) {
  const auto data = small_data(2);
  const auto& ev = data.dataset.events;
  EngagementIndex idx(2);
  idx.append_all(ev);
  ExampleBuilder b(ListStrategy::kHybrid, 8, 8, 2, 5, idx);
  std::map<std::pair<EntityId, std::uint32_t>, std::set<EntityId>> user_seen, item_seen;
  for (std::size_t i = 0; i < ev.size(); ++i) {
    const auto ex = b.build(ev[i], i);
    for (std::uint32_t k = 0; k < 2; ++k) {
      for (std::size_t j = 0; j < ex.ic_channels[k].valid_len(); ++j) {
        EXPECT_GT(ex.ic_channels[k].time_deltas[j], 0);
        EXPECT_TRUE((user_seen[{ev[i].user_id, k}].count(ex.ic_channels[k].entity_ids[j])));
      }
      for (std::size_t j = 0; j < ex.uc_channels[k].valid_len(); ++j) {
        EXPECT_GT(ex.uc_channels[k].time_deltas[j], 0);
        EXPECT_TRUE((item_seen[{ev[i].item_id, k}].count(ex.uc_channels[k].entity_ids[j])));
      }
    }
    EXPECT_EQ(ex.task_mask[ev[i].engagement_type], 1);
    EXPECT_EQ(ex.task_mask[1 - ev[i].engagement_type], 0);
    // events sharing a timestamp stay invisible to each other
    if (i + 1 == ev.size() || ev[i + 1].timestamp != ev[i].timestamp) {
      for (std::size_t j = i + 1; j-- > 0 && ev[j].timestamp == ev[i].timestamp;) {
        if (!ev[j].label) continue;
        user_seen[{ev[j].user_id, ev[j].engagement_type}].insert(ev[j].item_id);
        item_seen[{ev[j].item_id, ev[j].engagement_type}].insert(ev[j].user_id);
      }
    }
  }
}

TEST(ExampleBuilder, ReservoirIsKeyedByEventNotCallOrder) {
  const auto data = small_data(2);
  const auto& ev = data.dataset.events;
  EngagementIndex idx(2);
  idx.append_all(ev);
  ExampleBuilder b(ListStrategy::kUCSampling, 4, 4, 2, 9, idx);
  const auto late = b.build(ev.back(), ev.size() - 1);
  for (std::size_t i = 0; i < 100; ++i) b.build(ev[i], i);
  EXPECT_EQ(b.build(ev.back(), ev.size() - 1).uc_channels, late.uc_channels);
}

TEST(ExampleBuilder, ClusteringNeedsAMap) {
  EngagementIndex idx(1);
  EXPECT_THROW(ExampleBuilder(ListStrategy::kUCClustering, 4, 4, 1, 1, idx), ConfigError);
  EXPECT_THROW(ExampleBuilder(ListStrategy::kUCSampling, 4, 4, 2, 1, idx), ConfigError);
}

TEST(Recurrent, ZeroPassesEvaluatesTheInitialModel) {
  const auto data = small_data(2);
  auto cfg = small_experiment(ListStrategy::kUCSampling);
  cfg.schedule.passes_per_day = 0;
  RecurrentRunner r(data.dataset, cfg);
  RankingModel<double> m(cfg.resolved_model());
  const RankingModel<double> fresh(cfg.resolved_model());
  RecurrentOptions opt;
  opt.keep_evals = true;
  const auto res = r.run(m, opt);
  ASSERT_EQ(res.frames.size(), 2u);
  EXPECT_EQ(res.frames[0].day, 1u);
  EXPECT_FALSE(res.frames[0].absent);
  EXPECT_EQ(res.frames[0].eval_examples, 300u);
  EXPECT_TRUE(res.frames[1].absent);
  EXPECT_FALSE(res.frames[1].mean_nce.has_value());

  // recompute day-2 head predictions from an untouched model
  const auto b = r.builder();
  std::vector<double> p[2];
  std::vector<std::uint8_t> y[2];
  for (std::size_t j = 0; j < 300; ++j) {
    const auto& e = r.days()[1][j];
    const auto pr = fresh.predict(b.build(e, r.day_offset(1) + j));
    p[e.engagement_type].push_back(pr[e.engagement_type]);
    y[e.engagement_type].push_back(e.label);
  }
  for (int k = 0; k < 2; ++k) EXPECT_NEAR(*res.frames[0].nce[k], nce(p[k], y[k]), 1e-12);
  EXPECT_NEAR(*res.frames[0].mean_nce, (nce(p[0], y[0]) + nce(p[1], y[1])) / 2, 1e-12);
  ASSERT_EQ(res.evals.size(), 1u);
  EXPECT_EQ(res.evals[0].predictions.size(), 300u);
}

TEST(Recurrent, TrainingImprovesOverTheInitialModel) {
  const auto data = small_data(8, 0.0, 4000);
  auto cfg = small_experiment(ListStrategy::kICSampling);
  cfg.schedule.check_base_rate = true;
  RecurrentRunner r(data.dataset, cfg);
  RankingModel<float> m(cfg.resolved_model());
  std::vector<std::uint32_t> seen;
  RecurrentOptions opt;
  opt.on_frame = [&](const MetricsFrame& f) { seen.push_back(f.day); };
  const auto res = r.run(m, opt);
  EXPECT_EQ(seen, (std::vector<std::uint32_t>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_LT(*res.frames[6].mean_nce, *res.frames[0].mean_nce);
  EXPECT_GT(res.frames[3].tables.at(0).active_parameters, res.frames[0].tables.at(0).active_parameters);
  EXPECT_EQ(res.frames[0].segment_edges.size() + 1, res.frames[0].segment_nce.size());
}

TEST(Recurrent, TrainDaysLimitsTheRun) {
  const auto data = small_data(3);
  const auto cfg = small_experiment(ListStrategy::kUCSampling);
  RecurrentRunner r(data.dataset, cfg);
  RankingModel<float> m(cfg.resolved_model());
  RecurrentOptions opt;
  opt.train_days = 2;
  const auto res = r.run(m, opt);
  ASSERT_EQ(res.frames.size(), 2u);
  EXPECT_FALSE(res.frames[1].absent);
}

TEST(Recurrent, ClusteringUpdatesOncePerDay) {
  const auto data = small_data(3);
  auto cfg = small_experiment(ListStrategy::kUCClustering);
  cfg.clusters.max_cluster_size = 8;
  RecurrentRunner r(data.dataset, cfg);
  RankingModel<float> m(cfg.resolved_model());
  const auto res = r.run(m);
  ASSERT_EQ(res.cluster_updates.size(), 3u);
  for (const auto& [c, n] : r.clusters().sizes()) EXPECT_LE(n, 8u);
  EXPECT_GT(r.clusters().num_assigned(), 0u);
}

TEST(Recurrent, RejectsMismatchedModels) {
  const auto data = small_data(2);
  auto cfg = small_experiment(ListStrategy::kUCSampling);
  RecurrentRunner r(data.dataset, cfg);
  auto mc = cfg.resolved_model();
  mc.formulation = Formulation::kItemCentric;
  RankingModel<float> m(mc);
  EXPECT_THROW(r.run(m), ConfigError);
  cfg.model.num_tasks = 3;
  EXPECT_THROW(RecurrentRunner(data.dataset, cfg), ConfigError);
}

TEST(Summary, AveragesTrailingEvaluatedFrames) {
  std::vector<MetricsFrame> f(4);
  f[0].mean_nce = 0.9;
  f[1].mean_nce = 0.8;
  f[2].mean_nce = 0.7;
  f[3].absent = true;
  EXPECT_NEAR(*summary_nce(f, 2), 0.75, 1e-12);
  EXPECT_NEAR(*summary_nce(f, 10), 0.8, 1e-12);
  EXPECT_FALSE(summary_nce(std::span<const MetricsFrame>(f).subspan(3), 2).has_value());
}

TEST(Sweep, RelativeColumnAgainstBaseline) {
  const auto data = small_data(3);
  const auto base = small_experiment(ListStrategy::kUCSampling);
  std::vector<std::string> ran;
  const auto t = run_sweep(data.dataset, base, "embed_dim", {"4", "8"}, 0,
                           [&](const std::string& v, const RecurrentResult&) { ran.push_back(v); });
  EXPECT_EQ(ran, (std::vector<std::string>{"4", "8"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_TRUE(t.rows[0].baseline);
  EXPECT_NEAR(*t.rows[1].relative_pct, 100.0 * (*t.rows[1].metric / *t.rows[0].metric - 1.0), 1e-12);
  const auto text = t.table().str();
  EXPECT_NE(text.find("relative_%"), std::string::npos);
  EXPECT_NE(text.find(format_relative(*t.rows[1].relative_pct, false)), std::string::npos);
  EXPECT_THROW(run_sweep(data.dataset, base, "depth", {"1"}), ConfigError);
  EXPECT_THROW(run_sweep(data.dataset, base, "hash_size", {"0"}), ConfigError);
  EXPECT_THROW(run_sweep(data.dataset, base, "hash_size", {"8"}, 3), ConfigError);
}

TEST(DriftProbe, WindowsPartitionTheEvents) {
  const auto data = small_data(3);
  const auto cfg = small_experiment(ListStrategy::kUCSampling);
  RecurrentRunner r(data.dataset, cfg);
  RankingModel<float> m(cfg.resolved_model());
  const auto& ev = data.dataset.events;
  const Timestamp start = data.dataset.meta.day_boundaries[1];
  const auto s = run_drift_probe(m, r.builder(), std::span<const InteractionEvent>(ev), 0, start,
                                 kSecondsPerDay / 4, 12, 2);
  ASSERT_EQ(s.nce.size(), 12u);
  std::size_t total = 0;
  for (auto n : s.examples) total += n;
  const auto expected = static_cast<std::size_t>(
      std::count_if(ev.begin(), ev.end(), [&](const auto& e) { return e.timestamp >= start; }));
  EXPECT_EQ(total, expected);
  EXPECT_EQ(s.window_start[1] - s.window_start[0], kSecondsPerDay / 4);
  EXPECT_EQ(s.examples.back(), 0u);  // past the end of the log
  EXPECT_FALSE(s.nce.back().has_value());
  EXPECT_THROW(run_drift_probe(m, r.builder(), std::span<const InteractionEvent>(ev), 0, start, 0, 1, 2),
               ConfigError);
}

TEST(MovieLens, ProtocolOnASmallRatingsFile) {
  // ratings derived from a synthetic log: positives get 5 stars
  const auto data = small_data(3);
  std::stringstream csv;
  csv << "userId,movieId,rating,timestamp\n";
  for (const auto& e : data.dataset.events)
    if (e.engagement_type == 0) csv << e.user_id << "," << e.item_id << "," << (e.label ? 5.0 : 2.0) << "," << e.timestamp << "\n";
  MovieLensRunConfig cfg;
  cfg.protocol.ic_list_cap = 16;
  cfg.protocol.uc_list_cap = 16;
  cfg.model.embed_dim = 8;
  cfg.model.hash_size = 4096;
  cfg.model.interaction_hidden_dims = {8};
  const auto ds = parse_movielens(csv, cfg.protocol);
  std::vector<std::string> log;
  const auto res = run_movielens(ds, cfg, [&](const std::string& s) { log.push_back(s); });
  EXPECT_EQ(res.train_events + res.test_events, ds.events.size());
  ASSERT_EQ(res.rows.size(), 3u);
  for (const auto& row : res.rows) {
    ASSERT_TRUE(row.auc.has_value());
    EXPECT_GT(*row.auc, 0.0);
    EXPECT_LT(*row.auc, 1.0);
    EXPECT_EQ(row.test_examples, res.test_events);
  }
  EXPECT_TRUE(res.auc_of(Formulation::kHybrid).has_value());
  EXPECT_EQ(log.size(), 6u);
}

TEST(ExperimentConfig, JsonRoundTrip) {
  auto c = small_experiment(ListStrategy::kHybrid);
  c.name = "x";
  c.clusters.max_cluster_size = 33;
  const nlohmann::json j = c;
  EXPECT_EQ(j.at("strategy"), "Hybrid");
  const auto back = j.get<ExperimentConfig>();
  EXPECT_EQ(back.clusters.max_cluster_size, 33u);
  EXPECT_EQ(back.resolved_model().formulation, Formulation::kHybrid);
  EXPECT_EQ(nlohmann::json::parse(R"({"strategy":"Hybrid"})").get<ExperimentConfig>().model.embed_dim, 32u);
}
