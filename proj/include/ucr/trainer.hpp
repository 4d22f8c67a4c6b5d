#ifndef UCR_TRAINER_HPP
#define UCR_TRAINER_HPP

// Example construction per list strategy, recurrent day-by-day training,
// drift probes, sweeps and the MovieLens protocol.

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "ucr/clustering.hpp"
#include "ucr/ingest.hpp"
#include "ucr/listbuilder.hpp"
#include "ucr/metrics.hpp"
#include "ucr/model.hpp"

namespace ucr {

enum class ListStrategy { kICSampling, kUCSampling, kUCClustering, kHybrid };

inline const char* to_string(ListStrategy s) {
  switch (s) {
    case ListStrategy::kICSampling: return "IC-Sampling";
    case ListStrategy::kUCSampling: return "UC-Sampling";
    case ListStrategy::kUCClustering: return "UC-Clustering";
    case ListStrategy::kHybrid: return "Hybrid";
  }
  return "?";
}

inline ListStrategy parse_strategy(std::string_view s) {
  for (auto v : {ListStrategy::kICSampling, ListStrategy::kUCSampling, ListStrategy::kUCClustering,
                 ListStrategy::kHybrid})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown list strategy '" + std::string(s) +
                    "' (expected IC-Sampling, UC-Sampling, UC-Clustering or Hybrid)");
}

inline Formulation formulation_for(ListStrategy s) {
  switch (s) {
    case ListStrategy::kICSampling: return Formulation::kItemCentric;
    case ListStrategy::kHybrid: return Formulation::kHybrid;
    default: return Formulation::kUserCentric;
  }
}

UCR_STRICT_JSON_ENUM(ListStrategy, {{ListStrategy::kICSampling, "IC-Sampling"},
                                            {ListStrategy::kUCSampling, "UC-Sampling"},
                                            {ListStrategy::kUCClustering, "UC-Clustering"},
                                            {ListStrategy::kHybrid, "Hybrid"}})

struct RecurrentSchedule {
  std::size_t eval_head_size = 10000;
  std::size_t passes_per_day = 1;
  bool warm_start = true;
  std::size_t batch_size = 64;
  // Assert that a base-rate predictor scores NCE = 1 on every eval window.
  bool check_base_rate = false;

  void validate() const {
    if (eval_head_size == 0) throw ConfigError("eval_head_size must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RecurrentSchedule, eval_head_size, passes_per_day, warm_start,
                                                batch_size, check_base_rate)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClusterConstraints, max_cluster_size, max_remap_ratio)

struct ExperimentConfig {
  std::string name = "run";
  ModelConfig model;
  ListStrategy strategy = ListStrategy::kUCSampling;
  RecurrentSchedule schedule;
  ClusterConstraints clusters;
  double cluster_decay = 0.5;
  std::uint64_t list_seed = 11;
  // Trailing evaluated days averaged into a run's summary NCE.
  std::size_t metric_window = 7;

  /// The model formulation follows from the strategy.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.formulation = formulation_for(strategy);
    return m;
  }

  void validate() const {
    resolved_model().validate();
    schedule.validate();
    clusters.validate();
    if (metric_window == 0) throw ConfigError("metric_window must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, name, model, strategy, schedule, clusters,
                                                cluster_decay, list_seed, metric_window)

/// Builds examples for one strategy from a time-ordered engagement index.
/// Lists only see engagements strictly before the example's timestamp.
class ExampleBuilder {
 public:
  ExampleBuilder(ListStrategy strategy, std::size_t ic_cap, std::size_t uc_cap, std::uint32_t num_tasks,
                 std::uint64_t list_seed, const EngagementIndex& index, const ClusterMap* clusters = nullptr)
      : strategy_(strategy), ic_cap_(ic_cap), uc_cap_(uc_cap), num_tasks_(num_tasks), seed_(list_seed),
        index_(&index), clusters_(clusters) {
    if (strategy_ == ListStrategy::kUCClustering && !clusters_)
      throw ConfigError("UC-Clustering needs a cluster map");
    if (index.num_types() != num_tasks_) throw ConfigError("engagement index and task count disagree");
  }

  /// `ordinal` identifies the event (its position in the log); the reservoir
  /// stream for a UC list is keyed by (seed, item, ordinal, type).
  Example build(const InteractionEvent& e, std::uint64_t ordinal) const {
    if (e.engagement_type >= num_tasks_) throw RangeError("engagement type out of range");
    Example ex;
    ex.example_id = ordinal;
    ex.user = e.user_id;
    ex.item = e.item_id;
    ex.time = e.timestamp;
    ex.labels.assign(num_tasks_, 0);
    ex.task_mask.assign(num_tasks_, 0);
    ex.labels[e.engagement_type] = e.label ? 1 : 0;
    ex.task_mask[e.engagement_type] = 1;
    const Formulation f = formulation_for(strategy_);
    for (std::uint32_t k = 0; k < num_tasks_; ++k) {
      if (f != Formulation::kUserCentric)
        ex.ic_channels.push_back(build_ic_list(*index_, e.user_id, e.timestamp, k, ic_cap_));
      if (f != Formulation::kItemCentric) {
        if (strategy_ == ListStrategy::kUCClustering) {
          ex.uc_channels.push_back(build_uc_clustered_list(*index_, *clusters_, e.item_id, e.timestamp, k, uc_cap_));
        } else {
          SplitMix64 gen(derive_seed(seed_, e.item_id, ordinal, k));
          ex.uc_channels.push_back(build_uc_sampled_list(*index_, e.item_id, e.timestamp, k, uc_cap_, gen));
        }
      }
    }
    return ex;
  }

 private:
  ListStrategy strategy_;
  std::size_t ic_cap_;
  std::size_t uc_cap_;
  std::uint32_t num_tasks_;
  std::uint64_t seed_;
  const EngagementIndex* index_;
  const ClusterMap* clusters_;
};

/// One mini-batch step: mean loss over the batch, one optimizer update.
template <class Real>
double train_batch(RankingModel<Real>& model, std::span<const Example> batch, Gradients<Real>& g) {
  if (batch.empty()) return 0.0;
  g.clear();
  const Real scale = Real(1) / static_cast<Real>(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) {
    model.record_lookups(ex);
    total += static_cast<double>(model.loss_and_backward(ex, model.forward(ex), g, scale));
  }
  model.apply(g);
  return total / static_cast<double>(batch.size());
}

/// Predictions of one evaluation window, one entry per example (the
/// supervised task's probability).
struct EvalRecord {
  std::uint32_t day = 0;
  std::vector<double> predictions;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint32_t> tasks;
  std::vector<EntityId> users;
};

template <class Real>
EvalRecord evaluate_examples(const RankingModel<Real>& model, std::span<const Example> examples) {
  EvalRecord r;
  for (const auto& ex : examples) {
    const auto p = model.predict(ex);
    for (std::uint32_t k = 0; k < ex.task_mask.size(); ++k) {
      if (!ex.task_mask[k]) continue;
      r.predictions.push_back(static_cast<double>(p[k]));
      r.labels.push_back(ex.labels[k]);
      r.tasks.push_back(k);
      r.users.push_back(ex.user);
    }
  }
  return r;
}

/// Per-task NCE/AUC and their task mean.
inline void fill_task_metrics(MetricsFrame& f, const EvalRecord& r, std::uint32_t num_tasks,
                              bool check_base_rate = false) {
  f.nce.assign(num_tasks, std::nullopt);
  f.auc.assign(num_tasks, std::nullopt);
  f.positive_rate.assign(num_tasks, 0.0);
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::uint32_t k = 0; k < num_tasks; ++k) {
    std::vector<double> p;
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < r.tasks.size(); ++i)
      if (r.tasks[i] == k) {
        p.push_back(r.predictions[i]);
        y.push_back(r.labels[i]);
      }
    if (y.empty()) continue;
    const double rate =
        static_cast<double>(std::count(y.begin(), y.end(), std::uint8_t{1})) / static_cast<double>(y.size());
    f.positive_rate[k] = rate;
    f.nce[k] = try_metric([&] { return nce(p, y); });
    f.auc[k] = try_metric([&] { return auc(p, y); });
    if (check_base_rate && f.nce[k]) {
      const std::vector<double> base(y.size(), rate);
      const double b = nce(base, y);
      if (std::abs(b - 1.0) > 1e-9) throw TrainingError("base-rate self-check failed: NCE " + format_number(b, 12));
    }
    if (f.nce[k]) {
      sum += *f.nce[k];
      ++defined;
    }
  }
  if (defined) f.mean_nce = sum / static_cast<double>(defined);
}

template <class Real>
std::vector<TableStats> table_stats(const RankingModel<Real>& model) {
  std::vector<TableStats> out;
  auto add = [&](const HashedEmbeddingTable<Real>* t, const char* name) {
    if (!t) return;
    const auto g = t->report_growth();
    out.push_back({name, g.distinct_raw_ids, g.distinct_slots, g.active_parameters, g.collision_rate});
  };
  add(model.item_table(), "item");
  add(model.user_table(), "user");
  return out;
}

struct RecurrentResult {
  std::vector<MetricsFrame> frames;
  std::vector<EvalRecord> evals;  // one per evaluated day, when kept
  std::unordered_map<EntityId, double> user_counts;
  std::vector<ClusterUpdateStats> cluster_updates;
};

struct RecurrentOptions {
  // Number of leading days to train on; 0 trains on every day.
  std::size_t train_days = 0;
  bool keep_evals = false;
  std::function<void(const MetricsFrame&)> on_frame;
};

/// Holds a dataset split into days, the engagement index over the whole log
/// and the incremental cluster state of one run.
class RecurrentRunner {
 public:
  RecurrentRunner(const Dataset& data, ExperimentConfig cfg)
      : cfg_(std::move(cfg)), index_(data.meta.num_tasks), clusterer_(cfg_.clusters, cfg_.cluster_decay) {
    cfg_.validate();
    if (cfg_.model.num_tasks != data.meta.num_tasks)
      throw ConfigError("model num_tasks (" + std::to_string(cfg_.model.num_tasks) + ") does not match dataset (" +
                        std::to_string(data.meta.num_tasks) + ")");
    days_ = split_by_days(data.events, data.meta.day_boundaries);
    index_.append_all(data.events);
    std::uint64_t ord = 0;
    for (const auto& day : days_) {
      day_offsets_.push_back(ord);
      ord += day.size();
    }
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::vector<std::vector<InteractionEvent>>& days() const { return days_; }
  const EngagementIndex& index() const { return index_; }
  const ClusterMap& clusters() const { return clusterer_.map(); }
  std::uint64_t day_offset(std::size_t d) const { return day_offsets_.at(d); }

  ExampleBuilder builder() const {
    const auto cap = cfg_.model.list_capacity;
    return ExampleBuilder(cfg_.strategy, cap, cap, cfg_.model.num_tasks, cfg_.list_seed, index_,
                          &clusterer_.map());
  }

  /// Trains day by day. After training day t the frozen model is evaluated
  /// on the first eval_head_size events of day t + 1; the frame's `day` is
  /// the number of days trained. A last trained day without a following day
  /// yields an absent frame that still carries table growth.
  template <class Real>
  RecurrentResult run(RankingModel<Real>& model, const RecurrentOptions& opt = {}) {
    if (model.config().formulation != formulation_for(cfg_.strategy))
      throw ConfigError(std::string("model formulation does not match strategy ") + to_string(cfg_.strategy));
    const std::size_t n_days = opt.train_days ? std::min(opt.train_days, days_.size()) : days_.size();
    const auto& sch = cfg_.schedule;
    const ExampleBuilder b = builder();
    RecurrentResult res;
    auto grads = model.make_gradients();
    std::vector<Example> batch;
    for (std::size_t t = 0; t < n_days; ++t) {
      if (!sch.warm_start && t > 0) model.initialize();
      const auto& day = days_[t];
      for (std::size_t pass = 0; pass < sch.passes_per_day; ++pass) {
        for (std::size_t i = 0; i < day.size(); i += sch.batch_size) {
          batch.clear();
          const std::size_t end = std::min(day.size(), i + sch.batch_size);
          for (std::size_t j = i; j < end; ++j) batch.push_back(b.build(day[j], day_offsets_[t] + j));
          train_batch(model, std::span<const Example>(batch), grads);
        }
      }
      for (const auto& e : day) res.user_counts[e.user_id] += 1.0;
      if (cfg_.strategy == ListStrategy::kUCClustering)
        res.cluster_updates.push_back(clusterer_.update(project_coengagement(day)));

      MetricsFrame f;
      f.run = cfg_.name;
      f.day = static_cast<std::uint32_t>(t + 1);
      f.tables = table_stats(model);
      const bool has_next = t + 1 < days_.size();
      const std::size_t head = has_next ? std::min(sch.eval_head_size, days_[t + 1].size()) : 0;
      if (head == 0) {
        f.absent = true;
        f.nce.assign(cfg_.model.num_tasks, std::nullopt);
        f.auc.assign(cfg_.model.num_tasks, std::nullopt);
        f.positive_rate.assign(cfg_.model.num_tasks, 0.0);
      } else {
        std::vector<Example> eval;
        eval.reserve(head);
        for (std::size_t j = 0; j < head; ++j) eval.push_back(b.build(days_[t + 1][j], day_offsets_[t + 1] + j));
        EvalRecord rec = evaluate_examples(model, std::span<const Example>(eval));
        rec.day = f.day;
        f.eval_examples = head;
        fill_task_metrics(f, rec, cfg_.model.num_tasks, sch.check_base_rate);
        const auto seg = segment_report(rec.predictions, rec.predictions, rec.labels, rec.users, res.user_counts);
        f.segment_edges = seg.edges;
        for (const auto& bk : seg.buckets) f.segment_nce.push_back(bk.nce_a);
        if (opt.keep_evals) res.evals.push_back(std::move(rec));
      }
      if (opt.on_frame) opt.on_frame(f);
      res.frames.push_back(std::move(f));
    }
    return res;
  }

 private:
  ExperimentConfig cfg_;
  std::vector<std::vector<InteractionEvent>> days_;
  std::vector<std::uint64_t> day_offsets_;
  EngagementIndex index_;
  IncrementalClusterer clusterer_;
};

/// Mean task-averaged NCE over the last `window` evaluated frames.
inline std::optional<double> summary_nce(std::span<const MetricsFrame> frames, std::size_t window) {
  double s = 0.0;
  std::size_t n = 0;
  for (auto it = frames.rbegin(); it != frames.rend() && n < window; ++it) {
    if (it->absent || !it->mean_nce) continue;
    s += *it->mean_nce;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// drift probe

struct DriftSeries {
  std::vector<Timestamp> window_start;
  std::vector<std::size_t> examples;
  std::vector<std::optional<double>> nce;  // absent for empty or degenerate windows
};

/// Evaluates a frozen model on consecutive windows of `window_seconds`
/// starting at `start`. `events` must be time-ordered; `first_ordinal` is
/// the log position of events[0].
template <class Real>
DriftSeries run_drift_probe(const RankingModel<Real>& model, const ExampleBuilder& builder,
                            std::span<const InteractionEvent> events, std::uint64_t first_ordinal, Timestamp start,
                            Timestamp window_seconds, std::size_t num_windows, std::uint32_t num_tasks) {
  if (window_seconds <= 0) throw ConfigError("drift window must be positive");
  DriftSeries out;
  std::size_t i = 0;
  while (i < events.size() && events[i].timestamp < start) ++i;
  for (std::size_t w = 0; w < num_windows; ++w) {
    const Timestamp lo = start + static_cast<Timestamp>(w) * window_seconds;
    const Timestamp hi = lo + window_seconds;
    std::vector<Example> ex;
    for (; i < events.size() && events[i].timestamp < hi; ++i) ex.push_back(builder.build(events[i], first_ordinal + i));
    out.window_start.push_back(lo);
    out.examples.push_back(ex.size());
    if (ex.empty()) {
      out.nce.push_back(std::nullopt);
      continue;
    }
    MetricsFrame f;
    fill_task_metrics(f, evaluate_examples(model, std::span<const Example>(ex)), num_tasks);
    out.nce.push_back(f.mean_nce);
  }
  return out;
}

// ---------------------------------------------------------------------------
// sweeps

struct SweepRow {
  std::string value;
  std::optional<double> metric;
  std::optional<double> relative_pct;
  bool baseline = false;
};

struct SweepTable {
  std::string axis;
  std::vector<SweepRow> rows;

  ColumnTable table() const {
    ColumnTable t({axis, "nce", "relative_%"});
    for (const auto& r : rows)
      t.add_row({r.value, format_optional(r.metric),
                 r.baseline ? "-" : (r.relative_pct ? format_relative(*r.relative_pct, false) : "NA")});
    return t;
  }
};

/// Applies one axis value to a config. Axes: hash_size, embed_dim,
/// list_capacity, num_heads, pooling, strategy, time_encoding.
inline void apply_axis(ExperimentConfig& cfg, const std::string& axis, const std::string& value) {
  auto as_u64 = [&] {
    std::uint64_t v = 0;
    if (!detail::parse_number(value, v) || v == 0)
      throw ConfigError("sweep value '" + value + "' for axis " + axis + " is not a positive integer");
    return v;
  };
  if (axis == "hash_size") cfg.model.hash_size = as_u64();
  else if (axis == "embed_dim") cfg.model.embed_dim = static_cast<std::size_t>(as_u64());
  else if (axis == "list_capacity") cfg.model.list_capacity = static_cast<std::size_t>(as_u64());
  else if (axis == "num_heads") cfg.model.num_heads = static_cast<std::size_t>(as_u64());
  else if (axis == "pooling") cfg.model.pooling = parse_pooling(value);
  else if (axis == "strategy") cfg.strategy = parse_strategy(value);
  else if (axis == "time_encoding") {
    if (value != "true" && value != "false") throw ConfigError("time_encoding sweep values must be true or false");
    cfg.model.time_encoding = value == "true";
  } else {
    throw ConfigError("unknown sweep axis '" + axis +
                      "' (expected hash_size, embed_dim, list_capacity, num_heads, pooling, strategy or "
                      "time_encoding)");
  }
}

/// Runs one recurrent experiment per axis value and reports each run's
/// summary NCE relative to the baseline row: 100 * (nce / nce_base - 1).
inline SweepTable run_sweep(const Dataset& data, const ExperimentConfig& base, const std::string& axis,
                            const std::vector<std::string>& values, std::size_t baseline_index = 0,
                            const std::function<void(const std::string&, const RecurrentResult&)>& on_run = {}) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (baseline_index >= values.size()) throw ConfigError("sweep baseline index out of range");
  SweepTable out{axis, {}};
  for (const auto& v : values) {
    ExperimentConfig cfg = base;
    apply_axis(cfg, axis, v);
    cfg.name = base.name + "/" + axis + "=" + v;
    cfg.validate();
    RecurrentRunner runner(data, cfg);
    RankingModel<float> model(cfg.resolved_model());
    const auto res = runner.run(model);
    if (on_run) on_run(v, res);
    out.rows.push_back({v, summary_nce(res.frames, cfg.metric_window), std::nullopt, false});
  }
  out.rows[baseline_index].baseline = true;
  const auto& b = out.rows[baseline_index].metric;
  for (auto& r : out.rows)
    if (!r.baseline && r.metric && b) r.relative_pct = 100.0 * (*r.metric / *b - 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// MovieLens protocol

struct MovieLensRunConfig {
  MovieLensProtocolConfig protocol;
  ModelConfig model;  // formulation is overridden per run; pooling is kept
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t list_seed = 11;
};

struct MovieLensRow {
  Formulation formulation = Formulation::kItemCentric;
  std::optional<double> auc;
  std::size_t test_examples = 0;
};

struct MovieLensResult {
  std::size_t train_events = 0;
  std::size_t test_events = 0;
  std::vector<MovieLensRow> rows;  // IC, UC, hybrid

  std::optional<double> auc_of(Formulation f) const {
    for (const auto& r : rows)
      if (r.formulation == f) return r.auc;
    return std::nullopt;
  }
};

/// Temporal per-user split, then one model per formulation trained in time
/// order on the training events and scored by test AUC. Lists are built from
/// training engagements strictly before each example's time.
inline MovieLensResult run_movielens(const Dataset& data, const MovieLensRunConfig& cfg,
                                     const std::function<void(const std::string&)>& log = {}) {
  cfg.protocol.validate();
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
  const auto split = movielens_split(data.events, cfg.protocol);
  MovieLensResult out;
  out.train_events = split.train.size();
  out.test_events = split.test.size();
  EngagementIndex index(1);
  index.append_all(split.train);
  for (auto strategy : {ListStrategy::kICSampling, ListStrategy::kUCSampling, ListStrategy::kHybrid}) {
    ModelConfig mc = cfg.model;
    mc.formulation = formulation_for(strategy);
    mc.num_tasks = 1;
    mc.list_capacity = std::max(cfg.protocol.ic_list_cap, cfg.protocol.uc_list_cap);
    RankingModel<float> model(mc);
    ExampleBuilder b(strategy, cfg.protocol.ic_list_cap, cfg.protocol.uc_list_cap, 1, cfg.list_seed, index);
    auto grads = model.make_gradients();
    std::vector<Example> batch;
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
      for (std::size_t i = 0; i < split.train.size(); i += cfg.batch_size) {
        batch.clear();
        const std::size_t end = std::min(split.train.size(), i + cfg.batch_size);
        for (std::size_t j = i; j < end; ++j) batch.push_back(b.build(split.train[j], j));
        train_batch(model, std::span<const Example>(batch), grads);
      }
      if (log) log(std::string(to_string(mc.formulation)) + ": epoch " + std::to_string(ep + 1) + " done");
    }
    std::vector<double> p;
    std::vector<std::uint8_t> y;
    p.reserve(split.test.size());
    y.reserve(split.test.size());
    for (std::size_t j = 0; j < split.test.size(); ++j) {
      const auto ex = b.build(split.test[j], split.train.size() + j);
      p.push_back(static_cast<double>(model.predict(ex)[0]));
      y.push_back(ex.labels[0]);
    }
    MovieLensRow row{mc.formulation, try_metric([&] { return auc(p, y); }), split.test.size()};
    if (log) log(std::string(to_string(mc.formulation)) + ": test AUC " + format_optional(row.auc));
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace ucr

#endif  // UCR_TRAINER_HPP
