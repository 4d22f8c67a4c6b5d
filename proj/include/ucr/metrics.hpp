#ifndef UCR_METRICS_HPP
#define UCR_METRICS_HPP

// NCE, AUC, activeness segments and the per-day metrics frame.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "ucr/core.hpp"

namespace ucr {

inline constexpr double kProbClamp = 1e-7;

/// Entropy (nats) of a Bernoulli(q) label.
inline double label_entropy(double q) {
  if (q <= 0.0 || q >= 1.0) return 0.0;
  return -q * std::log(q) - (1.0 - q) * std::log(1.0 - q);
}

/// Normalized cross-entropy: mean binary cross-entropy of the predictions
/// divided by the entropy of the empirical positive rate. Natural logs;
/// predictions are clamped to [1e-7, 1 - 1e-7].
template <class P, class L>
double nce(std::span<const P> predictions, std::span<const L> labels) {
  if (predictions.size() != labels.size()) throw RangeError("nce: predictions and labels differ in length");
  if (labels.empty()) throw DegenerateLabelsError("nce: no examples");
  double ce = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(static_cast<double>(predictions[i]), kProbClamp, 1.0 - kProbClamp);
    if (labels[i]) {
      ce -= std::log(p);
      ++pos;
    } else {
      ce -= std::log1p(-p);
    }
  }
  if (pos == 0 || pos == labels.size()) throw DegenerateLabelsError("nce: label entropy is zero (all labels equal)");
  const double n = static_cast<double>(labels.size());
  return (ce / n) / label_entropy(static_cast<double>(pos) / n);
}

template <class P, class L>
double nce(const std::vector<P>& p, const std::vector<L>& y) {
  return nce(std::span<const P>(p), std::span<const L>(y));
}

/// Area under the ROC curve as the Mann-Whitney statistic, with average
/// ranks for tied scores.
template <class S, class L>
double auc(std::span<const S> scores, std::span<const L> labels) {
  if (scores.size() != labels.size()) throw RangeError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DegenerateLabelsError("auc: need at least one positive and one negative");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

template <class S, class L>
double auc(const std::vector<S>& s, const std::vector<L>& y) {
  return auc(std::span<const S>(s), std::span<const L>(y));
}

template <class F>
std::optional<double> try_metric(F&& f) {
  try {
    return f();
  } catch (const DegenerateLabelsError&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// activeness segments

inline constexpr std::array<double, 4> kSegmentQuantiles = {0.2, 0.4, 0.6, 0.8};

/// Bucket edges at the 20/40/60/80% nearest-rank quantiles of the per-user
/// engagement counts; duplicate edges are removed, merging buckets.
inline std::vector<double> activeness_edges(std::vector<double> counts) {
  std::vector<double> edges;
  if (counts.empty()) return edges;
  std::sort(counts.begin(), counts.end());
  const double n = static_cast<double>(counts.size());
  for (double q : kSegmentQuantiles) {
    const auto idx = static_cast<std::size_t>(std::max(1.0, std::ceil(q * n))) - 1;
    edges.push_back(counts[idx]);
  }
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  // the top edge must leave a non-empty upper bucket
  while (!edges.empty() && edges.back() >= counts.back()) edges.pop_back();
  return edges;
}

/// Bucket index of a count: 0 for count <= edges[0], ..., edges.size() above
/// the last edge.
inline std::size_t activeness_bucket(double count, std::span<const double> edges) {
  return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), count) - edges.begin());
}

struct SegmentBucket {
  std::size_t examples = 0;
  std::optional<double> nce_a;
  std::optional<double> nce_b;
  std::optional<double> delta_pct;  // 100 * (nce_b / nce_a - 1); negative means b is better
};

struct SegmentReport {
  std::vector<double> edges;
  std::vector<SegmentBucket> buckets;
};

/// Per-activeness-bucket NCE of two models on the same evaluation examples.
/// Counts come from the training period; users absent from `user_counts`
/// count as 0.
inline SegmentReport segment_report(std::span<const double> preds_a, std::span<const double> preds_b,
                                    std::span<const std::uint8_t> labels, std::span<const EntityId> users,
                                    const std::unordered_map<EntityId, double>& user_counts) {
  if (preds_a.size() != labels.size() || preds_b.size() != labels.size() || users.size() != labels.size())
    throw RangeError("segment_report: input lengths differ");
  std::vector<double> counts;
  counts.reserve(user_counts.size());
  for (const auto& [u, c] : user_counts) counts.push_back(c);
  SegmentReport rep;
  rep.edges = activeness_edges(counts);
  const std::size_t nb = rep.edges.size() + 1;
  std::vector<std::vector<double>> pa(nb), pb(nb);
  std::vector<std::vector<std::uint8_t>> yb(nb);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = user_counts.find(users[i]);
    const std::size_t b = activeness_bucket(it == user_counts.end() ? 0.0 : it->second, rep.edges);
    pa[b].push_back(preds_a[i]);
    pb[b].push_back(preds_b[i]);
    yb[b].push_back(labels[i]);
  }
  rep.buckets.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    auto& bk = rep.buckets[b];
    bk.examples = yb[b].size();
    bk.nce_a = try_metric([&] { return nce(pa[b], yb[b]); });
    bk.nce_b = try_metric([&] { return nce(pb[b], yb[b]); });
    if (bk.nce_a && bk.nce_b) bk.delta_pct = 100.0 * (*bk.nce_b / *bk.nce_a - 1.0);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// metrics frame

inline constexpr int kFrameSchemaVersion = 1;

struct TableStats {
  std::string table;
  std::uint64_t distinct_raw_ids = 0;
  std::uint64_t distinct_slots = 0;
  std::uint64_t active_parameters = 0;
  double collision_rate = 0.0;
};

struct MetricsFrame {
  int schema_version = kFrameSchemaVersion;
  std::string run;
  std::uint32_t day = 0;  // number of days trained before this evaluation
  bool absent = false;    // no usable evaluation window
  std::size_t eval_examples = 0;
  std::vector<std::optional<double>> nce;  // per task
  std::vector<std::optional<double>> auc;  // per task
  std::vector<double> positive_rate;       // per task
  std::optional<double> mean_nce;
  std::vector<TableStats> tables;
  std::vector<double> segment_edges;
  std::vector<std::optional<double>> segment_nce;

  std::uint64_t active_parameters() const {
    std::uint64_t s = 0;
    for (const auto& t : tables) s += t.active_parameters;
    return s;
  }
};

inline nlohmann::json to_json_value(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::optional<double> optional_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline nlohmann::json frame_to_json(const MetricsFrame& f) {
  nlohmann::json j;
  j["schema_version"] = f.schema_version;
  j["run"] = f.run;
  j["day"] = f.day;
  j["absent"] = f.absent;
  j["eval_examples"] = f.eval_examples;
  auto opt_list = [](const std::vector<std::optional<double>>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : v) a.push_back(to_json_value(x));
    return a;
  };
  j["nce"] = opt_list(f.nce);
  j["auc"] = opt_list(f.auc);
  j["positive_rate"] = f.positive_rate;
  j["mean_nce"] = to_json_value(f.mean_nce);
  j["tables"] = nlohmann::json::array();
  for (const auto& t : f.tables)
    j["tables"].push_back({{"table", t.table},
                           {"distinct_raw_ids", t.distinct_raw_ids},
                           {"distinct_slots", t.distinct_slots},
                           {"active_parameters", t.active_parameters},
                           {"collision_rate", t.collision_rate}});
  j["segment_edges"] = f.segment_edges;
  j["segment_nce"] = opt_list(f.segment_nce);
  return j;
}

inline MetricsFrame frame_from_json(const nlohmann::json& j) {
  MetricsFrame f;
  f.schema_version = j.at("schema_version").get<int>();
  if (f.schema_version != kFrameSchemaVersion)
    throw ParseError("frame schema version " + std::to_string(f.schema_version) + " is not supported (expected " +
                     std::to_string(kFrameSchemaVersion) + ")");
  f.run = j.at("run").get<std::string>();
  f.day = j.at("day").get<std::uint32_t>();
  f.absent = j.at("absent").get<bool>();
  f.eval_examples = j.at("eval_examples").get<std::size_t>();
  for (const auto& x : j.at("nce")) f.nce.push_back(optional_from_json(x));
  for (const auto& x : j.at("auc")) f.auc.push_back(optional_from_json(x));
  f.positive_rate = j.at("positive_rate").get<std::vector<double>>();
  f.mean_nce = optional_from_json(j.at("mean_nce"));
  for (const auto& t : j.at("tables"))
    f.tables.push_back({t.at("table").get<std::string>(), t.at("distinct_raw_ids").get<std::uint64_t>(),
                        t.at("distinct_slots").get<std::uint64_t>(), t.at("active_parameters").get<std::uint64_t>(),
                        t.at("collision_rate").get<double>()});
  f.segment_edges = j.at("segment_edges").get<std::vector<double>>();
  for (const auto& x : j.at("segment_nce")) f.segment_nce.push_back(optional_from_json(x));
  return f;
}

inline void write_frames(std::ostream& os, std::span<const MetricsFrame> frames) {
  for (const auto& f : frames) os << frame_to_json(f).dump() << '\n';
}

/// Reads line-delimited frames. Schema mismatches raise ParseError listing
/// the versions found.
inline std::vector<MetricsFrame> read_frames(std::istream& is) {
  std::vector<MetricsFrame> frames;
  std::vector<int> bad_versions;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const int v = j.value("schema_version", -1);
    if (v != kFrameSchemaVersion) {
      bad_versions.push_back(v);
      continue;
    }
    frames.push_back(frame_from_json(j));
  }
  if (!bad_versions.empty()) {
    std::sort(bad_versions.begin(), bad_versions.end());
    bad_versions.erase(std::unique(bad_versions.begin(), bad_versions.end()), bad_versions.end());
    std::string msg = "incompatible frame schema versions:";
    for (int v : bad_versions) msg += " " + std::to_string(v);
    msg += " (supported: " + std::to_string(kFrameSchemaVersion) + ")";
    throw ParseError(msg);
  }
  return frames;
}

// ---------------------------------------------------------------------------
// column text

/// Aligned whitespace-separated table with a header row.
class ColumnTable {
 public:
  explicit ColumnTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw RangeError("table row has wrong number of columns");
    rows_.push_back(std::move(row));
  }

  std::size_t num_rows() const { return rows_.size(); }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const {
    std::vector<std::size_t> w(header_.size());
    for (std::size_t c = 0; c < header_.size(); ++c) {
      w[c] = header_[c].size();
      for (const auto& r : rows_) w[c] = std::max(w[c], r[c].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t c = 0; c < r.size(); ++c) {
        if (c) os << "  ";
        os << std::setw(static_cast<int>(w[c])) << r[c];
      }
      os << '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return os.str();
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string format_number(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

inline std::string format_optional(const std::optional<double>& v, int precision = 6) {
  return v ? format_number(*v, precision) : "NA";
}

/// Signed percentage with two decimals ("+0.08", "-1.95"); the baseline
/// cell is rendered as "-".
inline std::string format_relative(double pct, bool is_baseline) {
  if (is_baseline) return "-";
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(2) << pct;
  return os.str();
}

}  // namespace ucr

#endif  // UCR_METRICS_HPP
