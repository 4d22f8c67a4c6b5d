#ifndef UCR_INGEST_HPP
#define UCR_INGEST_HPP

// MovieLens ingestion and the synthetic dynamic-inventory log generator.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "ucr/core.hpp"

namespace ucr {

struct MovieLensProtocolConfig {
  double positive_threshold = 4.0;
  std::size_t ic_list_cap = 512;
  std::size_t uc_list_cap = 512;
  double train_fraction = 0.8;
  // Uniform user subsample kept at ingestion (1.0 keeps everyone).
  double user_fraction = 1.0;
  std::uint64_t subsample_seed = 7;

  void validate() const {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
    if (ic_list_cap < 1 || uc_list_cap < 1) throw ConfigError("list caps must be >= 1");
    if (!(user_fraction > 0.0 && user_fraction <= 1.0)) throw ConfigError("user_fraction must be in (0, 1]");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MovieLensProtocolConfig, positive_threshold, ic_list_cap,
                                                uc_list_cap, train_fraction, user_fraction, subsample_seed)

/// Parses a MovieLens ratings file (userId,movieId,rating,timestamp). The
/// optional header line is skipped. Output is sorted by timestamp; ties keep
/// file order.
inline Dataset parse_movielens(std::istream& in, const MovieLensProtocolConfig& cfg = {}) {
  cfg.validate();
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  bool any = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!any && line.rfind("userId", 0) == 0) {
      any = true;
      continue;
    }
    any = true;
    auto cols = detail::split_csv(line);
    InteractionEvent e;
    double rating = 0.0;
    if (cols.size() != 4 || !detail::parse_number(cols[0], e.user_id) || !detail::parse_number(cols[1], e.item_id) ||
        !detail::parse_number(cols[2], rating) || !detail::parse_number(cols[3], e.timestamp))
      throw ParseError("line " + std::to_string(line_no) + ": malformed rating record");
    if (cfg.user_fraction < 1.0) {
      SplitMix64 keyed(derive_seed(cfg.subsample_seed, e.user_id));
      if (uniform01(keyed) >= cfg.user_fraction) continue;
    }
    e.label = rating >= cfg.positive_threshold ? 1 : 0;
    e.engagement_type = 0;
    ds.events.push_back(e);
  }
  if (ds.events.empty()) throw ParseError("ratings file contains no ratings");
  std::stable_sort(ds.events.begin(), ds.events.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  ds.meta = describe_events(ds.events, 1);
  return ds;
}

inline Dataset parse_movielens_file(const std::string& path, const MovieLensProtocolConfig& cfg = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_movielens(in, cfg);
}

struct TrainTestSplit {
  std::vector<InteractionEvent> train;
  std::vector<InteractionEvent> test;
};

/// Per-user temporal split: each user's earliest round(f * n) events (ties
/// broken by item id) train, the rest test. Users with fewer than two events
/// go entirely to train; users with two or more keep at least one of each.
inline TrainTestSplit movielens_split(const std::vector<InteractionEvent>& events,
                                      const MovieLensProtocolConfig& cfg = {}) {
  cfg.validate();
  std::unordered_map<EntityId, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < events.size(); ++i) by_user[events[i].user_id].push_back(i);
  std::vector<char> is_test(events.size(), 0);
  for (auto& [user, idx] : by_user) {
    const std::size_t n = idx.size();
    if (n < 2) continue;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto& ea = events[a];
      const auto& eb = events[b];
      if (ea.timestamp != eb.timestamp) return ea.timestamp < eb.timestamp;
      if (ea.item_id != eb.item_id) return ea.item_id < eb.item_id;
      return a < b;
    });
    auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    for (std::size_t k = n_train; k < n; ++k) is_test[idx[k]] = 1;
  }
  TrainTestSplit out;
  for (std::size_t i = 0; i < events.size(); ++i) (is_test[i] ? out.test : out.train).push_back(events[i]);
  return out;
}

// ---------------------------------------------------------------------------
// synthetic dynamic-inventory generator

struct SyntheticConfig {
  std::uint64_t num_users = 500;
  std::uint32_t num_days = 60;
  std::uint64_t items_born_per_day = 500;
  std::uint32_t item_lifespan_days = 3;
  double popularity_skew = 1.0;
  // Share of all events produced by each activeness segment (least active
  // first). Users are split evenly across the segments.
  std::array<double, 5> activeness_segment_weights = {0.04, 0.10, 0.16, 0.25, 0.45};
  std::uint32_t num_tasks = 2;
  std::uint64_t events_per_day = 20000;
  // Angle (radians) by which every user preference vector rotates per day.
  double drift_rate = 0.0;
  std::uint32_t latent_dim = 4;
  double affinity_scale = 6.0;
  double item_bias_std = 0.0;
  std::vector<double> task_offsets = {-0.8, -0.3};
  Timestamp start_timestamp = 19000 * kSecondsPerDay;
  std::uint64_t rng_seed = 1;

  void validate() const {
    if (num_users < 1 || num_days < 1 || items_born_per_day < 1 || item_lifespan_days < 1 || num_tasks < 1 ||
        events_per_day < 1 || latent_dim < 1)
      throw ConfigError("synthetic config: counts and rates must be positive");
    if (popularity_skew < 0.0) throw ConfigError("synthetic config: popularity_skew must be >= 0");
    if (drift_rate < 0.0) throw ConfigError("synthetic config: drift_rate must be >= 0");
    double s = 0.0;
    for (double w : activeness_segment_weights) {
      if (w <= 0.0) throw ConfigError("synthetic config: segment weights must be positive");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("synthetic config: segment weights must sum to 1");
    if (num_users < activeness_segment_weights.size())
      throw ConfigError("synthetic config: need at least one user per segment");
    if (start_timestamp % kSecondsPerDay != 0) throw ConfigError("synthetic config: start must be day aligned");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticConfig, num_users, num_days, items_born_per_day,
                                                item_lifespan_days, popularity_skew, activeness_segment_weights,
                                                num_tasks, events_per_day, drift_rate, latent_dim, affinity_scale,
                                                item_bias_std, task_offsets, start_timestamp, rng_seed)

struct SyntheticDayStats {
  std::uint64_t events = 0;
  std::uint64_t distinct_users = 0;
  std::uint64_t distinct_items = 0;
  std::uint64_t live_items = 0;
  std::uint64_t cumulative_items = 0;  // distinct items observed so far
  std::uint64_t cumulative_born = 0;
};

struct SyntheticSidecar {
  std::uint64_t num_users = 0;
  std::uint32_t num_days = 0;
  std::uint32_t num_tasks = 0;
  std::uint64_t seed = 0;
  double drift_rate = 0.0;
  std::vector<SyntheticDayStats> days;
  std::map<EntityId, std::uint32_t> user_segment;
};

struct SyntheticData {
  Dataset dataset;
  SyntheticSidecar sidecar;
  // Sampling weight of item kSyntheticItemBase + j while it is live.
  std::vector<double> item_weight;
};

inline constexpr EntityId kSyntheticUserBase = 1;
inline constexpr EntityId kSyntheticItemBase = 1'000'000'000;

/// Generates a log with a fixed user population and a continuously renewed
/// item inventory. Per day: a new cohort of items is born, cohorts older than
/// the lifespan retire, each event picks a user by activeness, a live item by
/// its Zipf weight (rank within its birth cohort), a task uniformly, and a
/// label from a logistic model over latent user/item vectors. User vectors
/// rotate by drift_rate radians per day.
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const SeedSequence seeds(cfg.rng_seed);
  const std::size_t dim = cfg.latent_dim;
  const std::size_t n_seg = cfg.activeness_segment_weights.size();

  auto normal_vec = [dim](Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    std::vector<double> v(dim);
    for (auto& x : v) x = nd(rng);
    return v;
  };

  SyntheticData out;
  auto& sc = out.sidecar;
  sc.num_users = cfg.num_users;
  sc.num_days = cfg.num_days;
  sc.num_tasks = cfg.num_tasks;
  sc.seed = cfg.rng_seed;
  sc.drift_rate = cfg.drift_rate;

  // users
  Rng user_rng = seeds.stream("users");
  std::vector<std::vector<double>> user_vec(cfg.num_users);
  std::vector<double> user_weight(cfg.num_users);
  std::vector<std::uint64_t> seg_size(n_seg, 0);
  for (std::uint64_t u = 0; u < cfg.num_users; ++u) ++seg_size[u * n_seg / cfg.num_users];
  for (std::uint64_t u = 0; u < cfg.num_users; ++u) {
    const std::size_t s = u * n_seg / cfg.num_users;
    user_vec[u] = normal_vec(user_rng);
    user_weight[u] = cfg.activeness_segment_weights[s] / static_cast<double>(seg_size[s]);
    sc.user_segment[kSyntheticUserBase + u] = static_cast<std::uint32_t>(s);
  }
  std::discrete_distribution<std::uint64_t> pick_user(user_weight.begin(), user_weight.end());

  // items, born in cohorts
  struct Item {
    std::vector<double> vec;
    double bias;
    double weight;
  };
  std::vector<Item> items;
  items.reserve(cfg.items_born_per_day * cfg.num_days);
  Rng item_rng = seeds.stream("items");
  std::normal_distribution<double> bias_dist(0.0, cfg.item_bias_std);

  std::vector<double> task_offset(cfg.num_tasks, 0.0);
  for (std::size_t k = 0; k < cfg.num_tasks; ++k)
    task_offset[k] = cfg.task_offsets.empty() ? 0.0 : cfg.task_offsets[k % cfg.task_offsets.size()];

  std::unordered_set<EntityId> seen_items;
  for (std::uint32_t day = 0; day < cfg.num_days; ++day) {
    Rng day_rng = seeds.stream("day", day);

    if (day > 0 && cfg.drift_rate > 0.0) {
      Rng drift_rng = seeds.stream("drift", day);
      std::normal_distribution<double> nd(0.0, 1.0);
      const double c = std::cos(cfg.drift_rate), s = std::sin(cfg.drift_rate);
      for (auto& u : user_vec) {
        const double norm = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
        if (norm == 0.0 || dim < 2) continue;
        // random unit direction orthogonal to u; rotate u towards it
        std::vector<double> b(dim);
        double bn = 0.0;
        while (bn < 1e-12) {
          for (auto& x : b) x = nd(drift_rng);
          const double proj = std::inner_product(b.begin(), b.end(), u.begin(), 0.0) / (norm * norm);
          for (std::size_t j = 0; j < dim; ++j) b[j] -= proj * u[j];
          bn = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
        }
        for (std::size_t j = 0; j < dim; ++j) u[j] = c * u[j] + s * norm * b[j] / bn;
      }
    }

    // new cohort with Zipf weights over a random rank permutation
    std::vector<std::uint64_t> ranks(cfg.items_born_per_day);
    std::iota(ranks.begin(), ranks.end(), 1);
    std::shuffle(ranks.begin(), ranks.end(), item_rng);
    for (std::uint64_t j = 0; j < cfg.items_born_per_day; ++j) {
      Item it;
      it.vec = normal_vec(item_rng);
      it.bias = bias_dist(item_rng);
      it.weight = std::pow(static_cast<double>(ranks[j]), -cfg.popularity_skew);
      out.item_weight.push_back(it.weight);
      items.push_back(std::move(it));
    }

    const std::uint64_t oldest_day = day + 1 >= cfg.item_lifespan_days ? day + 1 - cfg.item_lifespan_days : 0;
    const std::size_t live_begin = oldest_day * cfg.items_born_per_day;
    const std::size_t live_end = items.size();
    std::vector<double> live_w;
    live_w.reserve(live_end - live_begin);
    for (std::size_t j = live_begin; j < live_end; ++j) live_w.push_back(items[j].weight);
    std::discrete_distribution<std::size_t> pick_item(live_w.begin(), live_w.end());
    std::uniform_int_distribution<std::uint32_t> pick_task(0, cfg.num_tasks - 1);
    std::uniform_int_distribution<Timestamp> pick_second(0, kSecondsPerDay - 1);

    std::vector<InteractionEvent> day_events;
    day_events.reserve(cfg.events_per_day);
    std::unordered_set<EntityId> day_users, day_items;
    for (std::uint64_t n = 0; n < cfg.events_per_day; ++n) {
      const std::uint64_t u = pick_user(day_rng);
      const std::size_t j = live_begin + pick_item(day_rng);
      const std::uint32_t task = pick_task(day_rng);
      const auto& iv = items[j].vec;
      const double affinity = std::inner_product(iv.begin(), iv.end(), user_vec[u].begin(), 0.0);
      const double logit = cfg.affinity_scale * affinity + items[j].bias + task_offset[task];
      const double p = 1.0 / (1.0 + std::exp(-logit));
      InteractionEvent e;
      e.user_id = kSyntheticUserBase + u;
      e.item_id = kSyntheticItemBase + j;
      e.timestamp = cfg.start_timestamp + static_cast<Timestamp>(day) * kSecondsPerDay + pick_second(day_rng);
      e.engagement_type = task;
      e.label = uniform01(day_rng) < p ? 1 : 0;
      day_events.push_back(e);
      day_users.insert(e.user_id);
      day_items.insert(e.item_id);
    }
    std::stable_sort(day_events.begin(), day_events.end(),
                     [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    for (auto id : day_items) seen_items.insert(id);

    SyntheticDayStats st;
    st.events = day_events.size();
    st.distinct_users = day_users.size();
    st.distinct_items = day_items.size();
    st.live_items = live_end - live_begin;
    st.cumulative_items = seen_items.size();
    st.cumulative_born = items.size();
    sc.days.push_back(st);
    out.dataset.events.insert(out.dataset.events.end(), day_events.begin(), day_events.end());
  }

  auto& meta = out.dataset.meta;
  meta = describe_events(out.dataset.events, cfg.num_tasks);
  meta.day_boundaries.clear();
  for (std::uint32_t d = 0; d <= cfg.num_days; ++d)
    meta.day_boundaries.push_back(cfg.start_timestamp + static_cast<Timestamp>(d) * kSecondsPerDay);
  return out;
}

// ---------------------------------------------------------------------------
// sidecar: "key=value" lines, '#' comments.
//   num_users, num_days, num_tasks, seed, drift_rate
//   day.<d>.{events,distinct_users,distinct_items,live_items,cumulative_items,cumulative_born}
//   segment.<user_id>=<bucket 0..4>

inline void write_sidecar(std::ostream& os, const SyntheticSidecar& sc) {
  os << "# ucr synthetic sidecar v1\n";
  os << "num_users=" << sc.num_users << "\nnum_days=" << sc.num_days << "\nnum_tasks=" << sc.num_tasks
     << "\nseed=" << sc.seed << "\ndrift_rate=" << sc.drift_rate << '\n';
  for (std::size_t d = 0; d < sc.days.size(); ++d) {
    const auto& s = sc.days[d];
    const std::string p = "day." + std::to_string(d) + ".";
    os << p << "events=" << s.events << '\n'
       << p << "distinct_users=" << s.distinct_users << '\n'
       << p << "distinct_items=" << s.distinct_items << '\n'
       << p << "live_items=" << s.live_items << '\n'
       << p << "cumulative_items=" << s.cumulative_items << '\n'
       << p << "cumulative_born=" << s.cumulative_born << '\n';
  }
  for (const auto& [user, seg] : sc.user_segment) os << "segment." << user << '=' << seg << '\n';
}

inline SyntheticSidecar read_sidecar(std::istream& is) {
  SyntheticSidecar sc;
  std::string line;
  std::size_t line_no = 0;
  auto num = [&](std::string_view v, auto& out) {
    if (!detail::parse_number(v, out)) throw ParseError("sidecar line " + std::to_string(line_no) + ": bad value");
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("sidecar line " + std::to_string(line_no) + ": missing '='");
    const std::string key = line.substr(0, eq);
    const std::string_view val = std::string_view(line).substr(eq + 1);
    if (key == "num_users") num(val, sc.num_users);
    else if (key == "num_days") num(val, sc.num_days);
    else if (key == "num_tasks") num(val, sc.num_tasks);
    else if (key == "seed") num(val, sc.seed);
    else if (key == "drift_rate") num(val, sc.drift_rate);
    else if (key.rfind("segment.", 0) == 0) {
      EntityId user = 0;
      std::uint32_t seg = 0;
      num(std::string_view(key).substr(8), user);
      num(val, seg);
      sc.user_segment[user] = seg;
    } else if (key.rfind("day.", 0) == 0) {
      const auto dot = key.find('.', 4);
      std::size_t d = 0;
      num(std::string_view(key).substr(4, dot - 4), d);
      if (sc.days.size() <= d) sc.days.resize(d + 1);
      auto& s = sc.days[d];
      const std::string field = key.substr(dot + 1);
      if (field == "events") num(val, s.events);
      else if (field == "distinct_users") num(val, s.distinct_users);
      else if (field == "distinct_items") num(val, s.distinct_items);
      else if (field == "live_items") num(val, s.live_items);
      else if (field == "cumulative_items") num(val, s.cumulative_items);
      else if (field == "cumulative_born") num(val, s.cumulative_born);
      else throw ParseError("sidecar line " + std::to_string(line_no) + ": unknown field " + field);
    } else {
      throw ParseError("sidecar line " + std::to_string(line_no) + ": unknown key " + key);
    }
  }
  return sc;
}

}  // namespace ucr

#endif  // UCR_INGEST_HPP
