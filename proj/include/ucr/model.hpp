#ifndef UCR_MODEL_HPP
#define UCR_MODEL_HPP

// Single-tower ranking model for the item-centric, user-centric and hybrid
// formulations: per-channel pooling (masked mean or targeted attention),
// concatenation with the target embeddings, an MLP interaction arch and one
// sigmoid head per task. Forward and exact backward passes.

#include <algorithm>
#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ucr/core.hpp"
#include "ucr/embeddings.hpp"

namespace ucr {

enum class Formulation { kItemCentric, kUserCentric, kHybrid };
enum class Pooling { kSum, kAttention };

inline const char* to_string(Formulation f) {
  switch (f) {
    case Formulation::kItemCentric: return "IC";
    case Formulation::kUserCentric: return "UC";
    case Formulation::kHybrid: return "HYBRID";
  }
  return "?";
}

inline const char* to_string(Pooling p) { return p == Pooling::kSum ? "SUM" : "ATTENTION"; }

inline Formulation parse_formulation(std::string_view s) {
  if (s == "IC" || s == "ic") return Formulation::kItemCentric;
  if (s == "UC" || s == "uc") return Formulation::kUserCentric;
  if (s == "HYBRID" || s == "hybrid") return Formulation::kHybrid;
  throw ConfigError("unknown formulation '" + std::string(s) + "'");
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "SUM" || s == "sum") return Pooling::kSum;
  if (s == "ATTENTION" || s == "attention") return Pooling::kAttention;
  throw ConfigError("unknown pooling '" + std::string(s) + "'");
}

struct ModelConfig {
  Formulation formulation = Formulation::kUserCentric;
  Pooling pooling = Pooling::kAttention;
  std::size_t embed_dim = 32;
  std::uint64_t hash_size = std::uint64_t{1} << 20;
  std::size_t num_heads = 1;
  std::size_t list_capacity = 1024;
  std::uint32_t num_tasks = 1;
  std::vector<std::size_t> interaction_hidden_dims = {64, 32};
  double sparse_learning_rate = 0.05;  // Adagrad, embedding tables
  double dense_learning_rate = 1e-3;   // Adam, everything else
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool time_encoding = false;
  std::size_t time_buckets = 32;
  // Adds target (x) pooled elementwise products to the interaction input.
  bool product_features = true;
  double init_scale = 0.0;  // <= 0 selects 1/sqrt(d) for tables
  std::uint64_t item_hash_seed = 0x17e3;
  std::uint64_t user_hash_seed = 0x05e7;
  DistinctTracking tracking = DistinctTracking::kExact;
  std::uint64_t rng_seed = 42;

  bool has_ic() const { return formulation != Formulation::kUserCentric; }
  bool has_uc() const { return formulation != Formulation::kItemCentric; }

  void validate() const {
    if (embed_dim == 0 || hash_size == 0 || num_heads == 0 || list_capacity == 0 || num_tasks == 0)
      throw ConfigError("model config: dimensions, hash size, heads, capacity and tasks must be positive");
    if (embed_dim % num_heads != 0) throw ConfigError("model config: embed_dim must be divisible by num_heads");
    for (auto h : interaction_hidden_dims)
      if (h == 0) throw ConfigError("model config: hidden layer widths must be positive");
    if (time_encoding && time_buckets == 0) throw ConfigError("model config: time_buckets must be positive");
    if (!(sparse_learning_rate > 0.0) || !(dense_learning_rate > 0.0))
      throw ConfigError("model config: learning rates must be positive");
  }
};

// Like UCR_STRICT_JSON_ENUM, but unknown names are a ConfigError.
#define UCR_STRICT_JSON_ENUM(ENUM_TYPE, ...)                                                  \
  inline void to_json(nlohmann::json& j, const ENUM_TYPE& e) {                                \
    static const std::pair<ENUM_TYPE, const char*> names[] = __VA_ARGS__;                     \
    for (const auto& [v, s] : names)                                                          \
      if (v == e) {                                                                           \
        j = s;                                                                                \
        return;                                                                               \
      }                                                                                       \
    throw ConfigError("unnamed " #ENUM_TYPE " value");                                        \
  }                                                                                           \
  inline void from_json(const nlohmann::json& j, ENUM_TYPE& e) {                              \
    static const std::pair<ENUM_TYPE, const char*> names[] = __VA_ARGS__;                     \
    if (j.is_string())                                                                        \
      for (const auto& [v, s] : names)                                                        \
        if (j.get_ref<const std::string&>() == s) {                                           \
          e = v;                                                                              \
          return;                                                                             \
        }                                                                                     \
    throw ConfigError("invalid " #ENUM_TYPE " " + j.dump());                                  \
  }

UCR_STRICT_JSON_ENUM(Formulation, {{Formulation::kItemCentric, "IC"},
                                           {Formulation::kUserCentric, "UC"},
                                           {Formulation::kHybrid, "HYBRID"}})
UCR_STRICT_JSON_ENUM(Pooling, {{Pooling::kSum, "SUM"}, {Pooling::kAttention, "ATTENTION"}})
UCR_STRICT_JSON_ENUM(DistinctTracking, {{DistinctTracking::kExact, "exact"},
                                                {DistinctTracking::kSketch, "sketch"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, formulation, pooling, embed_dim, hash_size, num_heads,
                                                list_capacity, num_tasks, interaction_hidden_dims,
                                                sparse_learning_rate, dense_learning_rate, adam_beta1, adam_beta2,
                                                adam_epsilon, time_encoding, time_buckets, product_features, init_scale,
                                                item_hash_seed, user_hash_seed, tracking, rng_seed)

/// One training/evaluation example. Channel vectors hold num_tasks lists for
/// every active group (empty vector for an inactive group).
struct Example {
  std::uint64_t example_id = 0;
  EntityId user = 0;
  EntityId item = 0;
  Timestamp time = 0;
  std::vector<ChannelList> ic_channels;
  std::vector<ChannelList> uc_channels;
  std::vector<std::uint8_t> labels;     // per task
  std::vector<std::uint8_t> task_mask;  // 1 where the task is supervised
};

// ---------------------------------------------------------------------------
// pooling operators

inline std::size_t time_bucket(Timestamp delta, std::size_t buckets) {
  const auto u = static_cast<std::uint64_t>(std::max<Timestamp>(delta, 0));
  return std::min<std::size_t>(buckets - 1, static_cast<std::size_t>(std::bit_width(u)));
}

/// Masked mean of the valid rows of an L x d matrix; zero when nothing is valid.
template <class Real>
std::vector<Real> sum_pool(std::span<const Real> rows, std::span<const std::uint8_t> mask, std::size_t d) {
  std::vector<Real> out(d, Real(0));
  std::size_t n = 0;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (!mask[j]) continue;
    ++n;
    for (std::size_t c = 0; c < d; ++c) out[c] += rows[j * d + c];
  }
  if (n > 0)
    for (auto& v : out) v /= static_cast<Real>(n);
  return out;
}

/// Row-major d x d projections of one attention channel.
template <class Real>
struct AttentionWeights {
  std::span<const Real> wq, wk, wv, wo;
};

template <class Real>
struct AttentionOutput {
  std::vector<Real> pooled;   // d
  std::vector<Real> weights;  // heads x L, zero at masked positions
  std::vector<Real> qh;       // heads x dh
  std::vector<Real> a;        // heads x d, key-space query
  std::vector<Real> vbar;     // heads x d, attention-weighted values
  std::vector<Real> o;        // d, concatenated head outputs
  bool empty = true;
};

/// Targeted attention. Per head h with head width dh = d / heads:
///   score_j = (Wq_h q) . (Wk_h x_j) / sqrt(dh),  w = softmax over valid j,
///   o_h = Wv_h sum_j w_j e_j,   pooled = Wo [o_1; ...; o_H].
/// x_j = e_j + key_offsets_j (time encoding) when offsets are supplied.
template <class Real>
AttentionOutput<Real> attentive_pool(std::span<const Real> rows, std::span<const std::uint8_t> mask,
                                     std::span<const Real> query, std::size_t heads, AttentionWeights<Real> w,
                                     std::span<const Real> key_offsets = {}) {
  const std::size_t d = query.size();
  const std::size_t L = mask.size();
  const std::size_t dh = d / heads;
  const Real inv = Real(1) / std::sqrt(static_cast<Real>(dh));
  AttentionOutput<Real> out;
  out.pooled.assign(d, Real(0));
  out.weights.assign(heads * L, Real(0));
  out.qh.assign(heads * dh, Real(0));
  out.a.assign(heads * d, Real(0));
  out.vbar.assign(heads * d, Real(0));
  out.o.assign(d, Real(0));
  out.empty = std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; });
  if (out.empty) return out;

  std::vector<Real> scores(L);
  for (std::size_t h = 0; h < heads; ++h) {
    Real* qh = out.qh.data() + h * dh;
    Real* a = out.a.data() + h * d;
    for (std::size_t r = 0; r < dh; ++r) {
      const Real* wrow = w.wq.data() + (h * dh + r) * d;
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += wrow[c] * query[c];
      qh[r] = s;
    }
    for (std::size_t r = 0; r < dh; ++r) {
      const Real* wrow = w.wk.data() + (h * dh + r) * d;
      for (std::size_t c = 0; c < d; ++c) a[c] += wrow[c] * qh[r];
    }
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < L; ++j) {
      if (!mask[j]) continue;
      Real s = 0;
      const Real* e = rows.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) s += a[c] * e[c];
      if (!key_offsets.empty()) {
        const Real* t = key_offsets.data() + j * d;
        for (std::size_t c = 0; c < d; ++c) s += a[c] * t[c];
      }
      scores[j] = s * inv;
      mx = std::max(mx, scores[j]);
    }
    Real* wts = out.weights.data() + h * L;
    Real z = 0;
    for (std::size_t j = 0; j < L; ++j) {
      if (!mask[j]) continue;
      wts[j] = std::exp(scores[j] - mx);
      z += wts[j];
    }
    Real* vbar = out.vbar.data() + h * d;
    for (std::size_t j = 0; j < L; ++j) {
      if (!mask[j]) continue;
      wts[j] /= z;
      const Real* e = rows.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) vbar[c] += wts[j] * e[c];
    }
    for (std::size_t r = 0; r < dh; ++r) {
      const Real* wrow = w.wv.data() + (h * dh + r) * d;
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += wrow[c] * vbar[c];
      out.o[h * dh + r] = s;
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    const Real* wrow = w.wo.data() + i * d;
    Real s = 0;
    for (std::size_t m = 0; m < d; ++m) s += wrow[m] * out.o[m];
    out.pooled[i] = s;
  }
  return out;
}

template <class Real>
struct AttentionGrads {
  std::span<Real> wq, wk, wv, wo;  // accumulated into
  std::span<Real> rows;            // L x d, accumulated into
  std::span<Real> query;           // d, accumulated into
  std::span<Real> key_offsets;     // L x d or empty, accumulated into
};

template <class Real>
void attentive_pool_backward(std::span<const Real> rows, std::span<const std::uint8_t> mask,
                             std::span<const Real> query, std::size_t heads, AttentionWeights<Real> w,
                             std::span<const Real> key_offsets, const AttentionOutput<Real>& fwd,
                             std::span<const Real> d_pooled, AttentionGrads<Real> g) {
  if (fwd.empty) return;
  const std::size_t d = query.size();
  const std::size_t L = mask.size();
  const std::size_t dh = d / heads;
  const Real inv = Real(1) / std::sqrt(static_cast<Real>(dh));

  std::vector<Real> d_o(d, Real(0));
  for (std::size_t i = 0; i < d; ++i) {
    const Real dp = d_pooled[i];
    if (dp == Real(0)) continue;
    const Real* wrow = w.wo.data() + i * d;
    Real* grow = g.wo.data() + i * d;
    for (std::size_t m = 0; m < d; ++m) {
      grow[m] += dp * fwd.o[m];
      d_o[m] += wrow[m] * dp;
    }
  }
  std::vector<Real> dvbar(d), dw(L), da(d), dqh(dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const Real* vbar = fwd.vbar.data() + h * d;
    const Real* wts = fwd.weights.data() + h * L;
    const Real* a = fwd.a.data() + h * d;
    const Real* qh = fwd.qh.data() + h * dh;
    std::fill(dvbar.begin(), dvbar.end(), Real(0));
    for (std::size_t r = 0; r < dh; ++r) {
      const Real dor = d_o[h * dh + r];
      const Real* wrow = w.wv.data() + (h * dh + r) * d;
      Real* grow = g.wv.data() + (h * dh + r) * d;
      for (std::size_t c = 0; c < d; ++c) {
        grow[c] += dor * vbar[c];
        dvbar[c] += wrow[c] * dor;
      }
    }
    Real wsum = 0;
    for (std::size_t j = 0; j < L; ++j) {
      dw[j] = 0;
      if (!mask[j]) continue;
      const Real* e = rows.data() + j * d;
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) s += dvbar[c] * e[c];
      dw[j] = s;
      wsum += wts[j] * s;
      Real* ge = g.rows.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) ge[c] += wts[j] * dvbar[c];
    }
    std::fill(da.begin(), da.end(), Real(0));
    for (std::size_t j = 0; j < L; ++j) {
      if (!mask[j]) continue;
      const Real ds = wts[j] * (dw[j] - wsum) * inv;
      const Real* e = rows.data() + j * d;
      Real* ge = g.rows.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) {
        da[c] += ds * e[c];
        ge[c] += ds * a[c];
      }
      if (!key_offsets.empty()) {
        const Real* t = key_offsets.data() + j * d;
        Real* gt = g.key_offsets.data() + j * d;
        for (std::size_t c = 0; c < d; ++c) {
          da[c] += ds * t[c];
          gt[c] += ds * a[c];
        }
      }
    }
    for (std::size_t r = 0; r < dh; ++r) {
      const Real* wrow = w.wk.data() + (h * dh + r) * d;
      Real* grow = g.wk.data() + (h * dh + r) * d;
      Real s = 0;
      for (std::size_t c = 0; c < d; ++c) {
        grow[c] += qh[r] * da[c];
        s += wrow[c] * da[c];
      }
      dqh[r] = s;
    }
    for (std::size_t r = 0; r < dh; ++r) {
      const Real* wrow = w.wq.data() + (h * dh + r) * d;
      Real* grow = g.wq.data() + (h * dh + r) * d;
      for (std::size_t c = 0; c < d; ++c) {
        grow[c] += dqh[r] * query[c];
        g.query[c] += wrow[c] * dqh[r];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// dense parameters

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

template <class Real>
class DenseParams {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    blocks_.push_back({std::move(name), values_.size(), rows, cols});
    values_.resize(values_.size() + rows * cols, Real(0));
    return blocks_.size() - 1;
  }
  std::span<Real> block(std::size_t i) { return {values_.data() + blocks_[i].offset, blocks_[i].size()}; }
  std::span<const Real> block(std::size_t i) const { return {values_.data() + blocks_[i].offset, blocks_[i].size()}; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::vector<Real>& values() { return values_; }
  const std::vector<Real>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

 private:
  std::vector<ParamBlock> blocks_;
  std::vector<Real> values_;
};

// ---------------------------------------------------------------------------
// model

enum class Group : std::size_t { kIC = 0, kUC = 1 };

template <class Real>
struct ChannelTrace {
  std::vector<std::size_t> slots;    // table slot per list entry
  std::vector<std::size_t> buckets;  // time bucket per entry (time encoding)
  std::vector<Real> rows;            // L x d gathered embeddings
  std::vector<Real> offsets;         // L x d time encodings or empty
  std::vector<std::uint8_t> mask;
  AttentionOutput<Real> attn;
  std::vector<Real> pooled;
};

template <class Real>
struct ForwardTrace {
  // [group][task] for active groups, group order IC then UC
  std::vector<std::vector<ChannelTrace<Real>>> channels;
  std::vector<Group> groups;
  std::vector<std::size_t> target_slot;  // per active group
  std::vector<std::vector<Real>> query;  // target embedding per active group
  std::vector<Real> input;
  std::vector<std::vector<Real>> hidden;  // post-ReLU activations per layer
  std::vector<Real> logits;
  std::vector<Real> probs;
};

template <class Real>
struct Gradients {
  std::vector<Real> dense;
  SparseGradients<Real> item;
  SparseGradients<Real> user;

  void clear() {
    std::fill(dense.begin(), dense.end(), Real(0));
    item.clear();
    user.clear();
  }
};

/// Numerically stable logistic function.
template <class Real>
Real sigmoid(Real z) {
  if (z >= 0) return Real(1) / (Real(1) + std::exp(-z));
  const Real e = std::exp(z);
  return e / (Real(1) + e);
}

/// log(1 + exp(z)) without overflow.
template <class Real>
Real softplus(Real z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

template <class Real>
class RankingModel {
 public:
  explicit RankingModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim;
    if (cfg_.has_ic()) {
      groups_.push_back(Group::kIC);
      item_table_.emplace(cfg_.hash_size, d, cfg_.item_hash_seed, cfg_.tracking);
    }
    if (cfg_.has_uc()) {
      groups_.push_back(Group::kUC);
      user_table_.emplace(cfg_.hash_size, d, cfg_.user_hash_seed, cfg_.tracking);
    }
    const std::size_t K = cfg_.num_tasks;
    channel_blocks_.resize(groups_.size());
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const std::string gname = groups_[gi] == Group::kIC ? "ic" : "uc";
      for (std::size_t k = 0; k < K; ++k) {
        ChannelBlocks cb;
        const std::string p = gname + "." + std::to_string(k) + ".";
        if (cfg_.pooling == Pooling::kAttention) {
          cb.wq = dense_.add(p + "wq", d, d);
          cb.wk = dense_.add(p + "wk", d, d);
          cb.wv = dense_.add(p + "wv", d, d);
          cb.wo = dense_.add(p + "wo", d, d);
          if (cfg_.time_encoding) cb.time = dense_.add(p + "time", cfg_.time_buckets, d);
        }
        channel_blocks_[gi].push_back(cb);
      }
    }
    input_dim_ = groups_.size() * (K + 1 + (cfg_.product_features ? K : 0)) * d;
    std::size_t prev = input_dim_;
    for (std::size_t l = 0; l < cfg_.interaction_hidden_dims.size(); ++l) {
      const std::size_t h = cfg_.interaction_hidden_dims[l];
      mlp_w_.push_back(dense_.add("mlp." + std::to_string(l) + ".w", h, prev));
      mlp_b_.push_back(dense_.add("mlp." + std::to_string(l) + ".b", h, 1));
      prev = h;
    }
    head_w_ = dense_.add("head.w", K, prev);
    head_b_ = dense_.add("head.b", K, 1);
    adam_m_.assign(dense_.size(), Real(0));
    adam_v_.assign(dense_.size(), Real(0));
    initialize();
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Group>& groups() const { return groups_; }
  std::size_t input_dim() const { return input_dim_; }

  HashedEmbeddingTable<Real>* item_table() { return item_table_ ? &*item_table_ : nullptr; }
  HashedEmbeddingTable<Real>* user_table() { return user_table_ ? &*user_table_ : nullptr; }
  const HashedEmbeddingTable<Real>* item_table() const { return item_table_ ? &*item_table_ : nullptr; }
  const HashedEmbeddingTable<Real>* user_table() const { return user_table_ ? &*user_table_ : nullptr; }

  DenseParams<Real>& dense() { return dense_; }
  const DenseParams<Real>& dense() const { return dense_; }

  std::size_t block_index(std::string_view name) const {
    for (std::size_t i = 0; i < dense_.blocks().size(); ++i)
      if (dense_.blocks()[i].name == name) return i;
    throw ConfigError("no parameter block named " + std::string(name));
  }

  /// Re-draws every parameter from the config seed: tables uniform in
  /// [-s, s], attention projections and MLP weights Glorot-uniform, biases 0.
  void initialize() {
    const SeedSequence seeds(cfg_.rng_seed);
    if (item_table_) {
      Rng r = seeds.stream("init.item_table");
      item_table_->init(static_cast<Real>(cfg_.init_scale), r);
    }
    if (user_table_) {
      Rng r = seeds.stream("init.user_table");
      user_table_->init(static_cast<Real>(cfg_.init_scale), r);
    }
    Rng r = seeds.stream("init.dense");
    for (std::size_t i = 0; i < dense_.blocks().size(); ++i) {
      const auto& b = dense_.blocks()[i];
      auto v = dense_.block(i);
      if (b.cols == 1 || b.name.ends_with(".time")) {
        std::fill(v.begin(), v.end(), Real(0));
        continue;
      }
      const double lim = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
      std::uniform_real_distribution<double> dist(-lim, lim);
      for (auto& x : v) x = static_cast<Real>(dist(r));
    }
    std::fill(adam_m_.begin(), adam_m_.end(), Real(0));
    std::fill(adam_v_.begin(), adam_v_.end(), Real(0));
    adam_step_ = 0;
  }

  Gradients<Real> make_gradients() const {
    Gradients<Real> g;
    g.dense.assign(dense_.size(), Real(0));
    g.item = SparseGradients<Real>(cfg_.embed_dim);
    g.user = SparseGradients<Real>(cfg_.embed_dim);
    return g;
  }

  void check_example(const Example& ex) const {
    const std::size_t K = cfg_.num_tasks;
    if (cfg_.has_ic() && ex.ic_channels.size() != K) throw ConfigError("example: expected one IC channel per task");
    if (cfg_.has_uc() && ex.uc_channels.size() != K) throw ConfigError("example: expected one UC channel per task");
  }

  ForwardTrace<Real> forward(const Example& ex) const {
    check_example(ex);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t K = cfg_.num_tasks;
    ForwardTrace<Real> tr;
    tr.groups = groups_;
    tr.channels.resize(groups_.size());
    tr.target_slot.resize(groups_.size());
    tr.query.assign(groups_.size(), std::vector<Real>(d));
    tr.input.assign(input_dim_, Real(0));

    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const auto& table = table_for(groups_[gi]);
      const EntityId target = groups_[gi] == Group::kIC ? ex.item : ex.user;
      const auto& lists = groups_[gi] == Group::kIC ? ex.ic_channels : ex.uc_channels;
      tr.target_slot[gi] = table.slot_of(target);
      table.read(target, tr.target_slot[gi], tr.query[gi]);
      const auto& query = tr.query[gi];
      std::copy(query.begin(), query.end(), tr.input.begin() + target_offset(gi));
      for (std::size_t k = 0; k < K; ++k) {
        const auto& list = lists[k];
        ChannelTrace<Real> ct;
        const std::size_t L = std::min(list.valid_len(), cfg_.list_capacity);
        const std::size_t first = list.valid_len() - L;  // keep the newest entries
        ct.slots.resize(L);
        ct.rows.resize(L * d);
        ct.mask.assign(L, 1);
        for (std::size_t j = 0; j < L; ++j) {
          const EntityId id = list.entity_ids[first + j];
          ct.slots[j] = table.slot_of(id);
          table.read(id, ct.slots[j], std::span<Real>(ct.rows).subspan(j * d, d));
        }
        if (cfg_.pooling == Pooling::kSum) {
          ct.pooled = sum_pool<Real>(ct.rows, ct.mask, d);
        } else {
          const auto& cb = channel_blocks_[gi][k];
          if (cfg_.time_encoding) {
            ct.buckets.resize(L);
            ct.offsets.resize(L * d);
            auto table_t = dense_.block(cb.time);
            for (std::size_t j = 0; j < L; ++j) {
              ct.buckets[j] = time_bucket(list.time_deltas[first + j], cfg_.time_buckets);
              std::copy_n(table_t.begin() + ct.buckets[j] * d, d, ct.offsets.begin() + j * d);
            }
          }
          ct.attn = attentive_pool<Real>(ct.rows, ct.mask, query, cfg_.num_heads, attention_weights(gi, k), ct.offsets);
          ct.pooled = ct.attn.pooled;
        }
        std::copy(ct.pooled.begin(), ct.pooled.end(), tr.input.begin() + channel_offset(gi, k));
        if (cfg_.product_features)
          for (std::size_t c = 0; c < d; ++c) tr.input[product_offset(gi, k) + c] = query[c] * ct.pooled[c];
        tr.channels[gi].push_back(std::move(ct));
      }
    }

    const std::vector<Real>* x = &tr.input;
    for (std::size_t l = 0; l < mlp_w_.size(); ++l) {
      const auto& b = dense_.blocks()[mlp_w_[l]];
      auto W = dense_.block(mlp_w_[l]);
      auto B = dense_.block(mlp_b_[l]);
      std::vector<Real> h(b.rows);
      for (std::size_t r = 0; r < b.rows; ++r) {
        Real s = B[r];
        const Real* wrow = W.data() + r * b.cols;
        for (std::size_t c = 0; c < b.cols; ++c) s += wrow[c] * (*x)[c];
        h[r] = s > 0 ? s : Real(0);
      }
      tr.hidden.push_back(std::move(h));
      x = &tr.hidden.back();
    }
    const auto& hb = dense_.blocks()[head_w_];
    auto HW = dense_.block(head_w_);
    auto HB = dense_.block(head_b_);
    tr.logits.resize(K);
    tr.probs.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      Real s = HB[k];
      for (std::size_t c = 0; c < hb.cols; ++c) s += HW[k * hb.cols + c] * (*x)[c];
      tr.logits[k] = s;
      tr.probs[k] = sigmoid(s);
    }
    return tr;
  }

  /// Mean binary cross-entropy over the supervised tasks.
  Real loss(const Example& ex, const ForwardTrace<Real>& tr) const {
    Real total = 0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < cfg_.num_tasks; ++k) {
      if (!ex.task_mask[k]) continue;
      const Real z = tr.logits[k];
      total += ex.labels[k] ? softplus(-z) : softplus(z);
      ++n;
    }
    return n ? total / static_cast<Real>(n) : Real(0);
  }

  Real loss(const Example& ex) const { return loss(ex, forward(ex)); }

  /// Accumulates d(loss)/d(params) * scale into `g`; returns the loss.
  Real loss_and_backward(const Example& ex, const ForwardTrace<Real>& tr, Gradients<Real>& g,
                         Real scale = Real(1)) const {
    if (ex.labels.size() != cfg_.num_tasks || ex.task_mask.size() != cfg_.num_tasks)
      throw ConfigError("example: labels and task mask need one entry per task");
    const Real L = loss(ex, tr);
    if (!std::isfinite(static_cast<double>(L)))
      throw TrainingError("non-finite loss for example " + std::to_string(ex.example_id));
    std::size_t n_sup = 0;
    for (auto m : ex.task_mask) n_sup += m != 0;
    if (n_sup == 0) return L;
    const std::size_t d = cfg_.embed_dim;
    const std::size_t K = cfg_.num_tasks;

    // heads
    const auto& hb = dense_.blocks()[head_w_];
    const std::vector<Real>& last = tr.hidden.empty() ? tr.input : tr.hidden.back();
    std::vector<Real> dx(hb.cols, Real(0));
    auto HW = dense_.block(head_w_);
    Real* gHW = g.dense.data() + hb.offset;
    Real* gHB = g.dense.data() + dense_.blocks()[head_b_].offset;
    for (std::size_t k = 0; k < K; ++k) {
      if (!ex.task_mask[k]) continue;
      const Real dz = (tr.probs[k] - static_cast<Real>(ex.labels[k])) / static_cast<Real>(n_sup) * scale;
      gHB[k] += dz;
      for (std::size_t c = 0; c < hb.cols; ++c) {
        gHW[k * hb.cols + c] += dz * last[c];
        dx[c] += HW[k * hb.cols + c] * dz;
      }
    }
    // MLP
    for (std::size_t l = mlp_w_.size(); l-- > 0;) {
      const auto& b = dense_.blocks()[mlp_w_[l]];
      const std::vector<Real>& in = l == 0 ? tr.input : tr.hidden[l - 1];
      const std::vector<Real>& out = tr.hidden[l];
      auto W = dense_.block(mlp_w_[l]);
      Real* gW = g.dense.data() + b.offset;
      Real* gB = g.dense.data() + dense_.blocks()[mlp_b_[l]].offset;
      std::vector<Real> din(b.cols, Real(0));
      for (std::size_t r = 0; r < b.rows; ++r) {
        if (out[r] <= 0) continue;
        const Real dz = dx[r];
        if (dz == Real(0)) continue;
        gB[r] += dz;
        const Real* wrow = W.data() + r * b.cols;
        Real* grow = gW + r * b.cols;
        for (std::size_t c = 0; c < b.cols; ++c) {
          grow[c] += dz * in[c];
          din[c] += wrow[c] * dz;
        }
      }
      dx = std::move(din);
    }
    // pooling and embeddings
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      auto& sparse = groups_[gi] == Group::kIC ? g.item : g.user;
      const auto& query = tr.query[gi];
      auto dquery = sparse.row_for(tr.target_slot[gi]);
      const Real* dtarget = dx.data() + target_offset(gi);
      for (std::size_t c = 0; c < d; ++c) dquery[c] += dtarget[c];
      for (std::size_t k = 0; k < K; ++k) {
        const auto& ct = tr.channels[gi][k];
        const std::size_t L = ct.slots.size();
        if (L == 0) continue;
        std::vector<Real> dpooled(dx.begin() + channel_offset(gi, k), dx.begin() + channel_offset(gi, k) + d);
        if (cfg_.product_features) {
          const Real* dprod = dx.data() + product_offset(gi, k);
          auto dq_row = sparse.row_for(tr.target_slot[gi]);
          for (std::size_t c = 0; c < d; ++c) {
            dpooled[c] += dprod[c] * query[c];
            dq_row[c] += dprod[c] * ct.pooled[c];
          }
        }
        std::vector<Real> drows(L * d, Real(0));
        if (cfg_.pooling == Pooling::kSum) {
          const Real inv = Real(1) / static_cast<Real>(L);
          for (std::size_t j = 0; j < L; ++j)
            for (std::size_t c = 0; c < d; ++c) drows[j * d + c] = dpooled[c] * inv;
        } else {
          const auto& cb = channel_blocks_[gi][k];
          std::vector<Real> doffsets(cfg_.time_encoding ? L * d : 0, Real(0));
          std::vector<Real> dq(d, Real(0));
          AttentionGrads<Real> ag{dense_grad(g, cb.wq), dense_grad(g, cb.wk), dense_grad(g, cb.wv),
                                  dense_grad(g, cb.wo), drows, dq, doffsets};
          attentive_pool_backward<Real>(ct.rows, ct.mask, query, cfg_.num_heads, attention_weights(gi, k),
                                        ct.offsets, ct.attn, std::span<const Real>(dpooled), ag);
          // the target row may have moved in the sparse map; fetch it again
          auto dq_row = sparse.row_for(tr.target_slot[gi]);
          for (std::size_t c = 0; c < d; ++c) dq_row[c] += dq[c];
          if (cfg_.time_encoding) {
            auto gt = dense_grad(g, cb.time);
            for (std::size_t j = 0; j < L; ++j)
              for (std::size_t c = 0; c < d; ++c) gt[ct.buckets[j] * d + c] += doffsets[j * d + c];
          }
        }
        for (std::size_t j = 0; j < L; ++j) {
          auto row = sparse.row_for(ct.slots[j]);
          for (std::size_t c = 0; c < d; ++c) row[c] += drows[j * d + c];
        }
      }
    }
    return L;
  }

  /// Records every raw id an example touches (growth and collision accounting).
  void record_lookups(const Example& ex) {
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      auto& table = mutable_table_for(groups_[gi]);
      table.lookup(groups_[gi] == Group::kIC ? ex.item : ex.user);
      const auto& lists = groups_[gi] == Group::kIC ? ex.ic_channels : ex.uc_channels;
      for (const auto& list : lists) {
        const std::size_t L = std::min(list.valid_len(), cfg_.list_capacity);
        for (std::size_t j = list.valid_len() - L; j < list.valid_len(); ++j) table.lookup(list.entity_ids[j]);
      }
    }
  }

  /// Adam on dense parameters, Adagrad on embedding rows.
  void apply(const Gradients<Real>& g) {
    for (Real v : g.dense)
      if (!std::isfinite(static_cast<double>(v))) throw TrainingError("non-finite dense gradient");
    ++adam_step_;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_step_));
    const Real lr = static_cast<Real>(cfg_.dense_learning_rate * std::sqrt(c2) / c1);
    auto& w = dense_.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      adam_m_[i] = static_cast<Real>(b1) * adam_m_[i] + static_cast<Real>(1 - b1) * g.dense[i];
      adam_v_[i] = static_cast<Real>(b2) * adam_v_[i] + static_cast<Real>(1 - b2) * g.dense[i] * g.dense[i];
      w[i] -= lr * adam_m_[i] / (std::sqrt(adam_v_[i]) + static_cast<Real>(cfg_.adam_epsilon));
    }
    const auto slr = static_cast<Real>(cfg_.sparse_learning_rate);
    if (item_table_) item_table_->apply_sparse_grads(g.item, slr);
    if (user_table_) user_table_->apply_sparse_grads(g.user, slr);
  }

  std::vector<Real> predict(const Example& ex) const { return forward(ex).probs; }

  std::size_t dense_parameter_count() const { return dense_.size(); }

  // Container: "UCRMODEL" | u32 version 1 | u32 json length | ModelConfig json
  // | u32 has_item [item table checkpoint] | u32 has_user [user table
  // checkpoint] | u64 dense count | dense f32 values.
  static constexpr std::array<char, 8> kMagic = {'U', 'C', 'R', 'M', 'O', 'D', 'E', 'L'};

  void save(std::ostream& os) const {
    os.write(kMagic.data(), kMagic.size());
    detail::put_le<std::uint32_t>(os, 1);
    const std::string js = nlohmann::json(cfg_).dump();
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(js.size()));
    os.write(js.data(), static_cast<std::streamsize>(js.size()));
    detail::put_le<std::uint32_t>(os, item_table_ ? 1 : 0);
    if (item_table_) item_table_->save(os);
    detail::put_le<std::uint32_t>(os, user_table_ ? 1 : 0);
    if (user_table_) user_table_->save(os);
    detail::put_le<std::uint64_t>(os, dense_.size());
    for (Real v : dense_.values()) detail::put_f32(os, static_cast<float>(v));
  }

  static RankingModel load(std::istream& is) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw ParseError("not a model checkpoint");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != 1) throw ParseError("unsupported model checkpoint version " + std::to_string(version));
    const auto len = detail::get_le<std::uint32_t>(is);
    std::string js(len, '\0');
    if (!is.read(js.data(), len)) throw ParseError("truncated model config");
    ModelConfig cfg = nlohmann::json::parse(js).get<ModelConfig>();
    RankingModel m(cfg);
    if (detail::get_le<std::uint32_t>(is)) {
      auto t = HashedEmbeddingTable<Real>::load(is, cfg.tracking);
      if (!m.item_table_) throw ParseError("checkpoint has an unexpected item table");
      m.item_table_.emplace(std::move(t));
    }
    if (detail::get_le<std::uint32_t>(is)) {
      auto t = HashedEmbeddingTable<Real>::load(is, cfg.tracking);
      if (!m.user_table_) throw ParseError("checkpoint has an unexpected user table");
      m.user_table_.emplace(std::move(t));
    }
    const auto n = detail::get_le<std::uint64_t>(is);
    if (n != m.dense_.size()) throw ParseError("dense parameter count mismatch");
    for (auto& v : m.dense_.values()) v = static_cast<Real>(detail::get_f32(is));
    return m;
  }

  /// Offset of channel (group, task) inside the interaction-arch input.
  std::size_t channel_offset(std::size_t gi, std::size_t k) const {
    return (gi * cfg_.num_tasks + k) * cfg_.embed_dim;
  }
  /// Offset of a group's target embedding inside the interaction-arch input.
  std::size_t target_offset(std::size_t gi) const {
    return (groups_.size() * cfg_.num_tasks + gi) * cfg_.embed_dim;
  }
  /// Offset of the target (x) pooled product of channel (group, task).
  std::size_t product_offset(std::size_t gi, std::size_t k) const {
    return (groups_.size() * (cfg_.num_tasks + 1) + gi * cfg_.num_tasks + k) * cfg_.embed_dim;
  }

  const HashedEmbeddingTable<Real>& table_for(Group g) const {
    return g == Group::kIC ? *item_table_ : *user_table_;
  }
  HashedEmbeddingTable<Real>& mutable_table_for(Group g) { return g == Group::kIC ? *item_table_ : *user_table_; }

 private:
  struct ChannelBlocks {
    std::size_t wq = 0, wk = 0, wv = 0, wo = 0, time = 0;
  };

  AttentionWeights<Real> attention_weights(std::size_t gi, std::size_t k) const {
    const auto& cb = channel_blocks_[gi][k];
    return {dense_.block(cb.wq), dense_.block(cb.wk), dense_.block(cb.wv), dense_.block(cb.wo)};
  }

  std::span<Real> dense_grad(Gradients<Real>& g, std::size_t block) const {
    const auto& b = dense_.blocks()[block];
    return {g.dense.data() + b.offset, b.size()};
  }

  ModelConfig cfg_;
  std::vector<Group> groups_;
  std::optional<HashedEmbeddingTable<Real>> item_table_;
  std::optional<HashedEmbeddingTable<Real>> user_table_;
  DenseParams<Real> dense_;
  std::vector<std::vector<ChannelBlocks>> channel_blocks_;
  std::vector<std::size_t> mlp_w_, mlp_b_;
  std::size_t head_w_ = 0, head_b_ = 0;
  std::size_t input_dim_ = 0;
  std::vector<Real> adam_m_, adam_v_;
  std::uint64_t adam_step_ = 0;
};

}  // namespace ucr

#endif  // UCR_MODEL_HPP
