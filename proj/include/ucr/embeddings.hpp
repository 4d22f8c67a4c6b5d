#ifndef UCR_EMBEDDINGS_HPP
#define UCR_EMBEDDINGS_HPP

// Constant-size hashed embedding tables with Adagrad updates, distinct-id
// tracking and collision accounting.

#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ucr/core.hpp"

namespace ucr {

/// Slot hash: mix64(id ^ mix64(seed)) mod n_slots, with mix64 the SplitMix64
/// finalizer. Stable across platforms and runs.
constexpr std::uint64_t hash_slot(EntityId id, std::uint64_t seed, std::uint64_t n_slots) {
  return mix64(id ^ mix64(seed)) % n_slots;
}

/// HyperLogLog cardinality sketch (2^14 registers, ~0.8% standard error).
class HyperLogLog {
 public:
  static constexpr unsigned kPrecision = 14;
  HyperLogLog() : reg_(std::size_t{1} << kPrecision, 0) {}

  void add(std::uint64_t x) {
    const std::uint64_t h = mix64(x ^ 0x5bd1e9955bd1e995ULL);
    const std::size_t idx = h >> (64 - kPrecision);
    const std::uint64_t rest = (h << kPrecision) | (std::uint64_t{1} << (kPrecision - 1));
    const auto rank = static_cast<std::uint8_t>(std::countl_zero(rest) + 1);
    if (rank > reg_[idx]) reg_[idx] = rank;
  }

  double estimate() const {
    const double m = static_cast<double>(reg_.size());
    double sum = 0.0;
    std::size_t zeros = 0;
    for (auto r : reg_) {
      sum += std::ldexp(1.0, -static_cast<int>(r));
      zeros += r == 0;
    }
    const double alpha = 0.7213 / (1.0 + 1.079 / m);
    double e = alpha * m * m / sum;
    if (e <= 2.5 * m && zeros > 0) e = m * std::log(m / static_cast<double>(zeros));
    return e;
  }

 private:
  std::vector<std::uint8_t> reg_;
};

enum class DistinctTracking { kExact, kSketch };

struct GrowthReport {
  std::uint64_t distinct_raw_ids = 0;
  std::uint64_t distinct_slots = 0;
  std::uint64_t active_parameters = 0;
  double collision_rate = 0.0;
};

/// Gradients keyed by slot; repeated slots are summed on insertion.
template <class Real>
class SparseGradients {
 public:
  explicit SparseGradients(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }

  std::span<Real> row_for(std::size_t slot) {
    auto [it, fresh] = index_.emplace(slot, slots_.size());
    if (fresh) {
      slots_.push_back(slot);
      values_.resize(values_.size() + dim_, Real(0));
    }
    return {values_.data() + it->second * dim_, dim_};
  }

  void add(std::size_t slot, std::span<const Real> g) {
    if (g.size() != dim_) throw TrainingError("sparse gradient has wrong dimension");
    auto row = row_for(slot);
    for (std::size_t j = 0; j < dim_; ++j) row[j] += g[j];
  }

  std::size_t slot(std::size_t i) const { return slots_[i]; }
  std::span<const Real> grad(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
  std::span<Real> grad(std::size_t i) { return {values_.data() + i * dim_, dim_}; }

  void clear() {
    index_.clear();
    slots_.clear();
    values_.clear();
  }

 private:
  std::size_t dim_;
  std::unordered_map<std::size_t, std::size_t> index_;
  std::vector<std::size_t> slots_;
  std::vector<Real> values_;
};

template <class Real>
class HashedEmbeddingTable {
 public:
  static constexpr double kAdagradEpsilon = 1e-8;

  HashedEmbeddingTable(std::uint64_t n_slots, std::size_t dim, std::uint64_t hash_seed,
                       DistinctTracking tracking = DistinctTracking::kExact)
      : n_slots_(n_slots), dim_(dim), hash_seed_(hash_seed), tracking_(tracking) {
    if (n_slots_ == 0 || dim_ == 0) throw ConfigError("embedding table needs positive hash size and dimension");
    values_.assign(n_slots_ * dim_, Real(0));
    accum_.assign(n_slots_ * dim_, Real(0));
    live_.assign(n_slots_, 0);
    slot_ids_.assign(n_slots_, 0);
  }

  std::uint64_t n_slots() const { return n_slots_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t hash_seed() const { return hash_seed_; }

  std::size_t slot_of(EntityId id) const { return static_cast<std::size_t>(hash_slot(id, hash_seed_, n_slots_)); }

  std::span<const Real> row(std::size_t slot) const { return {values_.data() + slot * dim_, dim_}; }
  std::span<Real> mutable_row(std::size_t slot) {
    live_[slot] = 1;
    return {values_.data() + slot * dim_, dim_};
  }
  std::span<const Real> accumulator(std::size_t slot) const { return {accum_.data() + slot * dim_, dim_}; }
  bool live(std::size_t slot) const { return live_[slot] != 0; }

  /// Row for `id`, recording the id for growth and collision accounting.
  std::span<const Real> lookup(EntityId id) {
    const std::size_t s = slot_of(id);
    record(id, s);
    return row(s);
  }

  /// The vector `id` currently reads: its slot's row once the slot is live,
  /// otherwise the id's initial vector.
  void read(EntityId id, std::size_t slot, std::span<Real> out) const {
    if (live_[slot]) {
      std::copy_n(values_.data() + slot * dim_, dim_, out.begin());
      return;
    }
    SplitMix64 gen(derive_seed(init_seed_, id));
    for (auto& v : out) v = static_cast<Real>((2.0 * uniform01(gen) - 1.0) * init_scale_);
  }

  std::vector<Real> peek(EntityId id) const {
    std::vector<Real> out(dim_);
    read(id, slot_of(id), out);
    return out;
  }

  /// Marks the id as seen. A slot becomes live with the initial vector of
  /// the first id recorded into it.
  void record(EntityId id, std::size_t slot) {
    if (!live_[slot]) {
      read(id, slot, std::span<Real>(values_.data() + slot * dim_, dim_));
      live_[slot] = 1;
    }
    if (tracking_ == DistinctTracking::kExact) {
      if (!seen_.insert(id).second) return;
      if (slot_ids_[slot]++ == 0) ++distinct_slots_;
      else ++collisions_;
    } else {
      sketch_.add(id);
      if (slot_ids_[slot] == 0) {
        slot_ids_[slot] = 1;
        ++distinct_slots_;
      }
    }
  }

  /// Every id starts from its own vector, uniform in [-scale, scale] and
  /// keyed by (seed, id), so initial values do not depend on the table
  /// layout. scale <= 0 selects 1/sqrt(d). Rows and optimizer state reset.
  void init(Real scale, std::uint64_t seed) {
    if (scale <= Real(0)) scale = Real(1) / std::sqrt(static_cast<Real>(dim_));
    init_scale_ = static_cast<double>(scale);
    init_seed_ = seed;
    std::fill(values_.begin(), values_.end(), Real(0));
    std::fill(accum_.begin(), accum_.end(), Real(0));
    std::fill(live_.begin(), live_.end(), 0);
  }
  void init(Real scale, Rng& rng) { init(scale, static_cast<std::uint64_t>(rng())); }

  double init_scale() const { return init_scale_; }
  std::uint64_t init_seed() const { return init_seed_; }

  /// Adagrad step on every listed slot: acc += g^2; w -= lr * g / sqrt(acc + eps).
  void apply_sparse_grads(const SparseGradients<Real>& grads, Real lr) {
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (Real g : grads.grad(i))
        if (!std::isfinite(static_cast<double>(g)))
          throw TrainingError("non-finite gradient for embedding slot " + std::to_string(grads.slot(i)));
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const std::size_t s = grads.slot(i);
      if (s >= n_slots_) throw RangeError("embedding slot out of range");
      auto g = grads.grad(i);
      live_[s] = 1;
      Real* w = values_.data() + s * dim_;
      Real* a = accum_.data() + s * dim_;
      for (std::size_t j = 0; j < dim_; ++j) {
        a[j] += g[j] * g[j];
        w[j] -= lr * g[j] / std::sqrt(a[j] + static_cast<Real>(kAdagradEpsilon));
      }
    }
  }

  /// Convenience overload over (slot, gradient) pairs; duplicates are summed
  /// before the step.
  void apply_sparse_grads(std::span<const std::pair<std::size_t, std::vector<Real>>> pairs, Real lr) {
    SparseGradients<Real> acc(dim_);
    for (const auto& [slot, g] : pairs) acc.add(slot, g);
    apply_sparse_grads(acc, lr);
  }

  GrowthReport report_growth() const {
    GrowthReport r;
    r.distinct_slots = distinct_slots_;
    r.distinct_raw_ids = tracking_ == DistinctTracking::kExact
                             ? seen_.size()
                             : static_cast<std::uint64_t>(std::llround(sketch_.estimate()));
    if (tracking_ == DistinctTracking::kSketch && distinct_slots_ == 0) r.distinct_raw_ids = 0;
    r.active_parameters = distinct_slots_ * dim_;
    if (r.distinct_raw_ids > 0)
      r.collision_rate = std::max(0.0, 1.0 - static_cast<double>(r.distinct_slots) / static_cast<double>(r.distinct_raw_ids));
    return r;
  }

  std::uint64_t collision_count() const { return collisions_; }

  // Checkpoint: "UCREMBED" | u32 version 2 | u64 hash_seed | u64 n_slots |
  // u32 dim | u32 optimizer flag | u64 init_seed | f64 init_scale (as u64
  // bits) | n_slots u8 live flags | n_slots*dim f32 rows | [n_slots*dim f32
  // Adagrad accumulators if flag]. All little-endian. Trackers are not saved.
  static constexpr std::array<char, 8> kMagic = {'U', 'C', 'R', 'E', 'M', 'B', 'E', 'D'};

  void save(std::ostream& os, bool with_optimizer = true) const {
    os.write(kMagic.data(), kMagic.size());
    detail::put_le<std::uint32_t>(os, 2);
    detail::put_le<std::uint64_t>(os, hash_seed_);
    detail::put_le<std::uint64_t>(os, n_slots_);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dim_));
    detail::put_le<std::uint32_t>(os, with_optimizer ? 1 : 0);
    detail::put_le<std::uint64_t>(os, init_seed_);
    detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(init_scale_));
    os.write(reinterpret_cast<const char*>(live_.data()), static_cast<std::streamsize>(live_.size()));
    for (Real v : values_) detail::put_f32(os, static_cast<float>(v));
    if (with_optimizer)
      for (Real v : accum_) detail::put_f32(os, static_cast<float>(v));
  }

  static HashedEmbeddingTable load(std::istream& is, DistinctTracking tracking = DistinctTracking::kExact) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw ParseError("not an embedding checkpoint");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != 2) throw ParseError("unsupported embedding checkpoint version " + std::to_string(version));
    const auto seed = detail::get_le<std::uint64_t>(is);
    const auto n = detail::get_le<std::uint64_t>(is);
    const auto d = detail::get_le<std::uint32_t>(is);
    const auto flag = detail::get_le<std::uint32_t>(is);
    HashedEmbeddingTable t(n, d, seed, tracking);
    t.init_seed_ = detail::get_le<std::uint64_t>(is);
    t.init_scale_ = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
    is.read(reinterpret_cast<char*>(t.live_.data()), static_cast<std::streamsize>(t.live_.size()));
    for (auto& v : t.values_) v = static_cast<Real>(detail::get_f32(is));
    if (flag)
      for (auto& v : t.accum_) v = static_cast<Real>(detail::get_f32(is));
    return t;
  }

 private:
  std::uint64_t n_slots_;
  std::size_t dim_;
  std::uint64_t hash_seed_;
  DistinctTracking tracking_;
  std::vector<Real> values_;
  std::vector<Real> accum_;
  std::vector<std::uint8_t> live_;
  std::uint64_t init_seed_ = 0;
  double init_scale_ = 0.0;
  std::vector<std::uint32_t> slot_ids_;
  std::unordered_set<EntityId> seen_;
  HyperLogLog sketch_;
  std::uint64_t distinct_slots_ = 0;
  std::uint64_t collisions_ = 0;
};

}  // namespace ucr

#endif  // UCR_EMBEDDINGS_HPP
