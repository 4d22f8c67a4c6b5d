#ifndef UCR_CORE_HPP
#define UCR_CORE_HPP

// Domain types shared by every module: interaction events, dataset metadata,
// channel lists, the error hierarchy, seeded random streams and the canonical
// event-log formats.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ucr {

using EntityId = std::uint64_t;
using Timestamp = std::int64_t;

inline constexpr Timestamp kSecondsPerDay = 86400;

// ---------------------------------------------------------------------------
// errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class DegenerateLabelsError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// domain types

struct InteractionEvent {
  EntityId user_id = 0;
  EntityId item_id = 0;
  Timestamp timestamp = 0;
  std::uint32_t engagement_type = 0;
  std::uint8_t label = 0;

  friend bool operator==(const InteractionEvent&, const InteractionEvent&) = default;
};

struct DatasetMeta {
  std::uint32_t num_tasks = 1;
  // Day edges: day k covers [day_boundaries[k], day_boundaries[k + 1]).
  std::vector<Timestamp> day_boundaries;
  std::uint64_t user_count = 0;
  std::uint64_t item_count = 0;

  std::size_t num_days() const {
    return day_boundaries.empty() ? 0 : day_boundaries.size() - 1;
  }
};

struct Dataset {
  std::vector<InteractionEvent> events;
  DatasetMeta meta;
};

/// Fixed-capacity engagement history attached to one example. Entries are
/// ordered oldest first; positions past valid_len() do not exist (the model
/// treats them as masked padding up to capacity).
struct ChannelList {
  std::vector<EntityId> entity_ids;
  std::vector<Timestamp> time_deltas;
  std::size_t capacity = 1024;

  std::size_t valid_len() const { return entity_ids.size(); }
  bool empty() const { return entity_ids.empty(); }

  void push_back(EntityId id, Timestamp delta) {
    entity_ids.push_back(id);
    time_deltas.push_back(delta);
  }

  friend bool operator==(const ChannelList&, const ChannelList&) = default;
};

// ---------------------------------------------------------------------------
// random streams

/// SplitMix64 finalizer. Also used as the keyed per-example generator.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Small counter-based generator satisfying UniformRandomBitGenerator; cheap to
/// construct, so it is used for streams keyed by (seed, entity, ordinal).
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t state) : state_(state) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

using Rng = std::mt19937_64;

/// Derives an independent sub-seed from a root seed and a sequence of keys.
template <class... Keys>
constexpr std::uint64_t derive_seed(std::uint64_t root, Keys... keys) {
  std::uint64_t s = mix64(root);
  ((s = mix64(s ^ mix64(static_cast<std::uint64_t>(keys) + 0x632be59bd9b4e019ULL))), ...);
  return s;
}

/// Root stream for a run. Every stochastic component asks for its own stream
/// by name so that adding a consumer never perturbs the others.
class SeedSequence {
 public:
  explicit SeedSequence(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t seed() const { return seed_; }

  std::uint64_t sub_seed(std::string_view stream, std::uint64_t index = 0) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : stream) h = (h ^ c) * 0x100000001b3ULL;
    return derive_seed(seed_, h, index);
  }

  Rng stream(std::string_view name, std::uint64_t index = 0) const {
    return Rng(sub_seed(name, index));
  }

 private:
  std::uint64_t seed_;
};

inline Rng seed_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

/// Uniform double in [0, 1) from the top 53 bits.
template <class Gen>
double uniform01(Gen& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------
// day partitioning

/// Calendar-day edges (epoch seconds, multiples of 86400) covering every
/// event in a time-ordered log.
inline std::vector<Timestamp> calendar_day_boundaries(const std::vector<InteractionEvent>& events) {
  std::vector<Timestamp> edges;
  if (events.empty()) return edges;
  auto floor_day = [](Timestamp t) {
    Timestamp d = t / kSecondsPerDay;
    if (t < 0 && d * kSecondsPerDay != t) --d;
    return d;
  };
  const Timestamp first = floor_day(events.front().timestamp);
  const Timestamp last = floor_day(events.back().timestamp);
  for (Timestamp d = first; d <= last + 1; ++d) edges.push_back(d * kSecondsPerDay);
  return edges;
}

/// Partitions a time-ordered log by day edges. Day k holds the events with
/// boundaries[k] <= t < boundaries[k + 1].
inline std::vector<std::vector<InteractionEvent>> split_by_days(
    const std::vector<InteractionEvent>& events, const std::vector<Timestamp>& boundaries) {
  for (std::size_t i = 1; i < boundaries.size(); ++i) {
    if (boundaries[i] <= boundaries[i - 1])
      throw RangeError("day boundaries must be strictly increasing");
  }
  std::vector<std::vector<InteractionEvent>> days(boundaries.size() > 0 ? boundaries.size() - 1 : 0);
  Timestamp prev = std::numeric_limits<Timestamp>::min();
  for (const auto& e : events) {
    if (e.timestamp < prev) throw RangeError("events are not time-ordered");
    prev = e.timestamp;
    if (boundaries.size() < 2 || e.timestamp < boundaries.front() || e.timestamp >= boundaries.back())
      throw RangeError("event timestamp " + std::to_string(e.timestamp) + " is outside all day boundaries");
    auto it = std::upper_bound(boundaries.begin(), boundaries.end(), e.timestamp);
    days[static_cast<std::size_t>(it - boundaries.begin()) - 1].push_back(e);
  }
  return days;
}

/// Recomputes user/item cardinalities and checks the event invariants.
inline void validate_dataset(const Dataset& ds) {
  Timestamp prev = std::numeric_limits<Timestamp>::min();
  for (std::size_t i = 0; i < ds.events.size(); ++i) {
    const auto& e = ds.events[i];
    if (e.label > 1) throw ParseError("event " + std::to_string(i) + ": label must be 0 or 1");
    if (e.engagement_type >= ds.meta.num_tasks)
      throw ParseError("event " + std::to_string(i) + ": engagement_type out of range");
    if (e.timestamp < prev) throw ParseError("event " + std::to_string(i) + ": not time-ordered");
    prev = e.timestamp;
  }
}

// ---------------------------------------------------------------------------
// canonical event log
//
// Text form: header line "user_id,item_id,timestamp,engagement_type,label",
// then one comma-separated record per line in that column order.
//
// Binary form: 16-byte header = "UCREVLOG" magic, u32 version (1), u32 record
// size (32); then 32-byte little-endian records:
//   u64 user_id | u64 item_id | i64 timestamp | u32 engagement_type | u8 label | 3 zero bytes

inline constexpr std::string_view kEventCsvHeader = "user_id,item_id,timestamp,engagement_type,label";
inline constexpr std::array<char, 8> kEventLogMagic = {'U', 'C', 'R', 'E', 'V', 'L', 'O', 'G'};
inline constexpr std::uint32_t kEventLogVersion = 1;
inline constexpr std::uint32_t kEventRecordSize = 32;

namespace detail {

template <class T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ParseError("unexpected end of binary stream");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
  return static_cast<T>(u);
}

inline void put_f32(std::ostream& os, float f) { put_le(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace detail

inline void write_events_csv(std::ostream& os, const std::vector<InteractionEvent>& events) {
  os << kEventCsvHeader << '\n';
  for (const auto& e : events)
    os << e.user_id << ',' << e.item_id << ',' << e.timestamp << ',' << e.engagement_type << ','
       << static_cast<int>(e.label) << '\n';
}

inline std::vector<InteractionEvent> read_events_csv(std::istream& is) {
  std::vector<InteractionEvent> events;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) return events;
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kEventCsvHeader) throw ParseError("line 1: expected header '" + std::string(kEventCsvHeader) + "'");
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cols = detail::split_csv(line);
    InteractionEvent e;
    unsigned type = 0, label = 0;
    if (cols.size() != 5 || !detail::parse_number(cols[0], e.user_id) || !detail::parse_number(cols[1], e.item_id) ||
        !detail::parse_number(cols[2], e.timestamp) || !detail::parse_number(cols[3], type) ||
        !detail::parse_number(cols[4], label) || label > 1)
      throw ParseError("line " + std::to_string(line_no) + ": malformed event record");
    e.engagement_type = type;
    e.label = static_cast<std::uint8_t>(label);
    events.push_back(e);
  }
  return events;
}

inline void write_events_binary(std::ostream& os, const std::vector<InteractionEvent>& events) {
  os.write(kEventLogMagic.data(), kEventLogMagic.size());
  detail::put_le<std::uint32_t>(os, kEventLogVersion);
  detail::put_le<std::uint32_t>(os, kEventRecordSize);
  for (const auto& e : events) {
    detail::put_le<std::uint64_t>(os, e.user_id);
    detail::put_le<std::uint64_t>(os, e.item_id);
    detail::put_le<std::int64_t>(os, e.timestamp);
    detail::put_le<std::uint32_t>(os, e.engagement_type);
    detail::put_le<std::uint8_t>(os, e.label);
    const char pad[3] = {0, 0, 0};
    os.write(pad, 3);
  }
}

inline std::vector<InteractionEvent> read_events_binary(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kEventLogMagic) throw ParseError("not a binary event log");
  const auto version = detail::get_le<std::uint32_t>(is);
  const auto record = detail::get_le<std::uint32_t>(is);
  if (version != kEventLogVersion || record != kEventRecordSize)
    throw ParseError("unsupported event log version " + std::to_string(version));
  std::vector<InteractionEvent> events;
  while (is.peek() != std::char_traits<char>::eof()) {
    InteractionEvent e;
    e.user_id = detail::get_le<std::uint64_t>(is);
    e.item_id = detail::get_le<std::uint64_t>(is);
    e.timestamp = detail::get_le<std::int64_t>(is);
    e.engagement_type = detail::get_le<std::uint32_t>(is);
    e.label = detail::get_le<std::uint8_t>(is);
    char pad[3];
    if (!is.read(pad, 3)) throw ParseError("truncated event record");
    if (e.label > 1) throw ParseError("record " + std::to_string(events.size()) + ": label must be 0 or 1");
    events.push_back(e);
  }
  return events;
}

/// Reads either format, sniffing the binary magic.
inline std::vector<InteractionEvent> read_events_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::array<char, 8> head{};
  in.read(head.data(), head.size());
  const bool binary = in.gcount() == 8 && head == kEventLogMagic;
  in.clear();
  in.seekg(0);
  return binary ? read_events_binary(in) : read_events_csv(in);
}

inline DatasetMeta describe_events(const std::vector<InteractionEvent>& events, std::uint32_t num_tasks) {
  DatasetMeta meta;
  meta.num_tasks = num_tasks;
  meta.day_boundaries = calendar_day_boundaries(events);
  std::vector<EntityId> users, items;
  users.reserve(events.size());
  items.reserve(events.size());
  for (const auto& e : events) {
    users.push_back(e.user_id);
    items.push_back(e.item_id);
  }
  std::sort(users.begin(), users.end());
  std::sort(items.begin(), items.end());
  meta.user_count = static_cast<std::uint64_t>(std::unique(users.begin(), users.end()) - users.begin());
  meta.item_count = static_cast<std::uint64_t>(std::unique(items.begin(), items.end()) - items.begin());
  return meta;
}

}  // namespace ucr

#endif  // UCR_CORE_HPP
