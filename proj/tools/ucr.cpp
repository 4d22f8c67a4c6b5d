// ucr: ingestion, training, sweeps, drift probes and reports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "ucr/stats.hpp"
#include "ucr/ucr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ucr;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : Error {
  using Error::Error;
};

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("no such file: " + path);
}

json read_json(const std::string& path) {
  require_file(path);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

// key.path=value, value parsed as JSON when possible
void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
    std::string ptr = "/" + s.substr(0, eq);
    std::replace(ptr.begin(), ptr.end(), '.', '/');
    const std::string raw = s.substr(eq + 1);
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    cfg[json::json_pointer(ptr)] = v;
  }
}

template <class T>
T config_as(const json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

std::string summary_line(const Dataset& ds) {
  return "users " + std::to_string(ds.meta.user_count) + "  items " + std::to_string(ds.meta.item_count) +
         "  events " + std::to_string(ds.events.size()) + "  days " + std::to_string(ds.meta.num_days()) + "\n";
}

// Training data named by a config's "data" block: {"synthetic": {...}} or
// {"events": path, "num_tasks": K}.
struct DataSource {
  json block;

  void validate() const {
    const bool syn = block.contains("synthetic"), ev = block.contains("events");
    if (syn == ev) throw ConfigError("data block needs exactly one of 'synthetic' or 'events'");
    if (syn) config_as<SyntheticConfig>(block["synthetic"], "data.synthetic").validate();
    else require_file(block["events"].get<std::string>());
  }

  Dataset load(std::uint32_t num_tasks) const {
    if (block.contains("synthetic")) return generate_synthetic(block["synthetic"].get<SyntheticConfig>()).dataset;
    Dataset ds;
    ds.events = read_events_file(block["events"].get<std::string>());
    ds.meta = describe_events(ds.events, block.value("num_tasks", num_tasks));
    validate_dataset(ds);
    return ds;
  }
};

// ---------------------------------------------------------------------------

int cmd_ingest(const std::string& movielens, const std::string& synthetic, const std::string& out_dir,
               const std::string& format) {
  if (movielens.empty() == synthetic.empty()) throw UsageError("ingest needs exactly one of --movielens or --synthetic");
  if (format != "binary" && format != "csv") throw UsageError("--format must be binary or csv");
  Dataset ds;
  std::optional<SyntheticSidecar> sidecar;
  json manifest{{"command", "ingest"}};
  if (!movielens.empty()) {
    require_file(movielens);
    ds = parse_movielens_file(movielens);
    manifest["movielens"] = movielens;
  } else {
    const auto cfg = config_as<SyntheticConfig>(read_json(synthetic), synthetic.c_str());
    cfg.validate();
    auto data = generate_synthetic(cfg);
    ds = std::move(data.dataset);
    sidecar = std::move(data.sidecar);
    manifest["synthetic"] = cfg;
  }
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const auto log = dir / (format == "binary" ? "events.bin" : "events.csv");
  {
    std::ofstream os(log, std::ios::binary);
    if (!os) throw Error("cannot write " + log.string());
    format == "binary" ? write_events_binary(os, ds.events) : write_events_csv(os, ds.events);
  }
  if (sidecar) {
    std::ofstream os(dir / "sidecar.txt");
    write_sidecar(os, *sidecar);
  }
  manifest["events"] = log.string();
  manifest["num_tasks"] = ds.meta.num_tasks;
  manifest["summary"] = {{"users", ds.meta.user_count},
                         {"items", ds.meta.item_count},
                         {"events", ds.events.size()},
                         {"days", ds.meta.num_days()}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << summary_line(ds);
  return 0;
}

// ---------------------------------------------------------------------------

std::string frames_table(std::span<const MetricsFrame> frames, std::uint32_t num_tasks) {
  std::vector<std::string> head{"run", "day", "examples"};
  for (std::uint32_t k = 0; k < num_tasks; ++k) {
    head.push_back("nce_" + std::to_string(k));
    head.push_back("auc_" + std::to_string(k));
  }
  head.push_back("mean_nce");
  head.push_back("active_params");
  ColumnTable t(head);
  for (const auto& f : frames) {
    std::vector<std::string> row{f.run, std::to_string(f.day), f.absent ? "absent" : std::to_string(f.eval_examples)};
    for (std::uint32_t k = 0; k < num_tasks; ++k) {
      row.push_back(k < f.nce.size() ? format_optional(f.nce[k]) : "NA");
      row.push_back(k < f.auc.size() ? format_optional(f.auc[k]) : "NA");
    }
    row.push_back(format_optional(f.mean_nce));
    row.push_back(std::to_string(f.active_parameters()));
    t.add_row(std::move(row));
  }
  return t.str();
}

int train_movielens(const json& cfg, const fs::path& dir) {
  const auto& m = cfg["movielens"];
  const std::string ratings = m.value("ratings", std::string{});
  if (ratings.empty()) throw ConfigError("movielens.ratings is required");
  MovieLensRunConfig rc;
  rc.protocol = config_as<MovieLensProtocolConfig>(m.value("protocol", json::object()), "movielens.protocol");
  rc.model = config_as<ModelConfig>(m.value("model", json::object()), "movielens.model");
  rc.epochs = m.value("epochs", rc.epochs);
  rc.batch_size = m.value("batch_size", rc.batch_size);
  rc.list_seed = m.value("list_seed", rc.list_seed);
  rc.protocol.validate();
  rc.model.validate();
  require_file(ratings);
  fs::create_directories(dir);
  write_text(dir / "manifest.json", cfg.dump(2) + "\n");
  const auto ds = parse_movielens_file(ratings, rc.protocol);
  std::cout << summary_line(ds);
  const auto res = run_movielens(ds, rc, [](const std::string& s) { std::cerr << s << "\n"; });
  ColumnTable t({"model", "test_auc", "test_examples"});
  json out{{"train_events", res.train_events}, {"test_events", res.test_events}};
  for (const auto& r : res.rows) {
    t.add_row({to_string(r.formulation), format_optional(r.auc), std::to_string(r.test_examples)});
    out["auc"][to_string(r.formulation)] = r.auc ? json(*r.auc) : json(nullptr);
  }
  fs::create_directories(dir / "reports");
  write_text(dir / "movielens.json", out.dump(2) + "\n");
  write_text(dir / "reports" / "movielens.txt", t.str());
  std::cout << t.str();
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets, std::string run_dir) {
  json cfg = read_json(config_path);
  apply_overrides(cfg, sets);
  if (run_dir.empty()) run_dir = cfg.value("run_dir", std::string{});
  if (run_dir.empty()) throw UsageError("no run directory (use --run-dir or run_dir in the config)");
  const fs::path dir(run_dir);
  if (cfg.contains("movielens")) {
    if (cfg.contains("data")) throw UsageError("config names both movielens and data");
    return train_movielens(cfg, dir);
  }
  const auto exp = config_as<ExperimentConfig>(cfg.value("experiment", json::object()), "experiment");
  exp.validate();
  const DataSource src{cfg.value("data", json::object())};
  src.validate();
  const std::size_t train_days = cfg.value("train_days", std::size_t{0});

  fs::create_directories(dir / "reports");
  json manifest = cfg;
  manifest["experiment"] = exp;
  manifest.erase("run_dir");
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  const auto ds = src.load(exp.model.num_tasks);
  std::cerr << summary_line(ds);
  RecurrentRunner runner(ds, exp);
  RankingModel<float> model(exp.resolved_model());
  RecurrentOptions opt;
  opt.train_days = train_days;
  opt.on_frame = [](const MetricsFrame& f) {
    std::cerr << "day " << f.day << "  mean_nce " << format_optional(f.mean_nce, 4) << "\n";
  };
  const auto res = runner.run(model, opt);
  {
    std::ofstream os(dir / "frames.jsonl", std::ios::binary);
    write_frames(os, std::span<const MetricsFrame>(res.frames));
  }
  {
    std::ofstream os(dir / "checkpoint.bin", std::ios::binary);
    model.save(os);
  }
  if (exp.strategy == ListStrategy::kUCClustering) {
    std::ofstream os(dir / "clusters.txt");
    runner.clusters().save(os);
  }
  const auto table = frames_table(res.frames, exp.model.num_tasks);
  write_text(dir / "reports" / "frames.txt", table);
  std::cout << table << "summary_nce " << format_optional(summary_nce(res.frames, exp.metric_window)) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

std::vector<MetricsFrame> load_frames(const std::string& path) {
  require_file(path);
  std::ifstream in(path);
  return read_frames(in);
}

std::string growth_table(const std::vector<std::vector<MetricsFrame>>& runs) {
  std::vector<std::string> head{"day"};
  for (const auto& r : runs) head.push_back((r.empty() ? std::string("?") : r.front().run) + "_active_params");
  ColumnTable t(head);
  std::map<std::uint32_t, std::vector<std::string>> rows;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& f : runs[i]) {
      auto& row = rows[f.day];
      row.resize(runs.size(), "NA");
      row[i] = std::to_string(f.active_parameters());
    }
  for (auto& [day, cells] : rows) {
    std::vector<std::string> row{std::to_string(day)};
    row.insert(row.end(), cells.begin(), cells.end());
    t.add_row(std::move(row));
  }
  return t.str();
}

// Mean NCE per day relative to one baseline frame: 100 * (nce / base - 1).
std::string relative_table(const std::vector<std::vector<MetricsFrame>>& runs, std::uint32_t base_day) {
  if (runs.empty() || runs.front().empty()) throw Error("no frames");
  std::optional<double> base;
  for (const auto& f : runs.front())
    if (f.day == base_day) base = f.mean_nce;
  if (!base) throw Error("baseline frame (first run, day " + std::to_string(base_day) + ") has no NCE");
  std::vector<std::string> head{"day"};
  for (const auto& r : runs) head.push_back(r.front().run);
  ColumnTable t(head);
  std::map<std::uint32_t, std::vector<std::string>> rows;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& f : runs[i]) {
      auto& row = rows[f.day];
      row.resize(runs.size(), "NA");
      if (f.mean_nce) row[i] = format_number(100.0 * (*f.mean_nce / *base - 1.0), 4);
    }
  for (auto& [day, cells] : rows) {
    std::vector<std::string> row{std::to_string(day)};
    row.insert(row.end(), cells.begin(), cells.end());
    t.add_row(std::move(row));
  }
  return t.str();
}

// Per-day mean NCE of b minus a, and per-segment relative deltas. Negative
// means b is better.
std::string delta_table(const std::vector<MetricsFrame>& a, const std::vector<MetricsFrame>& b) {
  std::map<std::uint32_t, const MetricsFrame*> by_day;
  for (const auto& f : a) by_day[f.day] = &f;
  std::size_t segs = 0;
  for (const auto& f : b) segs = std::max(segs, f.segment_nce.size());
  std::vector<std::string> head{"day", "delta_mean_nce", "relative_%"};
  for (std::size_t s = 0; s < segs; ++s) head.push_back("seg" + std::to_string(s) + "_relative_%");
  ColumnTable t(head);
  for (const auto& fb : b) {
    auto it = by_day.find(fb.day);
    if (it == by_day.end()) continue;
    const auto& fa = *it->second;
    std::vector<std::string> row{std::to_string(fb.day), "NA", "NA"};
    if (fa.mean_nce && fb.mean_nce) {
      row[1] = format_number(*fb.mean_nce - *fa.mean_nce, 6);
      row[2] = format_relative(100.0 * (*fb.mean_nce / *fa.mean_nce - 1.0), false);
    }
    for (std::size_t s = 0; s < segs; ++s) {
      std::optional<double> na = s < fa.segment_nce.size() ? fa.segment_nce[s] : std::nullopt;
      std::optional<double> nb = s < fb.segment_nce.size() ? fb.segment_nce[s] : std::nullopt;
      row.push_back(na && nb ? format_relative(100.0 * (*nb / *na - 1.0), false) : "NA");
    }
    t.add_row(std::move(row));
  }
  return t.str();
}

std::string cluster_histogram(const std::string& path) {
  require_file(path);
  std::ifstream in(path);
  const auto map = ClusterMap::load(in);
  std::map<std::size_t, std::size_t> hist;
  for (const auto& [c, n] : map.sizes()) ++hist[n];
  ColumnTable t({"cluster_size", "clusters"});
  for (const auto& [size, count] : hist) t.add_row({std::to_string(size), std::to_string(count)});
  return t.str();
}

int cmd_report(const std::vector<std::string>& files, const std::string& kind, std::uint32_t base_day,
               const std::string& clusters, const std::string& out) {
  std::string text;
  if (!clusters.empty()) {
    if (!files.empty()) throw UsageError("--clusters cannot be combined with frame files");
    text = cluster_histogram(clusters);
  } else {
    if (files.empty()) throw UsageError("report needs at least one frame file");
    std::vector<std::vector<MetricsFrame>> runs;
    for (const auto& f : files) runs.push_back(load_frames(f));
    std::uint32_t tasks = 1;
    for (const auto& r : runs)
      for (const auto& f : r) tasks = std::max<std::uint32_t>(tasks, static_cast<std::uint32_t>(f.nce.size()));
    if (kind == "frames") {
      for (const auto& r : runs) text += frames_table(r, tasks);
    } else if (kind == "growth") {
      text = growth_table(runs);
    } else if (kind == "relative") {
      text = relative_table(runs, base_day);
    } else if (kind == "delta") {
      if (runs.size() != 2) throw UsageError("delta report needs exactly two frame files (baseline first)");
      text = delta_table(runs[0], runs[1]);
    } else {
      throw UsageError("unknown report kind '" + kind + "'");
    }
  }
  if (!out.empty()) write_text(out, text);
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& sets, const std::string& axis,
              const std::vector<std::string>& values, std::size_t baseline, std::string run_dir) {
  json cfg = read_json(config_path);
  apply_overrides(cfg, sets);
  if (run_dir.empty()) run_dir = cfg.value("run_dir", std::string{});
  if (run_dir.empty()) throw UsageError("no run directory (use --run-dir or run_dir in the config)");
  auto exp = config_as<ExperimentConfig>(cfg.value("experiment", json::object()), "experiment");
  exp.validate();
  for (const auto& v : values) {
    auto probe = exp;
    apply_axis(probe, axis, v);
    probe.validate();
  }
  if (baseline >= values.size()) throw UsageError("--baseline out of range");
  const DataSource src{cfg.value("data", json::object())};
  src.validate();
  const fs::path dir(run_dir);
  fs::create_directories(dir / "reports");
  json manifest = cfg;
  manifest["experiment"] = exp;
  manifest["sweep"] = {{"axis", axis}, {"values", values}, {"baseline", baseline}};
  manifest.erase("run_dir");
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  const auto ds = src.load(exp.model.num_tasks);
  const auto table = run_sweep(ds, exp, axis, values, baseline, [&](const std::string& v, const RecurrentResult& r) {
    std::ofstream os(dir / ("frames_" + axis + "_" + v + ".jsonl"), std::ios::binary);
    write_frames(os, std::span<const MetricsFrame>(r.frames));
    std::cerr << axis << "=" << v << " done\n";
  });
  const auto text = table.table().str();
  write_text(dir / "reports" / ("sweep_" + axis + ".txt"), text);
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_drift(const std::string& run_dir, std::uint32_t start_day, double window_hours, std::size_t windows) {
  const fs::path dir(run_dir);
  const auto manifest = read_json((dir / "manifest.json").string());
  const auto exp = config_as<ExperimentConfig>(manifest.value("experiment", json::object()), "experiment");
  const DataSource src{manifest.value("data", json::object())};
  src.validate();
  if (!(window_hours > 0.0)) throw UsageError("--window-hours must be positive");
  require_file((dir / "checkpoint.bin").string());
  std::ifstream ck(dir / "checkpoint.bin", std::ios::binary);
  const auto model = RankingModel<float>::load(ck);
  const auto ds = src.load(exp.model.num_tasks);
  if (start_day >= ds.meta.num_days()) throw UsageError("--start-day past the end of the log");
  RecurrentRunner runner(ds, exp);
  if (exp.strategy == ListStrategy::kUCClustering) throw UsageError("drift probes support sampled lists only");
  const auto series = run_drift_probe(model, runner.builder(), std::span<const InteractionEvent>(ds.events), 0,
                                      ds.meta.day_boundaries[start_day],
                                      static_cast<Timestamp>(window_hours * 3600.0), windows, exp.model.num_tasks);
  ColumnTable t({"window", "start", "examples", "mean_nce"});
  std::vector<double> x, y;
  for (std::size_t w = 0; w < series.nce.size(); ++w) {
    t.add_row({std::to_string(w), std::to_string(series.window_start[w]), std::to_string(series.examples[w]),
               format_optional(series.nce[w])});
    if (series.nce[w]) {
      x.push_back(static_cast<double>(w));
      y.push_back(*series.nce[w]);
    }
  }
  std::string text = t.str();
  if (x.size() >= 3) {
    const auto fit = linear_fit(x, y);
    text += "spearman " + format_number(spearman(x, y), 4) + "  slope " + format_number(fit.slope, 6) + "  ci95 [" +
            format_number(fit.slope_ci_low, 6) + ", " + format_number(fit.slope_ci_high, 6) + "]\n";
  }
  fs::create_directories(dir / "reports");
  write_text(dir / "reports" / "drift.txt", text);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ucr: user-centric ranking experiments"};
  app.require_subcommand(1);

  std::string ml, syn, out, format = "binary";
  auto* ingest = app.add_subcommand("ingest", "write a canonical event log from MovieLens or the generator");
  auto* o_ml = ingest->add_option("--movielens", ml, "MovieLens ratings.csv");
  auto* o_syn = ingest->add_option("--synthetic", syn, "synthetic generator config (JSON)");
  o_ml->excludes(o_syn);
  ingest->add_option("--out", out, "output directory")->required();
  ingest->add_option("--format", format, "binary or csv");

  std::string config, run_dir;
  std::vector<std::string> sets;
  auto* train = app.add_subcommand("train", "recurrent training or the MovieLens protocol");
  train->add_option("--config", config, "run config (JSON)")->required();
  train->add_option("--run-dir", run_dir, "output directory");
  train->add_option("--set", sets, "override a config key, e.g. experiment.model.embed_dim=64");

  std::vector<std::string> frame_files;
  std::string kind = "frames", clusters, report_out;
  std::uint32_t base_day = 1;
  auto* report = app.add_subcommand("report", "column-text tables from frame files");
  report->add_option("frames", frame_files, "frames.jsonl files");
  report->add_option("--kind", kind, "frames, growth, relative or delta");
  report->add_option("--baseline-day", base_day, "baseline day for relative tables");
  report->add_option("--clusters", clusters, "cluster map file: print the size histogram");
  report->add_option("--out", report_out, "also write the table here");

  std::string axis;
  std::vector<std::string> values;
  std::size_t baseline = 0;
  auto* sweep = app.add_subcommand("sweep", "one run per value of a config axis");
  sweep->add_option("--config", config, "run config (JSON)")->required();
  sweep->add_option("--run-dir", run_dir, "output directory");
  sweep->add_option("--set", sets, "override a config key");
  sweep->add_option("--axis", axis, "hash_size, embed_dim, list_capacity, num_heads, pooling, strategy, time_encoding")
      ->required();
  sweep->add_option("--values", values, "axis values")->required()->delimiter(',');
  sweep->add_option("--baseline", baseline, "index of the baseline value");

  std::uint32_t start_day = 0;
  double window_hours = 24.0;
  std::size_t windows = 7;
  auto* drift = app.add_subcommand("drift", "score a trained checkpoint on later time windows");
  drift->add_option("--run-dir", run_dir, "directory of a finished train run")->required();
  drift->add_option("--start-day", start_day, "first day of the probe")->required();
  drift->add_option("--window-hours", window_hours, "window length");
  drift->add_option("--windows", windows, "number of windows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*ingest) return cmd_ingest(ml, syn, out, format);
    if (*train) return cmd_train(config, sets, run_dir);
    if (*report) return cmd_report(frame_files, kind, base_day, clusters, report_out);
    if (*sweep) return cmd_sweep(config, sets, axis, values, baseline, run_dir);
    if (*drift) return cmd_drift(run_dir, start_day, window_hours, windows);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
