#pragma once

// End-to-end driver: ingest -> infer -> label -> matrices -> entropy -> stats,
// plus plot-table emission. Every stage reads and writes plain CSV / JSON
// under the output directory, so stages can be rerun or inspected alone.
//
// Layout of the output directory:
//   provenance.json, manifest.json
//   ingest/   summary.json, shards/shard_NNN.csv
//   infer/    homes.csv, visits.csv, qa.json
//   label/    users.csv, places.csv, summary.json
//   matrices/ M_<filter>_<period>.{csv,json}, S_<filter>_<a>-<b>.{csv,json},
//             r_series_<filter>.csv, index.json
//   entropy/  entropy_long.csv, window_means.csv, summary.json
//   stats/    regression.json, kruskal.json, kruskal_table.csv
//   plots/    plot-ready long-format tables

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "segmob/common.hpp"
#include "segmob/entropy.hpp"
#include "segmob/inference.hpp"
#include "segmob/ingest.hpp"
#include "segmob/segmentation.hpp"
#include "segmob/spatial.hpp"
#include "segmob/stats.hpp"
#include "segmob/stratify.hpp"
#include "segmob/timeline.hpp"

namespace segmob::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum class Stage { ingest, infer, label, matrices, entropy, stats };
inline constexpr std::array kStages = {Stage::ingest, Stage::infer, Stage::label,
                                       Stage::matrices, Stage::entropy, Stage::stats};

inline std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::ingest: return "ingest";
    case Stage::infer: return "infer";
    case Stage::label: return "label";
    case Stage::matrices: return "matrices";
    case Stage::entropy: return "entropy";
    case Stage::stats: return "stats";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (auto st : kStages)
    if (stage_name(st) == s) return st;
  throw Error("unknown stage '" + std::string(s) + "' (expected ingest|infer|label|matrices|entropy|stats)");
}

struct Options {
  fs::path config_path;
  std::optional<Stage> only;            // run a single stage
  std::optional<fs::path> output_root;  // overrides config output_dir
  bool lenient = false;
  int threads = 1;
  bool force = false;  // ignore completed-stage markers
};

// ---------------------------------------------------------------------------
// Small CSV helpers shared by the stages.

namespace io {

inline std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  return os;
}

inline void write_json(const fs::path& p, const Json& j) {
  auto os = open_out(p);
  os << j.dump(2) << '\n';
}

inline Json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw Error("missing artifact " + p.string());
  try {
    return Json::parse(detail::read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

// Streams a CSV with a header row; lines starting with '#' are skipped.
class CsvReader {
 public:
  explicit CsvReader(const fs::path& p) : path_(p.string()), in_(p) {
    if (!fs::exists(p) || !in_) throw Error("missing artifact " + path_);
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.empty() || line.front() == '#') continue;
      header_ = line;
      detail::split_csv(header_, fields_);
      for (std::size_t i = 0; i < fields_.size(); ++i) columns_.emplace(std::string(fields_[i]), i);
      return;
    }
    throw ParseError(path_, line_no_, "missing header");
  }

  std::size_t column(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw Error(path_ + ": missing column '" + name + "'");
    return it->second;
  }

  bool next() {
    while (std::getline(in_, line_)) {
      ++line_no_;
      if (line_.empty() || line_.front() == '#') continue;
      detail::split_csv(line_, fields_);
      if (fields_.size() != columns_.size()) throw ParseError(path_, line_no_, "field count does not match header");
      return true;
    }
    return false;
  }

  std::string_view operator[](std::size_t i) const { return fields_[i]; }
  std::int64_t integer(std::size_t i) const {
    std::int64_t v = 0;
    if (!detail::parse_int64(fields_[i], v)) throw ParseError(path_, line_no_, "expected integer");
    return v;
  }
  double number(std::size_t i) const {
    double v = 0;
    if (!detail::parse_double(fields_[i], v)) throw ParseError(path_, line_no_, "expected number");
    return v;
  }
  const std::string& path() const { return path_; }
  std::size_t line() const { return line_no_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::string header_, line_;
  std::vector<std::string_view> fields_;
  std::map<std::string, std::size_t> columns_;
  std::size_t line_no_ = 0;
};

inline std::string opt_number(const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string(); }

inline Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline void write_matrix_csv(std::ostream& os, int n, std::span<const double> values) {
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      if (i) os << ',';
      os << detail::format_double(values[static_cast<std::size_t>(j) * n + i]);
    }
    os << '\n';
  }
}

inline std::vector<double> read_matrix_csv(const fs::path& p, int n) {
  std::ifstream in(p);
  if (!in) throw Error("missing artifact " + p.string());
  std::vector<double> out;
  std::string line;
  std::vector<std::string_view> f;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    detail::split_csv(line, f);
    if (f.size() != static_cast<std::size_t>(n)) throw Error(p.string() + ": expected " + std::to_string(n) + " columns");
    for (auto s : f) {
      double v = 0;
      if (!detail::parse_double(s, v)) throw Error(p.string() + ": bad matrix entry");
      out.push_back(v);
    }
  }
  if (out.size() != static_cast<std::size_t>(n) * n) throw Error(p.string() + ": expected " + std::to_string(n) + " rows");
  return out;
}

// Runs fn(i) for i in [0, count) on up to `threads` workers; rethrows the
// first failure.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace io

// ---------------------------------------------------------------------------

// Identity of a run, embedded in every artifact.
struct Provenance {
  std::string version{kVersion};
  std::string config_hash;
  std::map<std::string, std::string> inputs;  // role -> fnv1a64 digest
  std::vector<Period> periods;

  Json to_json() const {
    Json j;
    j["tool"] = "segmob";
    j["version"] = version;
    j["config_hash"] = config_hash;
    j["digest_algorithm"] = "fnv1a64";
    j["inputs"] = Json::object();
    for (const auto& [k, v] : inputs) j["inputs"][k] = v;
    j["periods"] = Json::array();
    for (const auto& p : periods)
      j["periods"].push_back({{"label", p.label}, {"start", format_date(p.start)}, {"end", format_date(p.end)}});
    return j;
  }

  static Provenance from_json(const Json& j) {
    Provenance p;
    p.version = j.at("version").get<std::string>();
    p.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [k, v] : j.at("inputs").items()) p.inputs[k] = v.get<std::string>();
    for (const auto& per : j.at("periods"))
      p.periods.push_back({per.at("label").get<std::string>(), parse_date(per.at("start").get<std::string>()),
                           parse_date(per.at("end").get<std::string>())});
    return p;
  }

  // One-line CSV preamble.
  std::string csv_comment() const {
    std::string s = "# segmob " + version + " config=" + config_hash;
    for (const auto& [k, v] : inputs) s += " " + k + "=" + v;
    s += " periods=";
    for (std::size_t i = 0; i < periods.size(); ++i)
      s += (i ? ";" : "") + periods[i].label + ":" + format_date(periods[i].start) + ".." + format_date(periods[i].end);
    return s + "\n";
  }
};

using RowCounts = std::map<std::string, std::uint64_t>;

inline fs::path resolve_output_dir(const Options& opts, const RunConfig& cfg) {
  if (opts.output_root) return *opts.output_root;
  if (cfg.output_dir) return *cfg.output_dir;
  return fs::current_path() / "segmob_out";
}

class Pipeline {
 public:
  explicit Pipeline(Options opts) : opts_(std::move(opts)) {
    const auto file = load_config_file(opts_.config_path);
    cfg_ = run_config_from(file);
    if (cfg_.trajectories.empty() || cfg_.ses_map.empty() || cfg_.stringency.empty())
      throw Error("config must set trajectories, ses_map and stringency");
    periods_ = segment(cfg_.periods);
    for (const auto& f : cfg_.filters) filters_.push_back(VisitFilter::parse(f));
    if (filters_.empty()) throw Error("config lists no filters");
    out_ = resolve_output_dir(opts_, cfg_);

    prov_.config_hash = detail::file_digest(opts_.config_path);
    for (const auto& [role, path] : {std::pair{"trajectories", cfg_.trajectories}, std::pair{"ses_map", cfg_.ses_map},
                                     std::pair{"stringency", cfg_.stringency}}) {
      if (!fs::exists(path)) throw Error("input '" + std::string(role) + "' not found: " + path.string());
      prov_.inputs[role] = detail::file_digest(path);
    }
    prov_.periods = periods_;
    std::string basis = prov_.version + "|" + prov_.config_hash + (opts_.lenient ? "|lenient" : "|strict");
    for (const auto& [k, v] : prov_.inputs) basis += "|" + k + "=" + v;
    run_key_ = detail::hex64(detail::fnv1a64(basis));
  }

  const fs::path& output_dir() const { return out_; }
  const RunConfig& config() const { return cfg_; }

  void run() {
    fs::create_directories(out_);
    io::write_json(out_ / "provenance.json", prov_.to_json());
    Json manifest;
    manifest["provenance"] = prov_.to_json();
    manifest["stages"] = Json::object();
    if (fs::exists(out_ / "manifest.json")) {
      try {
        auto old = io::read_json(out_ / "manifest.json");
        if (old.contains("stages")) manifest["stages"] = old["stages"];
      } catch (const Error&) {
      }
    }

    for (auto st : kStages) {
      if (opts_.only && *opts_.only != st) continue;
      const std::string name(stage_name(st));
      if (opts_.only) {
        require_previous(st);
      } else if (!opts_.force && stage_complete(st)) {
        auto marker = io::read_json(out_ / name / "stage.json");
        manifest["stages"][name] = {{"status", "resumed"}, {"rows", marker["rows"]}};
        continue;
      }
      const auto t0 = std::chrono::steady_clock::now();
      RowCounts rows;
      try {
        rows = run_stage(st);
      } catch (const std::exception& e) {
        throw Error("stage '" + name + "' failed: " + e.what());
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      Json jrows = Json::object();
      for (const auto& [k, v] : rows) jrows[k] = v;
      io::write_json(out_ / name / "stage.json", {{"stage", name}, {"key", run_key_}, {"rows", jrows}});
      manifest["stages"][name] = {{"status", "ran"}, {"rows", jrows}, {"seconds", secs}};
      io::write_json(out_ / "manifest.json", manifest);
    }
    io::write_json(out_ / "manifest.json", manifest);
  }

  bool stage_complete(Stage st) const {
    const auto marker = out_ / std::string(stage_name(st)) / "stage.json";
    if (!fs::exists(marker)) return false;
    try {
      return io::read_json(marker).value("key", "") == run_key_;
    } catch (const Error&) {
      return false;
    }
  }

 private:
  void require_previous(Stage st) const {
    const auto idx = static_cast<std::size_t>(st);
    if (idx == 0) return;
    const Stage prev = kStages[idx - 1];
    if (!stage_complete(prev))
      throw Error("stage '" + std::string(stage_name(st)) + "' requires completed outputs of stage '" +
                  std::string(stage_name(prev)) + "' in " + out_.string() + " (run --stage " +
                  std::string(stage_name(prev)) + " first)");
  }

  RowCounts run_stage(Stage st) {
    switch (st) {
      case Stage::ingest: return run_ingest();
      case Stage::infer: return run_infer();
      case Stage::label: return run_label();
      case Stage::matrices: return run_matrices();
      case Stage::entropy: return run_entropy();
      case Stage::stats: return run_stats();
    }
    return {};
  }

  fs::path dir(std::string_view stage) const { return out_ / std::string(stage); }

  fs::path shard_path(int shard) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "shard_%03d.csv", shard);
    return dir("ingest") / "shards" / buf;
  }

  // -- ingest ---------------------------------------------------------------

  RowCounts run_ingest() {
    fs::remove_all(dir("ingest"));
    const auto regions = load_ses_map(cfg_.ses_map, cfg_.invert_income);
    const auto stringency = load_stringency(cfg_.stringency);

    TrajectoryReader reader(cfg_.trajectories, opts_.lenient);
    std::vector<std::ofstream> shards;
    for (int s = 0; s < cfg_.shards; ++s) {
      shards.push_back(io::open_out(shard_path(s)));
      shards.back() << kTrajectoryHeader << '\n';
    }
    while (auto rec = reader.next()) {
      const auto s = detail::fnv1a64(rec->user_id) % static_cast<std::uint64_t>(cfg_.shards);
      write_trajectory_row(shards[s], *rec);
    }
    for (auto& s : shards) s.close();

    Json j;
    j["provenance"] = prov_.to_json();
    j["trajectories"] = {{"data_rows", reader.data_rows()},
                         {"accepted", reader.accepted()},
                         {"rejected", reader.rejected()},
                         {"lenient", opts_.lenient}};
    Json errs = Json::array();
    for (const auto& e : reader.errors()) errs.push_back({{"line", e.line}, {"message", e.message}});
    j["trajectories"]["first_rejects"] = errs;
    j["ses_regions"] = regions.size();
    Json gaps = Json::array();
    for (auto g : stringency.gaps) gaps.push_back(format_date(g));
    j["stringency"] = {{"days", stringency.records.size()}, {"gaps", gaps}};
    j["shards"] = cfg_.shards;
    io::write_json(dir("ingest") / "summary.json", j);
    return {{"accepted", reader.accepted()}, {"rejected", reader.rejected()}, {"ses_regions", regions.size()},
            {"stringency_days", stringency.records.size()}};
  }

  // -- infer ----------------------------------------------------------------

  RowCounts run_infer() {
    const auto index = build_index(load_ses_map(cfg_.ses_map, cfg_.invert_income), cfg_.cells_per_axis);
    const auto parts = dir("infer") / "parts";
    fs::remove_all(dir("infer"));
    fs::create_directories(parts);

    std::vector<InferenceQa> qas(static_cast<std::size_t>(cfg_.shards));
    io::parallel_for(static_cast<std::size_t>(cfg_.shards), opts_.threads, [&](std::size_t s) {
      std::map<std::string, std::vector<TrajectoryRecord>> by_user;
      TrajectoryReader reader(shard_path(static_cast<int>(s)));
      while (auto rec = reader.next()) by_user[rec->user_id].push_back(std::move(*rec));

      auto homes = io::open_out(parts / ("homes_" + std::to_string(s) + ".csv"));
      auto visits = io::open_out(parts / ("visits_" + std::to_string(s) + ".csv"));
      auto& qa = qas[s];
      for (auto& [user, stays] : by_user) {
        std::stable_sort(stays.begin(), stays.end(),
                         [](const auto& a, const auto& b) { return a.start_ts < b.start_ts; });
        auto home = infer_home(stays, cfg_, index, &qa);
        if (!home) {
          homes << user << ",,0,0\n";
          continue;
        }
        homes << user << ',' << home->home_region << ',' << detail::format_double(home->night_hours) << ','
              << home->qualifying_nights << '\n';
        for (const auto& v : extract_visits(stays, *home, index, cfg_, &qa))
          visits << v.user_id << ',' << v.home_region << ',' << v.region_id << ',' << v.start_ts << ',' << v.end_ts
                 << ',' << to_string(v.kind) << '\n';
      }
    });

    auto homes = io::open_out(dir("infer") / "homes.csv");
    auto visits = io::open_out(dir("infer") / "visits.csv");
    homes << prov_.csv_comment() << "user_id,home_region,night_hours,qualifying_nights\n";
    visits << prov_.csv_comment() << "user_id,home_region,region_id,start_ts,end_ts,kind\n";
    InferenceQa qa;
    for (int s = 0; s < cfg_.shards; ++s) {
      qa.merge(qas[static_cast<std::size_t>(s)]);
      for (auto [name, os] : {std::pair{"homes_", &homes}, std::pair{"visits_", &visits}}) {
        const auto p = parts / (std::string(name) + std::to_string(s) + ".csv");
        *os << detail::read_file(p);
      }
    }
    homes.close();
    visits.close();
    fs::remove_all(parts);

    Json j;
    j["provenance"] = prov_.to_json();
    j["users"] = qa.users;
    j["homes"] = qa.homes;
    j["home_yield"] = qa.home_yield();
    j["tie_breaks"] = qa.tie_breaks;
    j["stays_of_homed_users"] = qa.stays;
    j["stays_outside_map"] = qa.stays_outside_map;
    j["visits"] = qa.visits;
    j["rules"] = {{"night_window", format_time_of_day(cfg_.night_start) + "-" + format_time_of_day(cfg_.night_end)},
                  {"min_home_hours", cfg_.min_home_hours},
                  {"coalesce_gap_seconds", cfg_.coalesce_gap_seconds},
                  {"poi_window", format_time_of_day(cfg_.poi_start) + "-" + format_time_of_day(cfg_.poi_end)},
                  {"utc_offset_minutes", cfg_.utc_offset_minutes}};
    io::write_json(dir("infer") / "qa.json", j);
    return {{"users", qa.users}, {"homes", qa.homes}, {"visits", qa.visits}};
  }

  // -- label ----------------------------------------------------------------

  RowCounts run_label() {
    const auto regions = load_ses_map(cfg_.ses_map, cfg_.invert_income);
    std::vector<std::optional<HomeAssignment>> homes;
    RegionWeights home_weights;
    {
      io::CsvReader csv(dir("infer") / "homes.csv");
      const auto cu = csv.column("user_id"), ch = csv.column("home_region"), cn = csv.column("night_hours"),
                 cq = csv.column("qualifying_nights");
      while (csv.next()) {
        if (csv[ch].empty()) {
          homes.emplace_back(std::nullopt);
          continue;
        }
        homes.push_back(HomeAssignment{std::string(csv[cu]), std::string(csv[ch]), csv.number(cn),
                                       static_cast<int>(csv.integer(cq))});
        home_weights[std::string(csv[ch])] += 1;
      }
    }
    const auto people = cfg_.people_deciles == DecileMode::weighted
                            ? assign_deciles(regions, &home_weights, cfg_.n_classes)
                            : assign_deciles(regions, nullptr, cfg_.n_classes);
    DecileAssignment places;
    if (cfg_.place_deciles == DecileMode::weighted) {
      RegionWeights visit_weights;
      io::CsvReader csv(dir("infer") / "visits.csv");
      const auto cr = csv.column("region_id");
      while (csv.next()) visit_weights[std::string(csv[cr])] += 1;
      places = assign_deciles(regions, &visit_weights, cfg_.n_classes);
    } else {
      places = assign_deciles(regions, nullptr, cfg_.n_classes);
    }
    const auto pop = label_population(homes, people, places);

    {
      auto os = io::open_out(dir("label") / "users.csv");
      os << prov_.csv_comment() << "user_id,home_region,class\n";
      for (const auto& h : homes)
        if (h) os << h->user_id << ',' << h->home_region << ',' << pop.user_class.at(h->user_id) << '\n';
    }
    {
      auto os = io::open_out(dir("label") / "places.csv");
      os << prov_.csv_comment() << "region_id,zone,income,people_class,place_class\n";
      for (const auto& r : regions)
        os << r.region_id << ',' << r.zone << ',' << detail::format_double(r.income) << ','
           << people.class_of(r.region_id) << ',' << places.class_of(r.region_id) << '\n';
    }
    Json j;
    j["provenance"] = prov_.to_json();
    j["users_labeled"] = pop.user_class.size();
    j["users_without_home"] = pop.users_without_home;
    j["class_histogram"] = pop.class_histogram();
    j["people_deciles"] = {{"mode", cfg_.people_deciles == DecileMode::weighted ? "user_weighted" : "region_unweighted"},
                           {"edges", people.edges}};
    j["place_deciles"] = {{"mode", cfg_.place_deciles == DecileMode::weighted ? "visit_weighted" : "region_unweighted"},
                          {"edges", places.edges}};
    j["income_inverted"] = cfg_.invert_income;
    io::write_json(dir("label") / "summary.json", j);
    return {{"users_labeled", pop.user_class.size()}, {"regions", regions.size()}};
  }

  // -- shared loaders for labelled data -------------------------------------

  struct Labels {
    std::map<std::string, int, std::less<>> user_class;
    std::map<std::string, int, std::less<>> place_class;
    ZoneMap zones;
    std::size_t n_regions = 0;
  };

  Labels load_labels() const {
    Labels l;
    {
      io::CsvReader csv(dir("label") / "users.csv");
      const auto cu = csv.column("user_id"), cc = csv.column("class");
      while (csv.next()) l.user_class.emplace(std::string(csv[cu]), static_cast<int>(csv.integer(cc)));
    }
    {
      io::CsvReader csv(dir("label") / "places.csv");
      const auto cr = csv.column("region_id"), cz = csv.column("zone"), cc = csv.column("place_class");
      while (csv.next()) {
        l.place_class.emplace(std::string(csv[cr]), static_cast<int>(csv.integer(cc)));
        l.zones.emplace(std::string(csv[cr]), std::string(csv[cz]));
        ++l.n_regions;
      }
    }
    return l;
  }

  // Streams labelled visits in file order.
  template <typename Fn>
  std::size_t for_each_visit(const Labels& labels, Fn&& fn) const {
    io::CsvReader csv(dir("infer") / "visits.csv");
    const auto cu = csv.column("user_id"), ch = csv.column("home_region"), cr = csv.column("region_id"),
               cs = csv.column("start_ts"), ce = csv.column("end_ts"), ck = csv.column("kind");
    std::size_t skipped = 0;
    Visit v;
    while (csv.next()) {
      v.user_id.assign(csv[cu]);
      v.home_region.assign(csv[ch]);
      v.region_id.assign(csv[cr]);
      v.start_ts = csv.integer(cs);
      v.end_ts = csv.integer(ce);
      v.kind = parse_visit_kind(csv[ck]);
      auto u = labels.user_class.find(v.user_id);
      auto p = labels.place_class.find(v.region_id);
      if (u == labels.user_class.end() || p == labels.place_class.end()) {
        ++skipped;
        continue;
      }
      v.class_user = u->second;
      v.class_place = p->second;
      fn(v);
    }
    return skipped;
  }

  std::optional<std::vector<Window>> analysis_windows(std::string* reason = nullptr) const {
    try {
      return windows(periods_.front().start, periods_.back().end, cfg_.window_days, cfg_.slide_days);
    } catch (const Error& e) {
      if (reason) *reason = e.what();
      return std::nullopt;
    }
  }

  // -- matrices -------------------------------------------------------------

  RowCounts run_matrices() {
    fs::remove_all(dir("matrices"));
    const auto labels = load_labels();
    const int n = cfg_.n_classes;
    std::vector<DailyClassCounts> daily(filters_.size(), DailyClassCounts(n));
    std::uint64_t n_visits = 0;
    for_each_visit(labels, [&](const Visit& v) {
      ++n_visits;
      const Date day = local_date(v.start_ts, cfg_.utc_offset_minutes);
      for (std::size_t f = 0; f < filters_.size(); ++f)
        if (filters_[f].accepts(v, &labels.zones)) daily[f].add(day, v.class_user, v.class_place);
    });

    std::string series_reason;
    const auto wins = analysis_windows(&series_reason);
    Json index;
    index["provenance"] = prov_.to_json();
    index["n_classes"] = n;
    index["layout"] = "rows = place class 1..n, columns = user class 1..n";
    index["filters"] = Json::array();
    index["matrices"] = Json::array();
    index["adjustments"] = Json::array();
    index["series"] = Json::array();
    std::uint64_t written = 0;

    for (std::size_t f = 0; f < filters_.size(); ++f) {
      const std::string fname = filters_[f].name();
      index["filters"].push_back(fname);
      std::vector<std::optional<StratificationMatrix>> mats(periods_.size());
      for (std::size_t p = 0; p < periods_.size(); ++p) {
        const auto counts = daily[f].sum(periods_[p].start, periods_[p].end);
        Json entry = {{"filter", fname}, {"period", periods_[p].label}, {"visits", counts.total()}};
        if (counts.empty()) {
          entry["file"] = nullptr;
          index["matrices"].push_back(entry);
          continue;
        }
        mats[p] = stratification_matrix(counts);
        const auto& m = *mats[p];
        std::optional<double> r;
        try {
          r = assortativity(m);
        } catch (const DegenerateError&) {
        }
        std::optional<ResidualIsolation> iso;
        if (p > 0 && mats[0]) iso = residual_isolation(adjustment_matrix(*mats[0], m));

        const std::string base = "M_" + fname + "_" + periods_[p].label;
        {
          auto os = io::open_out(dir("matrices") / (base + ".csv"));
          os << prov_.csv_comment();
          io::write_matrix_csv(os, n, m.a);
        }
        Json mj;
        mj["provenance"] = prov_.to_json();
        mj["period"] = periods_[p].label;
        mj["filter"] = fname;
        mj["r"] = io::opt_json(r);
        mj["mu_re"] = iso ? Json(iso->mu_re) : Json(nullptr);
        mj["mu_re_baseline"] = iso ? Json(periods_[0].label) : Json(nullptr);
        Json active = Json::array(), col_visits = Json::array();
        for (int i = 0; i < n; ++i) {
          if (m.active[static_cast<std::size_t>(i)]) active.push_back(i + 1);
          std::uint64_t c = 0;
          for (int j = 0; j < n; ++j) c += counts.at(j, i);
          col_visits.push_back(c);
        }
        mj["active_columns"] = active;
        mj["column_visits"] = col_visits;
        mj["visits"] = counts.total();
        Json rows = Json::array();
        for (int j = 0; j < n; ++j) {
          Json row = Json::array();
          for (int i = 0; i < n; ++i) row.push_back(m.at(j, i));
          rows.push_back(row);
        }
        mj["matrix"] = rows;
        io::write_json(dir("matrices") / (base + ".json"), mj);
        entry["file"] = base + ".csv";
        entry["r"] = io::opt_json(r);
        entry["active_columns"] = m.active_columns();
        index["matrices"].push_back(entry);
        ++written;
      }

      // Consecutive pairs plus baseline against every later period.
      std::set<std::pair<std::size_t, std::size_t>> pairs;
      for (std::size_t p = 1; p < periods_.size(); ++p) {
        pairs.insert({p - 1, p});
        pairs.insert({0, p});
      }
      for (const auto& [a, b] : pairs) {
        if (!mats[a] || !mats[b]) continue;
        const auto s = adjustment_matrix(*mats[a], *mats[b], periods_[a].label, periods_[b].label);
        const auto iso = residual_isolation(s);
        const std::string base = "S_" + fname + "_" + s.from + "-" + s.to;
        {
          auto os = io::open_out(dir("matrices") / (base + ".csv"));
          os << prov_.csv_comment();
          io::write_matrix_csv(os, n, s.b);
        }
        Json sj;
        sj["provenance"] = prov_.to_json();
        sj["filter"] = fname;
        sj["from"] = s.from;
        sj["to"] = s.to;
        sj["mu_re"] = iso.mu_re;
        sj["raw_trace"] = iso.raw_trace;
        sj["sign_convention"] = "mu_re = -trace(M_from - M_to) / n; positive = more in-class visiting in 'to'";
        io::write_json(dir("matrices") / (base + ".json"), sj);
        index["adjustments"].push_back({{"filter", fname},
                                        {"from", s.from},
                                        {"to", s.to},
                                        {"file", base + ".csv"},
                                        {"mu_re", iso.mu_re},
                                        {"raw_trace", iso.raw_trace}});
        ++written;
      }

      if (wins) {
        const auto series = assortativity_series(daily[f], *wins);
        const std::string file = "r_series_" + fname + ".csv";
        auto os = io::open_out(dir("matrices") / file);
        os << prov_.csv_comment() << "anchor_date,r,visits\n";
        std::size_t gaps = 0;
        for (const auto& pt : series) {
          os << format_date(pt.anchor) << ',' << io::opt_number(pt.r) << ',' << pt.visits << '\n';
          if (!pt.r) ++gaps;
        }
        index["series"].push_back({{"filter", fname}, {"file", file}, {"windows", series.size()}, {"gaps", gaps}});
      }
    }
    index["window_days"] = cfg_.window_days;
    index["slide_days"] = cfg_.slide_days;
    if (!wins) index["series_unavailable"] = series_reason;
    io::write_json(dir("matrices") / "index.json", index);
    return {{"visits", n_visits}, {"matrices", written}};
  }

  // -- entropy --------------------------------------------------------------

  RowCounts run_entropy() {
    fs::remove_all(dir("entropy"));
    const auto labels = load_labels();
    const auto filter = VisitFilter::parse(cfg_.entropy_filter);
    const int n = cfg_.n_classes;
    const auto wins = analysis_windows();
    std::vector<std::string> axes{"spatial", "ses"};
    if (cfg_.entropy_global_norm) axes.push_back("spatial_global");
    const std::size_t n_axes = axes.size();

    // [period][axis], [window][axis]
    std::vector<std::vector<EntropyAccumulator>> period_acc(periods_.size(), std::vector<EntropyAccumulator>(n_axes));
    std::vector<std::vector<std::size_t>> period_users(periods_.size(), std::vector<std::size_t>(2, 0));
    std::vector<std::vector<EntropyAccumulator>> window_acc(wins ? wins->size() : 0,
                                                            std::vector<EntropyAccumulator>(n_axes));

    auto long_os = io::open_out(dir("entropy") / "entropy_long.csv");
    long_os << prov_.csv_comment() << "period,axis,user_id,h\n";
    std::uint64_t long_rows = 0;

    struct DayVisit {
      Date day;
      const std::string* region;
      int place_class;
    };
    std::string current;
    std::vector<Visit> buffer;
    std::set<std::string> finished;

    auto entropies = [&](auto first, auto last, std::vector<double>& h) {
      std::vector<std::string_view> regions;
      std::vector<int> classes;
      for (auto it = first; it != last; ++it) {
        regions.push_back(*it->region);
        classes.push_back(it->place_class);
      }
      h.assign(n_axes, 0.0);
      h[0] = spatial_entropy(regions);
      h[1] = ses_entropy(classes, n);
      if (n_axes > 2) h[2] = spatial_entropy_global(regions, labels.n_regions);
    };

    auto flush = [&] {
      if (buffer.empty()) return;
      if (!finished.insert(current).second)
        throw Error("visits of user '" + current + "' are not contiguous in visits.csv");
      std::vector<DayVisit> dv;
      dv.reserve(buffer.size());
      for (const auto& v : buffer) dv.push_back({local_date(v.start_ts, cfg_.utc_offset_minutes), &v.region_id, v.class_place});
      std::stable_sort(dv.begin(), dv.end(), [](const auto& a, const auto& b) { return a.day < b.day; });
      auto range = [&](Date first, Date last) {
        auto lo = std::lower_bound(dv.begin(), dv.end(), first, [](const DayVisit& a, Date d) { return a.day < d; });
        auto hi = std::upper_bound(dv.begin(), dv.end(), last, [](Date d, const DayVisit& a) { return d < a.day; });
        return std::pair{lo, hi};
      };
      std::vector<double> h;
      for (std::size_t p = 0; p < periods_.size(); ++p) {
        auto [lo, hi] = range(periods_[p].start, periods_[p].end);
        const auto count = static_cast<std::size_t>(hi - lo);
        if (count == 0) continue;
        entropies(lo, hi, h);
        for (std::size_t a = 0; a < n_axes; ++a) {
          long_os << periods_[p].label << ',' << axes[a] << ',' << current << ',' << detail::format_double(h[a]) << '\n';
          ++long_rows;
        }
        ++period_users[p][0];
        if (count >= cfg_.entropy_min_visits) {
          for (std::size_t a = 0; a < n_axes; ++a) period_acc[p][a].add(h[a]);
        } else {
          ++period_users[p][1];
        }
      }
      if (wins) {
        for (std::size_t w = 0; w < wins->size(); ++w) {
          auto [lo, hi] = range((*wins)[w].start, (*wins)[w].end);
          if (static_cast<std::size_t>(hi - lo) == 0 || static_cast<std::size_t>(hi - lo) < cfg_.entropy_min_visits) continue;
          entropies(lo, hi, h);
          for (std::size_t a = 0; a < n_axes; ++a) window_acc[w][a].add(h[a]);
        }
      }
      buffer.clear();
    };

    for_each_visit(labels, [&](const Visit& v) {
      if (v.user_id != current) {
        flush();
        current = v.user_id;
      }
      if (filter.accepts(v, &labels.zones)) buffer.push_back(v);
    });
    flush();
    long_os.close();

    Json summary;
    summary["provenance"] = prov_.to_json();
    summary["filter"] = filter.name();
    summary["min_visits"] = cfg_.entropy_min_visits;
    summary["normalization"] = {{"spatial", "log2(distinct locations of the user in the period)"},
                                {"ses", "log2(n_classes)"}};
    if (cfg_.entropy_global_norm) summary["normalization"]["spatial_global"] = "log2(regions in SES map)";
    summary["periods"] = Json::array();
    for (std::size_t p = 0; p < periods_.size(); ++p) {
      for (std::size_t a = 0; a < n_axes; ++a) {
        Json e = {{"period", periods_[p].label},
                  {"axis", axes[a]},
                  {"users_with_visits", period_users[p][0]},
                  {"users_below_min_visits", period_users[p][1]}};
        if (period_acc[p][a].count() > 0) {
          const auto s = period_acc[p][a].summary();
          e["count"] = s.count;
          e["mean"] = s.mean;
          e["sd"] = s.sd;
          e["histogram"] = s.histogram;
        } else {
          e["count"] = 0;
          e["mean"] = nullptr;
          e["sd"] = nullptr;
          e["histogram"] = nullptr;
        }
        summary["periods"].push_back(e);
      }
    }
    io::write_json(dir("entropy") / "summary.json", summary);

    auto wm = io::open_out(dir("entropy") / "window_means.csv");
    wm << prov_.csv_comment() << "anchor_date,axis,mean,sd,n_users\n";
    std::uint64_t window_rows = 0;
    if (wins) {
      for (std::size_t w = 0; w < wins->size(); ++w)
        for (std::size_t a = 0; a < n_axes; ++a) {
          const auto& acc = window_acc[w][a];
          wm << format_date((*wins)[w].anchor()) << ',' << axes[a] << ',';
          if (acc.count() > 0) {
            const auto s = acc.summary();
            wm << detail::format_double(s.mean) << ',' << detail::format_double(s.sd) << ',' << s.count << '\n';
          } else {
            wm << ",,0\n";
          }
          ++window_rows;
        }
    }
    return {{"long_rows", long_rows}, {"window_rows", window_rows}};
  }

  // -- stats ----------------------------------------------------------------

  RowCounts run_stats() {
    fs::remove_all(dir("stats"));
    const auto stringency = load_stringency(cfg_.stringency);
    std::map<std::string, std::vector<DatedValue>> series;
    {
      io::CsvReader csv(dir("entropy") / "window_means.csv");
      const auto cd = csv.column("anchor_date"), ca = csv.column("axis"), cm = csv.column("mean"),
                 cn = csv.column("n_users");
      while (csv.next()) {
        if (csv.integer(cn) == 0) continue;
        series[std::string(csv[ca])].push_back({parse_date(csv[cd]), csv.number(cm)});
      }
    }
    // Disjoint mode keeps every window_days-th anchor so windows do not overlap.
    if (!cfg_.stats_sliding) {
      for (auto& [axis, obs] : series) {
        std::vector<DatedValue> kept;
        for (const auto& o : obs)
          if (kept.empty() || o.date - kept.back().date >= cfg_.window_days) kept.push_back(o);
        obs = kept;
      }
    }

    Json reg;
    reg["provenance"] = prov_.to_json();
    reg["dependent"] = "population mean entropy per sliding-window anchor date";
    reg["observations"] = cfg_.stats_sliding ? "sliding" : "disjoint";
    reg["window_days"] = cfg_.window_days;
    reg["predictors"] = "raw restriction levels on the anchor date";
    reg["fits"] = Json::object();
    std::map<std::string, RegressionResult> fits;
    for (const std::string axis : {"spatial", "ses"}) {
      Json fj;
      try {
        auto it = series.find(axis);
        if (it == series.end()) throw Error("no window means for axis '" + axis + "'");
        const auto fit = fit_stringency(it->second, stringency);
        fj["n_obs"] = fit.n_obs;
        fj["intercept"] = fit.intercept;
        fj["r2"] = fit.r2;
        fj["residual_variance"] = fit.residual_variance;
        fj["condition_number"] = fit.condition_number;
        fj["dropped"] = fit.dropped;
        fj["coefficients"] = Json::object();
        for (const auto& c : fit.coefficients)
          fj["coefficients"][c.name] = {{"beta", io::opt_json(c.beta)}, {"standardized", io::opt_json(c.standardized)}};
        fits.emplace(axis, fit);
      } catch (const Error& e) {
        fj["error"] = e.what();
      }
      reg["fits"][axis] = fj;
    }
    reg["covariate_ratios"] = Json::object();
    reg["r2_ratio"] = nullptr;
    if (fits.count("spatial") && fits.count("ses")) {
      const auto& fm = fits.at("spatial");
      const auto& fs_ = fits.at("ses");
      for (auto code : kRestrictionCodes) {
        try {
          reg["covariate_ratios"][std::string(code)] = covariate_ratio(fm, fs_, code);
        } catch (const Error&) {
          reg["covariate_ratios"][std::string(code)] = nullptr;
        }
      }
      try {
        reg["r2_ratio"] = r2_ratio(fm, fs_);
      } catch (const Error&) {
      }
    }
    io::write_json(dir("stats") / "regression.json", reg);

    // Kruskal-Wallis: baseline period against each later period.
    Json kw;
    kw["provenance"] = prov_.to_json();
    kw["tests"] = Json::array();
    auto table = io::open_out(dir("stats") / "kruskal_table.csv");
    table << prov_.csv_comment() << "filter,period_a,period_b,selector,h,dof,p,tie_correction,n_a,n_b\n";
    std::uint64_t tests = 0;
    const int n = cfg_.n_classes;
    for (const auto& f : filters_) {
      auto matrix_of = [&](const Period& p) -> std::optional<std::vector<double>> {
        const auto path = dir("matrices") / ("M_" + f.name() + "_" + p.label + ".csv");
        if (!fs::exists(path)) return std::nullopt;
        return io::read_matrix_csv(path, n);
      };
      const auto base = matrix_of(periods_[0]);
      if (!base) continue;
      for (std::size_t p = 1; p < periods_.size(); ++p) {
        const auto other = matrix_of(periods_[p]);
        if (!other) continue;
        for (auto sel : {ElementSelector::all, ElementSelector::diagonal}) {
          const std::vector<std::vector<double>> groups{matrix_elements(n, *base, sel), matrix_elements(n, *other, sel)};
          const auto res = kruskal_wallis(groups);
          const std::string sname = sel == ElementSelector::all ? "all" : "diagonal";
          kw["tests"].push_back({{"filter", f.name()},
                                 {"period_a", periods_[0].label},
                                 {"period_b", periods_[p].label},
                                 {"selector", sname},
                                 {"h", res.h},
                                 {"dof", res.dof},
                                 {"p", res.p},
                                 {"tie_correction", res.tie_correction},
                                 {"sizes", res.sizes},
                                 {"degenerate", res.degenerate}});
          table << f.name() << ',' << periods_[0].label << ',' << periods_[p].label << ',' << sname << ','
                << detail::format_double(res.h) << ',' << res.dof << ',' << detail::format_double(res.p) << ','
                << detail::format_double(res.tie_correction) << ',' << res.sizes[0] << ',' << res.sizes[1] << '\n';
          ++tests;
        }
      }
    }
    io::write_json(dir("stats") / "kruskal.json", kw);
    return {{"fits", fits.size()}, {"kruskal_tests", tests}};
  }

  Options opts_;
  RunConfig cfg_;
  std::vector<Period> periods_;
  std::vector<VisitFilter> filters_;
  fs::path out_;
  Provenance prov_;
  std::string run_key_;
};

// ---------------------------------------------------------------------------
// Plot tables

struct PlotFiles {
  std::vector<fs::path> heatmaps;     // (a)
  std::vector<fs::path> r_series;     // (b)
  std::vector<fs::path> entropy;      // (c)
  std::vector<fs::path> regression;   // (d)
  std::vector<fs::path> kruskal;      // (e)
};

inline PlotFiles emit_plots(const fs::path& out) {
  const auto prov = Provenance::from_json(io::read_json(out / "provenance.json"));
  const auto plots = out / "plots";
  PlotFiles files;
  const std::string comment = prov.csv_comment();

  // (a) heatmaps
  {
    const auto index = io::read_json(out / "matrices" / "index.json");
    const int n = index.at("n_classes").get<int>();
    auto os = io::open_out(plots / "heatmaps.csv");
    os << comment << "filter,period,place_class,user_class,value\n";
    for (const auto& m : index.at("matrices")) {
      if (m.at("file").is_null()) continue;
      const auto values = io::read_matrix_csv(out / "matrices" / m.at("file").get<std::string>(), n);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          os << m.at("filter").get<std::string>() << ',' << m.at("period").get<std::string>() << ',' << j + 1 << ','
             << i + 1 << ',' << detail::format_double(values[static_cast<std::size_t>(j) * n + i]) << '\n';
    }
    files.heatmaps.push_back(plots / "heatmaps.csv");
    auto as = io::open_out(plots / "adjustment_heatmaps.csv");
    as << comment << "filter,from,to,place_class,user_class,value\n";
    for (const auto& s : index.at("adjustments")) {
      const auto values = io::read_matrix_csv(out / "matrices" / s.at("file").get<std::string>(), n);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          as << s.at("filter").get<std::string>() << ',' << s.at("from").get<std::string>() << ','
             << s.at("to").get<std::string>() << ',' << j + 1 << ',' << i + 1 << ','
             << detail::format_double(values[static_cast<std::size_t>(j) * n + i]) << '\n';
    }
    files.heatmaps.push_back(plots / "adjustment_heatmaps.csv");
    auto ms = io::open_out(plots / "residual_isolation.csv");
    ms << comment << "filter,from,to,mu_re,raw_trace\n";
    for (const auto& s : index.at("adjustments"))
      ms << s.at("filter").get<std::string>() << ',' << s.at("from").get<std::string>() << ','
         << s.at("to").get<std::string>() << ',' << detail::format_double(s.at("mu_re").get<double>()) << ','
         << detail::format_double(s.at("raw_trace").get<double>()) << '\n';
    files.heatmaps.push_back(plots / "residual_isolation.csv");

    // (b) r series, one table per filter
    for (const auto& s : index.at("series")) {
      const auto fname = s.at("filter").get<std::string>();
      io::CsvReader csv(out / "matrices" / s.at("file").get<std::string>());
      const auto cd = csv.column("anchor_date"), cr = csv.column("r"), cv = csv.column("visits");
      const auto path = plots / ("r_series_" + fname + ".csv");
      auto rs = io::open_out(path);
      rs << comment << "filter,anchor_date,r,visits\n";
      while (csv.next()) rs << fname << ',' << csv[cd] << ',' << csv[cr] << ',' << csv[cv] << '\n';
      files.r_series.push_back(path);
    }
    if (files.r_series.empty()) throw Error("no assortativity series in " + (out / "matrices").string());
  }

  // (c) entropy
  {
    const auto summary = io::read_json(out / "entropy" / "summary.json");
    auto hs = io::open_out(plots / "entropy_histograms.csv");
    hs << comment << "period,axis,bin_lo,bin_hi,count\n";
    auto ss = io::open_out(plots / "entropy_summary.csv");
    ss << comment << "period,axis,count,mean,sd\n";
    for (const auto& e : summary.at("periods")) {
      const auto period = e.at("period").get<std::string>(), axis = e.at("axis").get<std::string>();
      ss << period << ',' << axis << ',' << e.at("count").get<std::uint64_t>() << ',';
      if (e.at("mean").is_null()) {
        ss << ",\n";
        continue;
      }
      ss << detail::format_double(e.at("mean").get<double>()) << ',' << detail::format_double(e.at("sd").get<double>())
         << '\n';
      const auto hist = e.at("histogram").get<std::vector<std::uint64_t>>();
      for (std::size_t b = 0; b < hist.size(); ++b)
        hs << period << ',' << axis << ',' << detail::format_double(static_cast<double>(b) / kHistogramBins) << ','
           << detail::format_double(static_cast<double>(b + 1) / kHistogramBins) << ',' << hist[b] << '\n';
    }
    files.entropy = {plots / "entropy_histograms.csv", plots / "entropy_summary.csv"};
  }

  // (d) regression
  {
    const auto reg = io::read_json(out / "stats" / "regression.json");
    auto cs = io::open_out(plots / "regression_coefficients.csv");
    cs << comment << "axis,restriction,beta,standardized,covariate_ratio\n";
    auto fs_ = io::open_out(plots / "regression_fit.csv");
    fs_ << comment << "axis,n_obs,r2,intercept,condition_number,r2_ratio\n";
    auto num = [](const Json& v) { return v.is_null() ? std::string() : detail::format_double(v.get<double>()); };
    for (const auto& [axis, fit] : reg.at("fits").items()) {
      if (fit.contains("error")) {
        fs_ << axis << ",,,,," << num(reg.at("r2_ratio")) << '\n';
        continue;
      }
      fs_ << axis << ',' << fit.at("n_obs").get<std::uint64_t>() << ',' << num(fit.at("r2")) << ','
          << num(fit.at("intercept")) << ',' << num(fit.at("condition_number")) << ',' << num(reg.at("r2_ratio")) << '\n';
      for (const auto& [code, c] : fit.at("coefficients").items()) {
        const auto& ratios = reg.at("covariate_ratios");
        cs << axis << ',' << code << ',' << num(c.at("beta")) << ',' << num(c.at("standardized")) << ','
           << (ratios.contains(code) ? num(ratios.at(code)) : std::string()) << '\n';
      }
    }
    files.regression = {plots / "regression_coefficients.csv", plots / "regression_fit.csv"};
  }

  // (e) Kruskal-Wallis
  {
    const auto kw = io::read_json(out / "stats" / "kruskal.json");
    auto ks = io::open_out(plots / "kruskal.csv");
    ks << comment << "filter,period_a,period_b,selector,h,dof,p,tie_correction\n";
    for (const auto& t : kw.at("tests"))
      ks << t.at("filter").get<std::string>() << ',' << t.at("period_a").get<std::string>() << ','
         << t.at("period_b").get<std::string>() << ',' << t.at("selector").get<std::string>() << ','
         << detail::format_double(t.at("h").get<double>()) << ',' << t.at("dof").get<int>() << ','
         << detail::format_double(t.at("p").get<double>()) << ','
         << detail::format_double(t.at("tie_correction").get<double>()) << '\n';
    files.kruskal = {plots / "kruskal.csv"};
  }
  return files;
}

}  // namespace segmob::pipeline
