#pragma once

// Loaders for the three input datasets (stay-point trajectories, SES polygons,
// daily restriction stringency) and the flat run configuration.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "segmob/common.hpp"
#include "segmob/timeline.hpp"

namespace segmob {

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryRecord {
  std::string user_id;
  double lat = 0;
  double lon = 0;
  std::int64_t start_ts = 0;  // UTC epoch seconds
  std::int64_t end_ts = 0;

  std::int64_t duration() const { return end_ts - start_ts; }
  friend bool operator==(const TrajectoryRecord&, const TrajectoryRecord&) = default;
};

inline constexpr std::string_view kTrajectoryHeader = "user_id,lat,lon,start_ts,end_ts";

struct RowError {
  std::size_t line;
  std::string message;
};

// Single-pass reader; memory use does not grow with file size.
//
//   TrajectoryReader reader(path, /*lenient=*/true);
//   while (auto rec = reader.next()) { ... }
class TrajectoryReader {
 public:
  explicit TrajectoryReader(const std::filesystem::path& path, bool lenient = false)
      : path_(path.string()), in_(path), lenient_(lenient) {
    if (!std::filesystem::exists(path)) throw Error("trajectory file not found: " + path_);
    if (!in_) throw Error("cannot open trajectory file: " + path_);
    std::string header;
    if (!std::getline(in_, header)) throw ParseError(path_, 1, "missing header");
    line_no_ = 1;
    if (detail::trim(header) != kTrajectoryHeader)
      throw ParseError(path_, 1, "expected header '" + std::string(kTrajectoryHeader) + "'");
  }

  std::optional<TrajectoryRecord> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (detail::trim(line).empty()) continue;
      ++data_rows_;
      TrajectoryRecord rec;
      std::string problem = parse_row(line, rec);
      if (problem.empty()) {
        ++accepted_;
        return rec;
      }
      ++rejected_;
      if (!lenient_) throw ParseError(path_, line_no_, problem);
      if (errors_.size() < kMaxKeptErrors) errors_.push_back({line_no_, problem});
    }
    return std::nullopt;
  }

  std::size_t accepted() const { return accepted_; }
  std::size_t rejected() const { return rejected_; }
  std::size_t data_rows() const { return data_rows_; }
  // First rejected rows (capped), for QA reports.
  const std::vector<RowError>& errors() const { return errors_; }

  static std::string parse_row(std::string_view line, TrajectoryRecord& rec) {
    thread_local std::vector<std::string_view> f;
    detail::split_csv(line, f);
    if (f.size() != 5) return "expected 5 fields, got " + std::to_string(f.size());
    if (f[0].empty()) return "empty user_id";
    rec.user_id.assign(f[0]);
    if (!detail::parse_double(f[1], rec.lat) || rec.lat < -90 || rec.lat > 90) return "invalid lat '" + std::string(f[1]) + "'";
    if (!detail::parse_double(f[2], rec.lon) || rec.lon < -180 || rec.lon > 180) return "invalid lon '" + std::string(f[2]) + "'";
    if (!detail::parse_int64(f[3], rec.start_ts)) return "invalid start_ts '" + std::string(f[3]) + "'";
    if (!detail::parse_int64(f[4], rec.end_ts)) return "invalid end_ts '" + std::string(f[4]) + "'";
    if (rec.end_ts < rec.start_ts) return "end_ts before start_ts";
    return {};
  }

 private:
  static constexpr std::size_t kMaxKeptErrors = 100;
  std::string path_;
  std::ifstream in_;
  bool lenient_;
  std::size_t line_no_ = 0;
  std::size_t data_rows_ = 0;
  std::size_t accepted_ = 0;
  std::size_t rejected_ = 0;
  std::vector<RowError> errors_;
};

// Whole-file convenience for inputs known to fit in memory.
inline std::vector<TrajectoryRecord> load_trajectories(const std::filesystem::path& path, bool lenient = false) {
  TrajectoryReader reader(path, lenient);
  std::vector<TrajectoryRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  return out;
}

inline void write_trajectory_row(std::ostream& os, const TrajectoryRecord& r) {
  os << r.user_id << ',' << detail::format_double(r.lat) << ',' << detail::format_double(r.lon) << ',' << r.start_ts
     << ',' << r.end_ts << '\n';
}

inline void write_trajectories(std::ostream& os, const std::vector<TrajectoryRecord>& records) {
  os << kTrajectoryHeader << '\n';
  for (const auto& r : records) write_trajectory_row(os, r);
}

// ---------------------------------------------------------------------------
// SES map

struct GeoPoint {
  double lon = 0;
  double lat = 0;
  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

using Ring = std::vector<GeoPoint>;

struct BoundingBox {
  double min_lon = std::numeric_limits<double>::infinity();
  double min_lat = std::numeric_limits<double>::infinity();
  double max_lon = -std::numeric_limits<double>::infinity();
  double max_lat = -std::numeric_limits<double>::infinity();

  void extend(GeoPoint p) {
    min_lon = std::min(min_lon, p.lon);
    min_lat = std::min(min_lat, p.lat);
    max_lon = std::max(max_lon, p.lon);
    max_lat = std::max(max_lat, p.lat);
  }
  void extend(const BoundingBox& b) {
    extend(GeoPoint{b.min_lon, b.min_lat});
    extend(GeoPoint{b.max_lon, b.max_lat});
  }
  bool contains(GeoPoint p) const {
    return p.lon >= min_lon && p.lon <= max_lon && p.lat >= min_lat && p.lat <= max_lat;
  }
};

struct SesRegion {
  std::string region_id;
  // Optional grouping (borough, district) used by intra/inter-zone filters.
  // Defaults to region_id when the feature carries no `zone` property.
  std::string zone;
  double income = 0;  // higher = richer after load-time inversion
  // All rings of all polygon parts; containment is even-odd over the lot,
  // so holes and multipolygons need no special casing.
  std::vector<Ring> rings;
  BoundingBox bbox;

  void update_bbox() {
    bbox = BoundingBox{};
    for (const auto& ring : rings)
      for (auto p : ring) bbox.extend(p);
  }
};

namespace detail {

inline Ring parse_ring(const nlohmann::json& coords, const std::string& region_id) {
  if (!coords.is_array() || coords.size() < 4)
    throw Error("region '" + region_id + "': polygon ring needs at least 4 positions");
  Ring ring;
  ring.reserve(coords.size());
  for (const auto& pos : coords) {
    if (!pos.is_array() || pos.size() < 2 || !pos[0].is_number() || !pos[1].is_number())
      throw Error("region '" + region_id + "': invalid coordinate position");
    ring.push_back({pos[0].get<double>(), pos[1].get<double>()});
  }
  return ring;
}

inline std::string property_as_string(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  return v.dump();
}

}  // namespace detail

inline std::vector<SesRegion> parse_ses_map(std::string_view text, bool invert, const std::string& source = "<ses map>") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(source + ": invalid JSON: " + e.what());
  }
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features") ||
      !doc["features"].is_array())
    throw Error(source + ": expected a GeoJSON FeatureCollection");
  const auto& features = doc["features"];
  if (features.empty()) throw Error(source + ": empty FeatureCollection");

  std::vector<SesRegion> regions;
  std::set<std::string> seen;
  std::size_t index = 0;
  for (const auto& feat : features) {
    ++index;
    const auto props = feat.contains("properties") && feat["properties"].is_object() ? feat["properties"] : nlohmann::json::object();
    if (!props.contains("region_id") || props["region_id"].is_null())
      throw Error(source + ": feature #" + std::to_string(index) + " lacks property 'region_id'");
    SesRegion region;
    region.region_id = detail::property_as_string(props["region_id"]);
    if (!seen.insert(region.region_id).second) throw Error(source + ": duplicate region_id '" + region.region_id + "'");
    if (!props.contains("income") || !props["income"].is_number())
      throw Error(source + ": region '" + region.region_id + "' lacks numeric property 'income'");
    region.income = props["income"].get<double>();
    if (!std::isfinite(region.income)) throw Error(source + ": region '" + region.region_id + "' has non-finite income");
    if (invert) region.income = -region.income;
    region.zone = props.contains("zone") && !props["zone"].is_null() ? detail::property_as_string(props["zone"]) : region.region_id;

    const auto& geom = feat.contains("geometry") ? feat["geometry"] : nlohmann::json();
    const std::string type = geom.is_object() ? geom.value("type", "") : "";
    if (type == "Polygon") {
      for (const auto& ring : geom["coordinates"]) region.rings.push_back(detail::parse_ring(ring, region.region_id));
    } else if (type == "MultiPolygon") {
      for (const auto& poly : geom["coordinates"])
        for (const auto& ring : poly) region.rings.push_back(detail::parse_ring(ring, region.region_id));
    } else {
      throw Error(source + ": region '" + region.region_id + "' has non-polygon geometry '" + type + "'");
    }
    if (region.rings.empty()) throw Error(source + ": region '" + region.region_id + "' has no rings");
    region.update_bbox();
    regions.push_back(std::move(region));
  }
  return regions;
}

inline std::vector<SesRegion> load_ses_map(const std::filesystem::path& path, bool invert = false) {
  if (!std::filesystem::exists(path)) throw Error("SES map not found: " + path.string());
  return parse_ses_map(detail::read_file(path), invert, path.string());
}

inline void write_ses_map(std::ostream& os, const std::vector<SesRegion>& regions) {
  // Hand-rolled so coordinates keep their shortest round-trip spelling.
  os << "{\"type\":\"FeatureCollection\",\"features\":[";
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& region = regions[r];
    if (r) os << ',';
    os << "\n{\"type\":\"Feature\",\"properties\":{\"region_id\":" << nlohmann::json(region.region_id).dump()
       << ",\"zone\":" << nlohmann::json(region.zone).dump() << ",\"income\":" << detail::format_double(region.income)
       << "},\"geometry\":{\"type\":\"Polygon\",\"coordinates\":[";
    for (std::size_t i = 0; i < region.rings.size(); ++i) {
      if (i) os << ',';
      os << '[';
      for (std::size_t k = 0; k < region.rings[i].size(); ++k) {
        if (k) os << ',';
        os << '[' << detail::format_double(region.rings[i][k].lon) << ',' << detail::format_double(region.rings[i][k].lat)
           << ']';
      }
      os << ']';
    }
    os << "]}}";
  }
  os << "\n]}\n";
}

// ---------------------------------------------------------------------------
// Stringency

inline constexpr std::array<std::string_view, 9> kRestrictionCodes = {"C1", "C2", "C3", "C4", "C5",
                                                                      "C6", "C7", "C8", "H1"};
inline constexpr std::size_t kRestrictionCount = kRestrictionCodes.size();

inline std::size_t restriction_index(std::string_view code) {
  for (std::size_t k = 0; k < kRestrictionCount; ++k)
    if (kRestrictionCodes[k] == code) return k;
  throw Error("unknown restriction code '" + std::string(code) + "'");
}

struct StringencyRecord {
  Date date;
  std::array<double, kRestrictionCount> levels{};
  friend bool operator==(const StringencyRecord&, const StringencyRecord&) = default;
};

struct StringencySeries {
  std::vector<StringencyRecord> records;  // sorted by date
  std::vector<Date> gaps;                 // calendar days with no row

  const StringencyRecord* find(Date d) const {
    auto it = std::lower_bound(records.begin(), records.end(), d,
                               [](const StringencyRecord& r, Date key) { return r.date < key; });
    return it != records.end() && it->date == d ? &*it : nullptr;
  }
};

inline StringencySeries load_stringency(const std::filesystem::path& path) {
  const std::string source = path.string();
  std::ifstream in(path);
  if (!std::filesystem::exists(path) || !in) throw Error("stringency file not found: " + source);
  std::string line;
  std::vector<std::string_view> f;
  if (!std::getline(in, line)) throw ParseError(source, 1, "missing header");
  std::string header = line;
  detail::split_csv(header, f);
  const std::size_t n_fields = f.size();
  std::optional<std::size_t> date_col;
  std::array<std::optional<std::size_t>, kRestrictionCount> cols{};
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] == "date") date_col = i;
    for (std::size_t k = 0; k < kRestrictionCount; ++k)
      if (f[i] == kRestrictionCodes[k]) cols[k] = i;
  }
  if (!date_col) throw ParseError(source, 1, "missing column 'date'");
  for (std::size_t k = 0; k < kRestrictionCount; ++k)
    if (!cols[k]) throw ParseError(source, 1, "missing column '" + std::string(kRestrictionCodes[k]) + "'");

  StringencySeries series;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    detail::split_csv(line, f);
    if (f.size() != n_fields)
      throw ParseError(source, line_no, "field count does not match header");
    StringencyRecord rec;
    try {
      rec.date = parse_date(f[*date_col]);
    } catch (const Error& e) {
      throw ParseError(source, line_no, e.what());
    }
    for (std::size_t k = 0; k < kRestrictionCount; ++k) {
      if (!detail::parse_double(f[*cols[k]], rec.levels[k]) || rec.levels[k] < 0)
        throw ParseError(source, line_no,
                         "unparsable level '" + std::string(f[*cols[k]]) + "' for " + std::string(kRestrictionCodes[k]));
    }
    series.records.push_back(rec);
  }
  std::stable_sort(series.records.begin(), series.records.end(),
                   [](const auto& a, const auto& b) { return a.date < b.date; });
  for (std::size_t i = 1; i < series.records.size(); ++i) {
    const Date prev = series.records[i - 1].date, cur = series.records[i].date;
    if (prev == cur) throw Error(source + ": duplicate date " + format_date(cur));
    for (Date d = prev + 1; d < cur; d = d + 1) series.gaps.push_back(d);
  }
  return series;
}

inline void write_stringency(std::ostream& os, const std::vector<StringencyRecord>& records) {
  os << "date";
  for (auto code : kRestrictionCodes) os << ',' << code;
  os << '\n';
  for (const auto& r : records) {
    os << format_date(r.date);
    for (double v : r.levels) os << ',' << detail::format_double(v);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Configuration files: flat `key = value` lines with `[period.<label>]` sections.

struct ConfigSection {
  std::string label;
  std::map<std::string, std::string> values;
  std::size_t line = 0;
};

struct ConfigFile {
  std::map<std::string, std::string> values;
  std::vector<ConfigSection> periods;  // in file order
  std::filesystem::path base_dir;      // relative paths resolve against this

  std::optional<std::string> get(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) return std::nullopt;
    return it->second;
  }
};

inline ConfigFile parse_config(std::string_view text, const std::string& source = "<config>") {
  ConfigFile cfg;
  ConfigSection* section = nullptr;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(source, line_no, "unterminated section header");
      auto name = detail::trim(line.substr(1, line.size() - 2));
      if (name.substr(0, 7) != "period." || name.size() == 7)
        throw ParseError(source, line_no, "unknown section '" + std::string(name) + "' (expected [period.<label>])");
      std::string label(name.substr(7));
      for (const auto& p : cfg.periods)
        if (p.label == label) throw ParseError(source, line_no, "duplicate period '" + label + "'");
      cfg.periods.push_back({label, {}, line_no});
      section = &cfg.periods.back();
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(source, line_no, "expected 'key = value'");
    std::string key(detail::trim(line.substr(0, eq)));
    std::string value(detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw ParseError(source, line_no, "empty key");
    auto& target = section ? section->values : cfg.values;
    if (!target.emplace(key, value).second) throw ParseError(source, line_no, "duplicate key '" + key + "'");
  }
  return cfg;
}

inline ConfigFile load_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("config file not found: " + path.string());
  auto cfg = parse_config(detail::read_file(path), path.string());
  cfg.base_dir = std::filesystem::absolute(path).parent_path();
  return cfg;
}

namespace detail {

inline bool parse_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config key '" + key + "': expected boolean, got '" + std::string(v) + "'");
}

inline std::int64_t parse_int_key(const std::string& key, std::string_view v) {
  std::int64_t out = 0;
  if (!parse_int64(v, out)) throw Error("config key '" + key + "': expected integer, got '" + std::string(v) + "'");
  return out;
}

inline double parse_double_key(const std::string& key, std::string_view v) {
  double out = 0;
  if (!parse_double(v, out)) throw Error("config key '" + key + "': expected number, got '" + std::string(v) + "'");
  return out;
}

inline std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::vector<std::string_view> f;
  split_csv(v, f);
  for (auto s : f)
    if (!s.empty()) out.emplace_back(s);
  return out;
}

}  // namespace detail

enum class DecileMode { unweighted, weighted };

struct RunConfig {
  std::filesystem::path trajectories;
  std::filesystem::path ses_map;
  std::filesystem::path stringency;
  std::optional<std::filesystem::path> output_dir;

  int utc_offset_minutes = 0;
  std::vector<Period> periods;
  int window_days = 14;
  int slide_days = 1;
  TimeOfDay night_start{21 * 60};
  TimeOfDay night_end{6 * 60};
  TimeOfDay poi_start{9 * 60};
  TimeOfDay poi_end{15 * 60};
  double min_home_hours = 6.0;
  std::int64_t coalesce_gap_seconds = 300;
  int n_classes = 10;
  bool invert_income = false;

  int cells_per_axis = 256;
  DecileMode people_deciles = DecileMode::weighted;
  DecileMode place_deciles = DecileMode::unweighted;
  std::vector<std::string> filters{"all", "exclude_home"};

  std::size_t entropy_min_visits = 5;
  std::string entropy_filter = "all";
  bool entropy_global_norm = false;

  bool stats_sliding = true;
  int shards = 16;
};

inline RunConfig run_config_from(const ConfigFile& file) {
  RunConfig c;
  auto path_of = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() ? p : file.base_dir / p;
  };
  auto decile_mode = [](const std::string& key, const std::string& v) {
    if (v == "weighted") return DecileMode::weighted;
    if (v == "unweighted") return DecileMode::unweighted;
    throw Error("config key '" + key + "': expected weighted|unweighted");
  };
  for (const auto& [key, v] : file.values) {
    if (key == "trajectories") c.trajectories = path_of(v);
    else if (key == "ses_map") c.ses_map = path_of(v);
    else if (key == "stringency") c.stringency = path_of(v);
    else if (key == "output_dir") c.output_dir = path_of(v);
    else if (key == "utc_offset_minutes") c.utc_offset_minutes = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "window_days") c.window_days = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "slide_days") c.slide_days = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "night_start") c.night_start = parse_time_of_day(v);
    else if (key == "night_end") c.night_end = parse_time_of_day(v);
    else if (key == "poi_start") c.poi_start = parse_time_of_day(v);
    else if (key == "poi_end") c.poi_end = parse_time_of_day(v);
    else if (key == "min_home_hours") c.min_home_hours = detail::parse_double_key(key, v);
    else if (key == "coalesce_gap_seconds") c.coalesce_gap_seconds = detail::parse_int_key(key, v);
    else if (key == "n_classes") c.n_classes = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "invert_income") c.invert_income = detail::parse_bool(key, v);
    else if (key == "spatial.cells_per_axis") c.cells_per_axis = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "deciles.people") c.people_deciles = decile_mode(key, v);
    else if (key == "deciles.places") c.place_deciles = decile_mode(key, v);
    else if (key == "filters") c.filters = detail::split_list(v);
    else if (key == "entropy.min_visits") c.entropy_min_visits = static_cast<std::size_t>(detail::parse_int_key(key, v));
    else if (key == "entropy.filter") c.entropy_filter = v;
    else if (key == "entropy.global_norm") c.entropy_global_norm = detail::parse_bool(key, v);
    else if (key == "stats.observations") {
      if (v != "sliding" && v != "disjoint") throw Error("config key 'stats.observations': expected sliding|disjoint");
      c.stats_sliding = v == "sliding";
    } else if (key == "shards") c.shards = static_cast<int>(detail::parse_int_key(key, v));
    else throw Error("unknown config key '" + key + "'");
  }
  for (const auto& sec : file.periods) {
    Period p;
    p.label = sec.label;
    for (const auto& [key, v] : sec.values) {
      if (key == "start") p.start = parse_date(v);
      else if (key == "end") p.end = parse_date(v);
      else throw Error("period '" + sec.label + "': unknown key '" + key + "'");
    }
    if (!sec.values.count("start") || !sec.values.count("end"))
      throw Error("period '" + sec.label + "' needs both start and end");
    c.periods.push_back(p);
  }
  if (c.window_days < 1) throw Error("window_days must be >= 1");
  if (c.slide_days < 1) throw Error("slide_days must be >= 1");
  if (c.n_classes < 2) throw Error("n_classes must be >= 2");
  if (c.cells_per_axis < 1) throw Error("spatial.cells_per_axis must be >= 1");
  if (c.shards < 1) throw Error("shards must be >= 1");
  if (c.min_home_hours <= 0) throw Error("min_home_hours must be > 0");
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from(load_config_file(path)); }

}  // namespace segmob
