#pragma once

// Synthetic cities with planted home locations and class-mixing structure.
//
// Regions form a square grid with income equal to the region index, so the
// region-decile classes are known in closed form. Every non-home stay picks
// its target class with the mixing kernel
//
//   P(own class) = p + (1 - p) / n,   P(any other class) = (1 - p) / n,
//
// and then a region of that class uniformly, never the user's own home
// region. With equal class populations the stratification matrix of
// non-home visits converges to p I + (1 - p) J / n, whose assortativity is p.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segmob/common.hpp"
#include "segmob/ingest.hpp"
#include "segmob/segmentation.hpp"
#include "segmob/stratify.hpp"
#include "segmob/timeline.hpp"

namespace segmob::synth {

struct PeriodMixing {
  Period period;
  double p = 0;
};

struct SynthSpec {
  int n_users = 1000;
  int n_regions = 100;
  int n_classes = 10;
  double cell_deg = 0.01;
  GeoPoint origin{-0.25, 51.40};
  double p = 0.3;                // mixing outside any scheduled period
  double visits_per_day = 3.0;   // mean daytime stays per user per day
  double home_fidelity = 0.95;   // fraction of nights spent at home
  Date start_date = from_civil(2020, 1, 6);
  int n_days = 120;
  std::vector<PeriodMixing> schedule;  // per-period overrides of p
  std::uint64_t seed = 42;
  int utc_offset_minutes = 0;
  // Written into the generated run config.
  int window_days = 14;
  int slide_days = 1;

  double p_at(Date d) const {
    for (const auto& s : schedule)
      if (s.period.contains(d)) return s.p;
    return p;
  }

  void validate() const {
    auto unit = [](double v) { return v >= 0 && v <= 1; };
    if (n_classes < 2) throw Error("synth: n_classes must be >= 2");
    if (n_regions < n_classes)
      throw Error("synth: infeasible spec, " + std::to_string(n_regions) + " regions for " + std::to_string(n_classes) +
                  " classes");
    if (n_users < 1) throw Error("synth: n_users must be >= 1");
    if (n_days < 1) throw Error("synth: n_days must be >= 1");
    if (!unit(p) || !unit(home_fidelity)) throw Error("synth: p and home_fidelity must lie in [0, 1]");
    for (const auto& s : schedule)
      if (!unit(s.p)) throw Error("synth: period '" + s.period.label + "' has p outside [0, 1]");
    if (!(visits_per_day > 0)) throw Error("synth: visits_per_day must be > 0");
    if (!(cell_deg > 0)) throw Error("synth: cell_deg must be > 0");
  }
};

inline SynthSpec synth_spec_from(const ConfigFile& file) {
  SynthSpec s;
  for (const auto& [key, v] : file.values) {
    if (key == "n_users") s.n_users = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "n_regions") s.n_regions = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "n_classes") s.n_classes = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "cell_deg") s.cell_deg = detail::parse_double_key(key, v);
    else if (key == "origin_lon") s.origin.lon = detail::parse_double_key(key, v);
    else if (key == "origin_lat") s.origin.lat = detail::parse_double_key(key, v);
    else if (key == "p") s.p = detail::parse_double_key(key, v);
    else if (key == "visits_per_day") s.visits_per_day = detail::parse_double_key(key, v);
    else if (key == "home_fidelity") s.home_fidelity = detail::parse_double_key(key, v);
    else if (key == "start_date") s.start_date = parse_date(v);
    else if (key == "n_days") s.n_days = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "seed") s.seed = static_cast<std::uint64_t>(detail::parse_int_key(key, v));
    else if (key == "utc_offset_minutes") s.utc_offset_minutes = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "window_days") s.window_days = static_cast<int>(detail::parse_int_key(key, v));
    else if (key == "slide_days") s.slide_days = static_cast<int>(detail::parse_int_key(key, v));
    else throw Error("unknown synth config key '" + key + "'");
  }
  for (const auto& sec : file.periods) {
    PeriodMixing pm;
    pm.period.label = sec.label;
    pm.p = s.p;
    for (const auto& [key, v] : sec.values) {
      if (key == "start") pm.period.start = parse_date(v);
      else if (key == "end") pm.period.end = parse_date(v);
      else if (key == "p") pm.p = detail::parse_double_key(key, v);
      else throw Error("period '" + sec.label + "': unknown synth key '" + key + "'");
    }
    if (!sec.values.count("start") || !sec.values.count("end"))
      throw Error("period '" + sec.label + "' needs both start and end");
    s.schedule.push_back(pm);
  }
  std::vector<Period> periods;
  for (const auto& pm : s.schedule) periods.push_back(pm.period);
  if (!periods.empty()) segment(periods);
  return s;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

class MixingKernel {
 public:
  MixingKernel(double p, int n_classes) : p_(p), n_(n_classes) {}

  int draw(int own_class, Rng& rng) const {
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p_) return own_class;
    return std::uniform_int_distribution<int>(1, n_)(rng);
  }

  double probability(int own_class, int target) const { return (own_class == target ? p_ : 0.0) + (1 - p_) / n_; }

 private:
  double p_;
  int n_;
};

// Class of region index k when regions sorted by income are cut into n
// contiguous blocks, the first (count % n) blocks one larger.
inline int block_class(int k, int count, int n_classes) {
  const int base = count / n_classes, rem = count % n_classes;
  const int big = rem * (base + 1);
  return k < big ? k / (base + 1) + 1 : rem + (k - big) / base + 1;
}

struct ExpectedMixing {
  StratificationMatrix matrix;
  double r = 0;
};

// M = p I + (1 - p) J / n; with equal class masses its assortativity is p.
inline ExpectedMixing expected_matrix(double p, int n_classes = 10) {
  if (!(p >= 0 && p <= 1)) throw Error("mixing parameter must lie in [0, 1]");
  ExpectedMixing out;
  out.matrix.n = n_classes;
  out.matrix.a.assign(static_cast<std::size_t>(n_classes) * n_classes, (1 - p) / n_classes);
  out.matrix.active.assign(static_cast<std::size_t>(n_classes), true);
  for (int k = 0; k < n_classes; ++k) out.matrix.a[static_cast<std::size_t>(k) * n_classes + k] += p;
  out.matrix.mass = out.matrix.a;
  for (auto& v : out.matrix.mass) v /= n_classes;  // equal class masses
  out.r = p;
  return out;
}

// Class-pair counts for n_visits visits drawn from the kernel with users
// spread evenly over classes.
inline ClassCounts sample_class_counts(double p, std::size_t n_visits, int n_classes, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  const MixingKernel kernel(p, n_classes);
  ClassCounts counts(n_classes);
  for (std::size_t v = 0; v < n_visits; ++v) {
    const int own = static_cast<int>(v % static_cast<std::size_t>(n_classes)) + 1;
    counts.add(own, kernel.draw(own, rng));
  }
  return counts;
}

// Place classes visited by each of n_users users (classes evenly spread).
inline std::vector<std::vector<int>> sample_user_place_classes(double p, std::size_t n_users, std::size_t visits_per_user,
                                                               int n_classes, std::uint64_t seed) {
  const MixingKernel kernel(p, n_classes);
  std::vector<std::vector<int>> out(n_users);
  for (std::size_t u = 0; u < n_users; ++u) {
    Rng rng(splitmix64(seed ^ splitmix64(u + 1)));
    const int own = static_cast<int>(u % static_cast<std::size_t>(n_classes)) + 1;
    out[u].reserve(visits_per_user);
    for (std::size_t k = 0; k < visits_per_user; ++k) out[u].push_back(kernel.draw(own, rng));
  }
  return out;
}

struct GroundTruthUser {
  std::string user_id;
  std::string home_region;
  int user_class = 0;
};

struct City {
  SynthSpec spec;
  std::vector<SesRegion> regions;
  std::vector<int> region_class;  // by region index
  std::vector<GroundTruthUser> users;
  std::vector<TrajectoryRecord> trajectories;
  std::vector<StringencyRecord> stringency;
};

namespace detail {

inline std::string padded(char prefix, int value, int width) {
  std::string digits = std::to_string(value);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  return prefix + digits;
}

inline int digits_for(int count) { return std::max(3, static_cast<int>(std::to_string(std::max(0, count - 1)).size())); }

// Maximum OxCGRT ordinal level per restriction code.
inline constexpr std::array<double, kRestrictionCount> kMaxLevels = {3, 3, 2, 4, 2, 3, 2, 4, 2};

}  // namespace detail

inline std::vector<StringencyRecord> generate_stringency(const SynthSpec& spec) {
  double p_min = spec.p, p_max = spec.p;
  for (const auto& s : spec.schedule) {
    p_min = std::min(p_min, s.p);
    p_max = std::max(p_max, s.p);
  }
  const double span = p_max - p_min;
  std::vector<StringencyRecord> out;
  for (int d = 0; d < spec.n_days; ++d) {
    StringencyRecord rec;
    rec.date = spec.start_date + d;
    for (std::size_t k = 0; k < kRestrictionCount; ++k) {
      if (kRestrictionCodes[k] == "C8") {
        rec.levels[k] = 1;  // never changes within the span
        continue;
      }
      // Each restriction follows the schedule with its own lag of -4..4 days
      // so the predictor columns stay linearly independent.
      const Date lagged = rec.date - (static_cast<int>(k) - 4);
      const double intensity = span > 0 ? (spec.p_at(lagged) - p_min) / span : 0.0;
      rec.levels[k] = std::round(intensity * detail::kMaxLevels[k]);
    }
    out.push_back(rec);
  }
  return out;
}

inline City generate_city(const SynthSpec& spec) {
  spec.validate();
  City city;
  city.spec = spec;
  const int n = spec.n_classes;
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.n_regions))));
  const int rows = (spec.n_regions + cols - 1) / cols;
  const int width = detail::digits_for(spec.n_regions);

  std::vector<std::vector<int>> regions_of_class(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k < spec.n_regions; ++k) {
    const int cx = k % cols, cy = k / cols;
    const double x0 = spec.origin.lon + cx * spec.cell_deg, y0 = spec.origin.lat + cy * spec.cell_deg;
    const double x1 = x0 + spec.cell_deg, y1 = y0 + spec.cell_deg;
    SesRegion r;
    r.region_id = detail::padded('R', k, width);
    r.zone = cy < rows / 2 ? "south" : "north";
    r.income = k + 1;
    r.rings.push_back({{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}});
    r.update_bbox();
    city.regions.push_back(std::move(r));
    const int c = block_class(k, spec.n_regions, n);
    city.region_class.push_back(c);
    regions_of_class[static_cast<std::size_t>(c)].push_back(k);
  }

  auto point_in = [&](int k, Rng& rng) {
    std::uniform_real_distribution<double> u(0.1, 0.9);
    const auto& b = city.regions[static_cast<std::size_t>(k)].bbox;
    return GeoPoint{b.min_lon + u(rng) * spec.cell_deg, b.min_lat + u(rng) * spec.cell_deg};
  };
  auto pick_region = [&](int cls, int home, Rng& rng) {
    const auto& pool = regions_of_class[static_cast<std::size_t>(cls)];
    if (pool.size() == 1) return pool.front();
    for (;;) {
      const int k = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      if (k != home) return k;
    }
  };

  const int user_width = std::max(5, static_cast<int>(std::to_string(spec.n_users).size()));
  const std::int64_t offset = static_cast<std::int64_t>(spec.utc_offset_minutes) * 60;
  for (int u = 0; u < spec.n_users; ++u) {
    Rng rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(u) + 1)));
    const int home = u % spec.n_regions;
    const int own = city.region_class[static_cast<std::size_t>(home)];
    GroundTruthUser truth{detail::padded('u', u, user_width), city.regions[static_cast<std::size_t>(home)].region_id, own};

    auto emit = [&](int region, std::int64_t local_start, std::int64_t local_end) {
      const GeoPoint pt = point_in(region, rng);
      city.trajectories.push_back({truth.user_id, pt.lat, pt.lon, local_start - offset, local_end - offset});
    };

    std::bernoulli_distribution at_home(spec.home_fidelity);
    std::poisson_distribution<int> n_visits(spec.visits_per_day);
    for (int d = 0; d < spec.n_days; ++d) {
      const Date date = spec.start_date + d;
      const MixingKernel kernel(spec.p_at(date), n);
      const std::int64_t midnight = static_cast<std::int64_t>(date.days) * kSecondsPerDay;

      // Daytime stays between 08:00 and 19:00, one per equal slot.
      const int k = std::min(10, n_visits(rng));
      if (k > 0) {
        const std::int64_t day_start = midnight + 8 * 3600, slot = 11 * 3600 / k;
        const std::int64_t dur = std::min<std::int64_t>(3600, slot * 4 / 5);
        for (int v = 0; v < k; ++v) {
          const std::int64_t start =
              day_start + v * slot + std::uniform_int_distribution<std::int64_t>(0, slot - dur)(rng);
          emit(pick_region(kernel.draw(own, rng), home, rng), start, start + dur);
        }
      }
      // Night: home 20:00-07:00, otherwise a 22:00-05:00 stay elsewhere.
      if (at_home(rng)) {
        emit(home, midnight + 20 * 3600, midnight + 31 * 3600);
      } else {
        emit(pick_region(kernel.draw(own, rng), home, rng), midnight + 22 * 3600, midnight + 29 * 3600);
      }
    }
    city.users.push_back(std::move(truth));
  }
  city.stringency = generate_stringency(spec);
  return city;
}

inline nlohmann::ordered_json ground_truth_json(const City& city) {
  nlohmann::ordered_json j;
  j["seed"] = city.spec.seed;
  j["n_users"] = city.spec.n_users;
  j["n_regions"] = city.spec.n_regions;
  j["n_classes"] = city.spec.n_classes;
  j["start_date"] = format_date(city.spec.start_date);
  j["n_days"] = city.spec.n_days;
  j["base_p"] = city.spec.p;
  j["home_fidelity"] = city.spec.home_fidelity;
  j["visits_per_day"] = city.spec.visits_per_day;
  auto& periods = j["periods"] = nlohmann::ordered_json::array();
  for (const auto& s : city.spec.schedule)
    periods.push_back({{"label", s.period.label},
                       {"start", format_date(s.period.start)},
                       {"end", format_date(s.period.end)},
                       {"p", s.p}});
  auto& regions = j["regions"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < city.regions.size(); ++k)
    regions.push_back({{"region_id", city.regions[k].region_id},
                       {"zone", city.regions[k].zone},
                       {"class", city.region_class[k]}});
  auto& users = j["users"] = nlohmann::ordered_json::array();
  for (const auto& u : city.users)
    users.push_back({{"user_id", u.user_id}, {"home_region", u.home_region}, {"class", u.user_class}});
  return j;
}

struct CityFiles {
  std::filesystem::path trajectories, ses_map, stringency, truth, run_config;
};

inline std::string run_config_text(const SynthSpec& spec) {
  std::ostringstream os;
  os << "# Generated by segmob synth (seed " << spec.seed << ")\n"
     << "trajectories = trajectories.csv\n"
     << "ses_map = ses.geojson\n"
     << "stringency = stringency.csv\n"
     << "utc_offset_minutes = " << spec.utc_offset_minutes << '\n'
     << "window_days = " << spec.window_days << '\n'
     << "slide_days = " << spec.slide_days << '\n'
     << "filters = all, exclude_home, poi_only, inter:south|north\n";
  for (const auto& s : spec.schedule)
    os << "\n[period." << s.period.label << "]\nstart = " << format_date(s.period.start)
       << "\nend = " << format_date(s.period.end) << '\n';
  return os.str();
}

inline CityFiles write_city(const City& city, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  CityFiles files{dir / "trajectories.csv", dir / "ses.geojson", dir / "stringency.csv", dir / "truth.json",
                  dir / "run.conf"};
  auto open = [](const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write " + p.string());
    return os;
  };
  {
    auto os = open(files.trajectories);
    write_trajectories(os, city.trajectories);
  }
  {
    auto os = open(files.ses_map);
    write_ses_map(os, city.regions);
  }
  {
    auto os = open(files.stringency);
    write_stringency(os, city.stringency);
  }
  {
    auto os = open(files.truth);
    os << ground_truth_json(city).dump(2) << '\n';
  }
  {
    auto os = open(files.run_config);
    os << run_config_text(city.spec);
  }
  return files;
}

}  // namespace segmob::synth
