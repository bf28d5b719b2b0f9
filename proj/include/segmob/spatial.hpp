#pragma once

// Point-to-region lookup over SES polygons and income-decile labelling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segmob/common.hpp"
#include "segmob/ingest.hpp"

namespace segmob {

namespace geometry {

inline bool on_segment(GeoPoint a, GeoPoint b, GeoPoint p) {
  const double dx = b.lon - a.lon, dy = b.lat - a.lat;
  const double cross = dx * (p.lat - a.lat) - dy * (p.lon - a.lon);
  if (std::abs(cross) > 1e-12 * (std::abs(dx) + std::abs(dy))) return false;
  return p.lon >= std::min(a.lon, b.lon) && p.lon <= std::max(a.lon, b.lon) && p.lat >= std::min(a.lat, b.lat) &&
         p.lat <= std::max(a.lat, b.lat);
}

// Even-odd rule over every ring; boundary points count as inside.
inline bool contains(const SesRegion& region, GeoPoint p) {
  if (!region.bbox.contains(p)) return false;
  bool inside = false;
  for (const auto& ring : region.rings) {
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const GeoPoint a = ring[i], b = ring[j];
      if (on_segment(a, b, p)) return true;
      if ((a.lat > p.lat) != (b.lat > p.lat)) {
        const double x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
        if (p.lon < x) inside = !inside;
      }
    }
  }
  return inside;
}

}  // namespace geometry

// Uniform lon/lat grid over the map extent. Each cell keeps, in file order,
// the regions whose bounding box touches it, so a lookup tests only those.
class SpatialIndex {
 public:
  SpatialIndex(std::vector<SesRegion> regions, int cells_per_axis) : regions_(std::move(regions)), n_(cells_per_axis) {
    if (regions_.empty()) throw Error("cannot build a spatial index over zero regions");
    if (n_ < 1) throw Error("cells_per_axis must be >= 1");
    for (const auto& r : regions_) extent_.extend(r.bbox);
    cell_w_ = (extent_.max_lon - extent_.min_lon) / n_;
    cell_h_ = (extent_.max_lat - extent_.min_lat) / n_;
    if (!(cell_w_ > 0)) cell_w_ = 1;
    if (!(cell_h_ > 0)) cell_h_ = 1;
    cells_.resize(static_cast<std::size_t>(n_) * n_);
    for (std::uint32_t idx = 0; idx < regions_.size(); ++idx) {
      const auto& b = regions_[idx].bbox;
      const int x0 = col(b.min_lon), x1 = col(b.max_lon), y0 = row(b.min_lat), y1 = row(b.max_lat);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) cells_[static_cast<std::size_t>(y) * n_ + x].push_back(idx);
    }
    for (std::uint32_t idx = 0; idx < regions_.size(); ++idx) by_id_.emplace(regions_[idx].region_id, idx);
  }

  // Index of the first region (file order) containing the point.
  std::optional<std::size_t> locate_index(double lon, double lat) const {
    const GeoPoint p{lon, lat};
    if (!extent_.contains(p)) return std::nullopt;
    for (auto idx : candidates(lon, lat))
      if (geometry::contains(regions_[idx], p)) return idx;
    return std::nullopt;
  }

  const SesRegion* locate(double lon, double lat) const {
    auto idx = locate_index(lon, lat);
    return idx ? &regions_[*idx] : nullptr;
  }

  const std::vector<std::uint32_t>& candidates(double lon, double lat) const {
    return cells_[static_cast<std::size_t>(row(lat)) * n_ + col(lon)];
  }
  const std::vector<std::uint32_t>& cell(int x, int y) const { return cells_[static_cast<std::size_t>(y) * n_ + x]; }

  const SesRegion* find(std::string_view region_id) const {
    auto it = by_id_.find(region_id);
    return it == by_id_.end() ? nullptr : &regions_[it->second];
  }

  const std::vector<SesRegion>& regions() const { return regions_; }
  int cells_per_axis() const { return n_; }
  const BoundingBox& extent() const { return extent_; }

 private:
  int col(double lon) const {
    return std::clamp(static_cast<int>(std::floor((lon - extent_.min_lon) / cell_w_)), 0, n_ - 1);
  }
  int row(double lat) const {
    return std::clamp(static_cast<int>(std::floor((lat - extent_.min_lat) / cell_h_)), 0, n_ - 1);
  }

  std::vector<SesRegion> regions_;
  int n_;
  BoundingBox extent_;
  double cell_w_ = 1, cell_h_ = 1;
  std::vector<std::vector<std::uint32_t>> cells_;
  std::map<std::string, std::uint32_t, std::less<>> by_id_;
};

inline SpatialIndex build_index(std::vector<SesRegion> regions, int cells_per_axis = 256) {
  return SpatialIndex(std::move(regions), cells_per_axis);
}

inline std::optional<std::string> locate_point(const SpatialIndex& index, double lon, double lat) {
  if (const auto* r = index.locate(lon, lat)) return r->region_id;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Deciles

using RegionWeights = std::map<std::string, double, std::less<>>;

struct DecileAssignment {
  int n_classes = 10;
  std::map<std::string, int, std::less<>> classes;  // region_id -> 1..n_classes
  // n_classes + 1 cut points: minimum income, the lowest income of classes
  // 2..n (carried forward over empty classes), maximum income.
  std::vector<double> edges;

  std::optional<int> find(std::string_view region_id) const {
    auto it = classes.find(region_id);
    if (it == classes.end()) return std::nullopt;
    return it->second;
  }
  int class_of(std::string_view region_id) const {
    auto c = find(region_id);
    if (!c) throw Error("region '" + std::string(region_id) + "' has no SES class");
    return *c;
  }
};

// Unweighted: regions sorted by (income, region_id) are cut into n contiguous
// blocks whose sizes differ by at most one (first blocks take the remainder).
// Weighted: each run of equal incomes is placed by the midpoint of its
// cumulative weight, so classes hold ~1/n of the total weight and ties are
// never split.
inline DecileAssignment assign_deciles(std::span<const SesRegion> regions, const RegionWeights* weights = nullptr,
                                       int n_classes = 10) {
  if (n_classes < 1) throw Error("n_classes must be >= 1");
  std::vector<std::size_t> order(regions.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (regions[a].income != regions[b].income) return regions[a].income < regions[b].income;
    return regions[a].region_id < regions[b].region_id;
  });

  DecileAssignment out;
  out.n_classes = n_classes;
  std::vector<int> label(regions.size(), 0);

  if (!weights) {
    if (regions.size() < static_cast<std::size_t>(n_classes))
      throw Error("decile assignment needs at least " + std::to_string(n_classes) + " regions, got " +
                  std::to_string(regions.size()));
    const std::size_t n = regions.size(), base = n / n_classes, rem = n % n_classes;
    std::size_t pos = 0;
    for (int c = 0; c < n_classes; ++c) {
      const std::size_t size = base + (static_cast<std::size_t>(c) < rem ? 1 : 0);
      for (std::size_t k = 0; k < size; ++k) label[order[pos++]] = c + 1;
    }
  } else {
    double total = 0;
    for (const auto& r : regions) {
      auto it = weights->find(r.region_id);
      const double w = it == weights->end() ? 0.0 : it->second;
      if (!(w >= 0) || !std::isfinite(w)) throw Error("negative or non-finite weight for region '" + r.region_id + "'");
      total += w;
    }
    if (total < n_classes)
      throw Error("weighted decile assignment needs total weight >= " + std::to_string(n_classes));
    double cum = 0;
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      double group = 0;
      while (j < order.size() && regions[order[j]].income == regions[order[i]].income) {
        auto it = weights->find(regions[order[j]].region_id);
        group += it == weights->end() ? 0.0 : it->second;
        ++j;
      }
      const double mid = cum + group / 2;
      const int c = std::min(n_classes, static_cast<int>(std::floor(n_classes * mid / total)) + 1);
      for (std::size_t k = i; k < j; ++k) label[order[k]] = c;
      cum += group;
      i = j;
    }
  }

  for (std::size_t k = 0; k < regions.size(); ++k) out.classes.emplace(regions[k].region_id, label[k]);
  out.edges.assign(static_cast<std::size_t>(n_classes) + 1, 0.0);
  if (!order.empty()) {
    out.edges.front() = regions[order.front()].income;
    out.edges.back() = regions[order.back()].income;
    for (int c = 2; c <= n_classes; ++c) {
      auto it = std::find_if(order.begin(), order.end(), [&](std::size_t k) { return label[k] >= c; });
      out.edges[static_cast<std::size_t>(c) - 1] = it == order.end() ? out.edges.back() : regions[*it].income;
    }
  }
  return out;
}

inline DecileAssignment assign_deciles(std::span<const SesRegion> regions, const RegionWeights& weights,
                                       int n_classes = 10) {
  return assign_deciles(regions, &weights, n_classes);
}

}  // namespace segmob
