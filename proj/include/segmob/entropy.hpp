#pragma once

// Per-user spatial and SES mobility entropy, and population summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ranges>
#include <span>
#include <vector>

#include "segmob/common.hpp"

namespace segmob {

// Shannon entropy in bits of a frequency vector; zero counts contribute 0.
inline double entropy_bits(std::span<const std::uint64_t> counts) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw Error("entropy of zero visits");
  double h = 0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h <= 0 ? 0.0 : h;
}

// Entropy normalised by log2(alphabet); 0 when the alphabet has one symbol.
inline double normalized_entropy(std::span<const std::uint64_t> counts, std::size_t alphabet) {
  const double h = entropy_bits(counts);
  if (alphabet <= 1) return 0.0;
  return std::clamp(h / std::log2(static_cast<double>(alphabet)), 0.0, 1.0);
}

template <std::ranges::input_range R>
std::vector<std::uint64_t> frequency_counts(R&& symbols) {
  using T = std::remove_cvref_t<std::ranges::range_value_t<R>>;
  std::map<T, std::uint64_t> freq;
  for (auto&& s : symbols) ++freq[s];
  std::vector<std::uint64_t> out;
  out.reserve(freq.size());
  for (const auto& [k, c] : freq) out.push_back(c);
  return out;
}

// Entropy over the user's distinct visited locations, normalised by the
// number of distinct locations (per-user alphabet).
template <std::ranges::input_range R>
double spatial_entropy(R&& region_ids) {
  const auto counts = frequency_counts(std::forward<R>(region_ids));
  if (counts.empty()) throw Error("spatial entropy of zero visits");
  return normalized_entropy(counts, counts.size());
}

// Same distribution, normalised by a fixed global alphabet size instead.
template <std::ranges::input_range R>
double spatial_entropy_global(R&& region_ids, std::size_t alphabet) {
  const auto counts = frequency_counts(std::forward<R>(region_ids));
  if (counts.empty()) throw Error("spatial entropy of zero visits");
  return normalized_entropy(counts, std::max(alphabet, counts.size()));
}

// Entropy over visited place classes 1..n_classes, normalised by log2(n_classes).
template <std::ranges::input_range R>
double ses_entropy(R&& place_classes, int n_classes = 10) {
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(n_classes), 0);
  std::size_t n = 0;
  for (int c : place_classes) {
    if (c < 1 || c > n_classes) throw Error("place class " + std::to_string(c) + " out of range");
    ++counts[static_cast<std::size_t>(c - 1)];
    ++n;
  }
  if (n == 0) throw Error("SES entropy of zero visits");
  return normalized_entropy(counts, static_cast<std::size_t>(n_classes));
}

inline constexpr std::size_t kHistogramBins = 50;

struct EntropySummary {
  std::size_t count = 0;
  double mean = 0;
  double sd = 0;  // population standard deviation
  std::vector<std::uint64_t> histogram = std::vector<std::uint64_t>(kHistogramBins, 0);
};

// Mergeable partial: count, running mean, sum of squared deviations and a
// fixed 50-bin histogram over [0, 1].
class EntropyAccumulator {
 public:
  void add(double h) {
    ++count_;
    const double delta = h - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (h - mean_);
    ++hist_[bin(h)];
  }

  void merge(const EntropyAccumulator& o) {
    if (o.count_ == 0) return;
    if (count_ == 0) {
      *this = o;
      return;
    }
    const double n1 = static_cast<double>(count_), n2 = static_cast<double>(o.count_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * n2 / (n1 + n2);
    m2_ += o.m2_ + delta * delta * n1 * n2 / (n1 + n2);
    count_ += o.count_;
    for (std::size_t b = 0; b < kHistogramBins; ++b) hist_[b] += o.hist_[b];
  }

  std::size_t count() const { return count_; }

  EntropySummary summary() const {
    if (count_ == 0) throw Error("entropy summary of an empty population");
    EntropySummary s;
    s.count = count_;
    s.mean = mean_;
    s.sd = std::sqrt(std::max(0.0, m2_ / static_cast<double>(count_)));
    s.histogram = hist_;
    return s;
  }

  static std::size_t bin(double h) {
    const auto b = static_cast<std::ptrdiff_t>(std::floor(h * static_cast<double>(kHistogramBins)));
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(b, 0, kHistogramBins - 1));
  }

 private:
  std::size_t count_ = 0;
  double mean_ = 0;
  double m2_ = 0;
  std::vector<std::uint64_t> hist_ = std::vector<std::uint64_t>(kHistogramBins, 0);
};

inline EntropySummary summarize(std::span<const double> values) {
  EntropyAccumulator acc;
  for (double v : values) acc.add(v);
  return acc.summary();
}

}  // namespace segmob
