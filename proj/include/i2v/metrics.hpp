#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "i2v/error.hpp"
#include "i2v/rng.hpp"
#include "i2v/tensor.hpp"

namespace i2v {

// Rows of `points` are the vectors.
inline Tensor pairwise_euclidean(const Tensor& points) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (n < 2) throw InputError("pairwise_euclidean: need at least 2 vectors");
  Tensor out = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = points(i, k) - points(j, k);
        s += diff * diff;
      }
      out(i, j) = out(j, i) = std::sqrt(s);
    }
  }
  return out;
}

inline Tensor pairwise_euclidean(const std::vector<std::vector<double>>& vectors) {
  if (vectors.empty()) throw InputError("pairwise_euclidean: need at least 2 vectors");
  const std::size_t d = vectors[0].size();
  std::vector<double> flat;
  for (const auto& v : vectors) {
    if (v.size() != d) throw ShapeError("pairwise_euclidean: dimension mismatch");
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return pairwise_euclidean(Tensor({vectors.size(), d}, std::move(flat)));
}

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Tensor centroids;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each assignment step
  std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double d = a(i, k) - b(j, k);
    s += d * d;
  }
  return s;
}

}  // namespace detail

// Lloyd's algorithm from a k-means++ start. Ties in assignment go to the
// lower centroid index.
inline KMeansResult kmeans_single(const Tensor& points, std::size_t k, Rng& rng,
                                  std::size_t max_iter = 300) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k == 0) throw InputError("kmeans: k must be positive");
  if (k > n) throw InputError("kmeans: k=" + std::to_string(k) + " exceeds point count " + std::to_string(n));

  Tensor centroids = Tensor::zeros(k, d);
  auto set_centroid = [&](std::size_t c, std::size_t p) {
    for (std::size_t j = 0; j < d; ++j) centroids(c, j) = points(p, j);
  };
  std::vector<std::size_t> chosen{rng.index(n)};
  set_centroid(0, chosen[0]);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], detail::squared_distance(points, i, centroids, c - 1));
    }
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    std::size_t pick;
    if (total > 0.0) {
      pick = rng.categorical(nearest);
    } else {
      // All remaining points coincide with chosen centroids.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(i);
      pick = rest[rng.index(rest.size())];
    }
    chosen.push_back(pick);
    set_centroid(c, pick);
  }

  KMeansResult r;
  r.assignments.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double s = detail::squared_distance(points, i, centroids, c);
        if (s < bd) {
          bd = s;
          best = c;
        }
      }
      if (best != r.assignments[i]) changed = true;
      r.assignments[i] = best;
      dist[i] = bd;
      inertia += bd;
    }
    r.inertia_history.push_back(inertia);
    r.iterations = it + 1;
    if (!changed) break;

    Tensor sums = Tensor::zeros(k, d);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[r.assignments[i]];
      for (std::size_t j = 0; j < d; ++j) sums(r.assignments[i], j) += points(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its centroid.
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        set_centroid(c, far);
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) centroids(c, j) = sums(c, j) / static_cast<double>(count[c]);
    }
  }
  // Final inertia against the final centroids.
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) r.inertia += detail::squared_distance(points, i, centroids, r.assignments[i]);
  r.centroids = std::move(centroids);
  return r;
}

// Best of n_init restarts by inertia.
inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 300, std::size_t n_init = 10) {
  Rng rng(derive_seed(seed, 0x6b6d));
  KMeansResult best;
  for (std::size_t r = 0; r < std::max<std::size_t>(n_init, 1); ++r) {
    KMeansResult cur = kmeans_single(points, k, rng, max_iter);
    if (r == 0 || cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

inline double nmi(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw InputError("nmi: label lengths differ");
  if (a.empty()) throw InputError("nmi: empty labeling");
  const double n = static_cast<double>(a.size());
  std::map<std::size_t, double> ca, cb;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1;
    cb[b[i]] += 1;
    joint[{a[i], b[i]}] += 1;
  }
  auto entropy = [n](const std::map<std::size_t, double>& c) {
    double h = 0.0;
    for (const auto& [_, x] : c) h -= x / n * std::log(x / n);
    return h;
  };
  const double ha = entropy(ca);
  const double hb = entropy(cb);
  if (ha == 0.0 || hb == 0.0) return ha == hb ? 1.0 : 0.0;
  double mi = 0.0;
  for (const auto& [key, x] : joint) {
    mi += x / n * std::log(x * n / (ca[key.first] * cb[key.second]));
  }
  return std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0);
}

// Activities ordered by descending score, ties to the lower id.
inline std::vector<std::size_t> rank_scores(std::span<const double> scores, std::size_t top) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  top = std::min(top, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                    [&](std::size_t x, std::size_t y) {
                      return scores[x] > scores[y] || (scores[x] == scores[y] && x < y);
                    });
  idx.resize(top);
  return idx;
}

namespace detail {

inline std::size_t hits(std::span<const std::size_t> ranking, std::size_t k,
                        std::span<const std::uint32_t> truth) {
  std::size_t h = 0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    if (std::binary_search(truth.begin(), truth.end(), static_cast<std::uint32_t>(ranking[i]))) ++h;
  }
  return h;
}

inline void require_truth(std::span<const std::uint32_t> truth) {
  if (truth.empty()) throw InputError("recall: empty true activity set");
  if (!std::is_sorted(truth.begin(), truth.end())) throw InputError("recall: true set must be sorted");
}

}  // namespace detail

// |top-k ∩ true| / min(k, |true|). `truth` must be sorted.
inline double recall_at_k(std::span<const std::size_t> ranking, std::span<const std::uint32_t> truth,
                          std::size_t k) {
  detail::require_truth(truth);
  if (k == 0) throw InputError("recall_at_k: k must be >= 1");
  return static_cast<double>(detail::hits(ranking, k, truth)) /
         static_cast<double>(std::min(k, truth.size()));
}

// Adaptive k = |true|.
inline double recall_at_a(std::span<const std::size_t> ranking, std::span<const std::uint32_t> truth) {
  detail::require_truth(truth);
  return static_cast<double>(detail::hits(ranking, truth.size(), truth)) /
         static_cast<double>(truth.size());
}

// Standard recall |top-k ∩ true| / |true|.
inline double standard_recall(std::span<const std::size_t> ranking, std::span<const std::uint32_t> truth,
                              std::size_t k) {
  detail::require_truth(truth);
  return static_cast<double>(detail::hits(ranking, k, truth)) / static_cast<double>(truth.size());
}

inline double rmse(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw InputError("rmse: length mismatch");
  if (predicted.empty()) throw InputError("rmse: no values");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - actual[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(predicted.size()));
}

inline double mean(std::span<const double> x) {
  if (x.empty()) throw InputError("mean: no values");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool overlaps(const Interval& o) const { return !(hi < o.lo || o.hi < lo); }
};

// Percentile bootstrap interval of the mean.
inline Interval bootstrap_mean_ci(std::span<const double> x, std::uint64_t seed,
                                  std::size_t resamples = 1000, double level = 0.95) {
  if (x.empty()) throw InputError("bootstrap: no values");
  Rng rng(derive_seed(seed, 0xb007));
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[rng.index(x.size())];
    m = s / static_cast<double>(x.size());
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  auto at = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  return {at(alpha), at(1.0 - alpha)};
}

}  // namespace i2v
