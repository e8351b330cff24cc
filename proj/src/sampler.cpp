#include "wsd/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wsd/error.hpp"
#include "wsd/rng.hpp"

namespace wsd {

namespace {

double sq_dist(const double* a, const double* b, int64_t d) {
  double s = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

}  // namespace

Clustering kmeans(const std::vector<double>& embeddings, int64_t n, int64_t d, int64_t k,
                  uint64_t seed) {
  if (k < 1) throw ArgumentError("kmeans: k must be >= 1");
  if (n < k) {
    throw ArgumentError("kmeans: n=" + std::to_string(n) + " smaller than k=" + std::to_string(k));
  }
  if (static_cast<int64_t>(embeddings.size()) != n * d) {
    throw ArgumentError("kmeans: embedding buffer does not match n*d");
  }
  Rng rng(seed);
  Clustering c;
  c.k = k;
  c.d = d;
  c.centroids.assign(static_cast<size_t>(k * d), 0.0);

  // k-means++ seeding.
  std::vector<double> best_d2(static_cast<size_t>(n), 0.0);
  {
    const int64_t first = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
    std::copy_n(embeddings.data() + first * d, d, c.centroids.data());
    for (int64_t i = 0; i < n; ++i) {
      best_d2[static_cast<size_t>(i)] = sq_dist(embeddings.data() + i * d, c.centroids.data(), d);
    }
    for (int64_t pick = 1; pick < k; ++pick) {
      double total = std::accumulate(best_d2.begin(), best_d2.end(), 0.0);
      int64_t chosen;
      if (total <= 0.0) {
        chosen = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
      } else {
        const double r = rng.uniform() * total;
        double acc = 0.0;
        chosen = n - 1;
        for (int64_t i = 0; i < n; ++i) {
          acc += best_d2[static_cast<size_t>(i)];
          if (acc >= r) {
            chosen = i;
            break;
          }
        }
      }
      std::copy_n(embeddings.data() + chosen * d, d, c.centroids.data() + pick * d);
      for (int64_t i = 0; i < n; ++i) {
        const double d2 = sq_dist(embeddings.data() + i * d, c.centroids.data() + pick * d, d);
        best_d2[static_cast<size_t>(i)] = std::min(best_d2[static_cast<size_t>(i)], d2);
      }
    }
  }

  c.assignments.assign(static_cast<size_t>(n), 0);
  c.cluster_sizes.assign(static_cast<size_t>(k), 0);
  double prev = -1.0;
  for (int iter = 0; iter < 100; ++iter) {
    // Assignment step.
    std::fill(c.cluster_sizes.begin(), c.cluster_sizes.end(), 0);
    for (int64_t i = 0; i < n; ++i) {
      int64_t best = 0;
      double bd = sq_dist(embeddings.data() + i * d, c.centroids.data(), d);
      for (int64_t cl = 1; cl < k; ++cl) {
        const double d2 = sq_dist(embeddings.data() + i * d, c.centroids.data() + cl * d, d);
        if (d2 < bd) {
          bd = d2;
          best = cl;
        }
      }
      c.assignments[static_cast<size_t>(i)] = best;
      c.cluster_sizes[static_cast<size_t>(best)]++;
    }
    // Reseed empty clusters onto the worst-fit point.
    for (int64_t cl = 0; cl < k; ++cl) {
      if (c.cluster_sizes[static_cast<size_t>(cl)] > 0) continue;
      int64_t worst = -1;
      double wd = -1.0;
      for (int64_t i = 0; i < n; ++i) {
        const int64_t a = c.assignments[static_cast<size_t>(i)];
        if (c.cluster_sizes[static_cast<size_t>(a)] <= 1) continue;  // do not empty another cluster
        const double d2 = sq_dist(embeddings.data() + i * d, c.centroids.data() + a * d, d);
        if (d2 > wd) {
          wd = d2;
          worst = i;
        }
      }
      if (worst < 0) continue;  // n == k degenerate layouts
      std::copy_n(embeddings.data() + worst * d, d, c.centroids.data() + cl * d);
      c.cluster_sizes[static_cast<size_t>(c.assignments[static_cast<size_t>(worst)])]--;
      c.assignments[static_cast<size_t>(worst)] = cl;
      c.cluster_sizes[static_cast<size_t>(cl)] = 1;
    }
    // Update step.
    std::fill(c.centroids.begin(), c.centroids.end(), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      const int64_t a = c.assignments[static_cast<size_t>(i)];
      for (int64_t j = 0; j < d; ++j) {
        c.centroids[static_cast<size_t>(a * d + j)] += embeddings[static_cast<size_t>(i * d + j)];
      }
    }
    for (int64_t cl = 0; cl < k; ++cl) {
      const int64_t sz = c.cluster_sizes[static_cast<size_t>(cl)];
      if (sz == 0) continue;
      for (int64_t j = 0; j < d; ++j) c.centroids[static_cast<size_t>(cl * d + j)] /= static_cast<double>(sz);
    }
    // Objective after the update.
    double j_now = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      j_now += sq_dist(embeddings.data() + i * d,
                       c.centroids.data() + c.assignments[static_cast<size_t>(i)] * d, d);
    }
    c.inertia_trace.push_back(j_now);
    if (prev >= 0.0 && prev - j_now < 1e-6 * std::max(prev, 1e-12)) {
      break;
    }
    prev = j_now;
  }
  c.inertia = c.inertia_trace.back();
  return c;
}

std::vector<int64_t> stratified_sample(const Clustering& clustering, double alpha, uint64_t seed) {
  if (!(alpha > 0.0) || alpha > 100.0) {
    throw ArgumentError("stratified_sample: alpha must lie in (0, 100], got " +
                        std::to_string(alpha));
  }
  const int64_t n = static_cast<int64_t>(clustering.assignments.size());
  std::vector<std::vector<int64_t>> members(static_cast<size_t>(clustering.k));
  for (int64_t i = 0; i < n; ++i) {
    members[static_cast<size_t>(clustering.assignments[static_cast<size_t>(i)])].push_back(i);
  }
  Rng rng(seed);
  std::vector<int64_t> kept;
  for (int64_t cl = 0; cl < clustering.k; ++cl) {
    auto& ms = members[static_cast<size_t>(cl)];
    if (ms.empty()) continue;
    const int64_t nk = static_cast<int64_t>(ms.size());
    int64_t take = std::max<int64_t>(1, std::llround(alpha * static_cast<double>(nk) / 100.0));
    take = std::min(take, nk);
    // Partial Fisher-Yates keeps the draw uniform without replacement.
    for (int64_t i = 0; i < take; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(nk - i)));
      std::swap(ms[static_cast<size_t>(i)], ms[static_cast<size_t>(j)]);
      kept.push_back(ms[static_cast<size_t>(i)]);
    }
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

SampledSequence build_sequence(const Bag& bag, const std::vector<int64_t>& kept,
                               int64_t window_base_k, int64_t extra_multiple) {
  if (kept.empty()) throw ArgumentError("build_sequence: kept index set is empty");
  if (window_base_k < 1) throw ArgumentError("build_sequence: window base must be >= 1");
  if (extra_multiple < 1) throw ArgumentError("build_sequence: invalid padding multiple");
  for (int64_t idx : kept) {
    if (idx < 0 || idx >= bag.n) {
      throw ArgumentError("build_sequence: kept index " + std::to_string(idx) +
                          " outside [0," + std::to_string(bag.n) + ")");
    }
  }
  std::vector<int64_t> order(kept);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const auto& ca = bag.coords[static_cast<size_t>(a)];
    const auto& cb = bag.coords[static_cast<size_t>(b)];
    if (ca[0] != cb[0]) return ca[0] < cb[0];
    if (ca[1] != cb[1]) return ca[1] < cb[1];
    return a < b;
  });

  const int64_t m = static_cast<int64_t>(order.size());
  const int64_t unit = std::lcm(window_base_k * 4 * window_base_k * 4, extra_multiple);
  const int64_t padded = ((m + unit - 1) / unit) * unit;

  SampledSequence seq;
  seq.features = Tensor::zeros({1, padded, bag.d});
  seq.mask.assign(static_cast<size_t>(padded), 0);
  seq.kept_indices = order;
  double* dst = seq.features.data();
  for (int64_t i = 0; i < m; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    std::copy_n(bag.embeddings.data() + src * bag.d, bag.d, dst + i * bag.d);
    seq.mask[static_cast<size_t>(i)] = 1;
  }
  return seq;
}

}  // namespace wsd
