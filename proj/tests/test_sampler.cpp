#include "wsd/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "wsd/error.hpp"
#include "wsd/rng.hpp"

using namespace wsd;

namespace {

// Exhaustive minimum of the k=2 clustering objective over all assignments.
double brute_force_two_cluster_j(const std::vector<double>& x, int64_t n, int64_t d,
                                 std::vector<int>* best_assign = nullptr) {
  double best = 1e300;
  for (uint32_t bits = 0; bits < (1u << n); ++bits) {
    std::vector<double> mean0(static_cast<size_t>(d), 0.0), mean1(static_cast<size_t>(d), 0.0);
    int64_t n0 = 0, n1 = 0;
    for (int64_t i = 0; i < n; ++i) {
      const bool side = (bits >> i) & 1u;
      for (int64_t j = 0; j < d; ++j) {
        (side ? mean1 : mean0)[static_cast<size_t>(j)] += x[static_cast<size_t>(i * d + j)];
      }
      (side ? n1 : n0)++;
    }
    if (n0 == 0 || n1 == 0) continue;
    for (int64_t j = 0; j < d; ++j) {
      mean0[static_cast<size_t>(j)] /= static_cast<double>(n0);
      mean1[static_cast<size_t>(j)] /= static_cast<double>(n1);
    }
    double jv = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const bool side = (bits >> i) & 1u;
      const auto& mu = side ? mean1 : mean0;
      for (int64_t j = 0; j < d; ++j) {
        const double t = x[static_cast<size_t>(i * d + j)] - mu[static_cast<size_t>(j)];
        jv += t * t;
      }
    }
    if (jv < best) {
      best = jv;
      if (best_assign) {
        best_assign->assign(static_cast<size_t>(n), 0);
        for (int64_t i = 0; i < n; ++i) (*best_assign)[static_cast<size_t>(i)] = (bits >> i) & 1u;
      }
    }
  }
  return best;
}

Bag grid_bag(int64_t side, int64_t d, uint64_t seed) {
  Rng rng(seed);
  Bag bag;
  bag.id = "grid";
  bag.n = side * side;
  bag.d = d;
  for (int64_t i = 0; i < bag.n * d; ++i) bag.embeddings.push_back(rng.normal());
  for (int32_t r = 0; r < side; ++r) {
    for (int32_t c = 0; c < side; ++c) bag.coords.push_back({r, c});
  }
  return bag;
}

}  // namespace

TEST_CASE("kmeans with as many clusters as points reaches zero inertia") {
  Rng rng(11);
  const int64_t n = 7, d = 3;
  std::vector<double> x(static_cast<size_t>(n * d));
  for (double& v : x) v = rng.uniform(-5.0, 5.0);
  const auto c = kmeans(x, n, d, n, 99);
  CHECK(c.inertia == doctest::Approx(0.0).epsilon(1e-12));
  // Each centroid coincides with some point.
  for (int64_t cl = 0; cl < n; ++cl) {
    double best = 1e300;
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double t = c.centroids[static_cast<size_t>(cl * d + j)] - x[static_cast<size_t>(i * d + j)];
        s += t * t;
      }
      best = std::min(best, s);
    }
    CHECK(best < 1e-18);
  }
}

TEST_CASE("kmeans recovers the two planar triples and the brute-force optimum") {
  const std::vector<double> pts = {0, 0, 0, 1, 1, 0, 10, 10, 10, 11, 11, 10};
  std::vector<int> best_assign;
  const double best_j = brute_force_two_cluster_j(pts, 6, 2, &best_assign);
  const auto c = kmeans(pts, 6, 2, 2, 3);
  CHECK(c.inertia == doctest::Approx(best_j).epsilon(1e-9));
  CHECK(c.inertia == doctest::Approx(8.0 / 3.0).epsilon(1e-9));
  // First three points together, last three together.
  CHECK(c.assignments[0] == c.assignments[1]);
  CHECK(c.assignments[1] == c.assignments[2]);
  CHECK(c.assignments[3] == c.assignments[4]);
  CHECK(c.assignments[4] == c.assignments[5]);
  CHECK(c.assignments[0] != c.assignments[3]);
}

TEST_CASE("kmeans objective trace is non-increasing and self-consistent") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const int64_t n = 120, d = 6;
    std::vector<double> x(static_cast<size_t>(n * d));
    for (double& v : x) v = rng.normal();
    const auto c = kmeans(x, n, d, 10, seed * 17);
    REQUIRE(!c.inertia_trace.empty());
    for (size_t i = 1; i < c.inertia_trace.size(); ++i) {
      CHECK(c.inertia_trace[i] <= c.inertia_trace[i - 1] + 1e-9);
    }
    // Invariants: sizes sum to n; inertia matches a recompute.
    int64_t total = 0;
    for (int64_t s : c.cluster_sizes) total += s;
    CHECK(total == n);
    double j = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t f = 0; f < d; ++f) {
        const double t = x[static_cast<size_t>(i * d + f)] -
                         c.centroids[static_cast<size_t>(c.assignments[static_cast<size_t>(i)] * d + f)];
        j += t * t;
      }
    }
    CHECK(std::abs(j - c.inertia) <= 1e-9 * std::max(1.0, std::abs(j)));
  }
}

TEST_CASE("kmeans rejects more clusters than points") {
  std::vector<double> x = {0, 0, 1, 1};
  CHECK_THROWS_AS(kmeans(x, 2, 2, 3, 1), ArgumentError);
}

TEST_CASE("stratified sampling keeps everything at alpha 100") {
  Rng rng(21);
  const int64_t n = 90, d = 4;
  std::vector<double> x(static_cast<size_t>(n * d));
  for (double& v : x) v = rng.normal();
  const auto c = kmeans(x, n, d, 7, 5);
  const auto kept = stratified_sample(c, 100.0, 1);
  CHECK(kept.size() == static_cast<size_t>(n));
}

TEST_CASE("stratified sampling respects the per-cluster rounding rule") {
  // Cluster sizes 50/30/20 at alpha=20 keep exactly 10/6/4.
  Clustering c;
  c.k = 3;
  c.d = 1;
  for (int i = 0; i < 50; ++i) c.assignments.push_back(0);
  for (int i = 0; i < 30; ++i) c.assignments.push_back(1);
  for (int i = 0; i < 20; ++i) c.assignments.push_back(2);
  c.cluster_sizes = {50, 30, 20};
  const auto kept = stratified_sample(c, 20.0, 7);
  std::vector<int64_t> counts(3, 0);
  for (int64_t idx : kept) counts[static_cast<size_t>(c.assignments[static_cast<size_t>(idx)])]++;
  CHECK(counts[0] == 10);
  CHECK(counts[1] == 6);
  CHECK(counts[2] == 4);
}

TEST_CASE("stratified sampling is deterministic, disjoint, and in-range") {
  Rng data_rng(31);
  for (uint64_t trial = 0; trial < 20; ++trial) {
    const int64_t n = 40 + static_cast<int64_t>(data_rng.below(100));
    const int64_t d = 3;
    std::vector<double> x(static_cast<size_t>(n * d));
    for (double& v : x) v = data_rng.normal();
    const auto c = kmeans(x, n, d, 5, trial);
    for (double alpha : {20.0, 60.0, 100.0}) {
      const auto kept = stratified_sample(c, alpha, trial * 3 + 1);
      const auto again = stratified_sample(c, alpha, trial * 3 + 1);
      CHECK(kept == again);
      std::set<int64_t> uniq(kept.begin(), kept.end());
      CHECK(uniq.size() == kept.size());
      std::vector<int64_t> counts(static_cast<size_t>(c.k), 0);
      for (int64_t idx : kept) {
        CHECK(idx >= 0);
        CHECK(idx < n);
        counts[static_cast<size_t>(c.assignments[static_cast<size_t>(idx)])]++;
      }
      for (int64_t cl = 0; cl < c.k; ++cl) {
        const int64_t nk = c.cluster_sizes[static_cast<size_t>(cl)];
        if (nk == 0) continue;
        const int64_t expect =
            std::min<int64_t>(nk, std::max<int64_t>(1, std::llround(alpha * nk / 100.0)));
        CHECK(counts[static_cast<size_t>(cl)] == expect);
      }
    }
  }
}

TEST_CASE("stratified sampling validates alpha") {
  Clustering c;
  c.k = 1;
  c.d = 1;
  c.assignments = {0, 0};
  c.cluster_sizes = {2};
  CHECK_THROWS_AS(stratified_sample(c, 0.0, 1), ArgumentError);
  CHECK_THROWS_AS(stratified_sample(c, 120.0, 1), ArgumentError);
}

TEST_CASE("build_sequence pads to the window unit and masks real slots") {
  const Bag bag = grid_bag(16, 4, 3);  // 256 instances
  std::vector<int64_t> all(static_cast<size_t>(bag.n));
  for (int64_t i = 0; i < bag.n; ++i) all[static_cast<size_t>(i)] = i;
  const auto seq = build_sequence(bag, all, 4);
  CHECK(seq.padded_length() == 256);
  CHECK(seq.real_count() == 256);

  std::vector<int64_t> hundred(all.begin(), all.begin() + 100);
  const auto seq2 = build_sequence(bag, hundred, 4);
  CHECK(seq2.padded_length() == 256);
  int64_t real = 0;
  for (uint8_t m : seq2.mask) real += m;
  CHECK(real == 100);
  // Padded tail rows are exactly zero.
  for (int64_t i = 100; i < 256; ++i) {
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(seq2.features.values()[static_cast<size_t>(i * 4 + j)] == 0.0);
    }
  }
}

TEST_CASE("build_sequence honors a coarser padding multiple") {
  const Bag bag = grid_bag(16, 4, 5);
  std::vector<int64_t> some;
  for (int64_t i = 0; i < 60; ++i) some.push_back(i);
  const auto seq = build_sequence(bag, some, 4, 1024);
  CHECK(seq.padded_length() == 1024);
}

TEST_CASE("build_sequence canonicalizes order and preserves the row multiset") {
  const Bag bag = grid_bag(8, 3, 9);
  Rng rng(17);
  std::vector<int64_t> kept;
  for (int64_t i = 0; i < bag.n; ++i) {
    if (rng.uniform() < 0.4) kept.push_back(i);
  }
  REQUIRE(kept.size() > 4);
  auto shuffled = kept;
  rng.shuffle(shuffled);
  const auto a = build_sequence(bag, kept, 4);
  const auto b = build_sequence(bag, shuffled, 4);
  CHECK(a.features.values() == b.features.values());
  CHECK(a.kept_indices == b.kept_indices);

  // Real rows are exactly the kept instances (as a multiset).
  std::vector<std::vector<double>> want, got;
  for (int64_t idx : kept) {
    want.emplace_back(bag.embeddings.begin() + idx * bag.d,
                      bag.embeddings.begin() + (idx + 1) * bag.d);
  }
  for (int64_t i = 0; i < a.real_count(); ++i) {
    got.emplace_back(a.features.values().begin() + i * bag.d,
                     a.features.values().begin() + (i + 1) * bag.d);
  }
  std::sort(want.begin(), want.end());
  std::sort(got.begin(), got.end());
  CHECK(want == got);
}

TEST_CASE("build_sequence rejects bad kept sets") {
  const Bag bag = grid_bag(4, 2, 1);
  CHECK_THROWS_AS(build_sequence(bag, {}, 4), ArgumentError);
  CHECK_THROWS_AS(build_sequence(bag, {bag.n}, 4), ArgumentError);
}
