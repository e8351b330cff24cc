#pragma once

#include <cstdint>
#include <vector>

#include "wsd/bag.hpp"
#include "wsd/tensor.hpp"

namespace wsd {

struct Clustering {
  int64_t k = 0;
  int64_t d = 0;
  std::vector<int64_t> assignments;    // per instance, in [0,k)
  std::vector<double> centroids;       // k x d row-major
  std::vector<int64_t> cluster_sizes;  // sums to n
  double inertia = 0.0;
  std::vector<double> inertia_trace;   // per-iteration objective, non-increasing
};

// Lloyd iterations with k-means++ seeding. Stops when the relative
// objective improvement drops below 1e-6 or after 100 iterations. Empty
// clusters are reseeded onto the point farthest from its centroid.
Clustering kmeans(const std::vector<double>& embeddings, int64_t n, int64_t d, int64_t k,
                  uint64_t seed);

// Keeps max(1, round(alpha * n_k / 100)) indices per cluster, uniformly
// without replacement. Returns the kept instance indices in ascending order.
std::vector<int64_t> stratified_sample(const Clustering& clustering, double alpha, uint64_t seed);

// Cluster-sampled, raster-ordered, zero-padded model input.
struct SampledSequence {
  Tensor features;                   // [1, M_pad, F]
  std::vector<uint8_t> mask;         // M_pad entries, true for real positions
  std::vector<int64_t> kept_indices; // original instance index per real slot
  double alpha = 100.0;

  int64_t real_count() const { return static_cast<int64_t>(kept_indices.size()); }
  int64_t padded_length() const { return static_cast<int64_t>(mask.size()); }
};

// Orders kept instances by raster scan of their coordinates and pads with
// zeros to the least multiple of lcm((4k)^2, extra_multiple) >= M. The
// extra multiple accommodates window grids coarser than the 4k base.
SampledSequence build_sequence(const Bag& bag, const std::vector<int64_t>& kept,
                               int64_t window_base_k, int64_t extra_multiple = 1);

}  // namespace wsd
