#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wsd/sampler.hpp"
#include "wsd/tensor.hpp"

namespace wsd {

enum class Aggregator { Attention, Mean, Max };
enum class PinvMode { NewtonSchulz, Exact };

struct WsdConfig {
  int64_t feature_dim = 0;  // F, taken from the dataset
  int64_t num_classes = 2;
  int64_t heads = 8;
  int64_t window_base = 4;     // k; decaying grids are k, 2k, 4k windows per side
  int64_t landmarks = 64;      // m for the global-attention approximation
  int pinv_iters = 6;
  int64_t serg_grid = 8;       // L
  int64_t serg_reduction = 4;  // r
  int64_t agg_hidden = 128;
  bool disable_wsda = false;
  bool disable_serg = false;
  int64_t fixed_window_grid = 0;  // replaces the decaying grids when nonzero
  Aggregator aggregator = Aggregator::Attention;
  PinvMode pinv_mode = PinvMode::NewtonSchulz;  // Exact is a verification mode

  void validate() const;
  std::vector<int64_t> window_grids() const;
  // Sequences fed to the model must be padded to a multiple of this.
  int64_t sequence_multiple() const;
};

// Length of the window/gate region for a sequence with `real_count` real
// instances: the least padded length covering them. Positions beyond it
// are pure padding and pass through every stage untouched, so appending
// padding never changes the logits.
int64_t geometry_length(int64_t real_count, const WsdConfig& config);

struct WindowBlock {
  Tensor qkv_w;  // [F, 3F]
  Tensor qkv_b;  // [3F]
  Tensor conv;   // [heads, 3] positional kernels, zero-initialized
  Tensor ln1_g, ln1_b;
  Tensor lin1_w, lin1_b;  // [F, F], [F]
  Tensor ln2_g, ln2_b;
  Tensor lin2_w, lin2_b;
};

struct WsdModel {
  WsdConfig config;

  Tensor qkv_w;      // [F, 3F] shared projection feeding the global attention
  Tensor nys_out_w;  // [F, F]
  Tensor nys_out_b;  // [F]
  std::vector<WindowBlock> blocks;  // one per window grid

  Tensor serg_w1;  // [L^2/r, L^2]
  Tensor serg_b1;  // [L^2/r]
  Tensor serg_w2;  // [L^2, L^2/r]
  Tensor serg_b2;  // [L^2]

  Tensor agg_v;  // [agg_hidden, F]
  Tensor agg_w;  // [agg_hidden]
  Tensor cls_w;  // [C, F]
  Tensor cls_b;  // [C]

  static WsdModel init(const WsdConfig& config, uint64_t seed);

  // Enabled parameters in canonical (checkpoint) order.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  void zero_grads() const;
};

// Window partition as contiguous chunks of the sequence: [M,F] -> [g^2, c, F]
// with c = M / g^2, and its inverse.
Tensor chunk_windows(const Tensor& h, int64_t grid);
Tensor merge_windows(const Tensor& windows);

// Landmark-based global attention. Landmarks are segment means over the
// real (masked-in) positions only; masked keys are excluded and padded
// query rows produce zero output.
Tensor nystrom_attention(const Tensor& z, const std::vector<uint8_t>& mask,
                         const WsdModel& model);

// Multi-head self-attention inside each of grid^2 contiguous windows with a
// depthwise-convolution positional bias, followed by the norm/linear
// residual update. Windows with no real instance pass through unchanged.
Tensor window_attention(const Tensor& h, const std::vector<uint8_t>& mask, int64_t grid,
                        const WindowBlock& block, const WsdConfig& config, int64_t m_geo);

// Global attention followed by the window stages on successively finer
// grids. Identity when disable_wsda is set.
Tensor wsda_forward(const Tensor& z, const std::vector<uint8_t>& mask, const WsdModel& model);

struct SergResult {
  Tensor out;
  Tensor gates;  // [1, L^2], each strictly inside (0,1)
};

// Squeeze-and-excitation gate over L^2 contiguous regions: per-region mean
// of the real instances, a bottleneck ReLU/sigmoid pair, and a scalar gate
// multiplying every feature in the region. Regions with no real instance
// bypass the gate.
SergResult serg_forward(const Tensor& h, const std::vector<uint8_t>& mask, const WsdModel& model);

struct AggregateResult {
  Tensor logits;   // [C]
  Tensor weights;  // [1, M_pad] attention weights; undefined for mean/max pooling
};

AggregateResult aggregate_and_classify(const Tensor& h, const std::vector<uint8_t>& mask,
                                       const WsdModel& model);

// Full pipeline on a sampled sequence; returns the class logits.
Tensor forward(const SampledSequence& seq, const WsdModel& model);

void save_checkpoint(const WsdModel& model, const std::string& path);
WsdModel load_checkpoint(const std::string& path);

}  // namespace wsd
