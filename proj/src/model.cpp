#include "wsd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "wsd/error.hpp"
#include "wsd/rng.hpp"

namespace wsd {

namespace {

constexpr double kMaskLogit = -1e9;

std::vector<int64_t> real_positions(const std::vector<uint8_t>& mask) {
  std::vector<int64_t> reals;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) reals.push_back(static_cast<int64_t>(i));
  }
  return reals;
}

Tensor init_weight(Shape shape, int64_t fan_in, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : v) x = rng.normal(0.0, std);
  auto t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor init_zeros(Shape shape) {
  auto t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

Tensor init_ones(Shape shape) {
  auto t = Tensor::full(std::move(shape), 1.0);
  t.set_requires_grad(true);
  return t;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

}  // namespace

void WsdConfig::validate() const {
  if (feature_dim < 1) throw ArgumentError("config: feature_dim must be set");
  if (num_classes < 2) throw ArgumentError("config: num_classes must be >= 2");
  if (heads < 1) throw ArgumentError("config: heads must be >= 1");
  if (feature_dim % heads != 0) {
    throw ArgumentError("config: feature_dim " + std::to_string(feature_dim) +
                        " not divisible by heads " + std::to_string(heads));
  }
  if (window_base < 1) throw ArgumentError("config: window_base must be >= 1");
  if (landmarks < 1) throw ArgumentError("config: landmarks must be >= 1");
  if (pinv_iters < 1) throw ArgumentError("config: pinv_iters must be >= 1");
  if (serg_grid < 1) throw ArgumentError("config: serg_grid must be >= 1");
  if (serg_reduction < 1 || (serg_grid * serg_grid) % serg_reduction != 0) {
    throw ArgumentError("config: serg_grid^2 must be divisible by serg_reduction");
  }
  if (agg_hidden < 1) throw ArgumentError("config: agg_hidden must be >= 1");
  if (fixed_window_grid < 0) throw ArgumentError("config: fixed_window_grid must be >= 0");
  if (fixed_window_grid > 0 && disable_wsda) {
    throw ArgumentError("config: fixed_window_grid conflicts with disable_wsda");
  }
}

std::vector<int64_t> WsdConfig::window_grids() const {
  if (disable_wsda) return {};
  if (fixed_window_grid > 0) return {fixed_window_grid};
  return {window_base, 2 * window_base, 4 * window_base};
}

int64_t WsdConfig::sequence_multiple() const {
  int64_t unit = 16 * window_base * window_base;  // (4k)^2
  unit = std::lcm(unit, serg_grid * serg_grid);
  if (fixed_window_grid > 0) unit = std::lcm(unit, fixed_window_grid * fixed_window_grid);
  return unit;
}

int64_t geometry_length(int64_t real_count, const WsdConfig& config) {
  const int64_t unit = config.sequence_multiple();
  const int64_t m = std::max<int64_t>(real_count, 1);
  return ((m + unit - 1) / unit) * unit;
}

WsdModel WsdModel::init(const WsdConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  WsdModel model;
  model.config = config;
  const int64_t f = config.feature_dim;
  if (!config.disable_wsda) {
    model.qkv_w = init_weight({f, 3 * f}, f, rng);
    model.nys_out_w = init_weight({f, f}, f, rng);
    model.nys_out_b = init_zeros({f});
    for (size_t i = 0; i < config.window_grids().size(); ++i) {
      WindowBlock b;
      b.qkv_w = init_weight({f, 3 * f}, f, rng);
      b.qkv_b = init_zeros({3 * f});
      b.conv = init_zeros({config.heads, 3});
      b.ln1_g = init_ones({f});
      b.ln1_b = init_zeros({f});
      b.lin1_w = init_weight({f, f}, f, rng);
      b.lin1_b = init_zeros({f});
      b.ln2_g = init_ones({f});
      b.ln2_b = init_zeros({f});
      b.lin2_w = init_weight({f, f}, f, rng);
      b.lin2_b = init_zeros({f});
      model.blocks.push_back(std::move(b));
    }
  }
  if (!config.disable_serg) {
    const int64_t l2 = config.serg_grid * config.serg_grid;
    const int64_t bott = l2 / config.serg_reduction;
    model.serg_w1 = init_weight({bott, l2}, l2, rng);
    model.serg_b1 = init_zeros({bott});
    model.serg_w2 = init_weight({l2, bott}, bott, rng);
    model.serg_b2 = init_zeros({l2});
  }
  if (config.aggregator == Aggregator::Attention) {
    model.agg_v = init_weight({config.agg_hidden, f}, f, rng);
    model.agg_w = init_weight({config.agg_hidden}, config.agg_hidden, rng);
  }
  model.cls_w = init_weight({config.num_classes, f}, f, rng);
  model.cls_b = init_zeros({config.num_classes});
  return model;
}

std::vector<std::pair<std::string, Tensor>> WsdModel::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (!config.disable_wsda) {
    out.push_back({"nys.qkv.w", qkv_w});
    out.push_back({"nys.out.w", nys_out_w});
    out.push_back({"nys.out.b", nys_out_b});
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "win" + std::to_string(i) + ".";
      const WindowBlock& b = blocks[i];
      out.push_back({p + "qkv.w", b.qkv_w});
      out.push_back({p + "qkv.b", b.qkv_b});
      out.push_back({p + "conv", b.conv});
      out.push_back({p + "ln1.g", b.ln1_g});
      out.push_back({p + "ln1.b", b.ln1_b});
      out.push_back({p + "lin1.w", b.lin1_w});
      out.push_back({p + "lin1.b", b.lin1_b});
      out.push_back({p + "ln2.g", b.ln2_g});
      out.push_back({p + "ln2.b", b.ln2_b});
      out.push_back({p + "lin2.w", b.lin2_w});
      out.push_back({p + "lin2.b", b.lin2_b});
    }
  }
  if (!config.disable_serg) {
    out.push_back({"serg.w1", serg_w1});
    out.push_back({"serg.b1", serg_b1});
    out.push_back({"serg.w2", serg_w2});
    out.push_back({"serg.b2", serg_b2});
  }
  if (config.aggregator == Aggregator::Attention) {
    out.push_back({"agg.v", agg_v});
    out.push_back({"agg.w", agg_w});
  }
  out.push_back({"cls.w", cls_w});
  out.push_back({"cls.b", cls_b});
  return out;
}

void WsdModel::zero_grads() const {
  for (auto& [name, t] : parameters()) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

Tensor chunk_windows(const Tensor& h, int64_t grid) {
  if (h.rank() != 2) throw ShapeError("chunk_windows expects [M,F], got " + shape_str(h.shape()));
  const int64_t m = h.dim(0), f = h.dim(1);
  const int64_t w = grid * grid;
  if (m % w != 0) {
    throw ShapeError("sequence length " + std::to_string(m) + " not divisible by " +
                     std::to_string(w) + " windows");
  }
  return reshape(h, {w, m / w, f});
}

Tensor merge_windows(const Tensor& windows) {
  if (windows.rank() != 3) {
    throw ShapeError("merge_windows expects [W,c,F], got " + shape_str(windows.shape()));
  }
  return reshape(windows, {windows.dim(0) * windows.dim(1), windows.dim(2)});
}

Tensor nystrom_attention(const Tensor& z, const std::vector<uint8_t>& mask,
                         const WsdModel& model) {
  Tensor z2 = z;
  if (z.rank() == 3) {
    if (z.dim(0) != 1) throw ShapeError("expected batch of one, got " + shape_str(z.shape()));
    z2 = reshape(z, {z.dim(1), z.dim(2)});
  }
  const int64_t m_pad = z2.dim(0);
  const int64_t f = z2.dim(1);
  if (static_cast<int64_t>(mask.size()) != m_pad) {
    throw ShapeError("mask length does not match sequence length");
  }
  const auto reals = real_positions(mask);
  const int64_t m_real = static_cast<int64_t>(reals.size());
  if (m_real == 0) throw ArgumentError("nystrom_attention: no real instances");
  const int64_t m_lm = std::min<int64_t>(model.config.landmarks, m_real);

  Tensor qkv = matmul(z2, model.qkv_w);
  Tensor q = slice_last(qkv, 0, f);
  Tensor k = slice_last(qkv, f, f);
  Tensor v = slice_last(qkv, 2 * f, f);

  // Landmarks: contiguous segments of the real positions, averaged.
  std::vector<double> seg(static_cast<size_t>(m_lm * m_pad), 0.0);
  for (int64_t s = 0; s < m_lm; ++s) {
    const int64_t lo = s * m_real / m_lm;
    const int64_t hi = (s + 1) * m_real / m_lm;
    const double wgt = 1.0 / static_cast<double>(hi - lo);
    for (int64_t i = lo; i < hi; ++i) {
      seg[static_cast<size_t>(s * m_pad + reals[static_cast<size_t>(i)])] = wgt;
    }
  }
  Tensor seg_avg = Tensor::from({m_lm, m_pad}, std::move(seg));
  Tensor qm = matmul(seg_avg, q);
  Tensor km = matmul(seg_avg, k);

  Tensor s1 = softmax(matmul(q, transpose2(km)));
  Tensor s2 = softmax(matmul(qm, transpose2(km)));
  std::vector<double> key_bias(static_cast<size_t>(m_pad), 0.0);
  for (int64_t i = 0; i < m_pad; ++i) {
    if (!mask[static_cast<size_t>(i)]) key_bias[static_cast<size_t>(i)] = kMaskLogit;
  }
  Tensor s3 = softmax(add_const(matmul(qm, transpose2(k)), key_bias, {m_pad}));

  Tensor kernel_pinv = model.config.pinv_mode == PinvMode::Exact
                           ? inverse_exact(s2)
                           : pinv_newton_schulz(s2, model.config.pinv_iters);
  Tensor ctx = matmul(s1, matmul(kernel_pinv, matmul(s3, v)));
  Tensor out = linear(ctx, model.nys_out_w, model.nys_out_b);

  std::vector<double> row_mask(static_cast<size_t>(m_pad), 0.0);
  for (int64_t i = 0; i < m_pad; ++i) row_mask[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)] ? 1.0 : 0.0;
  return mul_const(out, row_mask, {m_pad, 1});
}

Tensor window_attention(const Tensor& h, const std::vector<uint8_t>& mask, int64_t grid,
                        const WindowBlock& block, const WsdConfig& config, int64_t m_geo) {
  const int64_t m_pad = h.dim(0);
  const int64_t f = h.dim(1);
  const int64_t w = grid * grid;
  if (m_geo > m_pad || m_geo % w != 0) {
    throw ShapeError("window region " + std::to_string(m_geo) + " incompatible with grid " +
                     std::to_string(grid));
  }
  const int64_t c = m_geo / w;
  const int64_t heads = config.heads;
  const int64_t dk = f / heads;

  Tensor hw = m_geo == m_pad ? h : slice_rows(h, 0, m_geo);
  Tensor win = chunk_windows(hw, grid);
  Tensor qkv = linear(win, block.qkv_w, block.qkv_b);
  Tensor q = permute(reshape(slice_last(qkv, 0, f), {w, c, heads, dk}), {0, 2, 1, 3});
  Tensor k = permute(reshape(slice_last(qkv, f, f), {w, c, heads, dk}), {0, 2, 1, 3});
  Tensor v = permute(reshape(slice_last(qkv, 2 * f, f), {w, c, heads, dk}), {0, 2, 1, 3});

  Tensor logits = scale(matmul(q, transpose2(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor pos = conv1d_depthwise(logits, block.conv);

  std::vector<double> key_bias(static_cast<size_t>(w * c), 0.0);
  std::vector<double> alive(static_cast<size_t>(m_geo), 0.0);
  for (int64_t win_i = 0; win_i < w; ++win_i) {
    bool any = false;
    for (int64_t j = 0; j < c; ++j) {
      const int64_t pos_i = win_i * c + j;
      const bool real = pos_i < static_cast<int64_t>(mask.size()) && mask[static_cast<size_t>(pos_i)];
      key_bias[static_cast<size_t>(win_i * c + j)] = real ? 0.0 : kMaskLogit;
      any = any || real;
    }
    if (any) {
      for (int64_t j = 0; j < c; ++j) alive[static_cast<size_t>(win_i * c + j)] = 1.0;
    }
  }
  Tensor attn = softmax(add_const(add(logits, pos), key_bias, {w, 1, 1, c}));
  Tensor ctx = matmul(attn, v);
  Tensor merged = merge_windows(reshape(permute(ctx, {0, 2, 1, 3}), {w, c, f}));

  Tensor n1 = layer_norm(merged, block.ln1_g, block.ln1_b);
  Tensor l1 = linear(n1, block.lin1_w, block.lin1_b);
  Tensor n2 = layer_norm(l1, block.ln2_g, block.ln2_b);
  Tensor l2 = linear(n2, block.lin2_w, block.lin2_b);
  Tensor update = mul_const(l2, alive, {m_geo, 1});

  Tensor core = add(hw, update);
  if (m_geo == m_pad) return core;
  return concat_rows(core, slice_rows(h, m_geo, m_pad - m_geo));
}

Tensor wsda_forward(const Tensor& z, const std::vector<uint8_t>& mask, const WsdModel& model) {
  if (model.config.disable_wsda) return z;
  Tensor z2 = z;
  if (z.rank() == 3) z2 = reshape(z, {z.dim(1), z.dim(2)});
  const auto reals = real_positions(mask);
  const int64_t m_geo = geometry_length(static_cast<int64_t>(reals.size()), model.config);
  if (m_geo > z2.dim(0)) {
    throw ShapeError("sequence shorter than its window region; pad to " + std::to_string(m_geo));
  }
  if (!reals.empty() && reals.back() >= m_geo) {
    throw ArgumentError("real instances must occupy the leading window region");
  }
  Tensor h = nystrom_attention(z2, mask, model);
  const auto grids = model.config.window_grids();
  for (size_t i = 0; i < grids.size(); ++i) {
    h = window_attention(h, mask, grids[i], model.blocks[i], model.config, m_geo);
  }
  return h;
}

SergResult serg_forward(const Tensor& h, const std::vector<uint8_t>& mask, const WsdModel& model) {
  Tensor h2 = h;
  if (h.rank() == 3) h2 = reshape(h, {h.dim(1), h.dim(2)});
  if (model.config.disable_serg) return {h2, Tensor()};
  const int64_t m_pad = h2.dim(0);
  const int64_t f = h2.dim(1);
  const int64_t l2 = model.config.serg_grid * model.config.serg_grid;
  const auto reals = real_positions(mask);
  const int64_t m_geo = geometry_length(static_cast<int64_t>(reals.size()), model.config);
  if (m_geo > m_pad || m_geo % l2 != 0) {
    throw ShapeError("gate region " + std::to_string(m_geo) + " incompatible with " +
                     std::to_string(l2) + " regions");
  }
  const int64_t cw = m_geo / l2;

  Tensor hw = m_geo == m_pad ? h2 : slice_rows(h2, 0, m_geo);

  // Region means over real instances; all-padded regions contribute zero.
  std::vector<double> win_avg(static_cast<size_t>(l2 * m_geo), 0.0);
  std::vector<double> dead(static_cast<size_t>(m_geo), 0.0);
  std::vector<double> expand(static_cast<size_t>(m_geo * l2), 0.0);
  for (int64_t l = 0; l < l2; ++l) {
    int64_t count = 0;
    for (int64_t j = 0; j < cw; ++j) {
      const int64_t pos = l * cw + j;
      if (pos < static_cast<int64_t>(mask.size()) && mask[static_cast<size_t>(pos)]) count++;
    }
    for (int64_t j = 0; j < cw; ++j) {
      const int64_t pos = l * cw + j;
      if (count > 0) {
        expand[static_cast<size_t>(pos * l2 + l)] = 1.0;
        if (pos < static_cast<int64_t>(mask.size()) && mask[static_cast<size_t>(pos)]) {
          win_avg[static_cast<size_t>(l * m_geo + pos)] = 1.0 / static_cast<double>(count);
        }
      } else {
        dead[static_cast<size_t>(pos)] = 1.0;  // bypass: gate forced to 1
      }
    }
  }
  Tensor region_rows = matmul(Tensor::from({l2, m_geo}, std::move(win_avg)), hw);
  Tensor pooled = matmul(region_rows, Tensor::full({f, 1}, 1.0 / static_cast<double>(f)));
  Tensor zrow = reshape(pooled, {1, l2});
  Tensor e = relu(add(matmul(zrow, transpose2(model.serg_w1)), model.serg_b1));
  Tensor gates = sigmoid(add(matmul(e, transpose2(model.serg_w2)), model.serg_b2));

  Tensor gate_col = matmul(Tensor::from({m_geo, l2}, std::move(expand)), transpose2(gates));
  gate_col = add_const(gate_col, dead, {m_geo, 1});
  Tensor gate_full = matmul(gate_col, Tensor::full({1, f}, 1.0));
  Tensor core = mul(hw, gate_full);
  Tensor out = m_geo == m_pad ? core : concat_rows(core, slice_rows(h2, m_geo, m_pad - m_geo));
  return {out, gates};
}

AggregateResult aggregate_and_classify(const Tensor& h, const std::vector<uint8_t>& mask,
                                       const WsdModel& model) {
  Tensor h2 = h;
  if (h.rank() == 3) h2 = reshape(h, {h.dim(1), h.dim(2)});
  const int64_t m_pad = h2.dim(0);
  const auto reals = real_positions(mask);
  if (reals.empty()) throw ArgumentError("aggregate: no real instances to pool");

  Tensor bag;
  Tensor weights;
  switch (model.config.aggregator) {
    case Aggregator::Attention: {
      Tensor scores = matmul(tanh(matmul(h2, transpose2(model.agg_v))),
                             reshape(model.agg_w, {model.config.agg_hidden, 1}));
      std::vector<double> bias(static_cast<size_t>(m_pad), 0.0);
      for (int64_t i = 0; i < m_pad; ++i) {
        if (!mask[static_cast<size_t>(i)]) bias[static_cast<size_t>(i)] = kMaskLogit;
      }
      weights = softmax(add_const(reshape(scores, {1, m_pad}), bias, {m_pad}));
      bag = matmul(weights, h2);
      break;
    }
    case Aggregator::Mean: {
      std::vector<double> mean_row(static_cast<size_t>(m_pad), 0.0);
      const double wgt = 1.0 / static_cast<double>(reals.size());
      for (int64_t i : reals) mean_row[static_cast<size_t>(i)] = wgt;
      bag = matmul(Tensor::from({1, m_pad}, std::move(mean_row)), h2);
      break;
    }
    case Aggregator::Max: {
      bag = max_rows(h2, mask);
      break;
    }
  }
  Tensor logits = linear(bag, transpose2(model.cls_w), model.cls_b);
  return {reshape(logits, {model.config.num_classes}), weights};
}

Tensor forward(const SampledSequence& seq, const WsdModel& model) {
  if (seq.features.dim(2) != model.config.feature_dim) {
    throw ShapeError("sequence feature dim " + std::to_string(seq.features.dim(2)) +
                     " does not match model " + std::to_string(model.config.feature_dim));
  }
  Tensor z = reshape(seq.features, {seq.features.dim(1), seq.features.dim(2)});
  Tensor h = wsda_forward(z, seq.mask, model);
  Tensor gated = serg_forward(h, seq.mask, model).out;
  return aggregate_and_classify(gated, seq.mask, model).logits;
}

// ---- checkpoint io -------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'W', 'S', 'D', 'C'};
constexpr uint16_t kCkptVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& off, const std::string& path) {
  if (off + sizeof(T) > in.size()) throw FormatError(path + ": truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

nlohmann::json config_to_json(const WsdConfig& c) {
  nlohmann::json j;
  j["feature_dim"] = c.feature_dim;
  j["num_classes"] = c.num_classes;
  j["heads"] = c.heads;
  j["window_base"] = c.window_base;
  j["landmarks"] = c.landmarks;
  j["pinv_iters"] = c.pinv_iters;
  j["serg_grid"] = c.serg_grid;
  j["serg_reduction"] = c.serg_reduction;
  j["agg_hidden"] = c.agg_hidden;
  j["disable_wsda"] = c.disable_wsda;
  j["disable_serg"] = c.disable_serg;
  j["fixed_window_grid"] = c.fixed_window_grid;
  j["aggregator"] = c.aggregator == Aggregator::Attention ? "attention"
                    : c.aggregator == Aggregator::Mean    ? "mean"
                                                          : "max";
  j["pinv_mode"] = c.pinv_mode == PinvMode::Exact ? "exact" : "newton_schulz";
  return j;
}

WsdConfig config_from_json(const nlohmann::json& j) {
  WsdConfig c;
  c.feature_dim = j.at("feature_dim").get<int64_t>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.window_base = j.at("window_base").get<int64_t>();
  c.landmarks = j.at("landmarks").get<int64_t>();
  c.pinv_iters = j.at("pinv_iters").get<int>();
  c.serg_grid = j.at("serg_grid").get<int64_t>();
  c.serg_reduction = j.at("serg_reduction").get<int64_t>();
  c.agg_hidden = j.at("agg_hidden").get<int64_t>();
  c.disable_wsda = j.at("disable_wsda").get<bool>();
  c.disable_serg = j.at("disable_serg").get<bool>();
  c.fixed_window_grid = j.at("fixed_window_grid").get<int64_t>();
  const std::string agg = j.at("aggregator").get<std::string>();
  c.aggregator = agg == "attention" ? Aggregator::Attention
                 : agg == "mean"    ? Aggregator::Mean
                                    : Aggregator::Max;
  c.pinv_mode =
      j.at("pinv_mode").get<std::string>() == "exact" ? PinvMode::Exact : PinvMode::NewtonSchulz;
  return c;
}

}  // namespace

void save_checkpoint(const WsdModel& model, const std::string& path) {
  std::string out;
  out.append(kCkptMagic, 4);
  put<uint16_t>(out, kCkptVersion);
  const std::string cfg = config_to_json(model.config).dump();
  put<uint32_t>(out, static_cast<uint32_t>(cfg.size()));
  out += cfg;
  const auto params = model.parameters();
  put<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out += name;
    put<uint8_t>(out, static_cast<uint8_t>(t.rank()));
    for (int64_t i = 0; i < t.rank(); ++i) put<uint32_t>(out, static_cast<uint32_t>(t.dim(i)));
    const size_t bytes = t.values().size() * sizeof(double);
    const size_t pos = out.size();
    out.resize(pos + bytes);
    std::memcpy(out.data() + pos, t.data(), bytes);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(path + ": write failed");
}

WsdModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(path + ": cannot open");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string in = ss.str();
  size_t off = 0;
  if (in.size() < 6 || std::memcmp(in.data(), kCkptMagic, 4) != 0) {
    throw FormatError(path + ": bad checkpoint magic");
  }
  off = 4;
  const uint16_t version = take<uint16_t>(in, off, path);
  if (version != kCkptVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const uint32_t cfg_len = take<uint32_t>(in, off, path);
  if (off + cfg_len > in.size()) throw FormatError(path + ": truncated checkpoint");
  WsdConfig config;
  try {
    config = config_from_json(nlohmann::json::parse(in.substr(off, cfg_len)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad config block: " + e.what());
  }
  off += cfg_len;
  WsdModel model = WsdModel::init(config, 0);
  auto params = model.parameters();
  const uint32_t count = take<uint32_t>(in, off, path);
  if (count != params.size()) {
    throw FormatError(path + ": checkpoint holds " + std::to_string(count) +
                      " tensors, model needs " + std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const uint16_t name_len = take<uint16_t>(in, off, path);
    if (off + name_len > in.size()) throw FormatError(path + ": truncated checkpoint");
    const std::string got(in.data() + off, name_len);
    off += name_len;
    if (got != name) {
      throw FormatError(path + ": expected tensor '" + name + "', found '" + got + "'");
    }
    const uint8_t rank = take<uint8_t>(in, off, path);
    if (rank != t.rank()) throw FormatError(path + ": rank mismatch for " + name);
    int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      const uint32_t d = take<uint32_t>(in, off, path);
      if (static_cast<int64_t>(d) != t.dim(i)) {
        throw FormatError(path + ": shape mismatch for " + name);
      }
      numel *= d;
    }
    const size_t bytes = static_cast<size_t>(numel) * sizeof(double);
    if (off + bytes > in.size()) throw FormatError(path + ": truncated checkpoint");
    Tensor tt = t;
    std::memcpy(tt.data(), in.data() + off, bytes);
    off += bytes;
  }
  if (off != in.size()) throw FormatError(path + ": trailing bytes");
  return model;
}

}  // namespace wsd
