#include "wsd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "wsd/error.hpp"

namespace wsd {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local GraphState* tl_graph = nullptr;

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor axes must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0);
  impl->requires_grad = requires_grad;
  if (tl_graph != nullptr) {
    tl_graph->on_alloc(impl->data.size() * sizeof(double));
    impl->data_acct = tl_graph->shared_from_this();
  }
  return impl;
}

// Grad buffer of t as seen by the walk over gs, or nullptr when it is
// (still) all-zero for this walk.
const double* walk_grad(const TensorImpl* t, const GraphState* gs) {
  if (t->grad.empty()) return nullptr;
  if (t->node >= 0 && t->grad_epoch != gs->epoch) return nullptr;
  return t->grad.data();
}

// Grad buffer of t ready for accumulation. Intermediates reset once per
// walk; leaves accumulate across walks and passes.
double* accum_grad(TensorImpl* t, GraphState* gs) {
  if (t->grad.empty()) {
    t->grad.assign(t->data.size(), 0.0);
    gs->on_alloc(t->grad.size() * sizeof(double));
    t->grad_acct = gs->shared_from_this();
    t->grad_epoch = gs->epoch;
  } else if (t->node >= 0 && t->grad_epoch != gs->epoch) {
    std::fill(t->grad.begin(), t->grad.end(), 0.0);
    t->grad_epoch = gs->epoch;
  }
  return t->grad.data();
}

struct OpCtx {
  GraphState* gs = nullptr;
  bool track = false;
};

OpCtx op_ctx(std::initializer_list<const Tensor*> inputs) {
  OpCtx c;
  c.gs = tl_graph;
  // Without an active GraphScope ops evaluate eagerly and record nothing;
  // the result then reports requires_grad() == false.
  if (c.gs == nullptr) return c;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) {
      c.track = true;
      break;
    }
  }
  return c;
}

void finish(const OpCtx& c, Tensor& out, std::function<void()> bw) {
  if (!c.track) return;
  out.impl()->requires_grad = true;
  out.impl()->node = static_cast<int64_t>(c.gs->nodes.size());
  c.gs->nodes.push_back({std::move(bw)});
}

// c[m,q] += a[m,p] * b[p,q]
void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t p, int64_t q) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * p;
    double* ci = c + i * q;
    for (int64_t k = 0; k < p; ++k) {
      const double aik = ai[k];
      const double* bk = b + k * q;
      for (int64_t j = 0; j < q; ++j) ci[j] += aik * bk[j];
    }
  }
}

// c[m,p] += a[m,q] * b[p,q]^T
void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t q, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * q;
    double* ci = c + i * p;
    for (int64_t k = 0; k < p; ++k) {
      const double* bk = b + k * q;
      double acc = 0.0;
      for (int64_t j = 0; j < q; ++j) acc += ai[j] * bk[j];
      ci[k] += acc;
    }
  }
}

// c[p,q] += a[m,p]^T * b[m,q]
void gemm_tn(const double* a, const double* b, double* c, int64_t m, int64_t p, int64_t q) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * p;
    const double* bi = b + i * q;
    for (int64_t k = 0; k < p; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      double* ck = c + k * q;
      for (int64_t j = 0; j < q; ++j) ck[j] += aik * bi[j];
    }
  }
}

// Broadcast modes for the elementwise binary ops.
enum class Bcast { Same, Scalar, Suffix };

Bcast bcast_mode(const Shape& a, const Shape& b, int64_t bn) {
  if (a == b) return Bcast::Same;
  if (bn == 1) return Bcast::Scalar;
  if (b.size() < a.size()) {
    const size_t off = a.size() - b.size();
    bool suffix = true;
    for (size_t i = 0; i < b.size(); ++i) {
      if (a[off + i] != b[i]) {
        suffix = false;
        break;
      }
    }
    if (suffix) return Bcast::Suffix;
  }
  throw ShapeError("operands not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
}

std::vector<int64_t> bcast_strides(const Shape& out, const Shape& bshape) {
  // numpy-style alignment from the trailing axis; stride 0 where b has 1.
  if (bshape.size() > out.size())
    throw ShapeError("constant rank exceeds operand rank: " + shape_str(bshape) + " vs " +
                     shape_str(out));
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  for (int64_t i = static_cast<int64_t>(bshape.size()) - 1; i >= 0; --i) {
    const int64_t o = static_cast<int64_t>(out.size()) - (static_cast<int64_t>(bshape.size()) - i);
    if (bshape[i] == out[o]) {
      strides[o] = s;
    } else if (bshape[i] == 1) {
      strides[o] = 0;
    } else {
      throw ShapeError("constant not broadcastable: " + shape_str(bshape) + " vs " +
                       shape_str(out));
    }
    s *= bshape[i];
  }
  return strides;
}

// Applies f(out_index, const_index) over every element of `out`.
template <typename F>
void for_bcast(const Shape& out, const std::vector<int64_t>& bstrides, F&& f) {
  const int64_t n = shape_numel(out);
  const int64_t rank = static_cast<int64_t>(out.size());
  std::vector<int64_t> idx(out.size(), 0);
  int64_t bi = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, bi);
    for (int64_t d = rank - 1; d >= 0; --d) {
      idx[d]++;
      bi += bstrides[d];
      if (idx[d] < out[d]) break;
      bi -= bstrides[d] * out[d];
      idx[d] = 0;
    }
  }
}

Tensor binary_ew(const Tensor& a, const Tensor& b, int sign, bool is_mul) {
  const Bcast mode = bcast_mode(a.shape(), b.shape(), b.numel());
  OpCtx ctx = op_ctx({&a, &b});
  Tensor out(make_impl(a.shape(), false));
  const int64_t n = a.numel();
  const int64_t inner = mode == Bcast::Same ? n : b.numel();
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  if (is_mul) {
    for (int64_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i % inner];
  } else if (sign > 0) {
    for (int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i % inner];
  } else {
    for (int64_t i = 0; i < n; ++i) od[i] = ad[i] - bd[i % inner];
  }
  auto ai = a.impl(), bi_ = b.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, bi_, oi, gs, n, inner, sign, is_mul]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      if (is_mul) {
        const double* bd = bi_->data.data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bd[i % inner];
      } else {
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
    }
    if (bi_->requires_grad) {
      double* db = accum_grad(bi_.get(), gs);
      if (is_mul) {
        const double* ad = ai->data.data();
        for (int64_t i = 0; i < n; ++i) db[i % inner] += g[i] * ad[i];
      } else if (sign > 0) {
        for (int64_t i = 0; i < n; ++i) db[i % inner] += g[i];
      } else {
        for (int64_t i = 0; i < n; ++i) db[i % inner] -= g[i];
      }
    }
  });
  return out;
}

}  // namespace

TensorImpl::~TensorImpl() {
  if (data_acct) data_acct->on_free(data.size() * sizeof(double));
  if (grad_acct) grad_acct->on_free(grad.size() * sizeof(double));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(make_impl(std::move(shape), false));
  std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " +
                     shape_str(shape));
  }
  Tensor t(make_impl(std::move(shape), requires_grad));
  std::copy(values.begin(), values.end(), t.impl()->data.begin());
  return t;
}

Tensor Tensor::eye(int64_t n) {
  Tensor t(make_impl({n, n}, false));
  for (int64_t i = 0; i < n; ++i) t.impl()->data[static_cast<size_t>(i * n + i)] = 1.0;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor::from({1}, {value}); }

int64_t Tensor::dim(int64_t i) const {
  const int64_t r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("axis out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient buffer");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_) return;
  if (impl_->grad_acct) {
    impl_->grad_acct->on_free(impl_->grad.size() * sizeof(double));
    impl_->grad_acct.reset();
  }
  std::vector<double>().swap(impl_->grad);
}

bool Tensor::all_finite() const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

GraphScope::GraphScope(Graph& g) : prev_(tl_graph) { tl_graph = g.state().get(); }

GraphScope::~GraphScope() { tl_graph = prev_; }

GraphState* current_graph() { return tl_graph; }

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ArgumentError("backward: loss must be a defined scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw ArgumentError("backward: loss does not require grad");
  }
  GraphState* gs = state_.get();
  gs->epoch++;
  accum_grad(loss.impl().get(), gs)[0] += 1.0;
  for (auto it = gs->nodes.rbegin(); it != gs->nodes.rend(); ++it) it->backward();
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_ew(a, b, +1, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_ew(a, b, -1, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_ew(a, b, +1, true); }

Tensor scale(const Tensor& a, double c) {
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(a.shape(), false));
  const int64_t n = a.numel();
  const double* ad = a.data();
  double* od = out.data();
  for (int64_t i = 0; i < n; ++i) od[i] = ad[i] * c;
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, n, c]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      for (int64_t i = 0; i < n; ++i) da[i] += g[i] * c;
    }
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int64_t m = a.dim(-2), p = a.dim(-1);
  const int64_t p2 = b.dim(-2), q = b.dim(-1);
  if (p != p2) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  bool bcast_a = false, bcast_b = false;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_b.empty()) {
    batch = batch_a;
    bcast_b = true;
  } else if (batch_a.empty()) {
    batch = batch_b;
    bcast_a = true;
  } else {
    throw ShapeError("matmul batch dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(q);

  OpCtx ctx = op_ctx({&a, &b});
  Tensor out(make_impl(std::move(out_shape), false));
  const int64_t nb = shape_numel(batch);
  const int64_t sa = bcast_a ? 0 : m * p;
  const int64_t sb = bcast_b ? 0 : p * q;
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  for (int64_t i = 0; i < nb; ++i) {
    gemm_nn(ad + i * sa, bd + i * sb, od + i * m * q, m, p, q);
  }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, bi, oi, gs, nb, m, p, q, sa, sb]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      const double* bd = bi->data.data();
      for (int64_t i = 0; i < nb; ++i) {
        gemm_nt(g + i * m * q, bd + i * sb, da + i * sa, m, q, p);
      }
    }
    if (bi->requires_grad) {
      double* db = accum_grad(bi.get(), gs);
      const double* ad = ai->data.data();
      for (int64_t i = 0; i < nb; ++i) {
        gemm_tn(ad + i * sa, g + i * m * q, db + i * sb, m, p, q);
      }
    }
  });
  return out;
}

Tensor transpose2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose2 needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<int64_t> axes(static_cast<size_t>(a.rank()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int64_t>(i);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

namespace {

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * s[i + 1];
  }
  return st;
}

// out[i] = in[perm_map(i)] for the axis permutation; returns source indices.
void permute_copy(const double* in, double* out, const Shape& out_shape,
                  const std::vector<int64_t>& in_strides_permuted, bool add_to_in,
                  double* in_mut) {
  const int64_t n = shape_numel(out_shape);
  const int64_t rank = static_cast<int64_t>(out_shape.size());
  std::vector<int64_t> idx(out_shape.size(), 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (add_to_in) {
      in_mut[src] += out[i];
    } else {
      out[i] = in[src];
    }
    for (int64_t d = rank - 1; d >= 0; --d) {
      idx[d]++;
      src += in_strides_permuted[d];
      if (idx[d] < out_shape[d]) break;
      src -= in_strides_permuted[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int64_t>& axes) {
  const int64_t r = a.rank();
  if (static_cast<int64_t>(axes.size()) != r) {
    throw ShapeError("permute axes rank mismatch for " + shape_str(a.shape()));
  }
  std::vector<bool> seen(axes.size(), false);
  Shape out_shape(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    const int64_t ax = axes[i];
    if (ax < 0 || ax >= r || seen[static_cast<size_t>(ax)]) {
      throw ShapeError("invalid permutation for " + shape_str(a.shape()));
    }
    seen[static_cast<size_t>(ax)] = true;
    out_shape[i] = a.shape()[static_cast<size_t>(ax)];
  }
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(out_shape, false));
  const auto in_strides = contiguous_strides(a.shape());
  std::vector<int64_t> strides_perm(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) strides_perm[i] = in_strides[static_cast<size_t>(axes[i])];
  permute_copy(a.data(), out.data(), out_shape, strides_perm, false, nullptr);
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, out_shape, strides_perm]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      permute_copy(nullptr, const_cast<double*>(g), out_shape, strides_perm, true, da);
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(std::move(shape), false));
  std::copy(a.values().begin(), a.values().end(), out.impl()->data.begin());
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      const size_t n = ai->data.size();
      for (size_t i = 0; i < n; ++i) da[i] += g[i];
    }
  });
  return out;
}

Tensor slice_last(const Tensor& a, int64_t start, int64_t len) {
  const int64_t last = a.dim(-1);
  if (start < 0 || len <= 0 || start + len > last) {
    throw ShapeError("slice_last [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = len;
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(std::move(out_shape), false));
  const int64_t outer = a.numel() / last;
  const double* ad = a.data();
  double* od = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(od + o * len, ad + o * last + start, static_cast<size_t>(len) * sizeof(double));
  }
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, outer, last, start, len]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < len; ++j) da[o * last + start + j] += g[o * len + j];
      }
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t start, int64_t len) {
  const int64_t rows = a.dim(0);
  if (start < 0 || len <= 0 || start + len > rows) {
    throw ShapeError("slice_rows [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[0] = len;
  const int64_t rsz = a.numel() / rows;
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(std::move(out_shape), false));
  std::memcpy(out.data(), a.data() + start * rsz, static_cast<size_t>(len * rsz) * sizeof(double));
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, start, len, rsz]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      const int64_t n = len * rsz;
      for (int64_t i = 0; i < n; ++i) da[start * rsz + i] += g[i];
    }
  });
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) {
    throw ShapeError("concat_rows rank mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  for (int64_t i = 1; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_rows trailing shape mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[0] += b.dim(0);
  OpCtx ctx = op_ctx({&a, &b});
  Tensor out(make_impl(std::move(out_shape), false));
  std::memcpy(out.data(), a.data(), static_cast<size_t>(a.numel()) * sizeof(double));
  std::memcpy(out.data() + a.numel(), b.data(), static_cast<size_t>(b.numel()) * sizeof(double));
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, bi, oi, gs]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      for (size_t i = 0; i < ai->data.size(); ++i) da[i] += g[i];
    }
    if (bi->requires_grad) {
      double* db = accum_grad(bi.get(), gs);
      const double* gb = g + ai->data.size();
      for (size_t i = 0; i < bi->data.size(); ++i) db[i] += gb[i];
    }
  });
  return out;
}

Tensor softmax(const Tensor& a) {
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(a.shape(), false));
  const int64_t n = a.dim(-1);
  const int64_t rows = a.numel() / n;
  const double* ad = a.data();
  double* od = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = ad + r * n;
    double* y = od + r * n;
    double mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < n; ++j) y[j] *= inv;
  }
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, rows, n]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      const double* y = oi->data.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y + r * n;
        const double* gr = g + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        double* dr = da + r * n;
        for (int64_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const int64_t n = a.dim(-1);
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm gain/bias must have " + std::to_string(n) + " elements");
  }
  OpCtx ctx = op_ctx({&a, &gain, &bias});
  Tensor out(make_impl(a.shape(), false));
  const int64_t rows = a.numel() / n;
  const double* ad = a.data();
  const double* gd = gain.data();
  const double* bd = bias.data();
  double* od = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = ad + r * n;
    double* y = od + r * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = x[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < n; ++j) y[j] = gd[j] * ((x[j] - mu) * inv) + bd[j];
  }
  auto ai = a.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, gi, bi, oi, gs, rows, n, eps]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    const double* x = ai->data.data();
    const double* gaind = gi->data.data();
    double* da = ai->requires_grad ? accum_grad(ai.get(), gs) : nullptr;
    double* dgain = gi->requires_grad ? accum_grad(gi.get(), gs) : nullptr;
    double* dbias = bi->requires_grad ? accum_grad(bi.get(), gs) : nullptr;
    std::vector<double> xhat(static_cast<size_t>(n));
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = x + r * n;
      const double* gr = g + r * n;
      double mu = 0.0;
      for (int64_t j = 0; j < n; ++j) mu += xr[j];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double d = xr[j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int64_t j = 0; j < n; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mu) * inv;
      if (dgain) {
        for (int64_t j = 0; j < n; ++j) dgain[j] += gr[j] * xhat[static_cast<size_t>(j)];
      }
      if (dbias) {
        for (int64_t j = 0; j < n; ++j) dbias[j] += gr[j];
      }
      if (da) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          const double dxh = gr[j] * gaind[j];
          m1 += dxh;
          m2 += dxh * xhat[static_cast<size_t>(j)];
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        double* dr = da + r * n;
        for (int64_t j = 0; j < n; ++j) {
          const double dxh = gr[j] * gaind[j];
          dr[j] += inv * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2);
        }
      }
    }
  });
  return out;
}

Tensor conv1d_depthwise(const Tensor& a, const Tensor& kernel) {
  const int64_t t = a.dim(-1);
  int64_t channels = 1;
  bool per_channel = false;
  if (kernel.rank() == 1) {
    if (kernel.numel() != 3) throw ShapeError("conv kernel must have length 3");
  } else if (kernel.rank() == 2) {
    if (kernel.dim(1) != 3) throw ShapeError("per-channel conv kernel must be [H,3]");
    if (a.rank() < 3 || a.dim(-3) != kernel.dim(0)) {
      throw ShapeError("conv channel axis mismatch: " + shape_str(a.shape()) + " with kernel " +
                       shape_str(kernel.shape()));
    }
    channels = kernel.dim(0);
    per_channel = true;
  } else {
    throw ShapeError("conv kernel must be [3] or [H,3]");
  }
  OpCtx ctx = op_ctx({&a, &kernel});
  Tensor out(make_impl(a.shape(), false));
  // View a as [B, H, R, T]; with a shared kernel H = 1 and R covers the rest.
  const int64_t inner_rows = per_channel ? a.dim(-2) : a.numel() / (channels * t);
  const int64_t batch = a.numel() / (channels * inner_rows * t);
  const double* ad = a.data();
  const double* kd = kernel.data();
  double* od = out.data();
  for (int64_t bch = 0; bch < batch; ++bch) {
    for (int64_t h = 0; h < channels; ++h) {
      const double k0 = kd[h * 3 + 0], k1 = kd[h * 3 + 1], k2 = kd[h * 3 + 2];
      for (int64_t r = 0; r < inner_rows; ++r) {
        const double* x = ad + ((bch * channels + h) * inner_rows + r) * t;
        double* y = od + ((bch * channels + h) * inner_rows + r) * t;
        for (int64_t i = 0; i < t; ++i) {
          double v = k1 * x[i];
          if (i > 0) v += k0 * x[i - 1];
          if (i + 1 < t) v += k2 * x[i + 1];
          y[i] = v;
        }
      }
    }
  }
  auto ai = a.impl(), ki = kernel.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, ki, oi, gs, batch, channels, inner_rows, t]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    const double* kd = ki->data.data();
    const double* ad = ai->data.data();
    double* da = ai->requires_grad ? accum_grad(ai.get(), gs) : nullptr;
    double* dk = ki->requires_grad ? accum_grad(ki.get(), gs) : nullptr;
    for (int64_t bch = 0; bch < batch; ++bch) {
      for (int64_t h = 0; h < channels; ++h) {
        const double k0 = kd[h * 3 + 0], k1 = kd[h * 3 + 1], k2 = kd[h * 3 + 2];
        for (int64_t r = 0; r < inner_rows; ++r) {
          const int64_t base = ((bch * channels + h) * inner_rows + r) * t;
          const double* gr = g + base;
          const double* x = ad + base;
          if (da) {
            double* dr = da + base;
            for (int64_t i = 0; i < t; ++i) {
              double v = k1 * gr[i];
              if (i + 1 < t) v += k0 * gr[i + 1];
              if (i > 0) v += k2 * gr[i - 1];
              dr[i] += v;
            }
          }
          if (dk) {
            double d0 = 0.0, d1 = 0.0, d2 = 0.0;
            for (int64_t i = 0; i < t; ++i) {
              d1 += gr[i] * x[i];
              if (i > 0) d0 += gr[i] * x[i - 1];
              if (i + 1 < t) d2 += gr[i] * x[i + 1];
            }
            dk[h * 3 + 0] += d0;
            dk[h * 3 + 1] += d1;
            dk[h * 3 + 2] += d2;
          }
        }
      }
    }
  });
  return out;
}

namespace {

template <typename FwdF, typename BwdF>
Tensor unary_op(const Tensor& a, FwdF fwd, BwdF bwd_from_xy) {
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(a.shape(), false));
  const int64_t n = a.numel();
  const double* ad = a.data();
  double* od = out.data();
  for (int64_t i = 0; i < n; ++i) od[i] = fwd(ad[i]);
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, n, bwd_from_xy]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      const double* x = ai->data.data();
      const double* y = oi->data.data();
      for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bwd_from_xy(x[i], y[i]);
    }
  });
  return out;
}

}  // namespace

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Tensor sum_all(const Tensor& a) {
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl({1}, false));
  double s = 0.0;
  const double* ad = a.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += ad[i];
  out.data()[0] = s;
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, n]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      for (int64_t i = 0; i < n; ++i) da[i] += g[0];
    }
  });
  return out;
}

Tensor max_all(const Tensor& a) {
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl({1}, false));
  const double* ad = a.data();
  const int64_t n = a.numel();
  int64_t arg = 0;
  for (int64_t i = 1; i < n; ++i) {
    if (ad[i] > ad[arg]) arg = i;
  }
  out.data()[0] = ad[arg];
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, arg]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      da[arg] += g[0];
    }
  });
  return out;
}

Tensor add_const(const Tensor& a, const std::vector<double>& values, const Shape& bshape) {
  if (shape_numel(bshape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("constant values do not fill " + shape_str(bshape));
  }
  const auto bstrides = bcast_strides(a.shape(), bshape);
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(a.shape(), false));
  const double* ad = a.data();
  double* od = out.data();
  for_bcast(a.shape(), bstrides, [&](int64_t i, int64_t bi) { od[i] = ad[i] + values[static_cast<size_t>(bi)]; });
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      const size_t n = ai->data.size();
      for (size_t i = 0; i < n; ++i) da[i] += g[i];
    }
  });
  return out;
}

Tensor mul_const(const Tensor& a, const std::vector<double>& values, const Shape& bshape) {
  if (shape_numel(bshape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("constant values do not fill " + shape_str(bshape));
  }
  const auto bstrides = bcast_strides(a.shape(), bshape);
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl(a.shape(), false));
  const double* ad = a.data();
  double* od = out.data();
  for_bcast(a.shape(), bstrides, [&](int64_t i, int64_t bi) { od[i] = ad[i] * values[static_cast<size_t>(bi)]; });
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  Shape ashape = a.shape();
  std::vector<double> vals = values;
  finish(ctx, out, [ai, oi, gs, ashape, bstrides, vals]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      for_bcast(ashape, bstrides, [&](int64_t i, int64_t bi) { da[i] += g[i] * vals[static_cast<size_t>(bi)]; });
    }
  });
  return out;
}

Tensor max_rows(const Tensor& a, const std::vector<uint8_t>& mask) {
  if (a.rank() != 2) throw ShapeError("max_rows expects [M,F], got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), f = a.dim(1);
  if (static_cast<int64_t>(mask.size()) != m) {
    throw ShapeError("mask length does not match row count");
  }
  int64_t real = 0;
  for (uint8_t v : mask) real += v ? 1 : 0;
  if (real == 0) throw ArgumentError("max_rows: mask selects no rows");
  OpCtx ctx = op_ctx({&a});
  Tensor out(make_impl({1, f}, false));
  std::vector<int64_t> arg(static_cast<size_t>(f), -1);
  const double* ad = a.data();
  double* od = out.data();
  for (int64_t i = 0; i < m; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    for (int64_t j = 0; j < f; ++j) {
      if (arg[static_cast<size_t>(j)] < 0 || ad[i * f + j] > od[j]) {
        od[j] = ad[i * f + j];
        arg[static_cast<size_t>(j)] = i;
      }
    }
  }
  auto ai = a.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [ai, oi, gs, arg, f]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (ai->requires_grad) {
      double* da = accum_grad(ai.get(), gs);
      for (int64_t j = 0; j < f; ++j) da[arg[static_cast<size_t>(j)] * f + j] += g[j];
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, int64_t label) {
  const int64_t c = logits.dim(-1);
  if (logits.numel() != c) {
    throw ShapeError("cross_entropy expects a single logit row, got " + shape_str(logits.shape()));
  }
  if (label < 0 || label >= c) {
    throw ArgumentError("cross_entropy label " + std::to_string(label) + " out of range [0," +
                        std::to_string(c) + ")");
  }
  OpCtx ctx = op_ctx({&logits});
  Tensor out(make_impl({1}, false));
  const double* x = logits.data();
  double mx = x[0];
  for (int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int64_t i = 0; i < c; ++i) s += std::exp(x[i] - mx);
  out.data()[0] = mx + std::log(s) - x[label];
  auto li = logits.impl(), oi = out.impl();
  GraphState* gs = ctx.gs;
  finish(ctx, out, [li, oi, gs, c, label]() {
    const double* g = walk_grad(oi.get(), gs);
    if (!g) return;
    if (li->requires_grad) {
      double* dl = accum_grad(li.get(), gs);
      const double* x = li->data.data();
      double mx = x[0];
      for (int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
      double s = 0.0;
      for (int64_t i = 0; i < c; ++i) s += std::exp(x[i] - mx);
      for (int64_t i = 0; i < c; ++i) {
        const double p = std::exp(x[i] - mx) / s;
        dl[i] += g[0] * (p - (i == label ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

Tensor pinv_newton_schulz(const Tensor& a, int iters) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("pinv_newton_schulz expects a square matrix, got " + shape_str(a.shape()));
  }
  if (iters < 1) throw ArgumentError("pinv_newton_schulz needs iters >= 1");
  const int64_t m = a.dim(0);
  Tensor ones_row = Tensor::full({1, m}, 1.0);
  Tensor ones_col = Tensor::full({m, 1}, 1.0);
  Tensor col_max = max_all(matmul(ones_row, a));
  Tensor row_max = max_all(matmul(a, ones_col));
  Tensor z = mul(transpose2(a), reciprocal(mul(col_max, row_max)));
  Tensor i7 = Tensor::zeros({m, m});
  Tensor i13 = Tensor::zeros({m, m});
  Tensor i15 = Tensor::zeros({m, m});
  for (int64_t i = 0; i < m; ++i) {
    i7.data()[i * m + i] = 7.0;
    i13.data()[i * m + i] = 13.0;
    i15.data()[i * m + i] = 15.0;
  }
  for (int it = 0; it < iters; ++it) {
    Tensor kv = matmul(a, z);
    Tensor inner = sub(i7, kv);
    Tensor mid = sub(i15, matmul(kv, inner));
    Tensor outer = sub(i13, matmul(kv, mid));
    z = scale(matmul(z, outer), 0.25);
  }
  return z;
}

Tensor inverse_exact(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("inverse_exact expects a square matrix, got " + shape_str(a.shape()));
  }
  const int64_t n = a.dim(0);
  std::vector<double> w(a.values());
  Tensor out = Tensor::eye(n);
  double* inv = out.data();
  for (int64_t col = 0; col < n; ++col) {
    int64_t piv = col;
    for (int64_t r = col + 1; r < n; ++r) {
      if (std::abs(w[r * n + col]) > std::abs(w[piv * n + col])) piv = r;
    }
    if (std::abs(w[piv * n + col]) < 1e-300) {
      throw Error("inverse_exact: matrix is numerically singular");
    }
    if (piv != col) {
      for (int64_t j = 0; j < n; ++j) {
        std::swap(w[col * n + j], w[piv * n + j]);
        std::swap(inv[col * n + j], inv[piv * n + j]);
      }
    }
    const double d = 1.0 / w[col * n + col];
    for (int64_t j = 0; j < n; ++j) {
      w[col * n + j] *= d;
      inv[col * n + j] *= d;
    }
    for (int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = w[r * n + col];
      if (f == 0.0) continue;
      for (int64_t j = 0; j < n; ++j) {
        w[r * n + j] -= f * w[col * n + j];
        inv[r * n + j] -= f * inv[col * n + j];
      }
    }
  }
  return out;
}

}  // namespace wsd
