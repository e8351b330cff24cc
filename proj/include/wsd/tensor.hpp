#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wsd {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct GraphState;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  int64_t node = -1;         // id of the producing op, -1 for leaves
  uint64_t grad_epoch = 0;   // backward walk that last reset this grad
  std::shared_ptr<GraphState> data_acct;
  std::shared_ptr<GraphState> grad_acct;
  ~TensorImpl();
};

// Value-semantic handle over a shared f64 buffer. All model math is f64;
// gradients live beside the data and are accumulated by Graph::backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor eye(int64_t n);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(int64_t i) const;  // negative i counts from the back
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const;

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();  // releases the grad buffer

  bool all_finite() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Tape of recorded ops plus the live/peak byte accounting for one
// forward+backward pass. Tensors allocated while a GraphScope is active
// are charged to the scope's graph; peak_bytes is monotone within a pass
// and starts fresh with each new Graph (or after reset()).
struct GraphState : std::enable_shared_from_this<GraphState> {
  struct Node {
    std::function<void()> backward;
  };
  std::vector<Node> nodes;
  size_t live_bytes = 0;
  size_t peak_bytes = 0;
  uint64_t epoch = 0;

  void on_alloc(size_t bytes) {
    live_bytes += bytes;
    if (live_bytes > peak_bytes) peak_bytes = live_bytes;
  }
  void on_free(size_t bytes) { live_bytes -= bytes < live_bytes ? bytes : live_bytes; }
};

class Graph {
 public:
  Graph() : state_(std::make_shared<GraphState>()) {}
  // Clearing the tape breaks the node->tensor->accounting cycle, so a
  // pass's activations are released with the Graph.
  ~Graph() { state_->nodes.clear(); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Reverse-topological walk over the tape. Leaf grads accumulate across
  // calls; intermediate grads are per-walk. loss must be scalar.
  void backward(const Tensor& loss);

  size_t peak_bytes() const { return state_->peak_bytes; }
  size_t live_bytes() const { return state_->live_bytes; }
  size_t node_count() const { return state_->nodes.size(); }

  // Drops the tape and counters so the Graph can host a fresh pass.
  void reset() {
    state_->nodes.clear();
    state_ = std::make_shared<GraphState>();
  }

  const std::shared_ptr<GraphState>& state() const { return state_; }

 private:
  std::shared_ptr<GraphState> state_;
};

// Sets the calling thread's recording graph for the scope's lifetime.
class GraphScope {
 public:
  explicit GraphScope(Graph& g);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  GraphState* prev_;
};

GraphState* current_graph();

// ---- differentiable ops ------------------------------------------------
// Elementwise ops broadcast b when it is a scalar or its shape is a suffix
// of a's shape (leading-dim broadcast); no other broadcasting is supported.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// Batched matrix product: [B.., m, p] x [B.., p, q] -> [B.., m, q].
// Batch dims must match exactly, or one operand may be rank-2.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose2(const Tensor& a);                  // swaps the last two axes
Tensor permute(const Tensor& a, const std::vector<int64_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_last(const Tensor& a, int64_t start, int64_t len);
Tensor slice_rows(const Tensor& a, int64_t start, int64_t len);  // axis 0
Tensor concat_rows(const Tensor& a, const Tensor& b);            // axis 0

Tensor softmax(const Tensor& a);  // along the last axis, max-subtracted
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Depthwise length-3 convolution along the last axis with zero padding.
// kernel is either [3] (shared) or [H,3] with H matching a.dim(-3).
Tensor conv1d_depthwise(const Tensor& a, const Tensor& kernel);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sum_all(const Tensor& a);   // -> [1]
Tensor max_all(const Tensor& a);   // -> [1], subgradient to the first argmax

// Adds / multiplies a constant (non-differentiable) operand broadcast to
// a's shape under numpy rules. Used for masks and additive biases.
Tensor add_const(const Tensor& a, const std::vector<double>& values, const Shape& bshape);
Tensor mul_const(const Tensor& a, const std::vector<double>& values, const Shape& bshape);

// Per-feature max over rows of a [M,F] matrix restricted to mask-true rows.
Tensor max_rows(const Tensor& a, const std::vector<uint8_t>& mask);

// -log softmax(logits)[label]; logits is [C] or [1,C].
Tensor cross_entropy(const Tensor& logits, int64_t label);

// Iterative pseudoinverse of a square kernel, built from recorded ops so
// gradients flow through every update. Initialization a^T / (|a|_1 |a|_inf).
Tensor pinv_newton_schulz(const Tensor& a, int iters = 6);

// ---- plain numeric helpers (no autodiff) --------------------------------

// Exact inverse of a nonsingular square matrix via Gauss-Jordan with
// partial pivoting. Verification-mode counterpart of pinv_newton_schulz;
// the result is a constant (gradients do not flow through it).
Tensor inverse_exact(const Tensor& a);

}  // namespace wsd
