#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "scdiff/tensor.hpp"

namespace scdiff::ag {

struct Node;

/// Handle to a value recorded on the gradient tape. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const;
  /// Gradient buffer; empty until backward reaches this node.
  const Tensor& grad() const;
  Tensor& mutable_value();
  Tensor& mutable_grad();
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  Node* node() const { return node_.get(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  /// Allocates (zero-filled) on first use.
  Tensor& grad_buffer();
};

/// RAII guard that stops ops from recording backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Tensor value);
/// Trainable leaf; gradients accumulate across backward calls until cleared.
Var leaf(Tensor value);

/// Reverse pass from a scalar (size-1) root.
void backward(const Var& root, double seed = 1.0);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var abs(const Var& a);
Var square(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);
Var log_sigmoid(const Var& a);
Var detach(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);

// Shape manipulation.
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);  // rank-2 only
Var concat_channels(const Var& a, const Var& b);
Var concat_rows(const Var& a, const Var& b);
Var slice_channels(const Var& a, int begin, int end);
Var gather_rows(const Var& table, const std::vector<int>& rows);

// Dense layers.
Var matmul(const Var& a, const Var& b);
/// x [n, in] * W^T [in, out] + b [out].
Var linear(const Var& x, const Var& w, const Var& b);
Var softmax_rows(const Var& a);
/// x [C, ...] + v [C] broadcast over the trailing axes.
Var add_channel_bias(const Var& x, const Var& v);

// Volumetric layers on [C, D, H, W] tensors.
struct ConvGeometry {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
};
/// w is [Cout, Cin, kd, kh, kw]; b is [Cout] or null.
Var conv3d(const Var& x, const Var& w, const Var& b, ConvGeometry geom);
Var upsample_nearest(const Var& x, std::array<int, 3> factor);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
/// Averages [C, D, H, W] into an [C, 1, out_h, out_w] grid of bins (D must be 1).
Var adaptive_avg_pool2d(const Var& x, int out_h, int out_w);

}  // namespace scdiff::ag
