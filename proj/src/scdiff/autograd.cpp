#include "scdiff/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "scdiff/errors.hpp"

namespace scdiff::ag {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

Var record(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const Var& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

// Gradient buffer of input i, or null when that input does not need one.
Tensor* input_grad(Node& self, std::size_t i) {
  Node* in = self.inputs[i].node();
  if (!in || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F, class G>
Var unary(const Var& a, F forward, G derivative) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  return record(std::move(y), {a}, [derivative](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& x = self.inputs[0].value();
    for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += self.grad[i] * derivative(x[i], self.value[i]);
  });
}

Var concat0(const Var& a, const Var& b, const char* what) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw ValidationError(std::string(what) + ": incompatible extents " + shape_str(sa) + " and " + shape_str(sb));
  Shape so = sa;
  so[0] = sa[0] + sb[0];
  Tensor out(so);
  std::copy(a.value().data(), a.value().data() + a.value().size(), out.data());
  std::copy(b.value().data(), b.value().data() + b.value().size(), out.data() + a.value().size());
  const std::size_t na = a.value().size();
  return record(std::move(out), {a, b}, [na](Node& self) {
    if (Tensor* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < na; ++i) (*ga)[i] += self.grad[i];
    if (Tensor* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += self.grad[na + i];
  });
}

struct ConvDims {
  int cin, d, h, w;
  int cout, kd, kh, kw;
  int od, oh, ow;
  ConvGeometry g;
  std::size_t out_spatial() const { return static_cast<std::size_t>(od) * oh * ow; }
};

// cols[ci, o] = x[ci, o*stride + k - pad] (zero outside the input).
void gather_shifted(const double* x, const ConvDims& c, int a, int b, int e, double* cols) {
  const std::size_t in_plane = static_cast<std::size_t>(c.h) * c.w;
  const std::size_t in_vol = in_plane * c.d;
  const std::size_t no = c.out_spatial();
  for (int ci = 0; ci < c.cin; ++ci) {
    const double* xc = x + ci * in_vol;
    double* out = cols + ci * no;
    for (int z = 0; z < c.od; ++z) {
      const int iz = z * c.g.stride[0] + a - c.g.pad[0];
      for (int y = 0; y < c.oh; ++y) {
        double* row = out + (static_cast<std::size_t>(z) * c.oh + y) * c.ow;
        const int iy = y * c.g.stride[1] + b - c.g.pad[1];
        if (iz < 0 || iz >= c.d || iy < 0 || iy >= c.h) {
          std::fill(row, row + c.ow, 0.0);
          continue;
        }
        const double* xrow = xc + iz * in_plane + static_cast<std::size_t>(iy) * c.w;
        const int sx = c.g.stride[2];
        for (int x0 = 0; x0 < c.ow; ++x0) {
          const int ix = x0 * sx + e - c.g.pad[2];
          row[x0] = (ix >= 0 && ix < c.w) ? xrow[ix] : 0.0;
        }
      }
    }
  }
}

void scatter_shifted(const double* cols, const ConvDims& c, int a, int b, int e, double* dx) {
  const std::size_t in_plane = static_cast<std::size_t>(c.h) * c.w;
  const std::size_t in_vol = in_plane * c.d;
  const std::size_t no = c.out_spatial();
  for (int ci = 0; ci < c.cin; ++ci) {
    double* xc = dx + ci * in_vol;
    const double* src = cols + ci * no;
    for (int z = 0; z < c.od; ++z) {
      const int iz = z * c.g.stride[0] + a - c.g.pad[0];
      if (iz < 0 || iz >= c.d) continue;
      for (int y = 0; y < c.oh; ++y) {
        const int iy = y * c.g.stride[1] + b - c.g.pad[1];
        if (iy < 0 || iy >= c.h) continue;
        const double* row = src + (static_cast<std::size_t>(z) * c.oh + y) * c.ow;
        double* xrow = xc + iz * in_plane + static_cast<std::size_t>(iy) * c.w;
        const int sx = c.g.stride[2];
        for (int x0 = 0; x0 < c.ow; ++x0) {
          const int ix = x0 * sx + e - c.g.pad[2];
          if (ix >= 0 && ix < c.w) xrow[ix] += row[x0];
        }
      }
    }
  }
}

bool is_pointwise(const ConvDims& c) {
  return c.kd == 1 && c.kh == 1 && c.kw == 1 && c.g.stride == std::array<int, 3>{1, 1, 1} &&
         c.g.pad == std::array<int, 3>{0, 0, 0};
}

// Kernel slice w[:, :, a, b, e] as a dense [cout, cin] matrix.
RowMat kernel_slice(const Tensor& w, const ConvDims& c, int a, int b, int e) {
  RowMat m(c.cout, c.cin);
  const std::size_t kvol = static_cast<std::size_t>(c.kd) * c.kh * c.kw;
  const std::size_t koff = (static_cast<std::size_t>(a) * c.kh + b) * c.kw + e;
  for (int co = 0; co < c.cout; ++co)
    for (int ci = 0; ci < c.cin; ++ci) m(co, ci) = w[(static_cast<std::size_t>(co) * c.cin + ci) * kvol + koff];
  return m;
}

}  // namespace

const Tensor& Var::value() const { return node_->value; }
const Tensor& Var::grad() const { return node_->grad; }
Tensor& Var::mutable_value() { return node_->value; }
Tensor& Var::mutable_grad() { return node_->grad_buffer(); }
bool Var::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void backward(const Var& root, double seed) {
  if (!root.requires_grad()) return;
  if (root.value().size() != 1) throw ValidationError("backward requires a scalar root, got " + shape_str(root.shape()));

  // Iterative post-order DFS to get a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].node();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return record(a.value() + b.value(), {a, b}, [](Node& self) {
    if (Tensor* ga = input_grad(self, 0)) *ga += self.grad;
    if (Tensor* gb = input_grad(self, 1)) *gb += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return record(a.value() - b.value(), {a, b}, [](Node& self) {
    if (Tensor* ga = input_grad(self, 0)) *ga += self.grad;
    if (Tensor* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    const Tensor& va = self.inputs[0].value();
    const Tensor& vb = self.inputs[1].value();
    if (Tensor* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i] * vb[i];
    if (Tensor* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += self.grad[i] * va[i];
  });
}

Var scale(const Var& a, double s) {
  return record(a.value() * s, {a}, [s](Node& self) {
    if (Tensor* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i] * s;
  });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid(x); },
      [](double x, double) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var log_sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return sigmoid(-x); });
}

Var detach(const Var& a) { return constant(a.value()); }

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return record(Tensor({1}, s), {a}, [](Node& self) {
    if (Tensor* ga = input_grad(self, 0))
      for (double& g : ga->values()) g += self.grad[0];
  });
}

Var mean(const Var& a) {
  if (a.value().empty()) throw ValidationError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return record(std::move(out), {a}, [](Node& self) {
    if (Tensor* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
  });
}

Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw ValidationError("transpose expects a matrix, got " + shape_str(a.shape()));
  const int r = a.shape()[0];
  const int c = a.shape()[1];
  Tensor out({c, r});
  MatMap(out.data(), c, r) = ConstMatMap(a.value().data(), r, c).transpose();
  return record(std::move(out), {a}, [r, c](Node& self) {
    if (Tensor* ga = input_grad(self, 0)) MatMap(ga->data(), r, c) += ConstMatMap(self.grad.data(), c, r).transpose();
  });
}

Var concat_channels(const Var& a, const Var& b) { return concat0(a, b, "concat_channels"); }
Var concat_rows(const Var& a, const Var& b) { return concat0(a, b, "concat_rows"); }

Var slice_channels(const Var& a, int begin, int end) {
  const Shape& s = a.shape();
  if (s.empty() || begin < 0 || end > s[0] || begin >= end)
    throw ValidationError("slice_channels: bad range for " + shape_str(s));
  const std::size_t inner = a.value().size() / static_cast<std::size_t>(s[0]);
  Shape so = s;
  so[0] = end - begin;
  Tensor out(so);
  std::copy(a.value().data() + begin * inner, a.value().data() + end * inner, out.data());
  return record(std::move(out), {a}, [begin, inner](Node& self) {
    if (Tensor* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[begin * inner + i] += self.grad[i];
  });
}

Var gather_rows(const Var& table, const std::vector<int>& rows) {
  if (table.value().rank() != 2) throw ValidationError("gather_rows expects a matrix");
  const int k = table.shape()[0];
  const int d = table.shape()[1];
  Tensor out({static_cast<int>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= k) throw ValidationError("gather_rows: index out of range");
    std::copy_n(table.value().data() + static_cast<std::size_t>(rows[i]) * d, d, out.data() + i * d);
  }
  return record(std::move(out), {table}, [rows, d](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < d; ++j) (*g)[static_cast<std::size_t>(rows[i]) * d + j] += self.grad[i * d + j];
  });
}

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ValidationError("matmul: incompatible extents " + shape_str(sa) + " x " + shape_str(sb));
  const int n = sa[0], k = sa[1], m = sb[1];
  Tensor out({n, m});
  MatMap(out.data(), n, m).noalias() = ConstMatMap(a.value().data(), n, k) * ConstMatMap(b.value().data(), k, m);
  return record(std::move(out), {a, b}, [n, k, m](Node& self) {
    ConstMatMap g(self.grad.data(), n, m);
    if (Tensor* ga = input_grad(self, 0))
      MatMap(ga->data(), n, k).noalias() += g * ConstMatMap(self.inputs[1].value().data(), k, m).transpose();
    if (Tensor* gb = input_grad(self, 1))
      MatMap(gb->data(), k, m).noalias() += ConstMatMap(self.inputs[0].value().data(), n, k).transpose() * g;
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1])
    throw ValidationError("linear: incompatible extents " + shape_str(sx) + " and weight " + shape_str(sw));
  if (b && (b.value().size() != static_cast<std::size_t>(sw[0]))) throw ValidationError("linear: bias extent mismatch");
  const int n = sx[0], in = sx[1], out_dim = sw[0];
  Tensor out({n, out_dim});
  MatMap o(out.data(), n, out_dim);
  o.noalias() = ConstMatMap(x.value().data(), n, in) * ConstMatMap(w.value().data(), out_dim, in).transpose();
  if (b) o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), out_dim);
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return record(std::move(out), std::move(inputs), [n, in, out_dim](Node& self) {
    ConstMatMap g(self.grad.data(), n, out_dim);
    if (Tensor* gx = input_grad(self, 0))
      MatMap(gx->data(), n, in).noalias() += g * ConstMatMap(self.inputs[1].value().data(), out_dim, in);
    if (Tensor* gw = input_grad(self, 1))
      MatMap(gw->data(), out_dim, in).noalias() += g.transpose() * ConstMatMap(self.inputs[0].value().data(), n, in);
    if (self.inputs.size() > 2)
      if (Tensor* gb = input_grad(self, 2))
        for (int r = 0; r < n; ++r)
          for (int o = 0; o < out_dim; ++o) (*gb)[o] += g(r, o);
  });
}

Var softmax_rows(const Var& a) {
  if (a.value().rank() != 2) throw ValidationError("softmax_rows expects a matrix");
  const int r = a.shape()[0], c = a.shape()[1];
  Tensor out(a.shape());
  for (int i = 0; i < r; ++i) {
    const double* x = a.value().data() + static_cast<std::size_t>(i) * c;
    double* y = out.data() + static_cast<std::size_t>(i) * c;
    const double mx = *std::max_element(x, x + c);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (int j = 0; j < c; ++j) y[j] /= s;
  }
  return record(std::move(out), {a}, [r, c](Node& self) {
    Tensor* ga = input_grad(self, 0);
    if (!ga) return;
    for (int i = 0; i < r; ++i) {
      const double* y = self.value.data() + static_cast<std::size_t>(i) * c;
      const double* dy = self.grad.data() + static_cast<std::size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
      double* dx = ga->data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

Var add_channel_bias(const Var& x, const Var& v) {
  const int c = x.shape()[0];
  if (v.value().size() != static_cast<std::size_t>(c))
    throw ValidationError("add_channel_bias: " + std::to_string(v.value().size()) + " values for " +
                          std::to_string(c) + " channels");
  const std::size_t inner = x.value().size() / c;
  Tensor out = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < inner; ++i) out[ch * inner + i] += v.value()[ch];
  return record(std::move(out), {x, v}, [c, inner](Node& self) {
    if (Tensor* gx = input_grad(self, 0)) *gx += self.grad;
    if (Tensor* gv = input_grad(self, 1))
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) s += self.grad[ch * inner + i];
        (*gv)[ch] += s;
      }
  });
}

Var conv3d(const Var& x, const Var& w, const Var& b, ConvGeometry geom) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 5 || sx[0] != sw[1])
    throw ValidationError("conv3d: input " + shape_str(sx) + " incompatible with weight " + shape_str(sw));
  ConvDims c{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], sw[4], 0, 0, 0, geom};
  c.od = (c.d + 2 * geom.pad[0] - c.kd) / geom.stride[0] + 1;
  c.oh = (c.h + 2 * geom.pad[1] - c.kh) / geom.stride[1] + 1;
  c.ow = (c.w + 2 * geom.pad[2] - c.kw) / geom.stride[2] + 1;
  if (c.od <= 0 || c.oh <= 0 || c.ow <= 0) throw ValidationError("conv3d: input " + shape_str(sx) + " too small");
  if (b && b.value().size() != static_cast<std::size_t>(c.cout)) throw ValidationError("conv3d: bias extent mismatch");

  const std::size_t no = c.out_spatial();
  Tensor out({c.cout, c.od, c.oh, c.ow});
  MatMap o(out.data(), c.cout, static_cast<Eigen::Index>(no));
  if (is_pointwise(c)) {
    o.noalias() = ConstMatMap(w.value().data(), c.cout, c.cin) * ConstMatMap(x.value().data(), c.cin, no);
  } else {
    std::vector<double> cols(static_cast<std::size_t>(c.cin) * no);
    for (int a = 0; a < c.kd; ++a)
      for (int bb = 0; bb < c.kh; ++bb)
        for (int e = 0; e < c.kw; ++e) {
          gather_shifted(x.value().data(), c, a, bb, e, cols.data());
          o.noalias() += kernel_slice(w.value(), c, a, bb, e) * ConstMatMap(cols.data(), c.cin, no);
        }
  }
  if (b) o.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), c.cout);

  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return record(std::move(out), std::move(inputs), [c, no](Node& self) {
    ConstMatMap g(self.grad.data(), c.cout, static_cast<Eigen::Index>(no));
    const Tensor& xv = self.inputs[0].value();
    const Tensor& wv = self.inputs[1].value();
    Tensor* gx = input_grad(self, 0);
    Tensor* gw = input_grad(self, 1);
    if (self.inputs.size() > 2)
      if (Tensor* gb = input_grad(self, 2))
        for (int o = 0; o < c.cout; ++o) {
          double s = 0.0;
          for (std::size_t i = 0; i < no; ++i) s += self.grad[o * no + i];
          (*gb)[o] += s;
        }
    if (is_pointwise(c)) {
      if (gw) MatMap(gw->data(), c.cout, c.cin).noalias() += g * ConstMatMap(xv.data(), c.cin, no).transpose();
      if (gx) MatMap(gx->data(), c.cin, no).noalias() += ConstMatMap(wv.data(), c.cout, c.cin).transpose() * g;
      return;
    }
    std::vector<double> cols(static_cast<std::size_t>(c.cin) * no);
    const std::size_t kvol = static_cast<std::size_t>(c.kd) * c.kh * c.kw;
    RowMat dwk(c.cout, c.cin);
    for (int a = 0; a < c.kd; ++a)
      for (int bb = 0; bb < c.kh; ++bb)
        for (int e = 0; e < c.kw; ++e) {
          if (gw) {
            gather_shifted(xv.data(), c, a, bb, e, cols.data());
            dwk.noalias() = g * ConstMatMap(cols.data(), c.cin, no).transpose();
            const std::size_t koff = (static_cast<std::size_t>(a) * c.kh + bb) * c.kw + e;
            for (int co = 0; co < c.cout; ++co)
              for (int ci = 0; ci < c.cin; ++ci)
                (*gw)[(static_cast<std::size_t>(co) * c.cin + ci) * kvol + koff] += dwk(co, ci);
          }
          if (gx) {
            MatMap(cols.data(), c.cin, no).noalias() = kernel_slice(wv, c, a, bb, e).transpose() * g;
            scatter_shifted(cols.data(), c, a, bb, e, gx->data());
          }
        }
  });
}

Var upsample_nearest(const Var& x, std::array<int, 3> f) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ValidationError("upsample_nearest expects [C,D,H,W]");
  const int c = s[0], d = s[1], h = s[2], w = s[3];
  const int od = d * f[0], oh = h * f[1], ow = w * f[2];
  Tensor out({c, od, oh, ow});
  auto index_in = [=](int ch, int z, int y, int xx) {
    return ((static_cast<std::size_t>(ch) * d + z / f[0]) * h + y / f[1]) * w + xx / f[2];
  };
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) out[o++] = x.value()[index_in(ch, z, y, xx)];
  return record(std::move(out), {x}, [=](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch)
      for (int z = 0; z < od; ++z)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) (*gx)[index_in(ch, z, y, xx)] += self.grad[o++];
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const Shape& s = x.shape();
  const int c = s[0];
  if (groups <= 0 || c % groups != 0)
    throw ValidationError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c))
    throw ValidationError("group_norm: affine extent mismatch");
  const std::size_t inner = x.value().size() / c;
  const int cpg = c / groups;
  const std::size_t gsize = inner * cpg;
  Tensor xhat(s);
  std::vector<double> inv_std(groups);
  Tensor out(s);
  for (int g = 0; g < groups; ++g) {
    const double* xs = x.value().data() + g * gsize;
    double m = 0.0;
    for (std::size_t i = 0; i < gsize; ++i) m += xs[i];
    m /= static_cast<double>(gsize);
    double v = 0.0;
    for (std::size_t i = 0; i < gsize; ++i) v += (xs[i] - m) * (xs[i] - m);
    v /= static_cast<double>(gsize);
    inv_std[g] = 1.0 / std::sqrt(v + eps);
    for (std::size_t i = 0; i < gsize; ++i) {
      const std::size_t idx = g * gsize + i;
      const int ch = static_cast<int>(idx / inner);
      xhat[idx] = (xs[i] - m) * inv_std[g];
      out[idx] = xhat[idx] * gamma.value()[ch] + beta.value()[ch];
    }
  }
  return record(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), inv_std = std::move(inv_std), c, inner,
                                                    gsize, groups](Node& self) {
    const Tensor& gam = self.inputs[1].value();
    if (Tensor* gg = input_grad(self, 1))
      for (std::size_t i = 0; i < xhat.size(); ++i) (*gg)[i / inner] += self.grad[i] * xhat[i];
    if (Tensor* gb = input_grad(self, 2))
      for (std::size_t i = 0; i < xhat.size(); ++i) (*gb)[i / inner] += self.grad[i];
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (int g = 0; g < groups; ++g) {
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) {
        const std::size_t idx = g * gsize + i;
        const double d = self.grad[idx] * gam[idx / inner];
        mean_d += d;
        mean_dx += d * xhat[idx];
      }
      mean_d /= static_cast<double>(gsize);
      mean_dx /= static_cast<double>(gsize);
      for (std::size_t i = 0; i < gsize; ++i) {
        const std::size_t idx = g * gsize + i;
        const double d = self.grad[idx] * gam[idx / inner];
        (*gx)[idx] += inv_std[g] * (d - mean_d - xhat[idx] * mean_dx);
      }
    }
    (void)c;
  });
}

Var adaptive_avg_pool2d(const Var& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 1) throw ValidationError("adaptive_avg_pool2d expects [C,1,H,W]");
  const int c = s[0], h = s[2], w = s[3];
  struct Bin {
    int y0, y1, x0, x1;
  };
  std::vector<Bin> bins;
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j)
      bins.push_back({i * h / out_h, ((i + 1) * h + out_h - 1) / out_h, j * w / out_w, ((j + 1) * w + out_w - 1) / out_w});
  Tensor out({c, 1, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t bi = 0; bi < bins.size(); ++bi) {
      const Bin& b = bins[bi];
      double acc = 0.0;
      for (int y = b.y0; y < b.y1; ++y)
        for (int xx = b.x0; xx < b.x1; ++xx) acc += x.value()[(static_cast<std::size_t>(ch) * h + y) * w + xx];
      out[ch * bins.size() + bi] = acc / ((b.y1 - b.y0) * (b.x1 - b.x0));
    }
  return record(std::move(out), {x}, [bins, c, h, w](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t bi = 0; bi < bins.size(); ++bi) {
        const Bin& b = bins[bi];
        const double g = self.grad[ch * bins.size() + bi] / ((b.y1 - b.y0) * (b.x1 - b.x0));
        for (int y = b.y0; y < b.y1; ++y)
          for (int xx = b.x0; xx < b.x1; ++xx) (*gx)[(static_cast<std::size_t>(ch) * h + y) * w + xx] += g;
      }
  });
}

}  // namespace scdiff::ag
