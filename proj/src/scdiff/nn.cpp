#include "scdiff/nn.hpp"

#include <cmath>
#include <numeric>

#include "scdiff/errors.hpp"

namespace scdiff::nn {

Var ParamSet::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ValidationError("duplicate parameter name " + name);
  Var v = ag::leaf(std::move(init));
  index_[name] = items_.size();
  items_.emplace_back(name, v);
  return v;
}

Var ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter " + name);
  return items_[it->second].second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += v.value().size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, v] : items_) v.mutable_grad().fill(0.0);
}

void ParamSet::copy_matching(const ParamSet& src, const std::string& src_prefix, const std::string& dst_prefix) {
  for (const auto& [name, v] : src.items()) {
    if (name.rfind(src_prefix, 0) != 0) continue;
    const std::string dst = dst_prefix + name.substr(src_prefix.size());
    if (!contains(dst)) continue;
    Var d = get(dst);
    require_same_shape(d.value(), v.value(), "copy_matching");
    d.mutable_value() = v.value();
  }
}

Tensor Initializer::uniform(Shape shape, double bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng_);
  return t;
}

Tensor Initializer::normal(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng_);
  return t;
}

Conv3d Conv3d::make(ParamSet& ps, const std::string& name, int cin, int cout, Triple kernel, Triple stride, Triple pad,
                    Initializer& init, bool zero_init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel[0] * kernel[1] * kernel[2]));
  Shape ws{cout, cin, kernel[0], kernel[1], kernel[2]};
  Conv3d c;
  c.weight = ps.add(name + ".weight", zero_init ? Tensor(ws, 0.0) : init.uniform(ws, bound));
  c.bias = ps.add(name + ".bias", zero_init ? Tensor({cout}, 0.0) : init.uniform({cout}, bound));
  c.geom.stride = stride;
  c.geom.pad = pad;
  return c;
}

Conv3d Conv3d::cube(ParamSet& ps, const std::string& name, int cin, int cout, int k, int stride, Initializer& init,
                    bool zero_init) {
  return make(ps, name, cin, cout, {k, k, k}, {stride, stride, stride}, {k / 2, k / 2, k / 2}, init, zero_init);
}

Linear Linear::make(ParamSet& ps, const std::string& name, int in, int out, Initializer& init, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = ps.add(name + ".weight", init.uniform({out, in}, bound));
  if (with_bias) l.bias = ps.add(name + ".bias", init.uniform({out}, bound));
  return l;
}

GroupNorm GroupNorm::make(ParamSet& ps, const std::string& name, int channels) {
  GroupNorm g;
  g.gamma = ps.add(name + ".gamma", Tensor({channels}, 1.0));
  g.beta = ps.add(name + ".beta", Tensor({channels}, 0.0));
  g.groups = std::gcd(channels, 8);
  return g;
}

ResBlock ResBlock::make(ParamSet& ps, const std::string& name, int cin, int cout, int time_dim, Initializer& init) {
  ResBlock r;
  r.norm1 = GroupNorm::make(ps, name + ".norm1", cin);
  r.conv1 = Conv3d::cube(ps, name + ".conv1", cin, cout, 3, 1, init);
  if (time_dim > 0) r.time_proj = Linear::make(ps, name + ".time", time_dim, cout, init);
  r.norm2 = GroupNorm::make(ps, name + ".norm2", cout);
  r.conv2 = Conv3d::cube(ps, name + ".conv2", cout, cout, 3, 1, init);
  if (cin != cout) r.skip = Conv3d::cube(ps, name + ".skip", cin, cout, 1, 1, init);
  return r;
}

Var ResBlock::operator()(const Var& x, const Var& time_emb) const {
  Var h = conv1(ag::silu(norm1(x)));
  if (time_proj) {
    if (!time_emb) throw ValidationError("ResBlock with a time projection needs a time embedding");
    const Var t = (*time_proj)(ag::reshape(ag::silu(time_emb), {1, static_cast<int>(time_emb.value().size())}));
    h = ag::add_channel_bias(h, t);
  }
  h = conv2(ag::silu(norm2(h)));
  return ag::add(skip ? (*skip)(x) : x, h);
}

Var attention(const Var& q, const Var& k, const Var& v) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  const Var scores = ag::scale(ag::matmul(q, ag::transpose(k)), inv);
  return ag::matmul(ag::softmax_rows(scores), v);
}

Var flatten_spatial(const Var& x) {
  const int c = x.shape()[0];
  const int n = static_cast<int>(x.value().size() / c);
  return ag::transpose(ag::reshape(x, {c, n}));
}

Var unflatten_spatial(const Var& tokens, const Shape& spatial_shape) {
  return ag::reshape(ag::transpose(tokens), spatial_shape);
}

AttentionBlock AttentionBlock::make(ParamSet& ps, const std::string& name, int channels, int context_dim,
                                    Initializer& init) {
  AttentionBlock a;
  a.channels = channels;
  a.norm = GroupNorm::make(ps, name + ".norm", channels);
  a.self_q = Linear::make(ps, name + ".self_q", channels, channels, init, false);
  a.self_k = Linear::make(ps, name + ".self_k", channels, channels, init, false);
  a.self_v = Linear::make(ps, name + ".self_v", channels, channels, init, false);
  a.self_o = Linear::make(ps, name + ".self_o", channels, channels, init);
  a.cross_q = Linear::make(ps, name + ".cross_q", channels, channels, init, false);
  a.cross_k = Linear::make(ps, name + ".cross_k", context_dim, channels, init, false);
  a.cross_v = Linear::make(ps, name + ".cross_v", context_dim, channels, init, false);
  a.cross_o = Linear::make(ps, name + ".cross_o", channels, channels, init);
  return a;
}

Var AttentionBlock::operator()(const Var& x, const Var& context) const {
  const Var h = flatten_spatial(norm(x));
  const Var sa = self_o(attention(self_q(h), self_k(h), self_v(h)));
  const Var s = ag::add(h, sa);
  const Var ca = cross_o(attention(cross_q(s), cross_k(context), cross_v(context)));
  return ag::add(x, unflatten_spatial(ag::add(sa, ca), x.shape()));
}

Adam::Adam(const ParamSet& params, Options opt) : opt_(opt) {
  for (const auto& [_, v] : params.items()) {
    m_.emplace_back(v.shape(), 0.0);
    v_.emplace_back(v.shape(), 0.0);
  }
}

void Adam::step(const ParamSet& params, double grad_scale) {
  if (params.items().size() != m_.size()) throw ValidationError("Adam: parameter set changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < m_.size(); ++p) {
    Var v = params.items()[p].second;
    const Tensor& g = v.mutable_grad();
    Tensor& w = v.mutable_value();
    Tensor& m = m_[p];
    Tensor& s = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * grad_scale;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
      s[i] = opt_.beta2 * s[i] + (1.0 - opt_.beta2) * gi * gi;
      w[i] -= opt_.lr * (m[i] / bc1) / (std::sqrt(s[i] / bc2) + opt_.eps);
    }
  }
}

std::map<std::string, double> grad_norms_by_group(const ParamSet& params) {
  std::map<std::string, double> out;
  for (const auto& [name, v] : params.items()) {
    double s = 0.0;
    for (double g : v.grad().values()) s += g * g;
    out[name.substr(0, name.find('.'))] += s;
  }
  return out;
}

}  // namespace scdiff::nn
