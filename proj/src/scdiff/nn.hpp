#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scdiff/autograd.hpp"

namespace scdiff::nn {

using ag::Var;

/// Ordered, named collection of trainable leaves.
class ParamSet {
 public:
  Var add(const std::string& name, Tensor init);
  Var get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::size_t scalar_count() const;
  void zero_grad();
  /// Copies values of every parameter of `src` whose name, with `src_prefix`
  /// replaced by `dst_prefix`, exists here.
  void copy_matching(const ParamSet& src, const std::string& src_prefix, const std::string& dst_prefix);

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::map<std::string, std::size_t> index_;
};

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor uniform(Shape shape, double bound);
  Tensor normal(Shape shape, double stddev);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

using Triple = std::array<int, 3>;

struct Conv3d {
  Var weight;
  Var bias;
  ag::ConvGeometry geom;

  static Conv3d make(ParamSet& ps, const std::string& name, int cin, int cout, Triple kernel, Triple stride, Triple pad,
                     Initializer& init, bool zero_init = false);
  /// Cubic kernel k with "same" padding and the given stride.
  static Conv3d cube(ParamSet& ps, const std::string& name, int cin, int cout, int k, int stride, Initializer& init,
                     bool zero_init = false);
  Var operator()(const Var& x) const { return ag::conv3d(x, weight, bias, geom); }
};

struct Linear {
  Var weight;
  Var bias;

  static Linear make(ParamSet& ps, const std::string& name, int in, int out, Initializer& init, bool with_bias = true);
  Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
};

struct GroupNorm {
  Var gamma;
  Var beta;
  int groups = 1;

  static GroupNorm make(ParamSet& ps, const std::string& name, int channels);
  Var operator()(const Var& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

/// GN -> SiLU -> conv -> (+ time projection) -> GN -> SiLU -> conv, plus skip.
struct ResBlock {
  GroupNorm norm1;
  Conv3d conv1;
  std::optional<Linear> time_proj;
  GroupNorm norm2;
  Conv3d conv2;
  std::optional<Conv3d> skip;

  static ResBlock make(ParamSet& ps, const std::string& name, int cin, int cout, int time_dim, Initializer& init);
  Var operator()(const Var& x, const Var& time_emb = {}) const;
};

/// Spatial transformer: self-attention over flattened voxels followed by
/// cross-attention from voxels (queries) to context tokens (keys/values).
struct AttentionBlock {
  GroupNorm norm;
  Linear self_q, self_k, self_v, self_o;
  Linear cross_q, cross_k, cross_v, cross_o;
  int channels = 0;

  static AttentionBlock make(ParamSet& ps, const std::string& name, int channels, int context_dim, Initializer& init);
  Var operator()(const Var& x, const Var& context) const;
};

/// Single-head scaled dot-product attention; q [N, C], k/v [M, C].
Var attention(const Var& q, const Var& k, const Var& v);

/// [C, D, H, W] -> [D*H*W, C] and back.
Var flatten_spatial(const Var& x);
Var unflatten_spatial(const Var& tokens, const Shape& spatial_shape);

class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };
  Adam(const ParamSet& params, Options opt);
  /// Applies one update using the accumulated gradients times `grad_scale`.
  void step(const ParamSet& params, double grad_scale = 1.0);
  long steps() const { return t_; }
  const Options& options() const { return opt_; }

 private:
  Options opt_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

/// Sum of squared gradient entries per parameter-name prefix (up to the first '.').
std::map<std::string, double> grad_norms_by_group(const ParamSet& params);

}  // namespace scdiff::nn
