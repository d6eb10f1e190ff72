#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "scdiff/grid.hpp"
#include "scdiff/nn.hpp"
#include "scdiff/render.hpp"

namespace scdiff::vqvae {

using ag::Var;

struct Architecture {
  int resolution = 32;        // S
  int latent_channels = 3;    // D
  int codebook_size = 512;    // K_Z
  double thresh = kDefaultTruncation;
  std::array<int, 3> widths{8, 16, 32};

  int latent_resolution() const { return resolution / 4; }
  Shape latent_shape() const { return {latent_channels, latent_resolution(), latent_resolution(), latent_resolution()}; }
  void validate() const;
};

struct LossWeights {
  double beta = 0.5;
  double gamma_r = 0.4;
  double gamma_a = 0.4;
  void validate() const;
};

struct Quantized {
  Tensor zq;                 // same extents as z
  std::vector<int> indices;  // one per spatial site, site order x-fastest
};

/// Nearest codebook row per site of z [D, s, s, s]; ties go to the lowest index.
Quantized quantize(const Tensor& z, const Tensor& codebook);
/// Index of the codebook row nearest to `v` (D values).
int nearest_row(const double* v, const Tensor& codebook);

/// Encoder/decoder pair and codebook sharing one parameter set. Parameters are
/// shared handles, so the model is move-only.
class VqVae {
 public:
  VqVae(const Architecture& arch, std::uint64_t seed);
  VqVae(VqVae&&) = default;
  VqVae& operator=(VqVae&&) = default;
  VqVae(const VqVae&) = delete;
  VqVae& operator=(const VqVae&) = delete;

  const Architecture& arch() const { return arch_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  Var codebook() const { return codebook_; }

  /// x: [1, S, S, S] normalized values -> z: [D, S_l, S_l, S_l].
  Var encode(const Var& x) const;
  /// zq: [D, S_l, S_l, S_l] -> [1, S, S, S] in voxel units, |v| < thresh.
  Var decode(const Var& zq) const;

  Tensor encode(const TsdfGrid& grid) const;
  TsdfGrid decode(const Tensor& zq) const;
  Quantized quantize(const Tensor& z) const { return vqvae::quantize(z, codebook_.value()); }
  /// decode(quantize(encode(grid))).
  TsdfGrid reconstruct(const TsdfGrid& grid) const;

 private:
  struct Encoder {
    nn::Conv3d conv_in, down1, down2, conv_out;
    nn::ResBlock res1, res2;
    nn::GroupNorm norm_out;
  };
  struct Decoder {
    nn::Conv3d conv_in, up2, up1, conv_out;
    nn::ResBlock res2, res1;
    nn::GroupNorm norm_out;
  };

  Architecture arch_;
  nn::ParamSet params_;
  Encoder enc_;
  Decoder dec_;
  Var codebook_;
};

/// Patch classifier on [3, 1, H, W] normal images returning a grid of logits.
class Discriminator {
 public:
  Discriminator(int width, std::uint64_t seed);
  Discriminator(Discriminator&&) = default;
  Discriminator& operator=(Discriminator&&) = default;
  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;

  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  Var logits(const Var& normals) const;

 private:
  nn::ParamSet params_;
  std::vector<nn::Conv3d> layers_;
};

/// Replaces the data-dependent parts of quantization (chosen rows and the
/// stop-gradient values) with fixed snapshots, so the loss becomes a smooth
/// function of the parameters that finite differences can probe.
struct FrozenQuantization {
  std::vector<int> indices;
  Tensor z;  // [N, D] encoder output rows
  Tensor q;  // [N, D] selected codebook rows
};

struct LossTerms {
  double total = 0;
  double rec = 0;       // L_R
  double commit = 0;    // beta * L_C
  double codebook = 0;  // (1 - beta) * L_CB
  double rec2d = 0;     // gamma_R * L_R2D
  double adv = 0;       // gamma_A * L_A2D (generator side)
};

/// Ground-truth render of one supervision view.
struct ViewTarget {
  CameraPose pose;
  render::RenderResult image;
};

struct LossGraph {
  Var total;
  LossTerms terms;
  Var recon;                 // [1, S, S, S] voxel units
  std::vector<Var> fake_normals;  // per view [3, 1, H, W]
  std::vector<int> indices;
  Tensor z_rows;             // [N, D] encoder output (for codebook reseeding)
  FrozenQuantization snapshot;
};

ViewTarget make_view_target(const TsdfGrid& x, const CameraPose& pose);

/// Builds the combined objective for one shape. `disc` may be null when
/// gamma_A = 0. With `frozen` set, quantization uses the snapshot instead of
/// the nearest-neighbour search.
LossGraph vqvae_loss(const VqVae& model, const TsdfGrid& x, std::span<const ViewTarget> views, const LossWeights& w,
                     const Discriminator* disc, const FrozenQuantization* frozen = nullptr);

/// Mean over hit-in-both pixels of |dD| / thresh + sum_c |dN_c|; 0 when no such pixel.
Var render_loss(const Var& rendered, const std::vector<std::uint8_t>& hit, const render::RenderResult& target,
                double thresh);

/// -(mean log D(real) + mean log(1 - D(fake))).
Var discriminator_loss(const Discriminator& disc, const Var& real_normals, const Var& fake_normals);

/// [3, 1, H, W] tensor of a render's normal channels.
Tensor normals_tensor(const render::RenderResult& img);

struct TrainLog {
  long step = 0;
  LossTerms terms;  // batch means
  double disc_loss = 0;
  int codes_used = 0;
  int codes_reseeded = 0;
};

struct TrainOptions {
  long steps = 2000;
  int batch_size = 4;
  double lr = 1e-4;
  double disc_lr = 1e-4;
  LossWeights weights;
  int render_size = 32;
  int dead_code_steps = 500;
  std::uint64_t seed = 0;
  long log_every = 50;
  long checkpoint_every = 0;  // 0 disables
  std::function<void(const TrainLog&)> on_log;
  std::function<void(long step)> on_checkpoint;
};

/// Adam over the combined objective with alternating discriminator updates.
/// Throws NumericError carrying the step index when the loss becomes NaN.
void train(VqVae& model, Discriminator& disc, std::span<const TsdfGrid> corpus, const TrainOptions& opt);

/// Distinct codebook rows selected over the corpus.
int codebook_usage(const VqVae& model, std::span<const TsdfGrid> corpus);

}  // namespace scdiff::vqvae
