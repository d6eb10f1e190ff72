#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "scdiff/diffusion.hpp"
#include "scdiff/grid.hpp"
#include "scdiff/nn.hpp"
#include "scdiff/vqvae.hpp"

namespace scdiff::denoiser {

using ag::Var;

struct Architecture {
  int latent_channels = 3;     // D
  int latent_resolution = 8;   // S_l
  int grid_resolution = 32;    // S, input side of the partial-scan encoder
  std::array<int, 3> widths{16, 32, 32};
  int time_dim = 64;
  int context_dim = 64;        // token width d
  std::vector<int> attention_resolutions{2, 4};
  int timesteps = 1000;        // T, upper bound for t
  int token_image_size = 56;   // side of the normal image fed to the token encoder
  int token_grid = 7;          // token_grid^2 spatial tokens plus one pooled token
  int hint_width = 8;          // first width of the partial-scan encoder

  int token_count() const { return token_grid * token_grid + 1; }
  Shape latent_shape() const { return {latent_channels, latent_resolution, latent_resolution, latent_resolution}; }
  void validate() const;
};

/// Sinusoidal encoding of t: [sin(t f_i), cos(t f_i)] with f_i = 10000^(-i/half).
Tensor timestep_encoding(int t, int dim);

/// Time-conditional U-Net over latent codes with cross-attention to tokens and
/// an optional control branch fed by a partial scan.
class UNet {
 public:
  UNet(const Architecture& arch, std::uint64_t seed);
  UNet(UNet&&) = default;
  UNet& operator=(UNet&&) = default;
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  const Architecture& arch() const { return arch_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  /// Sinusoid followed by the 2-layer MLP; [time_dim].
  Var embed_timestep(int t) const;
  /// [3, 1, H, W] normal image -> [M, d] tokens.
  Var encode_tokens(const Var& image) const;
  /// Single learned token used when no tokens are supplied; [1, d].
  Var null_context() const { return null_token_; }

  /// eps prediction for z_t [D, S_l, S_l, S_l]. `context` is [M, d] or null
  /// (null token); `control` is the [2, S, S, S] partial-scan stack or null
  /// (control branch skipped).
  Var forward(const Var& zt, int t, const Var& context, const Var& control) const;

  /// The zero-initialized projections joining the control branch to the decoder.
  const std::vector<nn::Conv3d>& control_projections() const { return phi_; }

 private:
  struct Level {
    std::optional<nn::Conv3d> down;
    nn::ResBlock block;
    std::optional<nn::AttentionBlock> attn;
  };
  struct Encoder {
    nn::Conv3d conv_in;
    std::vector<Level> levels;  // outputs after each entry are the skips
    nn::ResBlock mid1, mid2;
    nn::AttentionBlock mid_attn;
  };
  struct DecoderLevel {
    nn::ResBlock block;
    std::optional<nn::AttentionBlock> attn;
    std::optional<nn::Conv3d> up;
  };

  Encoder make_encoder(const std::string& prefix, nn::Initializer& init);
  /// Runs levels + middle from the conv_in output; returns skips and middle output.
  std::pair<std::vector<Var>, Var> run_encoder(const Encoder& e, Var h, const Var& temb, const Var& ctx) const;
  bool attends(int res) const;

  Architecture arch_;
  nn::ParamSet params_;
  nn::Linear time1_, time2_;
  std::vector<nn::Conv3d> token_convs_;
  Var null_token_;
  Encoder main_, control_;
  std::vector<nn::Conv3d> hint_;
  std::vector<nn::Conv3d> phi_;
  std::vector<DecoderLevel> decoder_;
  nn::GroupNorm norm_out_;
  nn::Conv3d conv_out_;
};

/// Token matrix [M, d] for sampling: precomputed tokens pass through (width
/// checked against the model), otherwise the image goes through the encoder.
Tensor tokens_for(const UNet& net, const std::optional<Tensor>& tokens, const std::optional<Tensor>& image);

/// Adapter for the samplers: gradient-free forward with tokens and partial scan
/// taken from the conditioning record.
diffusion::Denoiser as_sampler_fn(const UNet& net);

struct Sample {
  TsdfGrid complete;
  TsdfGrid partial;
  std::optional<Tensor> image;   // [3, 1, H, W] normal image of the partial scan
  std::optional<Tensor> tokens;  // [M, d] precomputed tokens (take precedence)
};

struct TrainLog {
  long step = 0;
  double loss = 0;  // mean over the logging window
};

struct TrainOptions {
  long steps = 5000;
  int batch_size = 4;
  double lr = 2.5e-5;
  double drop_tokens = 0.1;
  double drop_partial = 0.1;
  std::uint64_t seed = 0;
  long log_every = 50;
  long checkpoint_every = 0;
  std::function<void(const TrainLog&)> on_log;
  std::function<void(long step)> on_checkpoint;
  /// Called after each backward pass, before the optimizer step.
  std::function<void(const nn::ParamSet&)> on_gradients;
};

/// Loss for one (sample, t, eps) triple with the given conditioning channels.
Var diffusion_loss(const UNet& net, const Tensor& z0, int t, const Tensor& eps, const diffusion::NoiseSchedule& sched,
                   const Sample& sample, bool use_tokens, bool use_partial);

/// Trains the denoiser on latents of the frozen VQ-VAE encoder (pre-quantization).
/// Throws NumericError carrying the step index when the loss becomes NaN.
void train(UNet& net, const vqvae::VqVae& vq, std::span<const Sample> corpus, const diffusion::NoiseSchedule& sched,
           const TrainOptions& opt);

}  // namespace scdiff::denoiser
