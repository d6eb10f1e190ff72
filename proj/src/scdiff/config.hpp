#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "scdiff/denoiser.hpp"
#include "scdiff/vqvae.hpp"

namespace scdiff {

/// Every tunable of a run. Keys in the config file use the member names below;
/// the first block mirrors the hyperparameter table of the method, the second
/// holds the desk-scale knobs.
struct RunConfig {
  double thresh = 3.0;
  int S = 32;
  int S_l = 8;
  int D = 3;
  int K_Z = 512;
  double beta = 0.5;
  double gamma_R = 0.4;
  double gamma_A = 0.4;
  int T = 1000;
  int T_inf = 100;
  double beta_1 = 8.5e-4;
  double beta_T = 0.012;
  std::vector<int> A_res{2, 4};
  int D_CLIP = 64;
  int bs = 4;
  double lr_vqvae = 1e-4;
  double lr_diff = 2.5e-5;

  std::array<int, 3> vq_widths{8, 16, 32};
  std::array<int, 3> unet_widths{16, 32, 32};
  int temb_dim = 64;
  int disc_width = 8;
  double lr_disc = 1e-4;
  int render_size = 32;
  long steps_vqvae = 2000;
  long steps_diff = 5000;
  long log_every = 50;
  long ckpt_every = 500;
  int dead_code_steps = 500;
  std::uint64_t seed = 0;
  int token_image_size = 56;
  double drop_tokens = 0.1;
  double drop_partial = 0.1;
  int chamfer_points = 8192;
  int best_of = 5;

  /// Range checks across all fields; throws ValidationError naming the key.
  void validate() const;

  vqvae::Architecture vqvae_arch() const;
  vqvae::LossWeights loss_weights() const;
  denoiser::Architecture denoiser_arch() const;

  /// Canonical "key = value" listing of every field (the config echo).
  std::string to_text() const;
};

/// Parses flat "key = value" lines; '#' starts a comment. Unknown or
/// duplicated keys and malformed values are errors naming the line.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

/// Keys whose values change tensor shapes of the named model kind
/// ("vqvae" or "diffusion").
std::vector<std::string> architecture_keys(const std::string& kind);

/// Values of `keys` that differ between two config echoes, as "key: a vs b".
std::vector<std::string> config_differences(const std::string& echo_a, const std::string& echo_b,
                                            const std::vector<std::string>& keys);

}  // namespace scdiff
