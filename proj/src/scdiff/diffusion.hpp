#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "scdiff/grid.hpp"
#include "scdiff/tensor.hpp"

namespace scdiff::diffusion {

/// Variance schedule tables, 1-based in t: beta(t) for t in [1, T].
class NoiseSchedule {
 public:
  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(check(t) - 1); }
  double alpha(int t) const { return alpha_.at(check(t) - 1); }
  double alpha_bar(int t) const { return alpha_bar_.at(check(t) - 1); }
  /// alpha_bar with the convention alpha_bar(0) = 1.
  double alpha_bar_or_one(int t) const { return t == 0 ? 1.0 : alpha_bar(t); }
  double beta_tilde(int t) const { return beta_tilde_.at(check(t) - 1); }

  friend NoiseSchedule make_linear_schedule(int steps, double beta_1, double beta_T);

 private:
  int check(int t) const;
  std::vector<double> beta_, alpha_, alpha_bar_, beta_tilde_;
};

/// beta_t linear from beta_1 to beta_T; cumulative products are formed in
/// extended precision.
NoiseSchedule make_linear_schedule(int steps, double beta_1, double beta_T);

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor forward_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// One transition of the forward chain: sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise.
Tensor forward_step(const Tensor& z_prev, int t, const Tensor& noise, const NoiseSchedule& sched);

/// Mean squared error between injected and predicted noise.
double training_target_loss(const Tensor& eps, const Tensor& eps_pred);

/// Ancestral step with fixed variance beta_tilde_t; noise must be zero at t = 1.
Tensor ddpm_step(const Tensor& zt, int t, const Tensor& eps_pred, const NoiseSchedule& sched, const Tensor& noise);

/// (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
Tensor predict_x0(const Tensor& zt, int t, const Tensor& eps_pred, const NoiseSchedule& sched);

/// Deterministic (eta = 0) DDIM update from t to t_prev (t_prev = 0 allowed).
Tensor ddim_step(const Tensor& zt, int t, int t_prev, const Tensor& eps_pred, const NoiseSchedule& sched);

/// Evenly spaced descending subset of [1, T] of size T_inf, starting at T and ending at 1.
std::vector<int> ddim_timesteps(int steps, int inference_steps);

struct Conditioning {
  std::optional<Tensor> tokens;      // [M, d]
  std::optional<TsdfGrid> partial;   // partial scan with known_mask
};

using Denoiser = std::function<Tensor(const Tensor& zt, int t, const Conditioning& cond)>;

/// Standard-normal tensor from a seeded generator.
Tensor gaussian(const Shape& shape, std::mt19937_64& rng);

/// Samples z_T ~ N(0, I) from `seed` and runs the DDIM chain to t = 0.
Tensor ddim_sample(const Denoiser& denoiser, const Conditioning& cond, const NoiseSchedule& sched, int inference_steps,
                   std::uint64_t seed, const Shape& latent_shape);

/// Ancestral sampling over all T steps; `stochastic = false` drops the noise
/// (the deterministic limit of the chain).
Tensor ddpm_sample(const Denoiser& denoiser, const Conditioning& cond, const NoiseSchedule& sched, std::uint64_t seed,
                   const Shape& latent_shape, bool stochastic = true);

}  // namespace scdiff::diffusion
