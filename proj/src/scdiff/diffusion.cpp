#include "scdiff/diffusion.hpp"

#include <cmath>

#include "scdiff/errors.hpp"

namespace scdiff::diffusion {
namespace {

Tensor call_denoiser(const Denoiser& denoiser, const Tensor& zt, int t, const Conditioning& cond) {
  Tensor eps = denoiser(zt, t, cond);
  if (!eps.same_shape(zt))
    throw ContractError("denoiser returned " + shape_str(eps.shape()) + " for an input of " + shape_str(zt.shape()));
  return eps;
}

}  // namespace

int NoiseSchedule::check(int t) const {
  if (t < 1 || t > steps())
    throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  return t;
}

NoiseSchedule make_linear_schedule(int steps, double beta_1, double beta_T) {
  if (steps < 2) throw ValidationError("schedule needs T >= 2, got " + std::to_string(steps));
  if (!(beta_1 > 0) || !(beta_1 <= beta_T) || !(beta_T < 1))
    throw ValidationError("schedule requires 0 < beta_1 <= beta_T < 1");
  NoiseSchedule s;
  long double prod = 1.0L;
  for (int t = 1; t <= steps; ++t) {
    const double b = beta_1 + static_cast<double>(t - 1) / (steps - 1) * (beta_T - beta_1);
    const long double prev = prod;
    prod *= 1.0L - static_cast<long double>(b);
    s.beta_.push_back(b);
    s.alpha_.push_back(1.0 - b);
    s.alpha_bar_.push_back(static_cast<double>(prod));
    s.beta_tilde_.push_back(static_cast<double>((1.0L - prev) / (1.0L - prod) * b));
  }
  return s;
}

Tensor forward_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "forward_sample");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

Tensor forward_step(const Tensor& z_prev, int t, const Tensor& noise, const NoiseSchedule& sched) {
  require_same_shape(z_prev, noise, "forward_step");
  const double b = sched.beta(t);
  const double a = std::sqrt(1.0 - b), s = std::sqrt(b);
  Tensor out(z_prev.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z_prev[i] + s * noise[i];
  return out;
}

double training_target_loss(const Tensor& eps, const Tensor& eps_pred) {
  require_same_shape(eps, eps_pred, "training_target_loss");
  if (eps.empty()) throw ValidationError("training_target_loss on empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) s += (eps[i] - eps_pred[i]) * (eps[i] - eps_pred[i]);
  return s / static_cast<double>(eps.size());
}

Tensor ddpm_step(const Tensor& zt, int t, const Tensor& eps_pred, const NoiseSchedule& sched, const Tensor& noise) {
  require_same_shape(zt, eps_pred, "ddpm_step");
  require_same_shape(zt, noise, "ddpm_step noise");
  const double beta = sched.beta(t);
  if (t == 1)
    for (double v : noise.values())
      if (v != 0.0) throw ValidationError("ddpm_step: noise must be zero at t = 1");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sigma = std::sqrt(sched.beta_tilde(t));
  Tensor out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (zt[i] - coef * eps_pred[i]) + sigma * noise[i];
  return out;
}

Tensor predict_x0(const Tensor& zt, int t, const Tensor& eps_pred, const NoiseSchedule& sched) {
  require_same_shape(zt, eps_pred, "predict_x0");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (zt[i] - b * eps_pred[i]) / a;
  return out;
}

Tensor ddim_step(const Tensor& zt, int t, int t_prev, const Tensor& eps_pred, const NoiseSchedule& sched) {
  if (t_prev < 0 || t_prev >= t) throw ValidationError("ddim_step: t_prev must lie in [0, t)");
  const Tensor x0 = predict_x0(zt, t, eps_pred, sched);
  const double ab = sched.alpha_bar_or_one(t_prev);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps_pred[i];
  return out;
}

std::vector<int> ddim_timesteps(int steps, int inference_steps) {
  if (inference_steps < 1 || inference_steps > steps)
    throw ValidationError("T_inf must lie in [1, T], got " + std::to_string(inference_steps));
  if (inference_steps == 1) return {steps};
  std::vector<int> ts;
  for (int i = inference_steps - 1; i >= 0; --i)
    ts.push_back(1 + static_cast<int>(std::lround(static_cast<double>(steps - 1) * i / (inference_steps - 1))));
  return ts;
}

Tensor gaussian(const Shape& shape, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.values()) v = n(rng);
  return t;
}

Tensor ddim_sample(const Denoiser& denoiser, const Conditioning& cond, const NoiseSchedule& sched, int inference_steps,
                   std::uint64_t seed, const Shape& latent_shape) {
  const std::vector<int> ts = ddim_timesteps(sched.steps(), inference_steps);
  std::mt19937_64 rng(seed);
  Tensor z = gaussian(latent_shape, rng);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    z = ddim_step(z, t, t_prev, call_denoiser(denoiser, z, t, cond), sched);
  }
  return z;
}

Tensor ddpm_sample(const Denoiser& denoiser, const Conditioning& cond, const NoiseSchedule& sched, std::uint64_t seed,
                   const Shape& latent_shape, bool stochastic) {
  std::mt19937_64 rng(seed);
  Tensor z = gaussian(latent_shape, rng);
  for (int t = sched.steps(); t >= 1; --t) {
    Tensor noise = (stochastic && t > 1) ? gaussian(latent_shape, rng) : Tensor(latent_shape, 0.0);
    z = ddpm_step(z, t, call_denoiser(denoiser, z, t, cond), sched, noise);
  }
  return z;
}

}  // namespace scdiff::diffusion
