#include "scdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "scdiff/errors.hpp"

namespace scdiff::denoiser {
namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void Architecture::validate() const {
  if (latent_channels < 1) throw ValidationError("denoiser: latent channels must be positive");
  // Two stride-2 levels; the coarsest maps must keep at least 2^3 sites for
  // group norm and self-attention to carry gradient.
  if (latent_resolution < 8 || latent_resolution % 4 != 0)
    throw ValidationError("denoiser: S_l must be a multiple of 4 and at least 8, got " + std::to_string(latent_resolution));
  if (grid_resolution % latent_resolution != 0 || !is_power_of_two(grid_resolution / latent_resolution))
    throw ValidationError("denoiser: S / S_l must be a power of two");
  for (int w : widths)
    if (w < 1) throw ValidationError("denoiser: widths must be positive");
  if (time_dim < 2 || time_dim % 2 != 0) throw ValidationError("denoiser: time embedding width must be even");
  if (context_dim < 1) throw ValidationError("denoiser: token width must be positive");
  for (int r : attention_resolutions)
    if (r < 1 || latent_resolution % r != 0)
      throw ValidationError("denoiser: attention resolution " + std::to_string(r) + " does not divide S_l=" +
                            std::to_string(latent_resolution));
  if (timesteps < 1) throw ValidationError("denoiser: T must be positive");
  if (token_image_size < 8 || token_grid < 1) throw ValidationError("denoiser: token image too small");
  if (hint_width < 1) throw ValidationError("denoiser: hint width must be positive");
}

Tensor timestep_encoding(int t, int dim) {
  const int half = dim / 2;
  Tensor e({dim});
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(t * f);
    e[half + i] = std::cos(t * f);
  }
  return e;
}

bool UNet::attends(int res) const {
  const auto& a = arch_.attention_resolutions;
  return std::find(a.begin(), a.end(), res) != a.end();
}

UNet::Encoder UNet::make_encoder(const std::string& prefix, nn::Initializer& init) {
  const auto& w = arch_.widths;
  Encoder e;
  e.conv_in = nn::Conv3d::cube(params_, prefix + ".conv_in", arch_.latent_channels, w[0], 3, 1, init);
  int res = arch_.latent_resolution;
  int cin = w[0];
  for (std::size_t l = 0; l < w.size(); ++l) {
    Level lv;
    const std::string name = prefix + ".level" + std::to_string(l);
    if (l > 0) {
      lv.down = nn::Conv3d::cube(params_, name + ".down", cin, cin, 3, 2, init);
      res /= 2;
    }
    lv.block = nn::ResBlock::make(params_, name + ".block", cin, w[l], arch_.time_dim, init);
    if (attends(res)) lv.attn = nn::AttentionBlock::make(params_, name + ".attn", w[l], arch_.context_dim, init);
    e.levels.push_back(std::move(lv));
    cin = w[l];
  }
  e.mid1 = nn::ResBlock::make(params_, prefix + ".mid1", cin, cin, arch_.time_dim, init);
  e.mid_attn = nn::AttentionBlock::make(params_, prefix + ".mid_attn", cin, arch_.context_dim, init);
  e.mid2 = nn::ResBlock::make(params_, prefix + ".mid2", cin, cin, arch_.time_dim, init);
  return e;
}

UNet::UNet(const Architecture& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  nn::Initializer init(seed);
  const auto& w = arch_.widths;
  const int td = arch_.time_dim;
  time1_ = nn::Linear::make(params_, "time.fc1", td, td, init);
  time2_ = nn::Linear::make(params_, "time.fc2", td, td, init);

  const int tw[] = {3, 16, 32, arch_.context_dim};
  for (int l = 0; l < 3; ++l)
    token_convs_.push_back(nn::Conv3d::make(params_, "tokens.conv" + std::to_string(l), tw[l], tw[l + 1], {1, 3, 3},
                                            {1, 2, 2}, {0, 1, 1}, init));
  null_token_ = params_.add("null_token", init.normal({1, arch_.context_dim}, 1.0));

  main_ = make_encoder("unet", init);

  // Decoder: one block per encoder level (coarsest first) and a final block for the conv_in skip.
  int cin = w.back();
  int res = arch_.latent_resolution >> (w.size() - 1);
  for (int l = static_cast<int>(w.size()) - 1; l >= 0; --l) {
    DecoderLevel d;
    const std::string name = "unet.dec" + std::to_string(w.size() - 1 - l);
    d.block = nn::ResBlock::make(params_, name + ".block", cin + w[l], w[l], td, init);
    if (attends(res)) d.attn = nn::AttentionBlock::make(params_, name + ".attn", w[l], arch_.context_dim, init);
    if (l > 0) {
      d.up = nn::Conv3d::cube(params_, name + ".up", w[l], w[l], 3, 1, init);
      res *= 2;
    }
    decoder_.push_back(std::move(d));
    cin = w[l];
  }
  decoder_.push_back({nn::ResBlock::make(params_, "unet.dec_in.block", cin + w[0], w[0], td, init), std::nullopt,
                      std::nullopt});
  norm_out_ = nn::GroupNorm::make(params_, "unet.norm_out", w[0]);
  conv_out_ = nn::Conv3d::cube(params_, "unet.conv_out", w[0], arch_.latent_channels, 3, 1, init, true);

  // Control branch: copy of the encoder and middle block, initialized from it.
  control_ = make_encoder("control", init);
  params_.copy_matching(params_, "unet.", "control.");

  // Partial-scan encoder from S^3 down to S_l^3.
  int hw = arch_.hint_width;
  hint_.push_back(nn::Conv3d::cube(params_, "hint.conv0", 2, hw, 3, 1, init));
  int idx = 1;
  for (int s = arch_.grid_resolution; s > arch_.latent_resolution; s /= 2, ++idx) {
    hint_.push_back(nn::Conv3d::cube(params_, "hint.conv" + std::to_string(idx), hw, 2 * hw, 3, 2, init));
    hw *= 2;
  }
  hint_.push_back(nn::Conv3d::cube(params_, "hint.conv" + std::to_string(idx), hw, w[0], 3, 1, init));

  // Zero-initialized 1x1x1 projections: one per skip (conv_in + levels) and one for the middle block.
  std::vector<int> skip_widths{w[0]};
  skip_widths.insert(skip_widths.end(), w.begin(), w.end());
  skip_widths.push_back(w.back());
  for (std::size_t i = 0; i < skip_widths.size(); ++i)
    phi_.push_back(nn::Conv3d::cube(params_, "phi." + std::to_string(i), skip_widths[i], skip_widths[i], 1, 1, init,
                                    true));
}

Var UNet::embed_timestep(int t) const {
  if (t < 1 || t > arch_.timesteps)
    throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(arch_.timesteps) + "]");
  const Var enc = ag::constant(timestep_encoding(t, arch_.time_dim).reshaped({1, arch_.time_dim}));
  return ag::reshape(time2_(ag::silu(time1_(enc))), {arch_.time_dim});
}

Var UNet::encode_tokens(const Var& image) const {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 3 || s[1] != 1 || s[2] < 8 || s[3] < 8)
    throw ValidationError("token encoder expects a [3, 1, H, W] image, got " + shape_str(s));
  Var h = image;
  for (std::size_t l = 0; l < token_convs_.size(); ++l) {
    h = token_convs_[l](h);
    if (l + 1 < token_convs_.size()) h = ag::silu(h);
  }
  const int g = arch_.token_grid;
  const int d = arch_.context_dim;
  const Var grid = ag::transpose(ag::reshape(ag::adaptive_avg_pool2d(h, g, g), {d, g * g}));  // [g^2, d]
  const Var pooled = ag::matmul(ag::constant(Tensor({1, g * g}, 1.0 / (g * g))), grid);
  return ag::concat_rows(grid, pooled);
}

std::pair<std::vector<Var>, Var> UNet::run_encoder(const Encoder& e, Var h, const Var& temb, const Var& ctx) const {
  std::vector<Var> skips{h};
  for (const Level& lv : e.levels) {
    if (lv.down) h = (*lv.down)(h);
    h = lv.block(h, temb);
    if (lv.attn) h = (*lv.attn)(h, ctx);
    skips.push_back(h);
  }
  h = e.mid2(e.mid_attn(e.mid1(h, temb), ctx), temb);
  return {std::move(skips), h};
}

Var UNet::forward(const Var& zt, int t, const Var& context, const Var& control) const {
  if (zt.shape() != arch_.latent_shape())
    throw ValidationError("denoiser: expected z_t " + shape_str(arch_.latent_shape()) + ", got " + shape_str(zt.shape()));
  if (context && (context.shape().size() != 2 || context.shape()[1] != arch_.context_dim || context.shape()[0] < 1))
    throw ValidationError("denoiser: tokens must be [M, " + std::to_string(arch_.context_dim) + "], got " +
                          shape_str(context.shape()));
  const int s = arch_.grid_resolution;
  if (control && control.shape() != Shape{2, s, s, s})
    throw ValidationError("denoiser: partial-scan input must be " + shape_str({2, s, s, s}) + ", got " +
                          shape_str(control.shape()));

  const Var temb = embed_timestep(t);
  const Var ctx = context ? context : null_token_;
  auto [skips, h] = run_encoder(main_, main_.conv_in(zt), temb, ctx);

  if (control) {
    Var c = control;
    for (std::size_t l = 0; l < hint_.size(); ++l) {
      c = hint_[l](c);
      if (l + 1 < hint_.size()) c = ag::silu(c);
    }
    const Var f = ag::add(control_.conv_in(zt), c);
    auto [cskips, cmid] = run_encoder(control_, f, temb, ctx);
    for (std::size_t i = 0; i < skips.size(); ++i) skips[i] = ag::add(skips[i], phi_[i](cskips[i]));
    h = ag::add(h, phi_.back()(cmid));
  }

  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const DecoderLevel& d = decoder_[i];
    h = d.block(ag::concat_channels(h, skips[skips.size() - 1 - i]), temb);
    if (d.attn) h = (*d.attn)(h, ctx);
    if (d.up) h = (*d.up)(ag::upsample_nearest(h, {2, 2, 2}));
  }
  return conv_out_(ag::silu(norm_out_(h)));
}

Tensor tokens_for(const UNet& net, const std::optional<Tensor>& tokens, const std::optional<Tensor>& image) {
  if (tokens) {
    if (tokens->rank() != 2 || tokens->dim(1) != net.arch().context_dim)
      throw ValidationError("token matrix " + shape_str(tokens->shape()) + " does not match model token width " +
                            std::to_string(net.arch().context_dim));
    return *tokens;
  }
  if (!image) throw ValidationError("tokens_for: neither tokens nor an image supplied");
  ag::NoGradGuard guard;
  return net.encode_tokens(ag::constant(*image)).value();
}

diffusion::Denoiser as_sampler_fn(const UNet& net) {
  return [&net](const Tensor& zt, int t, const diffusion::Conditioning& cond) {
    ag::NoGradGuard guard;
    const Var ctx = cond.tokens ? ag::constant(*cond.tokens) : Var{};
    const Var ctl = cond.partial ? ag::constant(cond.partial->masked_input()) : Var{};
    return net.forward(ag::constant(zt), t, ctx, ctl).value();
  };
}

Var diffusion_loss(const UNet& net, const Tensor& z0, int t, const Tensor& eps, const diffusion::NoiseSchedule& sched,
                   const Sample& sample, bool use_tokens, bool use_partial) {
  const Tensor zt = diffusion::forward_sample(z0, t, eps, sched);
  Var ctx;
  if (use_tokens) {
    if (sample.tokens)
      ctx = ag::constant(tokens_for(net, sample.tokens, std::nullopt));
    else if (sample.image)
      ctx = net.encode_tokens(ag::constant(*sample.image));
  }
  const Var ctl = use_partial ? ag::constant(sample.partial.masked_input()) : Var{};
  const Var pred = net.forward(ag::constant(zt), t, ctx, ctl);
  return ag::mean(ag::square(ag::sub(pred, ag::constant(eps))));
}

void train(UNet& net, const vqvae::VqVae& vq, std::span<const Sample> corpus, const diffusion::NoiseSchedule& sched,
           const TrainOptions& opt) {
  if (corpus.empty()) throw ValidationError("train_diffusion needs at least one training sample");
  if (opt.steps < 0 || opt.batch_size < 1) throw ValidationError("train_diffusion: steps >= 0 and batch size >= 1 required");
  if (!(opt.drop_tokens >= 0 && opt.drop_tokens <= 1) || !(opt.drop_partial >= 0 && opt.drop_partial <= 1))
    throw ValidationError("conditioning dropout rates must lie in [0, 1]");
  if (vq.arch().latent_shape() != net.arch().latent_shape())
    throw ValidationError("VQ-VAE latent " + shape_str(vq.arch().latent_shape()) + " does not match denoiser latent " +
                          shape_str(net.arch().latent_shape()));
  if (sched.steps() > net.arch().timesteps) throw ValidationError("schedule has more steps than the denoiser supports");

  std::vector<Tensor> z0;
  z0.reserve(corpus.size());
  for (const Sample& s : corpus) z0.push_back(vq.encode(s.complete));

  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<int> pick_t(1, sched.steps());
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  nn::Adam adam(net.params(), {.lr = opt.lr});

  double acc = 0.0;
  long acc_steps = 0;
  for (long step = 1; step <= opt.steps; ++step) {
    net.params().zero_grad();
    double loss = 0.0;
    for (int b = 0; b < opt.batch_size; ++b) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
      const int t = pick_t(rng);
      const Tensor eps = diffusion::gaussian(z0[i].shape(), rng);
      const bool has_tokens = corpus[i].tokens || corpus[i].image;
      const bool use_tokens = has_tokens && coin(rng) >= opt.drop_tokens;
      const bool use_partial = coin(rng) >= opt.drop_partial;
      const Var l = diffusion_loss(net, z0[i], t, eps, sched, corpus[i], use_tokens, use_partial);
      const double v = l.value()[0];
      if (!std::isfinite(v)) throw NumericError("diffusion loss became NaN at step " + std::to_string(step), step);
      ag::backward(l, 1.0 / opt.batch_size);
      loss += v / opt.batch_size;
    }
    if (opt.on_gradients) opt.on_gradients(net.params());
    adam.step(net.params());

    acc += loss;
    ++acc_steps;
    if ((opt.log_every > 0 && step % opt.log_every == 0) || step == opt.steps) {
      if (opt.on_log) opt.on_log({step, acc / static_cast<double>(acc_steps)});
      acc = 0.0;
      acc_steps = 0;
    }
    if (opt.checkpoint_every > 0 && step % opt.checkpoint_every == 0 && opt.on_checkpoint) opt.on_checkpoint(step);
  }
}

}  // namespace scdiff::denoiser
