#include "scdiff/vqvae.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "scdiff/errors.hpp"

namespace scdiff::vqvae {
namespace {

// [N, D] rows of a [D, s, s, s] tensor (site-major copy).
Tensor rows_of(const Tensor& z) {
  const int d = z.dim(0);
  const std::size_t n = z.size() / d;
  Tensor r({static_cast<int>(n), d});
  for (int c = 0; c < d; ++c)
    for (std::size_t i = 0; i < n; ++i) r[i * d + c] = z[c * n + i];
  return r;
}

Tensor gather(const Tensor& table, const std::vector<int>& idx) {
  const int d = table.dim(1);
  Tensor out({static_cast<int>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int c = 0; c < d; ++c) out[i * d + c] = table[static_cast<std::size_t>(idx[i]) * d + c];
  return out;
}

Var mean_abs_diff(const Var& a, const Var& b) { return ag::mean(ag::abs(ag::sub(a, b))); }

}  // namespace

void Architecture::validate() const {
  if (resolution < 8 || resolution % 4 != 0)
    throw ValidationError("VQ-VAE resolution must be a multiple of 4 and at least 8, got " + std::to_string(resolution));
  if (latent_channels < 1) throw ValidationError("latent channel count D must be positive");
  if (codebook_size < 1) throw ValidationError("codebook size K_Z must be positive");
  if (!(thresh > 0)) throw ValidationError("thresh must be positive");
  for (int w : widths)
    if (w < 1) throw ValidationError("VQ-VAE widths must be positive");
}

void LossWeights::validate() const {
  if (!(beta >= 0 && beta <= 1)) throw ValidationError("beta must lie in [0, 1]");
  if (!(gamma_r >= 0) || !(gamma_a >= 0)) throw ValidationError("gamma_R and gamma_A must be nonnegative");
}

int nearest_row(const double* v, const Tensor& codebook) {
  const int k = codebook.dim(0), d = codebook.dim(1);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int j = 0; j < k; ++j) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) {
      const double e = v[c] - codebook[static_cast<std::size_t>(j) * d + c];
      s += e * e;
    }
    if (s < best_d) {
      best_d = s;
      best = j;
    }
  }
  return best;
}

Quantized quantize(const Tensor& z, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) < 1) throw ValidationError("codebook must be a non-empty [K, D] matrix");
  if (z.rank() < 1 || z.dim(0) != codebook.dim(1))
    throw ValidationError("quantize: latent has " + std::to_string(z.rank() ? z.dim(0) : 0) +
                          " channels but codebook rows have " + std::to_string(codebook.dim(1)));
  const int d = z.dim(0);
  const std::size_t n = z.size() / d;
  const Tensor rows = rows_of(z);
  Quantized q{Tensor(z.shape()), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const int j = nearest_row(rows.data() + i * d, codebook);
    q.indices[i] = j;
    for (int c = 0; c < d; ++c) q.zq[c * n + i] = codebook[static_cast<std::size_t>(j) * d + c];
  }
  return q;
}

VqVae::VqVae(const Architecture& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  nn::Initializer init(seed);
  const auto [w0, w1, w2] = arch_.widths;
  const int d = arch_.latent_channels;
  auto& ps = params_;
  enc_.conv_in = nn::Conv3d::cube(ps, "encoder.conv_in", 1, w0, 3, 1, init);
  enc_.down1 = nn::Conv3d::cube(ps, "encoder.down1", w0, w1, 3, 2, init);
  enc_.res1 = nn::ResBlock::make(ps, "encoder.res1", w1, w1, 0, init);
  enc_.down2 = nn::Conv3d::cube(ps, "encoder.down2", w1, w2, 3, 2, init);
  enc_.res2 = nn::ResBlock::make(ps, "encoder.res2", w2, w2, 0, init);
  enc_.norm_out = nn::GroupNorm::make(ps, "encoder.norm_out", w2);
  enc_.conv_out = nn::Conv3d::cube(ps, "encoder.conv_out", w2, d, 1, 1, init);

  dec_.conv_in = nn::Conv3d::cube(ps, "decoder.conv_in", d, w2, 3, 1, init);
  dec_.res2 = nn::ResBlock::make(ps, "decoder.res2", w2, w2, 0, init);
  dec_.up2 = nn::Conv3d::cube(ps, "decoder.up2", w2, w1, 3, 1, init);
  dec_.res1 = nn::ResBlock::make(ps, "decoder.res1", w1, w1, 0, init);
  dec_.up1 = nn::Conv3d::cube(ps, "decoder.up1", w1, w0, 3, 1, init);
  dec_.norm_out = nn::GroupNorm::make(ps, "decoder.norm_out", w0);
  dec_.conv_out = nn::Conv3d::cube(ps, "decoder.conv_out", w0, 1, 3, 1, init);

  codebook_ = ps.add("codebook", init.uniform({arch_.codebook_size, d}, 1.0));
}

Var VqVae::encode(const Var& x) const {
  const int s = arch_.resolution;
  if (x.shape() != Shape{1, s, s, s})
    throw ValidationError("encode: expected input " + shape_str({1, s, s, s}) + ", got " + shape_str(x.shape()));
  Var h = enc_.conv_in(x);
  h = enc_.res1(enc_.down1(ag::silu(h)));
  h = enc_.res2(enc_.down2(h));
  return enc_.conv_out(ag::silu(enc_.norm_out(h)));
}

Var VqVae::decode(const Var& zq) const {
  if (zq.shape() != arch_.latent_shape())
    throw ValidationError("decode: expected latent " + shape_str(arch_.latent_shape()) + ", got " +
                          shape_str(zq.shape()));
  Var h = dec_.res2(dec_.conv_in(zq));
  h = dec_.res1(dec_.up2(ag::upsample_nearest(h, {2, 2, 2})));
  h = dec_.up1(ag::upsample_nearest(h, {2, 2, 2}));
  h = dec_.conv_out(ag::silu(dec_.norm_out(h)));
  return ag::scale(ag::tanh(h), arch_.thresh);
}

Tensor VqVae::encode(const TsdfGrid& grid) const {
  if (grid.resolution() != arch_.resolution)
    throw ValidationError("encode: grid has S=" + std::to_string(grid.resolution()) + ", model expects S=" +
                          std::to_string(arch_.resolution));
  ag::NoGradGuard guard;
  Tensor x = grid.normalized();
  x *= grid.thresh() / arch_.thresh;  // keep the model's own normalization if thresholds differ
  return encode(ag::constant(std::move(x))).value();
}

TsdfGrid VqVae::decode(const Tensor& zq) const {
  ag::NoGradGuard guard;
  return TsdfGrid::from_tensor(decode(ag::constant(zq)).value(), arch_.thresh);
}

TsdfGrid VqVae::reconstruct(const TsdfGrid& grid) const { return decode(quantize(encode(grid)).zq); }

Discriminator::Discriminator(int width, std::uint64_t seed) {
  if (width < 1) throw ValidationError("discriminator width must be positive");
  nn::Initializer init(seed);
  const int widths[] = {3, width, 2 * width, 4 * width};
  for (int l = 0; l < 3; ++l)
    layers_.push_back(nn::Conv3d::make(params_, "disc.conv" + std::to_string(l), widths[l], widths[l + 1], {1, 4, 4},
                                       {1, 2, 2}, {0, 1, 1}, init));
  layers_.push_back(nn::Conv3d::make(params_, "disc.out", widths[3], 1, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, init));
}

Var Discriminator::logits(const Var& normals) const {
  if (normals.shape().size() != 4 || normals.shape()[0] != 3 || normals.shape()[1] != 1)
    throw ValidationError("discriminator expects [3, 1, H, W] normals, got " + shape_str(normals.shape()));
  Var h = normals;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) h = ag::silu(layers_[l](h));
  return layers_.back()(h);
}

Tensor normals_tensor(const render::RenderResult& img) {
  const int w = img.normals.width, h = img.normals.height;
  return Tensor({3, 1, h, w}, img.normals.normals);
}

ViewTarget make_view_target(const TsdfGrid& x, const CameraPose& pose) { return {pose, render::render(x, pose)}; }

Var render_loss(const Var& rendered, const std::vector<std::uint8_t>& hit, const render::RenderResult& target,
                double thresh) {
  const int w = target.depth.width, h = target.depth.height;
  const std::size_t np = static_cast<std::size_t>(w) * h;
  if (rendered.shape() != Shape{4, 1, h, w} || hit.size() != np)
    throw ValidationError("render_loss: rendered image " + shape_str(rendered.shape()) + " does not match target");
  Tensor tgt({4, 1, h, w});
  Tensor mask({4, 1, h, w});
  std::size_t count = 0;
  for (std::size_t p = 0; p < np; ++p) {
    if (!(hit[p] && target.depth.hit[p])) continue;
    ++count;
    tgt[p] = target.depth.depth[p];
    mask[p] = 1.0 / thresh;
    for (int c = 0; c < 3; ++c) {
      tgt[(c + 1) * np + p] = target.normals.normals[c * np + p];
      mask[(c + 1) * np + p] = 1.0;
    }
  }
  if (count == 0) return ag::constant(Tensor({1}, 0.0));
  const Var diff = ag::mul(ag::abs(ag::sub(rendered, ag::constant(std::move(tgt)))), ag::constant(std::move(mask)));
  return ag::scale(ag::sum(diff), 1.0 / static_cast<double>(count));
}

Var discriminator_loss(const Discriminator& disc, const Var& real_normals, const Var& fake_normals) {
  const Var real = ag::mean(ag::log_sigmoid(disc.logits(real_normals)));
  const Var fake = ag::mean(ag::log_sigmoid(ag::scale(disc.logits(fake_normals), -1.0)));
  return ag::scale(ag::add(real, fake), -1.0);
}

LossGraph vqvae_loss(const VqVae& model, const TsdfGrid& x, std::span<const ViewTarget> views, const LossWeights& w,
                     const Discriminator* disc, const FrozenQuantization* frozen) {
  w.validate();
  const Architecture& arch = model.arch();
  if (x.resolution() != arch.resolution)
    throw ValidationError("vqvae_loss: grid has S=" + std::to_string(x.resolution()) + ", model expects S=" +
                          std::to_string(arch.resolution));
  if (w.gamma_r > 0 && views.empty()) throw ValidationError("vqvae_loss: gamma_R > 0 needs at least one view");
  if (w.gamma_a > 0 && !disc) throw ValidationError("vqvae_loss: gamma_A > 0 needs a discriminator");
  if (w.gamma_a > 0 && views.empty()) throw ValidationError("vqvae_loss: gamma_A > 0 needs at least one view");

  LossGraph g;
  const Var xn = ag::constant(x.normalized() * (x.thresh() / arch.thresh));
  const Var z = model.encode(xn);
  const Var zr = nn::flatten_spatial(z);  // [N, D]
  const Tensor& zv = zr.value();
  const Var book = model.codebook();

  if (frozen) {
    g.snapshot = *frozen;
  } else {
    g.snapshot.indices.resize(zv.dim(0));
    for (int i = 0; i < zv.dim(0); ++i) g.snapshot.indices[i] = nearest_row(zv.data() + i * zv.dim(1), book.value());
    g.snapshot.z = zv;
    g.snapshot.q = gather(book.value(), g.snapshot.indices);
  }
  const FrozenQuantization& fq = g.snapshot;
  if (fq.indices.size() != static_cast<std::size_t>(zv.dim(0)) || !fq.z.same_shape(zv) || !fq.q.same_shape(zv))
    throw ValidationError("vqvae_loss: frozen quantization does not match the latent extents");
  g.indices = fq.indices;
  g.z_rows = zv;

  // Straight-through: forward value is the selected rows, gradient passes to z unchanged.
  const Var zq_rows = ag::add(zr, ag::constant(fq.q - fq.z));
  const Var zq = nn::unflatten_spatial(zq_rows, z.shape());
  g.recon = model.decode(zq);

  const Var l_r = mean_abs_diff(ag::scale(g.recon, 1.0 / arch.thresh), xn);
  // Both the per-term weights and the weights of the combined objective are applied.
  const Var l_c = ag::scale(ag::mean(ag::square(ag::sub(zr, ag::constant(fq.q)))), w.beta);
  const Var l_cb = ag::scale(ag::mean(ag::square(ag::sub(ag::constant(fq.z), ag::gather_rows(book, fq.indices)))),
                             1.0 - w.beta);
  Var total = ag::add(l_r, ag::add(ag::scale(l_c, w.beta), ag::scale(l_cb, 1.0 - w.beta)));
  g.terms.rec = l_r.value()[0];
  g.terms.commit = w.beta * l_c.value()[0];
  g.terms.codebook = (1.0 - w.beta) * l_cb.value()[0];

  if (w.gamma_r > 0 || w.gamma_a > 0) {
    Var r2d, adv;
    for (const ViewTarget& v : views) {
      std::vector<std::uint8_t> hit;
      const Var img = render::render_var(g.recon, v.pose, &hit);
      const Var normals = ag::slice_channels(img, 1, 4);
      g.fake_normals.push_back(normals);
      if (w.gamma_r > 0) {
        const Var l = render_loss(img, hit, v.image, arch.thresh);
        r2d = r2d ? ag::add(r2d, l) : l;
      }
      if (w.gamma_a > 0) {
        const Var l = ag::mean(ag::log_sigmoid(ag::scale(disc->logits(normals), -1.0)));
        adv = adv ? ag::add(adv, l) : l;
      }
    }
    const double inv_views = 1.0 / static_cast<double>(views.size());
    if (r2d) {
      const Var term = ag::scale(r2d, w.gamma_r * inv_views);
      g.terms.rec2d = term.value()[0];
      total = ag::add(total, term);
    }
    if (adv) {
      const Var term = ag::scale(adv, w.gamma_a * inv_views);
      g.terms.adv = term.value()[0];
      total = ag::add(total, term);
    }
  }
  g.total = total;
  g.terms.total = total.value()[0];
  return g;
}

int codebook_usage(const VqVae& model, std::span<const TsdfGrid> corpus) {
  std::set<int> used;
  for (const TsdfGrid& x : corpus)
    for (int i : model.quantize(model.encode(x)).indices) used.insert(i);
  return static_cast<int>(used.size());
}

void train(VqVae& model, Discriminator& disc, std::span<const TsdfGrid> corpus, const TrainOptions& opt) {
  if (corpus.empty()) throw ValidationError("train_vqvae needs at least one training grid");
  if (opt.steps < 0 || opt.batch_size < 1) throw ValidationError("train_vqvae: steps >= 0 and batch size >= 1 required");
  opt.weights.validate();
  const Architecture& arch = model.arch();
  const bool use_views = opt.weights.gamma_r > 0 || opt.weights.gamma_a > 0;

  std::mt19937_64 rng(opt.seed);
  nn::Adam adam(model.params(), {.lr = opt.lr});
  nn::Adam disc_adam(disc.params(), {.lr = opt.disc_lr, .beta1 = 0.5});

  const std::vector<CameraPose> fixed = fixed_views(arch.resolution, opt.render_size);
  std::vector<std::vector<ViewTarget>> fixed_targets(corpus.size());
  std::vector<long> last_used(arch.codebook_size, 0);

  TrainLog acc;
  long acc_steps = 0;
  for (long step = 1; step <= opt.steps; ++step) {
    model.params().zero_grad();
    std::vector<std::pair<Tensor, Var>> fakes;  // (real normals, fake normals) pairs for the discriminator
    std::vector<Tensor> z_pool;
    std::set<int> used_now;
    LossTerms terms;
    for (int b = 0; b < opt.batch_size; ++b) {
      const std::size_t si = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
      const TsdfGrid& x = corpus[si];
      std::vector<ViewTarget> views;
      if (use_views) {
        if (fixed_targets[si].empty())
          for (const CameraPose& p : fixed) fixed_targets[si].push_back(make_view_target(x, p));
        views.push_back(fixed_targets[si][step % fixed.size()]);
        const double az = std::uniform_real_distribution<double>(0.0, 360.0)(rng);
        views.push_back(make_view_target(x, orbit_pose(arch.resolution, az, 20.0, 1.6, opt.render_size)));
      }
      LossGraph g = vqvae_loss(model, x, views, opt.weights, opt.weights.gamma_a > 0 ? &disc : nullptr);
      if (!std::isfinite(g.terms.total))
        throw NumericError("VQ-VAE loss became NaN at step " + std::to_string(step), step);
      ag::backward(g.total, 1.0 / opt.batch_size);
      terms.total += g.terms.total / opt.batch_size;
      terms.rec += g.terms.rec / opt.batch_size;
      terms.commit += g.terms.commit / opt.batch_size;
      terms.codebook += g.terms.codebook / opt.batch_size;
      terms.rec2d += g.terms.rec2d / opt.batch_size;
      terms.adv += g.terms.adv / opt.batch_size;
      used_now.insert(g.indices.begin(), g.indices.end());
      z_pool.push_back(g.z_rows);
      if (opt.weights.gamma_a > 0)
        for (std::size_t v = 0; v < views.size(); ++v)
          fakes.emplace_back(normals_tensor(views[v].image), ag::detach(g.fake_normals[v]));
    }
    adam.step(model.params());

    double disc_loss = 0.0;
    if (!fakes.empty()) {
      disc.params().zero_grad();
      for (const auto& [real, fake] : fakes) {
        const Var l = discriminator_loss(disc, ag::constant(real), fake);
        disc_loss += l.value()[0] / static_cast<double>(fakes.size());
        ag::backward(l, 1.0 / static_cast<double>(fakes.size()));
      }
      disc_adam.step(disc.params());
    }

    // Codebook upkeep: rows unused for dead_code_steps move onto encoder outputs.
    for (int k : used_now) last_used[k] = step;
    int reseeded = 0;
    if (opt.dead_code_steps > 0) {
      Tensor& book = model.codebook().mutable_value();
      const int d = arch.latent_channels;
      for (int k = 0; k < arch.codebook_size; ++k) {
        if (step - last_used[k] < opt.dead_code_steps) continue;
        const Tensor& pool = z_pool[std::uniform_int_distribution<std::size_t>(0, z_pool.size() - 1)(rng)];
        const int row = std::uniform_int_distribution<int>(0, pool.dim(0) - 1)(rng);
        for (int c = 0; c < d; ++c) book[static_cast<std::size_t>(k) * d + c] = pool[static_cast<std::size_t>(row) * d + c];
        last_used[k] = step;
        ++reseeded;
      }
    }

    acc.terms.total += terms.total;
    acc.terms.rec += terms.rec;
    acc.terms.commit += terms.commit;
    acc.terms.codebook += terms.codebook;
    acc.terms.rec2d += terms.rec2d;
    acc.terms.adv += terms.adv;
    acc.disc_loss += disc_loss;
    acc.codes_reseeded += reseeded;
    ++acc_steps;
    if ((opt.log_every > 0 && step % opt.log_every == 0) || step == opt.steps) {
      const double n = static_cast<double>(acc_steps);
      acc.step = step;
      acc.terms.total /= n;
      acc.terms.rec /= n;
      acc.terms.commit /= n;
      acc.terms.codebook /= n;
      acc.terms.rec2d /= n;
      acc.terms.adv /= n;
      acc.disc_loss /= n;
      acc.codes_used = static_cast<int>(used_now.size());
      if (opt.on_log) opt.on_log(acc);
      acc = TrainLog{};
      acc_steps = 0;
    }
    if (opt.checkpoint_every > 0 && step % opt.checkpoint_every == 0 && opt.on_checkpoint) opt.on_checkpoint(step);
  }
}

}  // namespace scdiff::vqvae
