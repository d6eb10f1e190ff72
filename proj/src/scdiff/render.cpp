#include "scdiff/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

#include "scdiff/errors.hpp"

namespace scdiff::render {
namespace {

// Trilinear stencil: 8 voxel indices, their weights, and d(weight)/d(point).
struct Stencil {
  std::array<std::size_t, 8> idx{};
  std::array<double, 8> w{};
  std::array<Vec3, 8> dw{};

  double eval(std::span<const double> v) const {
    double s = 0.0;
    for (int c = 0; c < 8; ++c) s += w[c] * v[idx[c]];
    return s;
  }
  Vec3 gradient(std::span<const double> v) const {
    Vec3 g = Vec3::Zero();
    for (int c = 0; c < 8; ++c) g += dw[c] * v[idx[c]];
    return g;
  }
};

Stencil make_stencil(int s, const Vec3& p) {
  Stencil st;
  std::array<int, 3> base{};
  std::array<double, 3> frac{};
  std::array<double, 3> dfrac{};
  for (int a = 0; a < 3; ++a) {
    double q = p[a] - 0.5;
    dfrac[a] = 1.0;
    if (q <= 0.0) {
      q = 0.0;
      dfrac[a] = 0.0;
    } else if (q >= s - 1) {
      q = s - 1;
      dfrac[a] = 0.0;
    }
    base[a] = std::min(static_cast<int>(std::floor(q)), s - 2);
    frac[a] = q - base[a];
  }
  for (int c = 0; c < 8; ++c) {
    const int ox = c & 1, oy = (c >> 1) & 1, oz = (c >> 2) & 1;
    const double wx = ox ? frac[0] : 1 - frac[0];
    const double wy = oy ? frac[1] : 1 - frac[1];
    const double wz = oz ? frac[2] : 1 - frac[2];
    const double sx = (ox ? 1.0 : -1.0) * dfrac[0];
    const double sy = (oy ? 1.0 : -1.0) * dfrac[1];
    const double sz = (oz ? 1.0 : -1.0) * dfrac[2];
    st.idx[c] = static_cast<std::size_t>(base[0] + ox) +
                static_cast<std::size_t>(s) * ((base[1] + oy) + static_cast<std::size_t>(s) * (base[2] + oz));
    st.w[c] = wx * wy * wz;
    st.dw[c] = Vec3(sx * wy * wz, wx * sy * wz, wx * wy * sz);
  }
  return st;
}

struct Hit {
  std::size_t pixel = 0;
  Vec3 dir;
  Vec3 point;
  Stencil before, after;  // bracketing samples
  double v0 = 0, v1 = 0;
  Vec3 gradient;          // unnormalized central-difference gradient
};

std::optional<std::pair<double, double>> lattice_interval(int s, const Ray& ray) {
  double tn = 0.0, tf = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = 0.5, hi = s - 0.5;
    if (std::abs(ray.dir[a]) < 1e-15) {
      if (ray.origin[a] < lo || ray.origin[a] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - ray.origin[a]) / ray.dir[a];
    double t1 = (hi - ray.origin[a]) / ray.dir[a];
    if (t0 > t1) std::swap(t0, t1);
    tn = std::max(tn, t0);
    tf = std::min(tf, t1);
  }
  if (tn > tf) return std::nullopt;
  return std::make_pair(tn, tf);
}

Vec3 central_gradient(FieldView f, const Vec3& p) {
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = kNormalStencil;
    g[a] = (make_stencil(f.resolution, p + e).eval(f.values) - make_stencil(f.resolution, p - e).eval(f.values)) /
           (2 * kNormalStencil);
  }
  return g;
}

std::optional<Hit> cast_ray(FieldView f, const Ray& ray) {
  const auto interval = lattice_interval(f.resolution, ray);
  if (!interval) return std::nullopt;
  const auto [tn, tf] = *interval;
  std::optional<Stencil> prev;
  double prev_v = 0.0;
  for (int k = 0;; ++k) {
    const double t = tn + k * kMarchStep;
    if (t > tf) break;
    Stencil st = make_stencil(f.resolution, ray.origin + t * ray.dir);
    const double v = st.eval(f.values);
    if (prev && prev_v > 0.0 && v <= 0.0) {
      Hit h;
      h.dir = ray.dir;
      h.before = *prev;
      h.after = st;
      h.v0 = prev_v;
      h.v1 = v;
      const double t_hit = (t - kMarchStep) + kMarchStep * prev_v / (prev_v - v);
      h.point = ray.origin + t_hit * ray.dir;
      h.gradient = central_gradient(f, h.point);
      if (h.gradient.norm() < 1e-12) return std::nullopt;
      return h;
    }
    prev = st;
    prev_v = v;
  }
  return std::nullopt;
}

struct CastResult {
  RenderResult images;
  std::vector<Hit> hits;
};

CastResult cast_all(FieldView f, const CameraPose& pose) {
  pose.validate();
  if (f.values.size() != static_cast<std::size_t>(f.resolution) * f.resolution * f.resolution)
    throw ValidationError("render: field extent does not match S^3");
  if (f.resolution < 2) throw ValidationError("render: grid must be at least 2 voxels wide");
  const int w = pose.intr.width, h = pose.intr.height;
  const std::size_t np = static_cast<std::size_t>(w) * h;
  CastResult r;
  r.images.depth = {w, h, std::vector<double>(np, kNoHit), std::vector<std::uint8_t>(np, 0)};
  r.images.normals = {w, h, std::vector<double>(3 * np, 0.0), std::vector<std::uint8_t>(np, 0)};
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const Ray ray = pose.pixel_ray(u, v);
      auto hit = cast_ray(f, ray);
      if (!hit) continue;
      const std::size_t px = static_cast<std::size_t>(v) * w + u;
      hit->pixel = px;
      r.images.depth.depth[px] = (hit->point - ray.origin).norm();
      r.images.depth.hit[px] = 1;
      const Vec3 n = hit->gradient.normalized();
      for (int c = 0; c < 3; ++c) r.images.normals.normals[c * np + px] = n[c];
      r.images.normals.hit[px] = 1;
      r.hits.push_back(*hit);
    }
  return r;
}

void backward_hits(FieldView f, const std::vector<Hit>& hits, std::size_t np, std::span<const double> d_depth,
                   std::span<const double> d_normals, std::span<double> grad) {
  const double two_h = 2 * kNormalStencil;
  for (const Hit& hit : hits) {
    const double gd = d_depth[hit.pixel];
    const Vec3 gn(d_normals[hit.pixel], d_normals[np + hit.pixel], d_normals[2 * np + hit.pixel]);
    if (gd == 0.0 && gn.isZero()) continue;

    // Normal n = g / |g|; g_a is a central difference of the trilinear field.
    const double gnorm = hit.gradient.norm();
    const Vec3 n = hit.gradient / gnorm;
    const Vec3 dg = (gn - n * n.dot(gn)) / gnorm;
    Vec3 dpoint = Vec3::Zero();
    for (int a = 0; a < 3; ++a) {
      if (dg[a] == 0.0) continue;
      Vec3 e = Vec3::Zero();
      e[a] = kNormalStencil;
      const Stencil plus = make_stencil(f.resolution, hit.point + e);
      const Stencil minus = make_stencil(f.resolution, hit.point - e);
      for (int c = 0; c < 8; ++c) {
        grad[plus.idx[c]] += dg[a] * plus.w[c] / two_h;
        grad[minus.idx[c]] -= dg[a] * minus.w[c] / two_h;
      }
      dpoint += dg[a] * (plus.gradient(f.values) - minus.gradient(f.values)) / two_h;
    }

    // Hit distance t* = t0 + step * v0 / (v0 - v1); the point moves along the ray.
    const double dt = gd + dpoint.dot(hit.dir);
    if (dt == 0.0) continue;
    const double denom = (hit.v0 - hit.v1) * (hit.v0 - hit.v1);
    const double dv0 = dt * kMarchStep * (-hit.v1) / denom;
    const double dv1 = dt * kMarchStep * hit.v0 / denom;
    for (int c = 0; c < 8; ++c) {
      grad[hit.before.idx[c]] += dv0 * hit.before.w[c];
      grad[hit.after.idx[c]] += dv1 * hit.after.w[c];
    }
  }
}

std::vector<double> to_double(const TsdfGrid& grid) { return {grid.values().begin(), grid.values().end()}; }

}  // namespace

double sample_trilinear(FieldView field, const Vec3& p) { return make_stencil(field.resolution, p).eval(field.values); }

RenderResult render(FieldView field, const CameraPose& pose) { return cast_all(field, pose).images; }

RenderResult render(const TsdfGrid& grid, const CameraPose& pose) {
  const auto v = to_double(grid);
  return render(FieldView{grid.resolution(), v}, pose);
}

RenderGradient render_backward(FieldView field, const CameraPose& pose, std::span<const double> d_depth,
                               std::span<const double> d_normals) {
  const std::size_t np = static_cast<std::size_t>(pose.intr.width) * pose.intr.height;
  if (d_depth.size() != np || d_normals.size() != 3 * np)
    throw ValidationError("render_backward: upstream images have " + std::to_string(d_depth.size()) + "/" +
                          std::to_string(d_normals.size()) + " entries, expected " + std::to_string(np) + "/" +
                          std::to_string(3 * np));
  const CastResult cast = cast_all(field, pose);
  RenderGradient g{field.resolution, std::vector<double>(field.values.size(), 0.0)};
  backward_hits(field, cast.hits, np, d_depth, d_normals, g.grad);
  return g;
}

RenderGradient render_backward(const TsdfGrid& grid, const CameraPose& pose, std::span<const double> d_depth,
                               std::span<const double> d_normals) {
  const auto v = to_double(grid);
  return render_backward(FieldView{grid.resolution(), v}, pose, d_depth, d_normals);
}

ag::Var render_var(const ag::Var& grid, const CameraPose& pose, std::vector<std::uint8_t>* hit_out) {
  const Shape& s = grid.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != s[2] || s[2] != s[3])
    throw ValidationError("render_var expects a [1,S,S,S] grid, got " + shape_str(s));
  const int res = s[1];
  CastResult cast = cast_all(FieldView{res, grid.value().values()}, pose);
  const int w = pose.intr.width, h = pose.intr.height;
  const std::size_t np = static_cast<std::size_t>(w) * h;
  Tensor out({4, 1, h, w});
  std::copy(cast.images.depth.depth.begin(), cast.images.depth.depth.end(), out.data());
  std::copy(cast.images.normals.normals.begin(), cast.images.normals.normals.end(), out.data() + np);
  if (hit_out) *hit_out = cast.images.depth.hit;

  auto node = std::make_shared<ag::Node>();
  node->value = std::move(out);
  if (ag::grad_enabled() && grid.requires_grad()) {
    node->requires_grad = true;
    node->inputs = {grid};
    node->backward = [hits = std::move(cast.hits), np, res](ag::Node& self) {
      ag::Node* in = self.inputs[0].node();
      const std::span<const double> up = self.grad.values();
      backward_hits(FieldView{res, in->value.values()}, hits, np, up.subspan(0, np), up.subspan(np, 3 * np),
                    in->grad_buffer().values());
    };
  }
  return ag::Var(std::move(node));
}

}  // namespace scdiff::render
