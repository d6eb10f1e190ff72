#include <algorithm>
#include <cmath>
#include <limits>

#include "scdiff/errors.hpp"
#include "scdiff/grid.hpp"
#include "scdiff/render.hpp"

namespace scdiff {
namespace {

// Entry/exit of the ray against the axis-aligned box [lo, hi].
bool slab(const Ray& ray, const Vec3& lo, const Vec3& hi, double& t0, double& t1) {
  t0 = -std::numeric_limits<double>::infinity();
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (ray.dir[a] == 0.0) {
      if (ray.origin[a] < lo[a] || ray.origin[a] > hi[a]) return false;
      continue;
    }
    double n = (lo[a] - ray.origin[a]) / ray.dir[a];
    double f = (hi[a] - ray.origin[a]) / ray.dir[a];
    if (n > f) std::swap(n, f);
    t0 = std::max(t0, n);
    t1 = std::min(t1, f);
  }
  return t0 <= t1;
}

struct Accumulator {
  std::vector<double> sum;
  std::vector<std::uint32_t> count;
};

// Visits voxels whose cube the ray enters at some t in [0, t_end), in order.
template <class Visit>
void traverse(int s, const Ray& ray, double t_end, Visit visit) {
  double t_in, t_out;
  if (!slab(ray, Vec3::Zero(), Vec3::Constant(s), t_in, t_out)) return;
  double t = std::max(t_in, 0.0);
  const double t_stop = std::min(t_out, t_end);
  if (!(t < t_stop)) return;

  const Vec3 p = ray.origin + t * ray.dir;
  std::array<int, 3> cell{}, step{};
  std::array<double, 3> t_max{}, t_delta{};
  for (int a = 0; a < 3; ++a) {
    cell[a] = std::clamp(static_cast<int>(std::floor(p[a])), 0, s - 1);
    if (ray.dir[a] > 0) {
      step[a] = 1;
      t_max[a] = (cell[a] + 1 - ray.origin[a]) / ray.dir[a];
      t_delta[a] = 1.0 / ray.dir[a];
    } else if (ray.dir[a] < 0) {
      step[a] = -1;
      t_max[a] = (cell[a] - ray.origin[a]) / ray.dir[a];
      t_delta[a] = -1.0 / ray.dir[a];
    } else {
      step[a] = 0;
      t_max[a] = t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }
  while (t < t_stop) {
    visit(cell[0], cell[1], cell[2]);
    // Axes crossed at the same parameter advance together, so cubes that the
    // ray only touches along an edge or corner are not visited.
    t = std::min({t_max[0], t_max[1], t_max[2]});
    bool inside = true;
    for (int a = 0; a < 3; ++a)
      if (t_max[a] == t) {
        cell[a] += step[a];
        inside = inside && cell[a] >= 0 && cell[a] < s;
        t_max[a] += t_delta[a];
      }
    if (!inside) break;
  }
}

void fuse_view(const TsdfGrid& full, const CameraPose& pose, Accumulator& acc) {
  const render::RenderResult img = render::render(full, pose);
  const int s = full.resolution();
  const double thresh = full.thresh();
  for (int v = 0; v < pose.intr.height; ++v)
    for (int u = 0; u < pose.intr.width; ++u) {
      const std::size_t px = static_cast<std::size_t>(v) * pose.intr.width + u;
      const Ray ray = pose.pixel_ray(u, v);
      const bool hit = img.depth.hit[px] != 0;
      const double depth = img.depth.depth[px];
      const double t_end = hit ? depth + thresh : std::numeric_limits<double>::infinity();
      traverse(s, ray, t_end, [&](int i, int j, int k) {
        const std::size_t idx = full.index(i, j, k);
        double value = thresh;
        if (hit) value = std::clamp(depth - (full.voxel_center(i, j, k) - ray.origin).dot(ray.dir), -thresh, thresh);
        acc.sum[idx] += value;
        acc.count[idx] += 1;
      });
    }
}

}  // namespace

TsdfGrid simulate_partial_scan(const TsdfGrid& full, std::span<const CameraPose> poses) {
  if (full.has_mask()) throw ValidationError("simulate_partial_scan expects a complete grid without a known_mask");
  const std::size_t n = full.voxel_count();
  Accumulator acc{std::vector<double>(n, 0.0), std::vector<std::uint32_t>(n, 0)};
  for (const CameraPose& pose : poses) fuse_view(full, pose, acc);
  std::vector<float> values(n, 0.0f);
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (acc.count[i] > 0) {
      values[i] = static_cast<float>(acc.sum[i] / acc.count[i]);
      mask[i] = 1;
    }
  return TsdfGrid(full.resolution(), full.thresh(), std::move(values), std::move(mask));
}

TsdfGrid simulate_partial_scan(const TsdfGrid& full, const CameraPose& pose) {
  return simulate_partial_scan(full, std::span<const CameraPose>(&pose, 1));
}

}  // namespace scdiff
