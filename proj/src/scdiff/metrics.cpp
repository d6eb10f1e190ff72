#include "scdiff/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "scdiff/errors.hpp"
#include "scdiff/io.hpp"

namespace scdiff::metrics {
namespace {

void require_same_extent(const TsdfGrid& a, const TsdfGrid& b, const char* what) {
  if (a.resolution() != b.resolution())
    throw ValidationError(std::string(what) + ": extent mismatch S=" + std::to_string(a.resolution()) + " vs S=" +
                          std::to_string(b.resolution()));
}

// Unit cells over the bounding box of a point set; exact nearest neighbour by
// growing rings of cells around the query.
class PointIndex {
 public:
  explicit PointIndex(const std::vector<Vec3>& pts) : pts_(pts) {
    lo_ = hi_ = pts.front();
    for (const Vec3& p : pts) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<int>(std::floor(hi_[a] - lo_[a])) + 1;
    start_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2] + 1, 0);
    for (const Vec3& p : pts) ++start_[cell_of(p) + 1];
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    order_.resize(pts.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < pts.size(); ++i) order_[fill[cell_of(pts[i])]++] = i;
  }

  double nearest_squared(const Vec3& q) const {
    std::array<int, 3> c;
    for (int a = 0; a < 3; ++a) c[a] = std::clamp(static_cast<int>(std::floor(q[a] - lo_[a])), 0, dims_[a] - 1);
    const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r <= max_ring; ++r) {
      for (int z = c[2] - r; z <= c[2] + r; ++z)
        for (int y = c[1] - r; y <= c[1] + r; ++y)
          for (int x = c[0] - r; x <= c[0] + r; ++x) {
            // Shell of Chebyshev radius r only.
            if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
            if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) continue;
            const std::size_t cell = x + static_cast<std::size_t>(dims_[0]) * (y + static_cast<std::size_t>(dims_[1]) * z);
            for (std::size_t k = start_[cell]; k < start_[cell + 1]; ++k)
              best = std::min(best, (q - pts_[order_[k]]).squaredNorm());
          }
      // Cells beyond ring r are at least r away from the query.
      if (best <= static_cast<double>(r) * r) break;
    }
    return best;
  }

 private:
  std::size_t cell_of(const Vec3& p) const {
    std::array<int, 3> c;
    for (int a = 0; a < 3; ++a) c[a] = std::min(static_cast<int>(std::floor(p[a] - lo_[a])), dims_[a] - 1);
    return c[0] + static_cast<std::size_t>(dims_[0]) * (c[1] + static_cast<std::size_t>(dims_[1]) * c[2]);
  }

  const std::vector<Vec3>& pts_;
  Vec3 lo_, hi_;
  std::array<int, 3> dims_;
  std::vector<std::size_t> start_, order_;
};

}  // namespace

double l1_error(const TsdfGrid& pred, const TsdfGrid& gt) {
  require_same_extent(pred, gt, "l1_error");
  double sum = 0.0;
  std::size_t n = 0;
  const auto p = pred.values();
  const auto g = gt.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!pred.known(i) || !gt.known(i)) continue;
    sum += std::abs(static_cast<double>(p[i]) - static_cast<double>(g[i]));
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double iou(const TsdfGrid& pred, const TsdfGrid& gt, double iso) {
  require_same_extent(pred, gt, "iou");
  std::size_t inter = 0, uni = 0;
  const auto p = pred.values();
  const auto g = gt.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] < iso;
    const bool b = g[i] < iso;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<Vec3> sample_surface(const TsdfGrid& grid, std::size_t n, std::uint64_t seed) {
  const io::Mesh mesh = io::extract_surface(grid);
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Vec3& a = mesh.vertices[t[0]];
    total += 0.5 * (mesh.vertices[t[1]] - a).cross(mesh.vertices[t[2]] - a).norm();
    cumulative.push_back(total);
  }
  if (total <= 0.0) return {};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double r = u(rng) * total;
    const std::size_t i = std::min<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) -
                                                    cumulative.begin(),
                                                cumulative.size() - 1);
    const auto& t = mesh.triangles[i];
    // Uniform barycentric sample via the square-root map.
    const double s = std::sqrt(u(rng)), w = u(rng);
    pts.push_back((1 - s) * mesh.vertices[t[0]] + s * (1 - w) * mesh.vertices[t[1]] + s * w * mesh.vertices[t[2]]);
  }
  return pts;
}

double directed_chamfer(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  if (from.empty() || to.empty()) throw EmptySurfaceError("chamfer: empty point set");
  const PointIndex index(to);
  double sum = 0.0;
  for (const Vec3& a : from) sum += index.nearest_squared(a);
  return sum / static_cast<double>(from.size());
}

double chamfer(const TsdfGrid& pred, const TsdfGrid& gt, std::size_t n_points, std::uint64_t seed) {
  require_same_extent(pred, gt, "chamfer");
  if (n_points == 0) throw ValidationError("chamfer: n_points must be positive");
  const auto a = sample_surface(pred, n_points, seed);
  const auto b = sample_surface(gt, n_points, seed);
  if (a.empty() || b.empty())
    throw EmptySurfaceError(std::string("chamfer: empty surface (no zero crossing) in ") +
                            (a.empty() && b.empty() ? "both grids" : a.empty() ? "prediction" : "ground truth"));
  return directed_chamfer(a, b) + directed_chamfer(b, a);
}

ShapeScore score_shape(const std::string& name, const TsdfGrid& pred, const TsdfGrid& gt, std::size_t chamfer_points) {
  ShapeScore s;
  s.name = name;
  s.l1 = l1_error(pred, gt);
  s.l1_normalized = s.l1 / gt.thresh();
  s.iou = iou(pred, gt);
  try {
    s.chamfer = chamfer(pred, gt, chamfer_points);
  } catch (const EmptySurfaceError&) {
    s.chamfer = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

EvalReport summarize(std::vector<ShapeScore> shapes) {
  EvalReport r;
  r.shapes = std::move(shapes);
  r.aggregate.name = "mean";
  if (r.shapes.empty()) return r;
  std::size_t cd_count = 0;
  for (const ShapeScore& s : r.shapes) {
    r.aggregate.l1 += s.l1;
    r.aggregate.l1_normalized += s.l1_normalized;
    r.aggregate.iou += s.iou;
    if (std::isfinite(s.chamfer)) {
      r.aggregate.chamfer += s.chamfer;
      ++cd_count;
    }
  }
  const double n = static_cast<double>(r.shapes.size());
  r.aggregate.l1 /= n;
  r.aggregate.l1_normalized /= n;
  r.aggregate.iou /= n;
  r.aggregate.chamfer = cd_count ? r.aggregate.chamfer / static_cast<double>(cd_count)
                                 : std::numeric_limits<double>::quiet_NaN();
  return r;
}

}  // namespace scdiff::metrics
