#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scdiff/grid.hpp"

namespace scdiff::metrics {

/// Mean |pred - gt| in voxel units over all voxels; voxels unknown in either
/// grid's mask are skipped.
double l1_error(const TsdfGrid& pred, const TsdfGrid& gt);

/// |A ∩ B| / |A ∪ B| with occupancy = value < iso; 1 when both are empty.
double iou(const TsdfGrid& pred, const TsdfGrid& gt, double iso = 0.0);

/// n points drawn uniformly by area from the zero level set mesh
/// (io::extract_surface), in world (voxel) coordinates. Empty when the grid
/// has no surface.
std::vector<Vec3> sample_surface(const TsdfGrid& grid, std::size_t n, std::uint64_t seed);

/// Mean nearest-neighbour squared distance from `from` to `to`.
double directed_chamfer(const std::vector<Vec3>& from, const std::vector<Vec3>& to);

/// Sum of both directed squared-distance means between n_points surface
/// samples of each grid (same seed for both).
double chamfer(const TsdfGrid& pred, const TsdfGrid& gt, std::size_t n_points, std::uint64_t seed = 0);

struct ShapeScore {
  std::string name;
  double l1 = 0;
  double l1_normalized = 0;
  double iou = 0;
  double chamfer = 0;
};

struct EvalReport {
  std::vector<ShapeScore> shapes;
  ShapeScore aggregate;  // per-field mean over shapes
  std::size_t count() const { return shapes.size(); }
};

ShapeScore score_shape(const std::string& name, const TsdfGrid& pred, const TsdfGrid& gt, std::size_t chamfer_points);
EvalReport summarize(std::vector<ShapeScore> shapes);

}  // namespace scdiff::metrics
