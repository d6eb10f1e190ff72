#pragma once

#include <span>
#include <vector>

#include "scdiff/autograd.hpp"
#include "scdiff/grid.hpp"

namespace scdiff::render {

/// Ray-march step in voxels.
inline constexpr double kMarchStep = 0.5;
/// Half-width of the central-difference stencil used for normals (voxels).
inline constexpr double kNormalStencil = 0.5;
/// Depth written at pixels whose ray found no surface.
inline constexpr double kNoHit = 0.0;

struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> depth;        // world (voxel) units, kNoHit where !hit
  std::vector<std::uint8_t> hit;
};

/// Channel-major normals: normals[c * W * H + v * W + u].
struct NormalImage {
  int width = 0;
  int height = 0;
  std::vector<double> normals;
  std::vector<std::uint8_t> hit;
};

struct RenderResult {
  DepthImage depth;
  NormalImage normals;
};

/// Per-voxel d(loss)/d(value), x-fastest like TsdfGrid.
struct RenderGradient {
  int resolution = 0;
  std::vector<double> grad;
};

/// Scalar field sampled by the caster: S^3 x-fastest values in voxel units.
struct FieldView {
  int resolution;
  std::span<const double> values;
};

RenderResult render(const TsdfGrid& grid, const CameraPose& pose);
RenderResult render(FieldView field, const CameraPose& pose);

/// Upstream images follow the render layout: one depth value per pixel and
/// channel-major normals. Non-hit pixels are ignored.
RenderGradient render_backward(const TsdfGrid& grid, const CameraPose& pose, std::span<const double> d_depth,
                               std::span<const double> d_normals);
RenderGradient render_backward(FieldView field, const CameraPose& pose, std::span<const double> d_depth,
                               std::span<const double> d_normals);

/// Tape op: grid [1, S, S, S] in voxel units -> [4, 1, H, W] holding depth in
/// channel 0 and normals in channels 1..3. `hit_out` receives the hit mask.
ag::Var render_var(const ag::Var& grid, const CameraPose& pose, std::vector<std::uint8_t>* hit_out = nullptr);

/// Trilinear interpolation of voxel-center samples at world point p; points
/// outside the center lattice clamp to its boundary.
double sample_trilinear(FieldView field, const Vec3& p);

}  // namespace scdiff::render
