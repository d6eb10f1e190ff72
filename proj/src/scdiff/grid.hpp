#pragma once

#include <Eigen/Geometry>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "scdiff/tensor.hpp"

namespace scdiff {

using Vec3 = Eigen::Vector3d;

/// Truncated-distance value used for the reference configuration (voxels).
inline constexpr double kDefaultTruncation = 3.0;

/// Dense S^3 truncated signed distance grid; negative inside, positive outside,
/// distances in voxel units. Voxel (i, j, k) has its center at world point
/// (i + 0.5, j + 0.5, k + 0.5); storage is x-fastest. Immutable once built.
class TsdfGrid {
 public:
  TsdfGrid(int resolution, double thresh, std::vector<float> values,
           std::optional<std::vector<std::uint8_t>> known_mask = std::nullopt);

  static TsdfGrid filled(int resolution, double thresh, float value);

  int resolution() const { return resolution_; }
  double thresh() const { return thresh_; }
  std::size_t voxel_count() const { return values_.size(); }

  std::span<const float> values() const { return values_; }
  float at(int i, int j, int k) const { return values_[index(i, j, k)]; }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(resolution_) * (j + static_cast<std::size_t>(resolution_) * k);
  }
  Vec3 voxel_center(int i, int j, int k) const { return {i + 0.5, j + 0.5, k + 0.5}; }

  bool has_mask() const { return mask_.has_value(); }
  std::span<const std::uint8_t> known_mask() const;
  bool known(std::size_t idx) const { return !mask_ || (*mask_)[idx] != 0; }
  std::size_t known_count() const;

  /// [1, S, S, S] tensor of values divided by thresh (the network input scale).
  Tensor normalized() const;
  /// [2, S, S, S] stack of (normalized value, mask) for partial scans.
  Tensor masked_input() const;
  /// Builds a grid from a [1, S, S, S] tensor in voxel units (clamped to thresh).
  static TsdfGrid from_tensor(const Tensor& t, double thresh);
  /// Same geometry with unknown voxels treated as empty space (+thresh).
  TsdfGrid with_unknown_as_empty() const;

  bool operator==(const TsdfGrid& other) const = default;

 private:
  int resolution_;
  double thresh_;
  std::vector<float> values_;
  std::optional<std::vector<std::uint8_t>> mask_;
};

struct Intrinsics {
  double focal = 1.0;  // pixels
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

/// Pinhole camera; image v grows along -up.
struct CameraPose {
  Vec3 position{0, 0, 1};
  Vec3 look_at{0, 0, 0};
  Vec3 up{0, 1, 0};
  Intrinsics intr;

  void validate() const;
  /// Ray through the center of pixel (u, v).
  Ray pixel_ray(int u, int v) const;
  Vec3 forward() const { return (look_at - position).normalized(); }
};

/// Camera on a circle around the volume center looking at it, with square
/// images and a field of view wide enough to contain the whole volume.
CameraPose orbit_pose(int resolution, double azimuth_deg, double elevation_deg, double radius_factor, int image_size,
                      double fov_deg = 60.0);

/// The fixed supervision views: azimuths 0/90/180/270 at the given elevation.
std::vector<CameraPose> fixed_views(int resolution, int image_size, double radius_factor = 1.6,
                                    double elevation_deg = 20.0);

enum class PrimitiveKind { Sphere, Box, Cylinder };
enum class Combine { Union, Subtract };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Combine op = Combine::Union;
  Vec3 center = Vec3::Zero();
  double radius = 1.0;                   // sphere, cylinder
  Vec3 half_extents = Vec3::Ones();      // box
  Vec3 axis = Vec3::UnitZ();             // cylinder
  double half_height = 1.0;              // cylinder

  double distance(const Vec3& p) const;
};

/// Ordered CSG list folded left to right; the first primitive seeds the shape.
struct ShapeSpec {
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;

  void validate() const;
  double distance(const Vec3& p) const;
};

/// Exact composed SDF at voxel centers, clamped to [-thresh, thresh].
TsdfGrid synthesize(const ShapeSpec& spec, int resolution, double thresh = kDefaultTruncation);

/// Raycasts one depth image per pose and fuses observed free space and the
/// near-surface band behind each hit; everything else stays unknown.
TsdfGrid simulate_partial_scan(const TsdfGrid& full, std::span<const CameraPose> poses);
TsdfGrid simulate_partial_scan(const TsdfGrid& full, const CameraPose& pose);

TsdfGrid load_grid(const std::filesystem::path& path);
void save_grid(const TsdfGrid& grid, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_grid(const TsdfGrid& grid);
TsdfGrid decode_grid(std::span<const std::uint8_t> bytes);

}  // namespace scdiff
