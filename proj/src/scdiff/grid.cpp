#include "scdiff/grid.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "scdiff/binio.hpp"
#include "scdiff/errors.hpp"

namespace scdiff {
namespace {

constexpr std::uint32_t kGridVersion = 1;
constexpr char kGridMagic[4] = {'T', 'S', 'D', 'F'};

void check_resolution(int s) {
  if (s <= 0) throw ValidationError("grid resolution S must be positive, got " + std::to_string(s));
}

}  // namespace

TsdfGrid::TsdfGrid(int resolution, double thresh, std::vector<float> values,
                   std::optional<std::vector<std::uint8_t>> known_mask)
    : resolution_(resolution), thresh_(thresh), values_(std::move(values)), mask_(std::move(known_mask)) {
  check_resolution(resolution_);
  if (!(thresh_ > 0) || !std::isfinite(thresh_)) throw ValidationError("truncation thresh must be positive");
  const std::size_t n = static_cast<std::size_t>(resolution_) * resolution_ * resolution_;
  if (values_.size() != n)
    throw ValidationError("grid values hold " + std::to_string(values_.size()) + " entries, expected S^3 = " +
                          std::to_string(n));
  if (mask_ && mask_->size() != n) throw ValidationError("known_mask extent does not match values");
  const float t = static_cast<float>(thresh_);
  for (std::size_t i = 0; i < n; ++i)
    if (!(std::abs(values_[i]) <= t))
      throw ValidationError("grid value " + std::to_string(values_[i]) + " at voxel " + std::to_string(i) +
                            " exceeds truncation " + std::to_string(thresh_));
}

TsdfGrid TsdfGrid::filled(int resolution, double thresh, float value) {
  check_resolution(resolution);
  return TsdfGrid(resolution, thresh,
                  std::vector<float>(static_cast<std::size_t>(resolution) * resolution * resolution, value));
}

std::span<const std::uint8_t> TsdfGrid::known_mask() const {
  if (!mask_) return {};
  return *mask_;
}

std::size_t TsdfGrid::known_count() const {
  if (!mask_) return values_.size();
  return static_cast<std::size_t>(std::count_if(mask_->begin(), mask_->end(), [](std::uint8_t m) { return m != 0; }));
}

Tensor TsdfGrid::normalized() const {
  const int s = resolution_;
  Tensor t({1, s, s, s});
  for (std::size_t i = 0; i < values_.size(); ++i) t[i] = values_[i] / thresh_;
  return t;
}

Tensor TsdfGrid::masked_input() const {
  const int s = resolution_;
  const std::size_t n = values_.size();
  Tensor t({2, s, s, s});
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = values_[i] / thresh_;
    t[n + i] = known(i) ? 1.0 : 0.0;
  }
  return t;
}

TsdfGrid TsdfGrid::from_tensor(const Tensor& t, double thresh) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != t.dim(2) || t.dim(2) != t.dim(3))
    throw ValidationError("grid tensor must be [1,S,S,S], got " + shape_str(t.shape()));
  std::vector<float> v(t.size());
  const float lim = static_cast<float>(thresh);
  for (std::size_t i = 0; i < t.size(); ++i) v[i] = std::clamp(static_cast<float>(t[i]), -lim, lim);
  return TsdfGrid(t.dim(1), thresh, std::move(v));
}

TsdfGrid TsdfGrid::with_unknown_as_empty() const {
  std::vector<float> v = values_;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!known(i)) v[i] = static_cast<float>(thresh_);
  return TsdfGrid(resolution_, thresh_, std::move(v));
}

void CameraPose::validate() const {
  const Vec3 f = look_at - position;
  if (f.norm() <= 0) throw ValidationError("camera look_at coincides with position");
  if (up.norm() <= 0 || f.normalized().cross(up.normalized()).norm() < 1e-9)
    throw ValidationError("camera up vector is parallel to the viewing direction");
  if (!(intr.focal > 0)) throw ValidationError("camera focal length must be positive");
  if (intr.width <= 0 || intr.height <= 0) throw ValidationError("camera image extent must be positive");
}

Ray CameraPose::pixel_ray(int u, int v) const {
  const Vec3 f = forward();
  const Vec3 right = f.cross(up).normalized();
  const Vec3 true_up = right.cross(f);
  const double x = (u + 0.5 - intr.cx) / intr.focal;
  const double y = (v + 0.5 - intr.cy) / intr.focal;
  return {position, (f + x * right - y * true_up).normalized()};
}

CameraPose orbit_pose(int resolution, double azimuth_deg, double elevation_deg, double radius_factor, int image_size,
                      double fov_deg) {
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const double r = radius_factor * resolution;
  const Vec3 center = Vec3::Constant(resolution / 2.0);
  CameraPose p;
  p.position = center + r * Vec3(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
  p.look_at = center;
  p.up = Vec3::UnitY();
  p.intr.width = p.intr.height = image_size;
  p.intr.cx = p.intr.cy = image_size / 2.0;
  p.intr.focal = (image_size / 2.0) / std::tan(fov_deg * std::numbers::pi / 360.0);
  return p;
}

std::vector<CameraPose> fixed_views(int resolution, int image_size, double radius_factor, double elevation_deg) {
  std::vector<CameraPose> out;
  for (double az : {0.0, 90.0, 180.0, 270.0})
    out.push_back(orbit_pose(resolution, az, elevation_deg, radius_factor, image_size));
  return out;
}

double Primitive::distance(const Vec3& p) const {
  switch (kind) {
    case PrimitiveKind::Sphere:
      return (p - center).norm() - radius;
    case PrimitiveKind::Box: {
      const Vec3 q = (p - center).cwiseAbs() - half_extents;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case PrimitiveKind::Cylinder: {
      const Vec3 a = axis.normalized();
      const Vec3 v = p - center;
      const double along = v.dot(a);
      const double radial = (v - along * a).norm();
      const double dx = radial - radius;
      const double dy = std::abs(along) - half_height;
      return std::hypot(std::max(dx, 0.0), std::max(dy, 0.0)) + std::min(std::max(dx, dy), 0.0);
    }
  }
  return 0.0;
}

void ShapeSpec::validate() const {
  if (primitives.empty()) throw ValidationError("shape spec has no primitives");
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    const Primitive& p = primitives[i];
    const std::string where = "primitive " + std::to_string(i);
    switch (p.kind) {
      case PrimitiveKind::Sphere:
        if (!(p.radius > 0)) throw ValidationError(where + ": sphere radius must be positive");
        break;
      case PrimitiveKind::Box:
        if (!(p.half_extents.minCoeff() > 0)) throw ValidationError(where + ": box half-extents must be positive");
        break;
      case PrimitiveKind::Cylinder:
        if (!(p.radius > 0) || !(p.half_height > 0))
          throw ValidationError(where + ": cylinder radius and half-height must be positive");
        if (!(p.axis.norm() > 0)) throw ValidationError(where + ": cylinder axis must be nonzero");
        break;
    }
    if (!p.center.allFinite()) throw ValidationError(where + ": center must be finite");
  }
}

double ShapeSpec::distance(const Vec3& p) const {
  double d = primitives.front().distance(p);
  for (std::size_t i = 1; i < primitives.size(); ++i) {
    const double di = primitives[i].distance(p);
    d = primitives[i].op == Combine::Union ? std::min(d, di) : std::max(d, -di);
  }
  return d;
}

TsdfGrid synthesize(const ShapeSpec& spec, int resolution, double thresh) {
  spec.validate();
  if (resolution < 8) throw ValidationError("synthesis requires S >= 8, got " + std::to_string(resolution));
  const int s = resolution;
  std::vector<float> v(static_cast<std::size_t>(s) * s * s);
  for (int k = 0; k < s; ++k)
    for (int j = 0; j < s; ++j)
      for (int i = 0; i < s; ++i) {
        const double d = spec.distance(Vec3(i + 0.5, j + 0.5, k + 0.5));
        v[i + static_cast<std::size_t>(s) * (j + static_cast<std::size_t>(s) * k)] =
            static_cast<float>(std::clamp(d, -thresh, thresh));
      }
  return TsdfGrid(s, thresh, std::move(v));
}

std::vector<std::uint8_t> encode_grid(const TsdfGrid& grid) {
  binio::Writer w;
  w.bytes(kGridMagic, 4);
  w.put<std::uint32_t>(kGridVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(grid.resolution()));
  w.put<float>(static_cast<float>(grid.thresh()));
  w.put<std::uint32_t>(grid.has_mask() ? 1u : 0u);
  for (float v : grid.values()) w.put<float>(v);
  if (grid.has_mask()) w.bytes(grid.known_mask().data(), grid.known_mask().size());
  return std::move(w.buffer());
}

TsdfGrid decode_grid(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "grid file");
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kGridMagic)) throw FormatError("grid file: bad magic, expected \"TSDF\"");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kGridVersion)
    throw FormatError("grid file: unsupported version " + std::to_string(version) + " (field: version)");
  const auto s = r.get<std::uint32_t>("S");
  if (s == 0) throw ValidationError("grid file: S = 0 in header (field: S)");
  if (s > 1024) throw FormatError("grid file: S = " + std::to_string(s) + " is implausibly large (field: S)");
  const float thresh = r.get<float>("thresh");
  if (!(thresh > 0) || !std::isfinite(thresh))
    throw FormatError("grid file: truncation must be positive and finite (field: thresh)");
  const auto flags = r.get<std::uint32_t>("flags");
  if (flags & ~1u) throw FormatError("grid file: unknown flag bits " + std::to_string(flags) + " (field: flags)");
  const bool has_mask = flags & 1u;

  const std::size_t n = static_cast<std::size_t>(s) * s * s;
  const std::size_t expected = r.pos() + n * 4 + (has_mask ? n : 0);
  if (bytes.size() != expected)
    throw FormatError("grid file: expected " + std::to_string(expected) + " bytes for S=" + std::to_string(s) +
                      (has_mask ? " with mask" : "") + ", got " + std::to_string(bytes.size()) + " (field: values)");
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = r.get<float>("values");
    if (!(std::abs(values[i]) <= thresh))
      throw FormatError("grid file: value " + std::to_string(values[i]) + " at voxel " + std::to_string(i) +
                        " outside [-thresh, thresh] (field: values)");
  }
  std::optional<std::vector<std::uint8_t>> mask;
  if (has_mask) {
    auto m = r.take(n, "mask");
    mask.emplace(m.begin(), m.end());
  }
  return TsdfGrid(static_cast<int>(s), thresh, std::move(values), std::move(mask));
}

TsdfGrid load_grid(const std::filesystem::path& path) { return decode_grid(binio::read_file(path)); }

void save_grid(const TsdfGrid& grid, const std::filesystem::path& path) { binio::write_file(path, encode_grid(grid)); }

namespace binio {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace binio
}  // namespace scdiff
