#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "scdiff/autograd.hpp"
#include "scdiff/grid.hpp"

namespace support {

namespace fs = std::filesystem;
using scdiff::Tensor;
using scdiff::Vec3;

/// |a - b| relative to the larger magnitude, with a floor for near-zero pairs.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f with respect to the scalar x (restored afterwards).
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2 * h);
}

inline Tensor random_tensor(scdiff::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(shape, std::vector<double>(scdiff::shape_numel(shape)));
  for (double& v : t.values()) v = n(rng);
  return t;
}

inline scdiff::ShapeSpec sphere_spec(const Vec3& c, double r) {
  scdiff::ShapeSpec s;
  scdiff::Primitive p;
  p.center = c;
  p.radius = r;
  s.primitives.push_back(p);
  return s;
}

inline scdiff::ShapeSpec box_spec(const Vec3& c, const Vec3& half) {
  scdiff::ShapeSpec s;
  scdiff::Primitive p;
  p.kind = scdiff::PrimitiveKind::Box;
  p.center = c;
  p.half_extents = half;
  s.primitives.push_back(p);
  return s;
}

/// Fresh empty directory under the system temp dir.
inline fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "scdiff_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace support
