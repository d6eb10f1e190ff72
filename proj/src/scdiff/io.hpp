#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scdiff/grid.hpp"
#include "scdiff/render.hpp"
#include "scdiff/tensor.hpp"

namespace scdiff::io {

// Token files: magic "FTOK", u32 version (1), u32 M, u32 d, M*d f32 row-major.
inline constexpr std::uint32_t kTokenVersion = 1;

std::vector<std::uint8_t> encode_tokens(const Tensor& tokens);
Tensor decode_tokens(std::span<const std::uint8_t> bytes);
void save_tokens(const Tensor& tokens, const std::filesystem::path& path);
/// Loads an [M, d] token matrix; when expected extents are given a mismatch
/// is a ValidationError.
Tensor load_tokens(const std::filesystem::path& path, std::optional<int> expected_m = std::nullopt,
                   std::optional<int> expected_d = std::nullopt);

/// Binary 16-bit PGM of round(depth * 256); 0 marks pixels without a hit.
inline constexpr double kDepthScale = 256.0;
void write_depth_pgm(const render::DepthImage& img, const std::filesystem::path& path);
/// Binary 8-bit PPM of (n + 1) / 2 * 255 per channel; black marks pixels without a hit.
void write_normals_ppm(const render::NormalImage& img, const std::filesystem::path& path);

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;  // counter-clockwise seen from outside
};

/// Zero level set of the grid's trilinear lattice, one tetrahedral split of
/// every cell between eight voxel centers.
Mesh extract_surface(const TsdfGrid& grid);
void write_obj(const Mesh& mesh, const std::filesystem::path& path);

}  // namespace scdiff::io
