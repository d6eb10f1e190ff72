#include "scdiff/io.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <map>

#include "scdiff/binio.hpp"
#include "scdiff/errors.hpp"

namespace scdiff::io {
namespace {

constexpr char kTokenMagic[4] = {'F', 'T', 'O', 'K'};

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// Cube corners in (dx, dy, dz) order and the six tetrahedra sharing the 0-7 diagonal.
constexpr std::array<std::array<int, 3>, 8> kCorner{{{0, 0, 0},
                                                      {1, 0, 0},
                                                      {0, 1, 0},
                                                      {1, 1, 0},
                                                      {0, 0, 1},
                                                      {1, 0, 1},
                                                      {0, 1, 1},
                                                      {1, 1, 1}}};
constexpr std::array<std::array<int, 4>, 6> kTets{
    {{0, 1, 3, 7}, {0, 3, 2, 7}, {0, 2, 6, 7}, {0, 6, 4, 7}, {0, 4, 5, 7}, {0, 5, 1, 7}}};

}  // namespace

std::vector<std::uint8_t> encode_tokens(const Tensor& tokens) {
  if (tokens.rank() != 2 || tokens.dim(0) < 1 || tokens.dim(1) < 1)
    throw ValidationError("token matrix must be [M, d] with M, d >= 1, got " + shape_str(tokens.shape()));
  binio::Writer w;
  w.bytes(kTokenMagic, 4);
  w.put<std::uint32_t>(kTokenVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tokens.dim(0)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tokens.dim(1)));
  for (double v : tokens.values()) w.put<float>(static_cast<float>(v));
  return std::move(w.buffer());
}

Tensor decode_tokens(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "token file");
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kTokenMagic)) throw FormatError("token file: bad magic (expected FTOK)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTokenVersion) throw VersionError("token file: unsupported version " + std::to_string(version));
  const auto m = r.get<std::uint32_t>("M");
  const auto d = r.get<std::uint32_t>("d");
  if (m == 0 || d == 0 || m > (1u << 16) || d > (1u << 16)) throw FormatError("token file: invalid extents M, d");
  const std::size_t n = static_cast<std::size_t>(m) * d;
  if (r.remaining() != n * sizeof(float))
    throw FormatError("token file: expected " + std::to_string(r.pos() + n * sizeof(float)) + " bytes, got " +
                      std::to_string(bytes.size()) + " (field: values)");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = r.get<float>("values");
    if (!std::isfinite(v[i])) throw FormatError("token file: non-finite value at index " + std::to_string(i));
  }
  return Tensor({static_cast<int>(m), static_cast<int>(d)}, std::move(v));
}

void save_tokens(const Tensor& tokens, const std::filesystem::path& path) {
  binio::write_file(path, encode_tokens(tokens));
}

Tensor load_tokens(const std::filesystem::path& path, std::optional<int> expected_m, std::optional<int> expected_d) {
  Tensor t = decode_tokens(binio::read_file(path));
  if ((expected_m && t.dim(0) != *expected_m) || (expected_d && t.dim(1) != *expected_d))
    throw ValidationError("token file " + path.string() + " declares (M, d) = (" + std::to_string(t.dim(0)) + ", " +
                          std::to_string(t.dim(1)) + "), configuration expects (" +
                          (expected_m ? std::to_string(*expected_m) : std::string("any")) + ", " +
                          (expected_d ? std::to_string(*expected_d) : std::string("any")) + ")");
  return t;
}

void write_depth_pgm(const render::DepthImage& img, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "P5\n" << img.width << " " << img.height << "\n65535\n";
  for (std::size_t p = 0; p < img.depth.size(); ++p) {
    const double v = img.hit[p] ? std::clamp(std::round(img.depth[p] * kDepthScale), 1.0, 65535.0) : 0.0;
    const auto u = static_cast<std::uint16_t>(v);
    const char bytes[2] = {static_cast<char>(u >> 8), static_cast<char>(u & 0xff)};
    out.write(bytes, 2);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_normals_ppm(const render::NormalImage& img, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  const std::size_t np = static_cast<std::size_t>(img.width) * img.height;
  for (std::size_t p = 0; p < np; ++p)
    for (int c = 0; c < 3; ++c) {
      const double n = img.normals[c * np + p];
      const char v = img.hit[p] ? static_cast<char>(std::clamp(std::lround((n + 1.0) * 0.5 * 255.0), 0L, 255L)) : 0;
      out.put(v);
    }
  if (!out) throw IoError("failed writing " + path.string());
}

Mesh extract_surface(const TsdfGrid& grid) {
  const int s = grid.resolution();
  Mesh mesh;
  std::map<std::pair<std::size_t, std::size_t>, int> edge_vertex;
  auto vertex_on = [&](std::size_t a, std::size_t b, const Vec3& pa, const Vec3& pb, double va, double vb) {
    const auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double t = va / (va - vb);
    mesh.vertices.push_back(pa + t * (pb - pa));
    const int id = static_cast<int>(mesh.vertices.size()) - 1;
    edge_vertex.emplace(key, id);
    return id;
  };
  for (int k = 0; k + 1 < s; ++k)
    for (int j = 0; j + 1 < s; ++j)
      for (int i = 0; i + 1 < s; ++i) {
        std::array<std::size_t, 8> id;
        std::array<double, 8> val;
        std::array<Vec3, 8> pos;
        for (int c = 0; c < 8; ++c) {
          const int x = i + kCorner[c][0], y = j + kCorner[c][1], z = k + kCorner[c][2];
          id[c] = grid.index(x, y, z);
          val[c] = grid.at(x, y, z);
          pos[c] = grid.voxel_center(x, y, z);
        }
        for (const auto& tet : kTets) {
          std::vector<int> in, out;
          for (int c : tet) (val[c] < 0 ? in : out).push_back(c);
          if (in.empty() || out.empty()) continue;
          auto v = [&](int a, int b) { return vertex_on(id[a], id[b], pos[a], pos[b], val[a], val[b]); };
          std::vector<std::array<int, 3>> tris;
          if (in.size() == 1 || out.size() == 1) {
            const int apex = in.size() == 1 ? in[0] : out[0];
            const auto& rest = in.size() == 1 ? out : in;
            tris.push_back({v(apex, rest[0]), v(apex, rest[1]), v(apex, rest[2])});
          } else {
            const int a = v(in[0], out[0]), b = v(in[0], out[1]), c = v(in[1], out[1]), d = v(in[1], out[0]);
            tris.push_back({a, b, c});
            tris.push_back({a, c, d});
          }
          Vec3 cin = Vec3::Zero(), cout = Vec3::Zero();
          for (int c : in) cin += pos[c];
          for (int c : out) cout += pos[c];
          const Vec3 outward = cout / out.size() - cin / in.size();
          for (auto& t : tris) {
            const Vec3 n = (mesh.vertices[t[1]] - mesh.vertices[t[0]]).cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
            if (n.dot(outward) < 0) std::swap(t[1], t[2]);
            if (t[0] != t[1] && t[1] != t[2] && t[0] != t[2]) mesh.triangles.push_back(t);
          }
        }
      }
  return mesh;
}

void write_obj(const Mesh& mesh, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "# zero level set, " << mesh.vertices.size() << " vertices, " << mesh.triangles.size() << " triangles\n";
  char buf[96];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.6f %.6f %.6f\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& t : mesh.triangles) out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace scdiff::io
