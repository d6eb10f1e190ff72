#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "scdiff/checkpoint.hpp"
#include "scdiff/config.hpp"
#include "scdiff/errors.hpp"
#include "scdiff/io.hpp"
#include "support.hpp"

using namespace scdiff;

namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string slurp_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---- config ---------------------------------------------------------------

TEST_CASE("default config carries the reference hyperparameters") {
  const RunConfig c;
  CHECK(c.thresh == 3.0);
  CHECK(c.D == 3);
  CHECK(c.K_Z == 512);
  CHECK(c.beta == 0.5);
  CHECK(c.gamma_R == 0.4);
  CHECK(c.gamma_A == 0.4);
  CHECK(c.T == 1000);
  CHECK(c.T_inf == 100);
  CHECK(c.beta_1 == 8.5e-4);
  CHECK(c.beta_T == 0.012);
  CHECK(c.A_res == std::vector<int>{2, 4});
  CHECK(c.bs == 4);
  CHECK(c.lr_vqvae == 1e-4);
  CHECK(c.lr_diff == 2.5e-5);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config text round-trips every field") {
  RunConfig c;
  c.S = 48;
  c.S_l = 12;
  c.beta_1 = 1.234567890123e-4;
  c.A_res = {3, 6};
  c.vq_widths = {4, 5, 6};
  c.seed = 18446744073709551615ull;
  c.steps_diff = 123456789012;
  const std::string text = c.to_text();
  const RunConfig back = parse_config(text);
  CHECK(back.to_text() == text);
  CHECK(back.beta_1 == c.beta_1);
  CHECK(back.seed == c.seed);
  CHECK(back.A_res == c.A_res);
  CHECK(back.vq_widths == c.vq_widths);
  CHECK(text.find("S_l = 12\n") != std::string::npos);
}

TEST_CASE("config parser handles comments and blank lines") {
  const RunConfig c = parse_config("# desk run\n\n  K_Z = 64   # small codebook\nA_res=2\n\tseed = 7\r\n");
  CHECK(c.K_Z == 64);
  CHECK(c.A_res == std::vector<int>{2});
  CHECK(c.seed == 7);
  CHECK(c.T == 1000);
}

TEST_CASE("config errors name the line and key") {
  CHECK_THROWS_WITH_AS(parse_config("K_Z = 64\nbogus = 1\n"), doctest::Contains("line 2"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("bogus = 1"), doctest::Contains("bogus"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("K_Z = 64\nK_Z = 32"), doctest::Contains("duplicate"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("K_Z = many"), doctest::Contains("malformed"), ValidationError);
  CHECK_THROWS_AS(parse_config("K_Z = 64x"), ValidationError);
  CHECK_THROWS_AS(parse_config("vq_widths = 1,2"), ValidationError);
  CHECK_THROWS_AS(parse_config("A_res = "), ValidationError);
  CHECK_THROWS_AS(parse_config("just words"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("S = 30"), doctest::Contains("'S'"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("S = 64"), doctest::Contains("S_l"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("beta = 1.5"), doctest::Contains("beta"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("T_inf = 2000"), doctest::Contains("T_inf"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("A_res = 3"), doctest::Contains("A_res"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("beta_1 = 0.02"), doctest::Contains("beta_1"), ValidationError);
  CHECK_THROWS_AS(load_config(support::temp_dir("cfg") / "missing.cfg"), IoError);
}

TEST_CASE("architecture differences are reported per key") {
  RunConfig a, b;
  b.K_Z = 64;
  b.lr_vqvae = 1e-3;
  const auto d = config_differences(a.to_text(), b.to_text(), architecture_keys("vqvae"));
  REQUIRE(d.size() == 1);
  CHECK(d[0] == "K_Z: 512 vs 64");
  CHECK(config_differences(a.to_text(), b.to_text(), {"lr_vqvae"}).size() == 1);
  CHECK(config_differences(a.to_text(), "", {"S"})[0] == "S: 32 vs <missing>");
  CHECK_THROWS_AS(architecture_keys("gan"), ValidationError);
  const auto dk = architecture_keys("diffusion");
  CHECK(std::find(dk.begin(), dk.end(), "unet_widths") != dk.end());
}

TEST_CASE("config maps onto model architectures") {
  RunConfig c;
  c.vq_widths = {4, 8, 8};
  const auto va = c.vqvae_arch();
  CHECK(va.resolution == 32);
  CHECK(va.latent_resolution() == 8);
  CHECK(va.widths == std::array<int, 3>{4, 8, 8});
  const auto da = c.denoiser_arch();
  CHECK(da.latent_resolution == 8);
  CHECK(da.context_dim == c.D_CLIP);
  CHECK(da.attention_resolutions == c.A_res);
  CHECK(c.loss_weights().gamma_a == 0.4);
}

// ---- checkpoint -----------------------------------------------------------

TEST_CASE("checkpoint container round-trips") {
  std::mt19937_64 rng(3);
  Checkpoint c{"vqvae", RunConfig{}.to_text(), "abc123", {}};
  Tensor a = support::random_tensor({2, 3, 4}, rng), b = support::random_tensor({5}, rng);
  for (double& v : a.values()) v = static_cast<float>(v);
  for (double& v : b.values()) v = static_cast<float>(v);
  c.tensors = {{"encoder.w", a}, {"codebook", b}};
  const auto bytes = encode_checkpoint(c);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SCDC");
  CHECK(bytes[4] == kCheckpointVersion);
  const Checkpoint d = decode_checkpoint(bytes);
  CHECK(d.kind == "vqvae");
  CHECK(d.config_echo == c.config_echo);
  CHECK(d.input_hash == "abc123");
  REQUIRE(d.tensors.size() == 2);
  CHECK(d.tensors[0].first == "encoder.w");
  CHECK(d.tensors[0].second == a);
  CHECK(d.tensors[1].second == b);

  const auto dir = support::temp_dir("ckpt");
  save_checkpoint(c, dir / "m.ckpt");
  CHECK(slurp(dir / "m.ckpt") == bytes);
  CHECK(load_checkpoint(dir / "m.ckpt").tensors[1].second == b);
  CHECK_THROWS_AS(load_checkpoint(dir / "none.ckpt"), IoError);
}

TEST_CASE("checkpoint decoding rejects malformed input") {
  Checkpoint c{"diffusion", "S = 32\n", "h", {{"w", Tensor({2, 2}, 1.0)}}};
  const auto bytes = encode_checkpoint(c);
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("magic"), FormatError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("version"), VersionError);
  CHECK_THROWS_WITH_AS(decode_checkpoint(std::span(bytes).first(bytes.size() - 3)), doctest::Contains("truncated"),
                       FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("trailing"), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(2)), FormatError);
}

TEST_CASE("restore requires every parameter with matching shape") {
  nn::ParamSet ps;
  ps.add("a", Tensor({2}, 0.0));
  ps.add("b", Tensor({3}, 0.0));
  Checkpoint c{"vqvae", "", "", {{"a", Tensor({2}, 1.5)}, {"b", Tensor({3}, 2.5)}, {"extra", Tensor({1})}}};
  c.restore(ps);
  CHECK(ps.get("a").value()[1] == 1.5);
  CHECK(ps.get("b").value()[2] == 2.5);
  Checkpoint missing{"vqvae", "", "", {{"a", Tensor({2})}}};
  CHECK_THROWS_WITH_AS(missing.restore(ps), doctest::Contains("lacks parameter b"), VersionError);
  Checkpoint shaped{"vqvae", "", "", {{"a", Tensor({3})}, {"b", Tensor({3})}}};
  CHECK_THROWS_WITH_AS(shaped.restore(ps), doctest::Contains("shape"), VersionError);
  CHECK(ps.get("a").value()[1] == 1.5);  // failed restores leave values untouched

  nn::ParamSet other;
  other.add("a", Tensor({1}));
  CHECK_THROWS_AS(Checkpoint::from_params("vqvae", "", "", {&ps, &other}), ValidationError);
  const Checkpoint snap = Checkpoint::from_params("vqvae", "", "", {&ps});
  CHECK(snap.has("b"));
  CHECK_FALSE(snap.has("c"));
}

TEST_CASE("blob hashes follow git's object id") {
  CHECK(git_blob_hash(std::string()) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_hash(std::string("hello\n")) == "ce013625030ba8dba906f756967f9e9ca394464a");
  const std::string h1 = hash_inputs({{"a", "1"}, {"b", "2"}});
  CHECK(h1 == hash_inputs({{"b", "2"}, {"a", "1"}}));
  CHECK(h1 != hash_inputs({{"a", "2"}, {"b", "1"}}));
  CHECK(h1 == git_blob_hash(std::string("1 a\n2 b\n")));
}

// ---- images and meshes ----------------------------------------------------

TEST_CASE("depth PGM and normal PPM layouts") {
  render::RenderResult r;
  r.depth.width = r.normals.width = 2;
  r.depth.height = r.normals.height = 1;
  r.depth.depth = {10.5, render::kNoHit};
  r.depth.hit = {1, 0};
  r.normals.hit = {1, 0};
  r.normals.normals = {0.0, 0.0, -1.0, 0.0, 1.0, 0.0};  // channel-major: x0 x1 y0 y1 z0 z1
  const auto dir = support::temp_dir("images");
  io::write_depth_pgm(r.depth, dir / "d.pgm");
  io::write_normals_ppm(r.normals, dir / "n.ppm");

  const auto pgm = slurp(dir / "d.pgm");
  const std::string head = "P5\n2 1\n65535\n";
  REQUIRE(pgm.size() == head.size() + 4);
  CHECK(std::string(pgm.begin(), pgm.begin() + head.size()) == head);
  const int v0 = pgm[head.size()] << 8 | pgm[head.size() + 1];
  CHECK(v0 == 2688);  // 10.5 * 256
  CHECK(pgm[head.size() + 2] == 0);
  CHECK(pgm[head.size() + 3] == 0);

  const auto ppm = slurp(dir / "n.ppm");
  const std::string phead = "P6\n2 1\n255\n";
  REQUIRE(ppm.size() == phead.size() + 6);
  CHECK(ppm[phead.size() + 0] == 128);  // (0 + 1) / 2 * 255 rounded
  CHECK(ppm[phead.size() + 1] == 0);    // y = -1
  CHECK(ppm[phead.size() + 2] == 255);  // z = +1
  for (int c = 3; c < 6; ++c) CHECK(ppm[phead.size() + c] == 0);
}

TEST_CASE("surface mesh of a sphere is closed, outward and on the level set") {
  const Vec3 c(12.3, 11.8, 12.1);
  const double r = 6.0;
  const TsdfGrid g = synthesize(support::sphere_spec(c, r), 24);
  const io::Mesh m = io::extract_surface(g);
  REQUIRE(m.triangles.size() > 100);
  for (const Vec3& v : m.vertices) CHECK(std::abs((v - c).norm() - r) < 0.1);
  // Closed surface: every edge is shared by exactly two triangles with opposite orientation.
  std::map<std::pair<int, int>, int> directed;
  for (const auto& t : m.triangles)
    for (int e = 0; e < 3; ++e) ++directed[{t[e], t[(e + 1) % 3]}];
  for (const auto& [edge, n] : directed) {
    CHECK(n == 1);
    CHECK(directed.count({edge.second, edge.first}) == 1);
  }
  // Outward orientation: the divergence theorem gives a positive enclosed volume.
  double volume = 0;
  for (const auto& t : m.triangles)
    volume += m.vertices[t[0]].dot(m.vertices[t[1]].cross(m.vertices[t[2]])) / 6.0;
  CHECK(volume == doctest::Approx(4.0 / 3.0 * M_PI * r * r * r).epsilon(0.05));

  const auto dir = support::temp_dir("mesh");
  io::write_obj(m, dir / "s.obj");
  const std::string obj = slurp_text(dir / "s.obj");
  std::size_t nv = 0, nf = 0;
  std::stringstream ss(obj);
  std::string line;
  while (std::getline(ss, line)) {
    nv += line.rfind("v ", 0) == 0;
    nf += line.rfind("f ", 0) == 0;
  }
  CHECK(nv == m.vertices.size());
  CHECK(nf == m.triangles.size());
  CHECK(io::extract_surface(TsdfGrid::filled(8, 3.0, 3.0f)).triangles.empty());
}
