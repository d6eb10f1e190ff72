#include "scdiff/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "scdiff/binio.hpp"
#include "scdiff/errors.hpp"
#include "scdiff/io.hpp"
#include "scdiff/render.hpp"

namespace scdiff::pipeline {
namespace {

using nlohmann::json;

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": " + e.what());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

// Number or [lo, hi] uniform range.
double draw(const json& v, std::mt19937_64& rng, const std::string& field) {
  if (v.is_number()) return v.get<double>();
  if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number()) {
    const double lo = v[0].get<double>(), hi = v[1].get<double>();
    if (hi < lo) throw ValidationError("generator spec: range for '" + field + "' has hi < lo");
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  throw ValidationError("generator spec: field '" + field + "' must be a number or [lo, hi]");
}

Vec3 draw3(const json& v, std::mt19937_64& rng, const std::string& field) {
  if (v.is_array() && v.size() == 3) return {draw(v[0], rng, field), draw(v[1], rng, field), draw(v[2], rng, field)};
  const double s = draw(v, rng, field);
  return {s, s, s};
}

Vec3 draw_axis(const json& v, std::mt19937_64& rng) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "x") return Vec3::UnitX();
    if (s == "y") return Vec3::UnitY();
    if (s == "z") return Vec3::UnitZ();
    if (s == "random") {
      std::normal_distribution<double> n;
      Vec3 a(n(rng), n(rng), n(rng));
      return a.norm() > 1e-9 ? a.normalized() : Vec3::UnitZ();
    }
  }
  if (v.is_array() && v.size() == 3) {
    Vec3 a(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
    if (a.norm() < 1e-12) throw ValidationError("generator spec: zero cylinder axis");
    return a.normalized();
  }
  throw ValidationError("generator spec: axis must be \"x\", \"y\", \"z\", \"random\" or a 3-vector");
}

Primitive draw_primitive(const json& p, std::mt19937_64& rng, int s) {
  Primitive out;
  const std::string kind = p.value("kind", "");
  if (kind == "sphere")
    out.kind = PrimitiveKind::Sphere;
  else if (kind == "box")
    out.kind = PrimitiveKind::Box;
  else if (kind == "cylinder")
    out.kind = PrimitiveKind::Cylinder;
  else
    throw ValidationError("generator spec: unknown primitive kind '" + kind + "'");
  const std::string op = p.value("op", "union");
  if (op == "union")
    out.op = Combine::Union;
  else if (op == "subtract")
    out.op = Combine::Subtract;
  else
    throw ValidationError("generator spec: unknown combine op '" + op + "'");
  if (!p.contains("center")) throw ValidationError("generator spec: primitive without center");
  out.center = draw3(p["center"], rng, "center") * s;
  if (out.kind == PrimitiveKind::Sphere || out.kind == PrimitiveKind::Cylinder) {
    if (!p.contains("radius")) throw ValidationError("generator spec: " + kind + " without radius");
    out.radius = draw(p["radius"], rng, "radius") * s;
  }
  if (out.kind == PrimitiveKind::Box) {
    if (!p.contains("half_extents")) throw ValidationError("generator spec: box without half_extents");
    out.half_extents = draw3(p["half_extents"], rng, "half_extents") * s;
  }
  if (out.kind == PrimitiveKind::Cylinder) {
    if (!p.contains("half_height")) throw ValidationError("generator spec: cylinder without half_height");
    out.half_height = draw(p["half_height"], rng, "half_height") * s;
    out.axis = p.contains("axis") ? draw_axis(p["axis"], rng) : Vec3::UnitZ();
  }
  return out;
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 3) throw FormatError("pose field '" + field + "' must be a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json primitive_json(const Primitive& p) {
  static const char* kinds[] = {"sphere", "box", "cylinder"};
  json j{{"kind", kinds[static_cast<int>(p.kind)]},
         {"op", p.op == Combine::Union ? "union" : "subtract"},
         {"center", vec_json(p.center)}};
  if (p.kind != PrimitiveKind::Box) j["radius"] = p.radius;
  if (p.kind == PrimitiveKind::Box) j["half_extents"] = vec_json(p.half_extents);
  if (p.kind == PrimitiveKind::Cylinder) {
    j["axis"] = vec_json(p.axis);
    j["half_height"] = p.half_height;
  }
  return j;
}

bool has_surface(const TsdfGrid& g) {
  bool neg = false, pos = false;
  for (float v : g.values()) {
    neg = neg || v < 0;
    pos = pos || v >= 0;
  }
  return neg && pos;
}

struct Draw {
  ShapeSpec spec;
  std::string family;
  CameraPose scan_pose;
};

Draw draw_shape(const json& spec, int s, std::uint64_t seed, int index, int attempt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(attempt)};
  std::mt19937_64 rng(seq);
  const json& fams = spec.at("families");
  if (!fams.is_array() || fams.empty()) throw ValidationError("generator spec: 'families' must be a non-empty list");
  std::vector<double> weights;
  for (const json& f : fams) weights.push_back(f.value("weight", 1.0));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const json& fam = fams[pick(rng)];
  Draw d;
  d.family = fam.value("name", "family");
  d.spec.seed = rng();
  for (const json& p : fam.at("primitives")) {
    int repeat = 1;
    if (p.contains("repeat")) repeat = static_cast<int>(std::lround(draw(p["repeat"], rng, "repeat")));
    for (int r = 0; r < repeat; ++r) d.spec.primitives.push_back(draw_primitive(p, rng, s));
  }
  const json scan = spec.value("scan", json::object());
  const double az = std::uniform_real_distribution<double>(0.0, 360.0)(rng);
  const double el = draw(scan.value("elevation", json::array({15.0, 45.0})), rng, "scan.elevation");
  const double radius = scan.value("radius_factor", 1.6);
  const double fov = scan.value("fov", 60.0);
  const int image = scan.value("image_size", 2 * s);
  d.scan_pose = orbit_pose(s, az, el, radius, image, fov);
  return d;
}

std::vector<std::string> shape_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory " + dir.string() + " does not exist");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string f = e.path().filename().string();
    if (e.path().extension() != ".tsdf" || f.ends_with(".partial.tsdf")) continue;
    names.push_back(e.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

json scores_json(const metrics::ShapeScore& s) {
  json j{{"name", s.name}, {"l1", s.l1}, {"l1_normalized", s.l1_normalized}, {"iou", s.iou}};
  j["chamfer"] = std::isfinite(s.chamfer) ? json(s.chamfer) : json(nullptr);
  return j;
}

json eval_json(const metrics::EvalReport& r) {
  json rows = json::array();
  for (const auto& s : r.shapes) rows.push_back(scores_json(s));
  return json{{"count", r.count()}, {"shapes", rows}, {"aggregate", scores_json(r.aggregate)}};
}

json conventions() {
  return json{{"l1", "mean |pred - gt| over voxels, voxel units; l1_normalized divides by thresh"},
              {"iou", "occupancy value < 0, |A and B| / |A or B|, 1 when both empty"},
              {"chamfer", "sum over both directions of the mean squared nearest-neighbour distance, voxel units^2"},
              {"surface",
               "chamfer_points area-uniform samples of the marching-tetrahedra zero-level mesh, same seed for both "
               "grids"}};
}

std::string step_line(long step, const std::vector<std::pair<std::string, double>>& fields) {
  json j{{"step", step}};
  for (const auto& [k, v] : fields) j[k] = std::isfinite(v) ? json(v) : json(nullptr);
  return j.dump();
}

struct VqRun {
  vqvae::VqVae model;
  vqvae::Discriminator disc;
};

VqRun run_vqvae(const RunConfig& cfg, std::span<const TsdfGrid> corpus, const LogSink& sink,
                const std::function<void(long, const VqRun&)>& on_ckpt) {
  cfg.validate();
  VqRun run{vqvae::VqVae(cfg.vqvae_arch(), cfg.seed), vqvae::Discriminator(cfg.disc_width, cfg.seed + 1)};
  for (const TsdfGrid& g : corpus)
    if (g.resolution() != cfg.S)
      throw ValidationError("training grid has S=" + std::to_string(g.resolution()) + ", config S=" +
                            std::to_string(cfg.S));
  vqvae::TrainOptions o;
  o.steps = cfg.steps_vqvae;
  o.batch_size = cfg.bs;
  o.lr = cfg.lr_vqvae;
  o.disc_lr = cfg.lr_disc;
  o.weights = cfg.loss_weights();
  o.render_size = cfg.render_size;
  o.dead_code_steps = cfg.dead_code_steps;
  o.seed = cfg.seed;
  o.log_every = cfg.log_every;
  o.checkpoint_every = on_ckpt ? cfg.ckpt_every : 0;
  o.on_log = [&](const vqvae::TrainLog& l) {
    if (sink)
      sink(step_line(l.step, {{"total", l.terms.total},
                              {"rec", l.terms.rec},
                              {"commit", l.terms.commit},
                              {"codebook", l.terms.codebook},
                              {"rec2d", l.terms.rec2d},
                              {"adv", l.terms.adv},
                              {"disc", l.disc_loss},
                              {"codes_used", l.codes_used},
                              {"codes_reseeded", l.codes_reseeded}}));
  };
  o.on_checkpoint = [&](long step) { on_ckpt(step, run); };
  vqvae::train(run.model, run.disc, corpus, o);
  return run;
}

denoiser::TrainOptions diffusion_options(const RunConfig& cfg, const LogSink& sink) {
  denoiser::TrainOptions o;
  o.steps = cfg.steps_diff;
  o.batch_size = cfg.bs;
  o.lr = cfg.lr_diff;
  o.drop_tokens = cfg.drop_tokens;
  o.drop_partial = cfg.drop_partial;
  o.seed = cfg.seed + 7;
  o.log_every = cfg.log_every;
  o.on_log = [sink](const denoiser::TrainLog& l) {
    if (sink) sink(step_line(l.step, {{"loss", l.loss}}));
  };
  return o;
}

void check_compatible(const std::string& kind, const std::string& echo_a, const std::string& echo_b,
                      const std::string& what) {
  const auto diff = config_differences(echo_a, echo_b, architecture_keys(kind));
  if (diff.empty()) return;
  std::string msg = what + ": incompatible configuration (";
  for (std::size_t i = 0; i < diff.size(); ++i) msg += (i ? "; " : "") + diff[i];
  throw VersionError(msg + ")");
}

Checkpoint read_checkpoint_kind(const fs::path& path, const std::string& kind) {
  Checkpoint c = load_checkpoint(path);
  if (c.kind != kind)
    throw VersionError("checkpoint " + path.string() + " holds a '" + c.kind + "' model, expected '" + kind + "'");
  return c;
}

}  // namespace

FileLock::FileLock(const fs::path& target) : path_(target.string() + ".lock") {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw IoError("cannot lock " + target.string() + ": " + path_.string() + " exists (another job running?)");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

FileLock::~FileLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string default_generator_spec() {
  return R"({
  "scan": {"elevation": [15, 45], "radius_factor": 1.6, "fov": 60},
  "families": [
    {"name": "blob", "primitives": [
      {"kind": "sphere", "center": [[0.42, 0.58], [0.42, 0.58], [0.42, 0.58]], "radius": [0.16, 0.26]},
      {"kind": "sphere", "center": [[0.3, 0.7], [0.3, 0.7], [0.3, 0.7]], "radius": [0.08, 0.16], "repeat": [1, 2]}]},
    {"name": "crate", "primitives": [
      {"kind": "box", "center": [[0.45, 0.55], [0.45, 0.55], [0.45, 0.55]],
       "half_extents": [[0.12, 0.28], [0.12, 0.28], [0.12, 0.28]]}]},
    {"name": "cup", "primitives": [
      {"kind": "cylinder", "center": [[0.46, 0.54], [0.46, 0.54], [0.46, 0.54]], "axis": "z",
       "radius": [0.18, 0.26], "half_height": [0.16, 0.26]},
      {"kind": "cylinder", "op": "subtract", "center": [[0.48, 0.52], [0.48, 0.52], [0.6, 0.66]], "axis": "z",
       "radius": [0.1, 0.14], "half_height": [0.2, 0.24]}]},
    {"name": "table", "primitives": [
      {"kind": "box", "center": [0.5, 0.5, [0.6, 0.66]], "half_extents": [[0.2, 0.3], [0.2, 0.3], 0.05]},
      {"kind": "cylinder", "center": [[0.3, 0.36], [0.3, 0.36], 0.42], "axis": "z", "radius": 0.05, "half_height": 0.16},
      {"kind": "cylinder", "center": [[0.64, 0.7], [0.64, 0.7], 0.42], "axis": "z", "radius": 0.05, "half_height": 0.16}]},
    {"name": "holed", "primitives": [
      {"kind": "box", "center": [0.5, 0.5, 0.5], "half_extents": [[0.2, 0.28], [0.2, 0.28], [0.2, 0.28]]},
      {"kind": "sphere", "op": "subtract", "center": [[0.4, 0.6], [0.4, 0.6], [0.7, 0.8]], "radius": [0.14, 0.2]}]},
    {"name": "rod", "primitives": [
      {"kind": "cylinder", "center": [0.5, 0.5, 0.5], "axis": "random", "radius": [0.08, 0.14],
       "half_height": [0.2, 0.3]},
      {"kind": "sphere", "center": [[0.4, 0.6], [0.4, 0.6], [0.4, 0.6]], "radius": [0.1, 0.16]}]}
  ]
})";
}

ShapeSpec sample_shape(const std::string& spec_json, int resolution, std::uint64_t seed, int index) {
  const json spec = parse_json(spec_json, "generator spec");
  return draw_shape(spec, resolution, seed, index, 0).spec;
}

std::vector<std::string> gen_data(const std::string& spec_json, const GenOptions& opt, const fs::path& out_dir) {
  if (opt.count < 1) throw ValidationError("gen-data: count must be positive");
  if (opt.resolution < 8) throw ValidationError("gen-data: resolution must be at least 8");
  const json spec = parse_json(spec_json, "generator spec");
  const double thresh = spec.value("thresh", opt.thresh);
  fs::create_directories(out_dir);
  std::vector<std::string> names;
  for (int i = 0; i < opt.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "shape_%05d", i);
    std::optional<Draw> d;
    std::optional<TsdfGrid> full;
    for (int attempt = 0; attempt < 32 && !full; ++attempt) {
      Draw cand = draw_shape(spec, opt.resolution, opt.seed, i, attempt);
      cand.spec.validate();
      TsdfGrid g = synthesize(cand.spec, opt.resolution, thresh);
      if (!has_surface(g)) continue;
      d = std::move(cand);
      full = std::move(g);
    }
    if (!full) throw ValidationError("gen-data: generator spec produced no surface for shape " + std::string(name));
    const TsdfGrid partial = simulate_partial_scan(*full, d->scan_pose);
    save_grid(*full, out_dir / (std::string(name) + ".tsdf"));
    save_grid(partial, out_dir / (std::string(name) + ".partial.tsdf"));
    json meta{{"name", name},
              {"family", d->family},
              {"seed", d->spec.seed},
              {"resolution", opt.resolution},
              {"thresh", thresh},
              {"primitives", json::array()},
              {"scan_pose", parse_json(pose_to_json(d->scan_pose), "pose")}};
    for (const Primitive& p : d->spec.primitives) meta["primitives"].push_back(primitive_json(p));
    write_text(out_dir / (std::string(name) + ".json"), meta.dump(2) + "\n");
    names.emplace_back(name);
  }
  return names;
}

std::string pose_to_json(const CameraPose& p) {
  return json{{"position", vec_json(p.position)}, {"look_at", vec_json(p.look_at)}, {"up", vec_json(p.up)},
              {"focal", p.intr.focal},           {"cx", p.intr.cx},                {"cy", p.intr.cy},
              {"width", p.intr.width},           {"height", p.intr.height}}
      .dump();
}

CameraPose pose_from_json(const std::string& text, int resolution) {
  const json j = parse_json(text, "camera pose");
  if (!j.is_object()) throw FormatError("camera pose must be a JSON object");
  CameraPose p;
  try {
    if (j.contains("azimuth")) {
      p = orbit_pose(resolution, j.at("azimuth").get<double>(), j.value("elevation", 20.0),
                     j.value("radius_factor", 1.6), j.value("image_size", 2 * resolution), j.value("fov", 60.0));
    } else {
      p.position = vec_from(j.at("position"), "position");
      p.look_at = vec_from(j.at("look_at"), "look_at");
      p.up = vec_from(j.at("up"), "up");
      p.intr.focal = j.at("focal").get<double>();
      p.intr.width = j.at("width").get<int>();
      p.intr.height = j.at("height").get<int>();
      p.intr.cx = j.value("cx", p.intr.width / 2.0);
      p.intr.cy = j.value("cy", p.intr.height / 2.0);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("camera pose: ") + e.what());
  }
  p.validate();
  return p;
}

std::optional<std::vector<std::string>> read_manifest(const fs::path& dir, const std::string& split) {
  const fs::path p = dir / (split + ".txt");
  if (!fs::exists(p)) return std::nullopt;
  std::vector<std::string> names;
  std::stringstream ss(read_text(p));
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) names.push_back(line);
  return names;
}

std::vector<CorpusEntry> load_corpus(const fs::path& dir, const std::optional<std::vector<std::string>>& names) {
  std::vector<std::string> list = names ? *names : shape_names(dir);
  std::sort(list.begin(), list.end());
  if (list.empty()) throw ValidationError("no shapes found in " + dir.string());
  std::vector<CorpusEntry> out;
  for (const std::string& name : list) {
    const fs::path full = dir / (name + ".tsdf");
    const fs::path partial = dir / (name + ".partial.tsdf");
    if (!fs::exists(full)) throw IoError("missing " + full.string());
    if (!fs::exists(partial)) throw IoError("missing partial scan " + partial.string());
    std::vector<std::pair<std::string, std::string>> hashes{{name + ".tsdf", file_hash(full)},
                                                           {name + ".partial.tsdf", file_hash(partial)}};
    CorpusEntry e{name, load_grid(full), load_grid(partial), std::nullopt, std::nullopt, ""};
    const fs::path meta = dir / (name + ".json");
    if (fs::exists(meta)) {
      const json j = parse_json(read_text(meta), meta.string());
      if (j.contains("scan_pose")) e.scan_pose = pose_from_json(j["scan_pose"].dump(), e.complete.resolution());
      hashes.emplace_back(name + ".json", file_hash(meta));
    }
    const fs::path tok = dir / (name + ".ftok");
    if (fs::exists(tok)) {
      e.tokens = io::load_tokens(tok);
      hashes.emplace_back(name + ".ftok", file_hash(tok));
    }
    e.content_hash = hash_inputs(std::move(hashes));
    out.push_back(std::move(e));
  }
  return out;
}

SplitResult split_corpus(const fs::path& dir, SplitRatios r, std::uint64_t seed) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-6)
    throw ValidationError("split ratios must be nonnegative and sum to 1");
  std::vector<std::string> names = shape_names(dir);
  if (names.size() < 3) throw ValidationError("split needs at least 3 shapes, found " + std::to_string(names.size()));
  std::mt19937_64 rng(seed);
  // Fisher-Yates with explicit draws so the permutation does not depend on the standard library.
  for (std::size_t i = names.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(names[i], names[j]);
  }
  const auto n = static_cast<double>(names.size());
  const auto n_val = static_cast<std::size_t>(std::lround(r.val * n));
  const auto n_test = static_cast<std::size_t>(std::lround(r.test * n));
  if (n_val + n_test > names.size()) throw ValidationError("split ratios leave no room for the train split");
  SplitResult s;
  s.val.assign(names.begin(), names.begin() + n_val);
  s.test.assign(names.begin() + n_val, names.begin() + n_val + n_test);
  s.train.assign(names.begin() + n_val + n_test, names.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  auto write = [&](const char* split, const std::vector<std::string>& v) {
    std::string text;
    for (const auto& x : v) text += x + "\n";
    write_text(dir / (std::string(split) + ".txt"), text);
  };
  write("train", s.train);
  write("val", s.val);
  write("test", s.test);
  return s;
}

Tensor token_image(const TsdfGrid& partial, const CameraPose& scan_pose, int image_size) {
  CameraPose p = scan_pose;
  const double ratio = static_cast<double>(image_size) / scan_pose.intr.width;
  p.intr.focal *= ratio;
  p.intr.cx *= ratio;
  p.intr.cy = scan_pose.intr.cy * static_cast<double>(image_size) / scan_pose.intr.height;
  p.intr.width = image_size;
  p.intr.height = image_size;
  return vqvae::normals_tensor(render::render(partial.with_unknown_as_empty(), p));
}

std::vector<denoiser::Sample> diffusion_samples(const RunConfig& cfg, const std::vector<CorpusEntry>& corpus) {
  std::vector<denoiser::Sample> out;
  const int m = cfg.denoiser_arch().token_count();
  for (const CorpusEntry& e : corpus) {
    denoiser::Sample s{e.complete, e.partial, std::nullopt, std::nullopt};
    if (e.tokens) {
      if (e.tokens->dim(0) != m || e.tokens->dim(1) != cfg.D_CLIP)
        throw ValidationError("tokens of " + e.name + " are " + shape_str(e.tokens->shape()) + ", config expects [" +
                              std::to_string(m) + ", " + std::to_string(cfg.D_CLIP) + "]");
      s.tokens = e.tokens;
    } else if (e.scan_pose) {
      s.image = token_image(e.partial, *e.scan_pose, cfg.token_image_size);
    }
    out.push_back(std::move(s));
  }
  return out;
}

vqvae::VqVae fit_vqvae(const RunConfig& cfg, std::span<const TsdfGrid> corpus, const LogSink& sink) {
  return run_vqvae(cfg, corpus, sink, {}).model;
}

denoiser::UNet fit_diffusion(const RunConfig& cfg, const vqvae::VqVae& vq, std::span<const denoiser::Sample> corpus,
                             const LogSink& sink) {
  cfg.validate();
  denoiser::UNet net(cfg.denoiser_arch(), cfg.seed + 2);
  const auto sched = diffusion::make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T);
  denoiser::train(net, vq, corpus, sched, diffusion_options(cfg, sink));
  return net;
}

TrainResult train_vqvae(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out, const LogSink& sink) {
  cfg.validate();
  FileLock lock(out);
  const auto corpus = load_corpus(data_dir, read_manifest(data_dir, "train"));
  std::vector<TsdfGrid> grids;
  std::vector<std::pair<std::string, std::string>> hashes{{"config", git_blob_hash(cfg.to_text())}};
  for (const CorpusEntry& e : corpus) {
    grids.push_back(e.complete);
    hashes.emplace_back(e.name, e.content_hash);
  }
  const std::string input_hash = hash_inputs(hashes);
  TrainResult result;
  const fs::path log_path = out.string() + ".log.jsonl";
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path.string());
  auto line_sink = [&](const std::string& line) {
    result.log.push_back(line);
    log << line << "\n" << std::flush;
    if (sink) sink(line);
  };
  auto snapshot = [&](const VqRun& run) {
    return Checkpoint::from_params("vqvae", cfg.to_text(), input_hash, {&run.model.params(), &run.disc.params()});
  };
  VqRun run = run_vqvae(cfg, grids, line_sink, [&](long, const VqRun& r) { save_checkpoint(snapshot(r), out); });
  result.checkpoint = snapshot(run);
  save_checkpoint(result.checkpoint, out);
  return result;
}

vqvae::VqVae load_vqvae(const fs::path& ckpt, const std::optional<RunConfig>& cfg) {
  const Checkpoint c = read_checkpoint_kind(ckpt, "vqvae");
  const RunConfig echo = parse_config(c.config_echo);
  if (cfg) check_compatible("vqvae", c.config_echo, cfg->to_text(), "VQ-VAE checkpoint " + ckpt.string());
  vqvae::VqVae vq(echo.vqvae_arch(), echo.seed);
  c.restore(vq.params());
  return vq;
}

TrainResult train_diffusion(const RunConfig& cfg, const fs::path& vqvae_ckpt, const fs::path& data_dir,
                            const fs::path& out, const LogSink& sink) {
  cfg.validate();
  FileLock lock(out);
  const vqvae::VqVae vq = load_vqvae(vqvae_ckpt, cfg);
  const auto corpus = load_corpus(data_dir, read_manifest(data_dir, "train"));
  const auto samples = diffusion_samples(cfg, corpus);
  std::vector<std::pair<std::string, std::string>> hashes{{"config", git_blob_hash(cfg.to_text())},
                                                         {"vqvae", file_hash(vqvae_ckpt)}};
  for (const CorpusEntry& e : corpus) hashes.emplace_back(e.name, e.content_hash);
  const std::string input_hash = hash_inputs(hashes);

  TrainResult result;
  const fs::path log_path = out.string() + ".log.jsonl";
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path.string());
  auto line_sink = [&](const std::string& line) {
    result.log.push_back(line);
    log << line << "\n" << std::flush;
    if (sink) sink(line);
  };
  denoiser::UNet net(cfg.denoiser_arch(), cfg.seed + 2);
  const auto sched = diffusion::make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T);
  denoiser::TrainOptions o = diffusion_options(cfg, line_sink);
  o.checkpoint_every = cfg.ckpt_every;
  o.on_checkpoint = [&](long) {
    save_checkpoint(Checkpoint::from_params("diffusion", cfg.to_text(), input_hash, {&net.params()}), out);
  };
  denoiser::train(net, vq, samples, sched, o);
  result.checkpoint = Checkpoint::from_params("diffusion", cfg.to_text(), input_hash, {&net.params()});
  save_checkpoint(result.checkpoint, out);
  return result;
}

Models make_models(const RunConfig& cfg, vqvae::VqVae vq, denoiser::UNet unet) {
  cfg.validate();
  if (vq.arch().latent_shape() != unet.arch().latent_shape())
    throw VersionError("VQ-VAE and denoiser latent extents differ");
  auto sched = diffusion::make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T);
  return Models{cfg, std::move(vq), std::move(unet), std::move(sched), "", ""};
}

Models load_models(const fs::path& vqvae_ckpt, const fs::path& diffusion_ckpt, const std::optional<RunConfig>& cfg) {
  const Checkpoint dc = read_checkpoint_kind(diffusion_ckpt, "diffusion");
  const Checkpoint vc = read_checkpoint_kind(vqvae_ckpt, "vqvae");
  check_compatible("vqvae", vc.config_echo, dc.config_echo, "VQ-VAE checkpoint " + vqvae_ckpt.string());
  if (cfg) check_compatible("diffusion", dc.config_echo, cfg->to_text(), "diffusion checkpoint");
  const RunConfig run_cfg = cfg ? *cfg : parse_config(dc.config_echo);
  const RunConfig vq_cfg = parse_config(vc.config_echo);
  vqvae::VqVae vq(vq_cfg.vqvae_arch(), vq_cfg.seed);
  vc.restore(vq.params());
  denoiser::UNet unet(run_cfg.denoiser_arch(), run_cfg.seed + 2);
  dc.restore(unet.params());
  Models m = make_models(run_cfg, std::move(vq), std::move(unet));
  m.vq_hash = file_hash(vqvae_ckpt);
  m.diff_hash = file_hash(diffusion_ckpt);
  return m;
}

std::vector<TsdfGrid> complete(const Models& m, const CompletionInput& in, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw ValidationError("complete: n_samples must be positive");
  diffusion::Conditioning cond;
  if (in.tokens || in.image) cond.tokens = denoiser::tokens_for(m.unet, in.tokens, in.image);
  if (in.partial) {
    if (in.partial->resolution() != m.cfg.S)
      throw ValidationError("complete: partial scan has S=" + std::to_string(in.partial->resolution()) +
                            ", model expects S=" + std::to_string(m.cfg.S));
    cond.partial = *in.partial;
  }
  const auto fn = denoiser::as_sampler_fn(m.unet);
  std::vector<TsdfGrid> out;
  for (int k = 0; k < n_samples; ++k) {
    const Tensor z = diffusion::ddim_sample(fn, cond, m.schedule, m.cfg.T_inf, seed + k, m.unet.arch().latent_shape());
    out.push_back(m.vq.decode(m.vq.quantize(z).zq));
  }
  return out;
}

CompletionInput completion_input(const Models& m, const CorpusEntry& e, bool use_tokens, bool use_partial) {
  CompletionInput in;
  if (use_partial) in.partial = &e.partial;
  if (use_tokens) {
    if (e.tokens)
      in.tokens = e.tokens;
    else if (e.scan_pose)
      in.image = token_image(e.partial, *e.scan_pose, m.cfg.token_image_size);
    else
      throw ValidationError("image conditioning unavailable for " + e.name + ": no token file and no scan pose");
  }
  return in;
}

AblationMode parse_mode(const std::string& s) {
  if (s == "image_only") return AblationMode::ImageOnly;
  if (s == "partial_only") return AblationMode::PartialOnly;
  if (s == "both") return AblationMode::Both;
  throw ValidationError("unknown ablation mode '" + s + "' (expected image_only, partial_only or both)");
}

std::string mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::ImageOnly: return "image_only";
    case AblationMode::PartialOnly: return "partial_only";
    case AblationMode::Both: return "both";
  }
  return "both";
}

AblationReport run_ablation(const Models& m, const std::vector<CorpusEntry>& held_out, AblationMode mode, int best_of,
                            std::uint64_t seed) {
  if (held_out.empty()) throw ValidationError("ablation needs at least one held-out shape");
  if (best_of < 1) throw ValidationError("best_of must be positive");
  const bool use_tokens = mode != AblationMode::PartialOnly;
  const bool use_partial = mode != AblationMode::ImageOnly;
  std::vector<metrics::ShapeScore> first, best;
  for (const CorpusEntry& e : held_out) {
    const CompletionInput in = completion_input(m, e, use_tokens, use_partial);
    const auto samples = complete(m, in, best_of, seed);
    std::vector<metrics::ShapeScore> scores;
    for (const TsdfGrid& g : samples) scores.push_back(metrics::score_shape(e.name, g, e.complete, m.cfg.chamfer_points));
    first.push_back(scores.front());
    best.push_back(*std::min_element(scores.begin(), scores.end(),
                                     [](const auto& a, const auto& b) { return a.l1 < b.l1; }));
  }
  return AblationReport{mode, best_of, metrics::summarize(std::move(first)), metrics::summarize(std::move(best))};
}

metrics::EvalReport eval_dirs(const fs::path& pred_dir, const fs::path& gt_dir, int chamfer_points) {
  if (!fs::is_directory(pred_dir)) throw IoError("prediction directory " + pred_dir.string() + " does not exist");
  if (!fs::is_directory(gt_dir)) throw IoError("ground-truth directory " + gt_dir.string() + " does not exist");
  std::vector<fs::path> preds;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    const std::string f = e.path().filename().string();
    if (e.path().extension() == ".tsdf" && !f.ends_with(".partial.tsdf")) preds.push_back(e.path());
  }
  std::sort(preds.begin(), preds.end());
  if (preds.empty()) throw ValidationError("no prediction grids in " + pred_dir.string());
  std::vector<metrics::ShapeScore> rows;
  for (const fs::path& p : preds) {
    const std::string f = p.filename().string();
    const std::string shape = f.substr(0, f.find('.'));
    const fs::path gt = gt_dir / (shape + ".tsdf");
    if (!fs::exists(gt)) throw ValidationError("no ground truth " + gt.string() + " for prediction " + f);
    rows.push_back(metrics::score_shape(p.stem().string(), load_grid(p), load_grid(gt), chamfer_points));
  }
  return metrics::summarize(std::move(rows));
}

std::string report_json(const metrics::EvalReport& r, const std::string& config_echo, const std::string& input_hash) {
  json j = eval_json(r);
  j["conventions"] = conventions();
  j["config"] = config_echo;
  j["input_hash"] = input_hash;
  return j.dump(2) + "\n";
}

std::string ablation_json(const AblationReport& r, const std::string& config_echo, const std::string& input_hash) {
  json j{{"mode", mode_name(r.mode)},
         {"best_of", r.best_of},
         {"first_sample", eval_json(r.first)},
         {"best_of_k", eval_json(r.best)},
         {"conventions", conventions()},
         {"config", config_echo},
         {"input_hash", input_hash}};
  return j.dump(2) + "\n";
}

void save_sample(const TsdfGrid& grid, const fs::path& path, const std::string& config_echo,
                 const std::string& input_hash, std::uint64_t seed) {
  save_grid(grid, path);
  const json meta{{"config", config_echo}, {"input_hash", input_hash}, {"seed", seed}, {"grid_hash", file_hash(path)}};
  write_text(path.string() + ".json", meta.dump(2) + "\n");
}

std::string file_hash(const fs::path& path) { return git_blob_hash(binio::read_file(path)); }

}  // namespace scdiff::pipeline
