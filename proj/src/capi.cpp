#include "scdiff/scdiff.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <sstream>

#include "scdiff/checkpoint.hpp"
#include "scdiff/config.hpp"
#include "scdiff/errors.hpp"
#include "scdiff/grid.hpp"
#include "scdiff/io.hpp"
#include "scdiff/pipeline.hpp"
#include "scdiff/render.hpp"

struct scd_grid {
  scdiff::TsdfGrid grid;
};
struct scd_config {
  scdiff::RunConfig cfg;
};
struct scd_model {
  scdiff::pipeline::Models models;
};

namespace {

namespace pl = scdiff::pipeline;
namespace fs = std::filesystem;

thread_local std::string g_last_error;

scd_status fail(scd_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs f, translating exceptions to status codes.
template <class F>
scd_status guarded(F&& f) {
  try {
    f();
    return SCD_OK;
  } catch (const scdiff::ValidationError& e) {
    return fail(SCD_ERR_VALIDATION, e.what());
  } catch (const scdiff::FormatError& e) {
    return fail(SCD_ERR_FORMAT, e.what());
  } catch (const scdiff::IoError& e) {
    return fail(SCD_ERR_IO, e.what());
  } catch (const scdiff::VersionError& e) {
    return fail(SCD_ERR_VERSION, e.what());
  } catch (const scdiff::NumericError& e) {
    return fail(SCD_ERR_NUMERIC, e.what());
  } catch (const scdiff::ContractError& e) {
    return fail(SCD_ERR_CONTRACT, e.what());
  } catch (const scdiff::EmptySurfaceError& e) {
    return fail(SCD_ERR_EMPTY_SURFACE, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(SCD_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(SCD_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(SCD_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(SCD_ERR_INTERNAL, "unknown error");
  }
}

void require(const void* p, const char* what) {
  if (!p) throw scdiff::ValidationError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

pl::LogSink sink_for(scd_log_fn fn, void* user) {
  if (!fn) return {};
  return [fn, user](const std::string& line) { fn(line.c_str(), user); };
}

scdiff::RunConfig config_or_default(const scd_config* cfg) { return cfg ? cfg->cfg : scdiff::RunConfig{}; }

pl::CompletionInput make_input(const scd_model& m, const scdiff::TsdfGrid* partial, const char* tokens_path,
                               const char* scan_pose_json, std::vector<std::pair<std::string, std::string>>& hashes) {
  pl::CompletionInput in;
  in.partial = partial;
  const auto arch = m.models.unet.arch();
  if (tokens_path) {
    in.tokens = scdiff::io::load_tokens(tokens_path, arch.token_count(), arch.context_dim);
    hashes.emplace_back("tokens", pl::file_hash(tokens_path));
  } else if (scan_pose_json) {
    if (!partial) throw scdiff::ValidationError("image tokens from a scan pose need a partial scan");
    const scdiff::CameraPose pose = pl::pose_from_json(scan_pose_json, partial->resolution());
    in.image = pl::token_image(*partial, pose, m.models.cfg.token_image_size);
    hashes.emplace_back("scan_pose", scdiff::git_blob_hash(pl::pose_to_json(pose)));
  }
  return in;
}

}  // namespace

extern "C" {

const char* scd_version(void) { return "1.0.0"; }

const char* scd_last_error(void) { return g_last_error.c_str(); }

const char* scd_status_name(scd_status status) {
  switch (status) {
    case SCD_OK: return "ok";
    case SCD_ERR_VALIDATION: return "validation error";
    case SCD_ERR_FORMAT: return "format error";
    case SCD_ERR_IO: return "i/o error";
    case SCD_ERR_VERSION: return "version error";
    case SCD_ERR_NUMERIC: return "numeric error";
    case SCD_ERR_CONTRACT: return "contract violation";
    case SCD_ERR_EMPTY_SURFACE: return "empty surface";
    case SCD_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void scd_string_free(char* s) { std::free(s); }

scd_status scd_grid_create(int resolution, double thresh, const float* values, const uint8_t* mask, scd_grid** out) {
  return guarded([&] {
    require(values, "values");
    require(out, "out");
    if (resolution < 1 || resolution > 1024) throw scdiff::ValidationError("resolution out of range");
    const std::size_t n = static_cast<std::size_t>(resolution) * resolution * resolution;
    std::optional<std::vector<uint8_t>> m;
    if (mask) m.emplace(mask, mask + n);
    *out = new scd_grid{scdiff::TsdfGrid(resolution, thresh, std::vector<float>(values, values + n), std::move(m))};
  });
}

scd_status scd_grid_load(const char* path, scd_grid** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new scd_grid{scdiff::load_grid(path)};
  });
}

scd_status scd_grid_save(const scd_grid* grid, const char* path) {
  return guarded([&] {
    require(grid, "grid");
    require(path, "path");
    scdiff::save_grid(grid->grid, path);
  });
}

void scd_grid_free(scd_grid* grid) { delete grid; }
int scd_grid_resolution(const scd_grid* grid) { return grid ? grid->grid.resolution() : 0; }
double scd_grid_thresh(const scd_grid* grid) { return grid ? grid->grid.thresh() : 0.0; }
int scd_grid_has_mask(const scd_grid* grid) { return grid && grid->grid.has_mask() ? 1 : 0; }
const float* scd_grid_values(const scd_grid* grid) { return grid ? grid->grid.values().data() : nullptr; }
const uint8_t* scd_grid_mask(const scd_grid* grid) {
  return grid && grid->grid.has_mask() ? grid->grid.known_mask().data() : nullptr;
}

scd_status scd_grid_export_obj(const scd_grid* grid, const char* path) {
  return guarded([&] {
    require(grid, "grid");
    require(path, "path");
    scdiff::io::write_obj(scdiff::io::extract_surface(grid->grid), path);
  });
}

scd_status scd_config_default(scd_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new scd_config{};
  });
}

scd_status scd_config_parse(const char* text, scd_config** out) {
  return guarded([&] {
    require(text, "text");
    require(out, "out");
    *out = new scd_config{scdiff::parse_config(text)};
  });
}

scd_status scd_config_load(const char* path, scd_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new scd_config{scdiff::load_config(path)};
  });
}

scd_status scd_config_set(scd_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    std::stringstream in(cfg->cfg.to_text());
    std::string line, text;
    bool found = false;
    while (std::getline(in, line)) {
      const std::string k = line.substr(0, line.find(" = "));
      if (k == key) {
        line = k + " = " + value;
        found = true;
      }
      text += line + "\n";
    }
    if (!found) throw scdiff::ValidationError(std::string("unknown config key '") + key + "'");
    cfg->cfg = scdiff::parse_config(text);
  });
}

scd_status scd_config_text(const scd_config* cfg, char** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = dup_string(cfg->cfg.to_text());
  });
}

void scd_config_free(scd_config* cfg) { delete cfg; }

scd_status scd_default_generator_spec(char** out) {
  return guarded([&] {
    require(out, "out");
    *out = dup_string(pl::default_generator_spec());
  });
}

scd_status scd_gen_data(const char* spec_json, int count, int resolution, uint64_t seed, double thresh,
                        const char* out_dir, int* written) {
  return guarded([&] {
    require(out_dir, "out_dir");
    pl::GenOptions o{count, resolution, seed, thresh};
    const auto names = pl::gen_data(spec_json ? spec_json : pl::default_generator_spec(), o, out_dir);
    if (written) *written = static_cast<int>(names.size());
  });
}

scd_status scd_split(const char* data_dir, double train, double val, double test, uint64_t seed, int* counts) {
  return guarded([&] {
    require(data_dir, "data_dir");
    const auto r = pl::split_corpus(data_dir, {train, val, test}, seed);
    if (counts) {
      counts[0] = static_cast<int>(r.train.size());
      counts[1] = static_cast<int>(r.val.size());
      counts[2] = static_cast<int>(r.test.size());
    }
  });
}

scd_status scd_view_pose(int resolution, int image_size, int index, char** out) {
  return guarded([&] {
    require(out, "out");
    if (resolution < 1 || image_size < 1) throw scdiff::ValidationError("resolution and image size must be positive");
    const auto views = scdiff::fixed_views(resolution, image_size);
    if (index < 0 || index >= static_cast<int>(views.size()))
      throw scdiff::ValidationError("view index " + std::to_string(index) + " out of range [0, " +
                                    std::to_string(views.size() - 1) + "]");
    *out = dup_string(pl::pose_to_json(views[index]));
  });
}

scd_status scd_render(const scd_grid* grid, const char* pose_json, const char* depth_pgm, const char* normals_ppm) {
  return guarded([&] {
    require(grid, "grid");
    require(pose_json, "pose_json");
    const auto pose = pl::pose_from_json(pose_json, grid->grid.resolution());
    const auto r = scdiff::render::render(grid->grid, pose);
    if (depth_pgm) scdiff::io::write_depth_pgm(r.depth, depth_pgm);
    if (normals_ppm) scdiff::io::write_normals_ppm(r.normals, normals_ppm);
  });
}

scd_status scd_train_vqvae(const scd_config* cfg, const char* data_dir, const char* out_ckpt, scd_log_fn log,
                           void* user) {
  return guarded([&] {
    require(cfg, "cfg");
    require(data_dir, "data_dir");
    require(out_ckpt, "out_ckpt");
    pl::train_vqvae(cfg->cfg, data_dir, out_ckpt, sink_for(log, user));
  });
}

scd_status scd_train_diffusion(const scd_config* cfg, const char* vqvae_ckpt, const char* data_dir,
                               const char* out_ckpt, scd_log_fn log, void* user) {
  return guarded([&] {
    require(cfg, "cfg");
    require(vqvae_ckpt, "vqvae_ckpt");
    require(data_dir, "data_dir");
    require(out_ckpt, "out_ckpt");
    pl::train_diffusion(cfg->cfg, vqvae_ckpt, data_dir, out_ckpt, sink_for(log, user));
  });
}

scd_status scd_model_load(const char* vqvae_ckpt, const char* diffusion_ckpt, const scd_config* cfg,
                          scd_model** out) {
  return guarded([&] {
    require(vqvae_ckpt, "vqvae_ckpt");
    require(diffusion_ckpt, "diffusion_ckpt");
    require(out, "out");
    std::optional<scdiff::RunConfig> c;
    if (cfg) c = cfg->cfg;
    *out = new scd_model{pl::load_models(vqvae_ckpt, diffusion_ckpt, c)};
  });
}

void scd_model_free(scd_model* model) { delete model; }

scd_status scd_complete(const scd_model* model, const scd_condition* cond, int n_samples, uint64_t seed,
                        scd_grid** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    const scd_condition none{nullptr, nullptr, nullptr};
    const scd_condition& c = cond ? *cond : none;
    std::vector<std::pair<std::string, std::string>> hashes;
    const auto in = make_input(*model, c.partial ? &c.partial->grid : nullptr, c.tokens_path, c.scan_pose_json, hashes);
    auto grids = pl::complete(model->models, in, n_samples, seed);
    for (std::size_t k = 0; k < grids.size(); ++k) out[k] = new scd_grid{std::move(grids[k])};
  });
}

scd_status scd_complete_files(const scd_model* model, const char* partial_path, const char* tokens_path,
                              const char* scan_pose_json, int n_samples, uint64_t seed, const char* out_path,
                              int with_mesh) {
  return guarded([&] {
    require(model, "model");
    require(out_path, "out_path");
    const auto& m = model->models;
    std::vector<std::pair<std::string, std::string>> hashes{{"vqvae", m.vq_hash}, {"diffusion", m.diff_hash}};
    std::optional<scdiff::TsdfGrid> partial;
    if (partial_path) {
      partial = scdiff::load_grid(partial_path);
      hashes.emplace_back("partial", pl::file_hash(partial_path));
    }
    const auto in = make_input(*model, partial ? &*partial : nullptr, tokens_path, scan_pose_json, hashes);
    const std::string input_hash = scdiff::hash_inputs(hashes);
    const auto grids = pl::complete(m, in, n_samples, seed);
    const fs::path out(out_path);
    for (std::size_t k = 0; k < grids.size(); ++k) {
      fs::path p = out;
      if (k > 0) p = out.parent_path() / (out.stem().string() + ".s" + std::to_string(k) + ".tsdf");
      pl::save_sample(grids[k], p, m.cfg.to_text(), input_hash, seed + k);
      if (with_mesh) scdiff::io::write_obj(scdiff::io::extract_surface(grids[k]), fs::path(p).replace_extension(".obj"));
    }
  });
}

scd_status scd_eval(const char* pred_dir, const char* gt_dir, const scd_config* cfg, const char* report_path,
                    double* mean_l1) {
  return guarded([&] {
    require(pred_dir, "pred_dir");
    require(gt_dir, "gt_dir");
    require(report_path, "report_path");
    const scdiff::RunConfig c = config_or_default(cfg);
    const auto report = pl::eval_dirs(pred_dir, gt_dir, c.chamfer_points);
    std::vector<std::pair<std::string, std::string>> hashes;
    for (const auto& dir : {fs::path(pred_dir), fs::path(gt_dir)})
      for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".tsdf")
          hashes.emplace_back((dir == fs::path(pred_dir) ? "pred/" : "gt/") + e.path().filename().string(),
                              pl::file_hash(e.path()));
    std::ofstream f(report_path);
    if (!f) throw scdiff::IoError(std::string("cannot write ") + report_path);
    f << pl::report_json(report, c.to_text(), scdiff::hash_inputs(hashes));
    if (!f) throw scdiff::IoError(std::string("failed writing ") + report_path);
    if (mean_l1) *mean_l1 = report.aggregate.l1;
  });
}

scd_status scd_ablate(const scd_model* model, const char* data_dir, const char* split, const char* mode,
                      int best_of, uint64_t seed, const char* report_path, double* first_l1, double* best_l1) {
  return guarded([&] {
    require(model, "model");
    require(data_dir, "data_dir");
    require(mode, "mode");
    require(report_path, "report_path");
    const auto m = pl::parse_mode(mode);
    const auto names = pl::read_manifest(data_dir, split ? split : "test");
    const auto held_out = pl::load_corpus(data_dir, names);
    const auto r = pl::run_ablation(model->models, held_out, m, best_of, seed);
    std::vector<std::pair<std::string, std::string>> hashes{{"vqvae", model->models.vq_hash},
                                                           {"diffusion", model->models.diff_hash},
                                                           {"seed", std::to_string(seed)}};
    for (const auto& e : held_out) hashes.emplace_back(e.name, e.content_hash);
    std::ofstream f(report_path);
    if (!f) throw scdiff::IoError(std::string("cannot write ") + report_path);
    f << pl::ablation_json(r, model->models.cfg.to_text(), scdiff::hash_inputs(hashes));
    if (!f) throw scdiff::IoError(std::string("failed writing ") + report_path);
    if (first_l1) *first_l1 = r.first.aggregate.l1;
    if (best_l1) *best_l1 = r.best.aggregate.l1;
  });
}

}  // extern "C"
