// Command-line front end; talks to the library only through the C interface.
#include <scdiff/scdiff.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace {

struct Failure {
  scd_status status;
};

void check(scd_status s) {
  if (s != SCD_OK) throw Failure{s};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error: cannot read " << path << "\n";
    throw Failure{SCD_ERR_IO};
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string take(char* s) {
  std::string out = s ? s : "";
  scd_string_free(s);
  return out;
}

using Config = std::unique_ptr<scd_config, decltype(&scd_config_free)>;
using Model = std::unique_ptr<scd_model, decltype(&scd_model_free)>;
using Grid = std::unique_ptr<scd_grid, decltype(&scd_grid_free)>;

Config make_config(const std::string& path, const std::vector<std::string>& overrides) {
  scd_config* c = nullptr;
  check(path.empty() ? scd_config_default(&c) : scd_config_load(path.c_str(), &c));
  Config cfg(c, scd_config_free);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::cerr << "error: --set expects key=value, got '" << kv << "'\n";
      throw Failure{SCD_ERR_VALIDATION};
    }
    check(scd_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  return cfg;
}

// Pose argument: view index, inline JSON object, or a JSON file.
std::string resolve_pose(const std::string& arg, int resolution, int image_size) {
  if (!arg.empty() && arg.find_first_not_of("0123456789") == std::string::npos) {
    char* out = nullptr;
    check(scd_view_pose(resolution, image_size, std::stoi(arg), &out));
    return take(out);
  }
  if (!arg.empty() && arg.front() == '{') return arg;
  return read_file(arg);
}

// "auto" reads scan_pose from the <name>.json metadata next to <name>.partial.tsdf.
std::string resolve_scan_pose(const std::string& arg, const std::string& partial) {
  if (arg != "auto") return resolve_pose(arg, 0, 0);
  std::string stem = partial;
  for (const char* suffix : {".partial.tsdf", ".tsdf"})
    if (stem.size() > std::strlen(suffix) && stem.ends_with(suffix)) {
      stem.resize(stem.size() - std::strlen(suffix));
      break;
    }
  const auto meta = nlohmann::json::parse(read_file(stem + ".json"), nullptr, false);
  if (meta.is_discarded() || !meta.contains("scan_pose")) {
    std::cerr << "error: " << stem << ".json has no scan_pose\n";
    throw Failure{SCD_ERR_FORMAT};
  }
  return meta["scan_pose"].dump();
}

void print_line(const char* line, void*) {
  std::cout << line << "\n" << std::flush;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-diffusion shape completion of truncated signed distance grids"};
  app.require_subcommand(1);
  std::vector<std::string> overrides;
  std::string config_path;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "Override a config key (key=value)");
  };

  // gen-data
  std::string spec_file, out_dir;
  int count = 16, resolution = 32;
  uint64_t seed = 0;
  double thresh = 3.0;
  auto* gen = app.add_subcommand("gen-data", "Generate a procedural corpus with partial scans");
  gen->add_option("--spec-file", spec_file, "Generator description (JSON); built-in default when omitted");
  gen->add_option("--count", count, "Number of shapes")->check(CLI::PositiveNumber);
  gen->add_option("--resolution", resolution, "Grid resolution S");
  gen->add_option("--seed", seed, "Corpus seed");
  gen->add_option("--thresh", thresh, "Truncation distance in voxels");
  gen->add_option("--out-dir", out_dir, "Output directory")->required();

  // split
  std::string data_dir;
  std::vector<double> ratios{0.8, 0.1, 0.1};
  auto* split = app.add_subcommand("split", "Write train/val/test manifests");
  split->add_option("--data-dir", data_dir, "Corpus directory")->required();
  split->add_option("--ratios", ratios, "train,val,test fractions")->delimiter(',')->expected(3);
  split->add_option("--seed", seed, "Shuffle seed");

  // render
  std::string grid_path, pose_arg;
  std::vector<std::string> render_out;
  int image_size = 64;
  auto* rend = app.add_subcommand("render", "Render depth and normal images of a grid");
  rend->add_option("--grid", grid_path, "Grid file")->required();
  rend->add_option("--pose", pose_arg, "Fixed view index, JSON object or JSON file")->required();
  rend->add_option("--out", render_out, "depth.pgm normals.ppm")->required()->expected(2);
  rend->add_option("--image-size", image_size, "Image size for fixed views");

  // train-vqvae
  std::string out_path;
  bool quiet = false;
  auto* tvq = app.add_subcommand("train-vqvae", "Train the VQ-VAE");
  add_config(tvq);
  tvq->add_option("--data-dir", data_dir, "Corpus directory")->required();
  tvq->add_option("--out", out_path, "Checkpoint path")->required();
  tvq->add_flag("--quiet", quiet, "Do not echo log lines");

  // train-diffusion
  std::string vqvae_path, diffusion_path;
  auto* tdf = app.add_subcommand("train-diffusion", "Train the latent denoiser with its control branch");
  add_config(tdf);
  tdf->add_option("--vqvae", vqvae_path, "VQ-VAE checkpoint")->required();
  tdf->add_option("--data-dir", data_dir, "Corpus directory")->required();
  tdf->add_option("--out", out_path, "Checkpoint path")->required();
  tdf->add_flag("--quiet", quiet, "Do not echo log lines");

  // complete
  std::string partial_path, tokens_path, scan_pose_arg;
  int n_samples = 1;
  bool mesh = false;
  auto* comp = app.add_subcommand("complete", "Sample completions of a partial scan");
  add_config(comp);
  comp->add_option("--vqvae", vqvae_path, "VQ-VAE checkpoint")->required();
  comp->add_option("--diffusion", diffusion_path, "Diffusion checkpoint")->required();
  comp->add_option("--partial", partial_path, "Partial scan grid");
  comp->add_option("--tokens", tokens_path, "Token file for image conditioning");
  comp->add_option("--scan-pose", scan_pose_arg, "Scan pose for image tokens (JSON, file, or 'auto')");
  comp->add_option("--n", n_samples, "Number of samples")->check(CLI::PositiveNumber);
  comp->add_option("--seed", seed, "Seed of the first sample");
  comp->add_option("--out", out_path, "Output grid path (extra samples get .s<k>.tsdf)")->required();
  comp->add_flag("--mesh", mesh, "Also write OBJ meshes of the zero level set");

  // eval
  std::string pred_dir, gt_dir, report_path;
  auto* ev = app.add_subcommand("eval", "Score predicted grids against ground truth");
  add_config(ev);
  ev->add_option("--pred-dir", pred_dir, "Predictions")->required();
  ev->add_option("--gt-dir", gt_dir, "Ground truth")->required();
  ev->add_option("--report", report_path, "JSON report path")->required();

  // ablate
  std::string mode = "both", split_name = "test";
  int best_of = 5;
  auto* abl = app.add_subcommand("ablate", "Held-out completion with conditioning channels masked");
  add_config(abl);
  abl->add_option("--vqvae", vqvae_path, "VQ-VAE checkpoint")->required();
  abl->add_option("--diffusion", diffusion_path, "Diffusion checkpoint")->required();
  abl->add_option("--data-dir", data_dir, "Corpus directory")->required();
  abl->add_option("--split", split_name, "Manifest to evaluate");
  abl->add_option("--mode", mode, "image_only, partial_only or both");
  abl->add_option("--best-of", best_of, "Samples per input")->check(CLI::PositiveNumber);
  abl->add_option("--seed", seed, "Seed of the first sample");
  abl->add_option("--report", report_path, "JSON report path")->required();

  // mesh
  auto* msh = app.add_subcommand("mesh", "Export the zero level set of a grid as OBJ");
  msh->add_option("--grid", grid_path, "Grid file")->required();
  msh->add_option("--out", out_path, "OBJ path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const std::string spec = spec_file.empty() ? std::string() : read_file(spec_file);
      int written = 0;
      check(scd_gen_data(spec.empty() ? nullptr : spec.c_str(), count, resolution, seed, thresh, out_dir.c_str(),
                         &written));
      std::cout << "wrote " << written << " shapes to " << out_dir << "\n";
    } else if (split->parsed()) {
      int sizes[3] = {0, 0, 0};
      check(scd_split(data_dir.c_str(), ratios[0], ratios[1], ratios[2], seed, sizes));
      std::cout << "train " << sizes[0] << ", val " << sizes[1] << ", test " << sizes[2] << "\n";
    } else if (rend->parsed()) {
      scd_grid* g = nullptr;
      check(scd_grid_load(grid_path.c_str(), &g));
      Grid grid(g, scd_grid_free);
      const std::string pose = resolve_pose(pose_arg, scd_grid_resolution(grid.get()), image_size);
      check(scd_render(grid.get(), pose.c_str(), render_out[0].c_str(), render_out[1].c_str()));
    } else if (tvq->parsed()) {
      Config cfg = make_config(config_path, overrides);
      check(scd_train_vqvae(cfg.get(), data_dir.c_str(), out_path.c_str(), quiet ? nullptr : print_line, nullptr));
    } else if (tdf->parsed()) {
      Config cfg = make_config(config_path, overrides);
      check(scd_train_diffusion(cfg.get(), vqvae_path.c_str(), data_dir.c_str(), out_path.c_str(),
                                quiet ? nullptr : print_line, nullptr));
    } else if (comp->parsed()) {
      scd_model* m = nullptr;
      std::optional<Config> cfg;
      if (!config_path.empty() || !overrides.empty()) cfg.emplace(make_config(config_path, overrides));
      check(scd_model_load(vqvae_path.c_str(), diffusion_path.c_str(), cfg ? cfg->get() : nullptr, &m));
      Model model(m, scd_model_free);
      std::string scan_pose;
      if (!scan_pose_arg.empty()) scan_pose = resolve_scan_pose(scan_pose_arg, partial_path);
      check(scd_complete_files(model.get(), partial_path.empty() ? nullptr : partial_path.c_str(),
                               tokens_path.empty() ? nullptr : tokens_path.c_str(),
                               scan_pose.empty() ? nullptr : scan_pose.c_str(), n_samples, seed, out_path.c_str(),
                               mesh ? 1 : 0));
    } else if (ev->parsed()) {
      Config cfg = make_config(config_path, overrides);
      double l1 = 0;
      check(scd_eval(pred_dir.c_str(), gt_dir.c_str(), cfg.get(), report_path.c_str(), &l1));
      std::cout << "mean l1 " << l1 << "\n";
    } else if (abl->parsed()) {
      scd_model* m = nullptr;
      std::optional<Config> cfg;
      if (!config_path.empty() || !overrides.empty()) cfg.emplace(make_config(config_path, overrides));
      check(scd_model_load(vqvae_path.c_str(), diffusion_path.c_str(), cfg ? cfg->get() : nullptr, &m));
      Model model(m, scd_model_free);
      double first = 0, best = 0;
      check(scd_ablate(model.get(), data_dir.c_str(), split_name.c_str(), mode.c_str(), best_of, seed,
                       report_path.c_str(), &first, &best));
      std::cout << mode << ": first-sample l1 " << first << ", best-of-" << best_of << " l1 " << best << "\n";
    } else if (msh->parsed()) {
      scd_grid* g = nullptr;
      check(scd_grid_load(grid_path.c_str(), &g));
      Grid grid(g, scd_grid_free);
      check(scd_grid_export_obj(grid.get(), out_path.c_str()));
    }
  } catch (const Failure& f) {
    if (f.status != SCD_OK && *scd_last_error()) std::cerr << "error: " << scd_last_error() << "\n";
    return static_cast<int>(f.status);
  }
  return 0;
}
