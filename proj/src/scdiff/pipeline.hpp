#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "scdiff/checkpoint.hpp"
#include "scdiff/config.hpp"
#include "scdiff/denoiser.hpp"
#include "scdiff/diffusion.hpp"
#include "scdiff/grid.hpp"
#include "scdiff/metrics.hpp"
#include "scdiff/vqvae.hpp"

namespace scdiff::pipeline {

namespace fs = std::filesystem;

/// Exclusive marker file `<target>.lock`, created atomically and removed on
/// destruction. A second holder fails with IoError.
class FileLock {
 public:
  explicit FileLock(const fs::path& target);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---- corpus -------------------------------------------------------------

/// Generator description used by gen-data (JSON). See tools/specs for the
/// schema; numeric fields are either a number or a [lo, hi] uniform range,
/// positions and sizes are fractions of S.
std::string default_generator_spec();

struct GenOptions {
  int count = 16;
  int resolution = 32;
  std::uint64_t seed = 0;
  double thresh = kDefaultTruncation;
};

/// Writes `<name>.tsdf`, `<name>.partial.tsdf` and `<name>.json` per shape;
/// returns the shape names in order.
std::vector<std::string> gen_data(const std::string& spec_json, const GenOptions& opt, const fs::path& out_dir);

/// Deterministic shape spec for index `i` of a corpus generated from `spec_json`.
ShapeSpec sample_shape(const std::string& spec_json, int resolution, std::uint64_t seed, int index);

struct CorpusEntry {
  std::string name;
  TsdfGrid complete;
  TsdfGrid partial;
  std::optional<CameraPose> scan_pose;
  std::optional<Tensor> tokens;  // from <name>.ftok when present
  std::string content_hash;      // over the files read for this entry
};

/// Loads every `<name>.tsdf` with its partial scan (or only those listed in
/// `names`), sorted by name.
std::vector<CorpusEntry> load_corpus(const fs::path& dir, const std::optional<std::vector<std::string>>& names = {});
/// Names listed in `<dir>/<split>.txt`, or nullopt when the manifest is absent.
std::optional<std::vector<std::string>> read_manifest(const fs::path& dir, const std::string& split);

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
};
struct SplitResult {
  std::vector<std::string> train, val, test;
};
/// Partitions the shape names of `dir` and writes train.txt / val.txt / test.txt.
SplitResult split_corpus(const fs::path& dir, SplitRatios ratios, std::uint64_t seed);

std::string pose_to_json(const CameraPose& pose);
/// Accepts either explicit {position, look_at, up, focal, cx, cy, width, height}
/// or an orbit {azimuth, elevation[, radius_factor, image_size, fov]}.
CameraPose pose_from_json(const std::string& json, int resolution);

/// [3, 1, n, n] normal image of the partial scan (unknown space as empty)
/// seen from the scan pose, rescaled to n pixels.
Tensor token_image(const TsdfGrid& partial, const CameraPose& scan_pose, int image_size);

// ---- training -----------------------------------------------------------

using LogSink = std::function<void(const std::string& line)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<std::string> log;  // JSON lines, also written next to the checkpoint
};

/// Trains on the train split (or the whole directory without manifests);
/// writes `out`, periodic checkpoints to the same path and `<out>.log.jsonl`.
TrainResult train_vqvae(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out, const LogSink& sink = {});
TrainResult train_diffusion(const RunConfig& cfg, const fs::path& vqvae_ckpt, const fs::path& data_dir,
                            const fs::path& out, const LogSink& sink = {});

/// Same training on in-memory data, no files involved.
vqvae::VqVae fit_vqvae(const RunConfig& cfg, std::span<const TsdfGrid> corpus, const LogSink& sink = {});
denoiser::UNet fit_diffusion(const RunConfig& cfg, const vqvae::VqVae& vq, std::span<const denoiser::Sample> corpus,
                             const LogSink& sink = {});

/// Training samples for the denoiser (token image or file tokens included).
std::vector<denoiser::Sample> diffusion_samples(const RunConfig& cfg, const std::vector<CorpusEntry>& corpus);

// ---- inference ----------------------------------------------------------

struct Models {
  RunConfig cfg;
  vqvae::VqVae vq;
  denoiser::UNet unet;
  diffusion::NoiseSchedule schedule;
  std::string vq_hash, diff_hash;  // blob hashes of the checkpoint files (empty in memory)
};

Models make_models(const RunConfig& cfg, vqvae::VqVae vq, denoiser::UNet unet);
/// Loads both checkpoints; architecture mismatches between them (or with
/// `cfg` when given) raise VersionError.
Models load_models(const fs::path& vqvae_ckpt, const fs::path& diffusion_ckpt,
                   const std::optional<RunConfig>& cfg = std::nullopt);
vqvae::VqVae load_vqvae(const fs::path& ckpt, const std::optional<RunConfig>& cfg = std::nullopt);

struct CompletionInput {
  const TsdfGrid* partial = nullptr;       // null: no partial-scan conditioning
  std::optional<Tensor> tokens;            // [M, d]; wins over the image
  std::optional<Tensor> image;             // [3, 1, H, W] for the token encoder
};

/// n_samples DDIM chains with seeds seed, seed + 1, ...; each latent is
/// quantized and decoded.
std::vector<TsdfGrid> complete(const Models& m, const CompletionInput& in, int n_samples, std::uint64_t seed);

/// Conditioning for a corpus entry with the given channels enabled.
CompletionInput completion_input(const Models& m, const CorpusEntry& e, bool use_tokens, bool use_partial);

enum class AblationMode { ImageOnly, PartialOnly, Both };
AblationMode parse_mode(const std::string& s);
std::string mode_name(AblationMode m);

struct AblationReport {
  AblationMode mode = AblationMode::Both;
  int best_of = 1;
  metrics::EvalReport first;  // first sample per input
  metrics::EvalReport best;   // lowest-l1 sample out of best_of
};

AblationReport run_ablation(const Models& m, const std::vector<CorpusEntry>& held_out, AblationMode mode, int best_of,
                            std::uint64_t seed);

// ---- evaluation and reports ----------------------------------------------

/// Matches `<name>.tsdf` files of pred_dir to gt_dir (partial scans ignored).
metrics::EvalReport eval_dirs(const fs::path& pred_dir, const fs::path& gt_dir, int chamfer_points);

std::string report_json(const metrics::EvalReport& r, const std::string& config_echo, const std::string& input_hash);
std::string ablation_json(const AblationReport& r, const std::string& config_echo, const std::string& input_hash);

/// Writes a sample grid plus `<path>.json` with config echo and input hash.
void save_sample(const TsdfGrid& grid, const fs::path& path, const std::string& config_echo,
                 const std::string& input_hash, std::uint64_t seed);

/// Blob hash of a file's bytes.
std::string file_hash(const fs::path& path);

}  // namespace scdiff::pipeline
