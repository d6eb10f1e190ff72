#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scdiff/nn.hpp"

namespace scdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned container: magic "SCDC", u32 version, then length-prefixed
/// strings kind / config echo / input hash, u32 tensor count and per tensor
/// (name, u32 rank, u32 dims, f32 data). Little-endian throughout.
struct Checkpoint {
  std::string kind;         // "vqvae" or "diffusion"
  std::string config_echo;  // RunConfig::to_text() of the producing run
  std::string input_hash;   // content hash of the training inputs
  std::vector<std::pair<std::string, Tensor>> tensors;

  /// Snapshot of every parameter of the given sets (names must not collide).
  static Checkpoint from_params(std::string kind, std::string config_echo, std::string input_hash,
                                std::initializer_list<const nn::ParamSet*> sets);
  /// Copies stored tensors into `params`; every parameter must be present with
  /// an identical shape, otherwise VersionError.
  void restore(nn::ParamSet& params) const;
  bool has(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Lowercase hex SHA-1 of "blob <size>\0" + bytes, as git computes blob ids.
std::string git_blob_hash(std::span<const std::uint8_t> bytes);
std::string git_blob_hash(const std::string& text);

/// Order-independent digest of named inputs: the blob hash of the sorted
/// "<blob hash> <name>" lines.
std::string hash_inputs(std::vector<std::pair<std::string, std::string>> name_and_blob_hash);

}  // namespace scdiff
