#include "scdiff/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <map>

#include "scdiff/binio.hpp"
#include "scdiff/errors.hpp"

namespace scdiff {
namespace {

constexpr char kMagic[4] = {'S', 'C', 'D', 'C'};

}  // namespace

Checkpoint Checkpoint::from_params(std::string kind, std::string config_echo, std::string input_hash,
                                   std::initializer_list<const nn::ParamSet*> sets) {
  Checkpoint c{std::move(kind), std::move(config_echo), std::move(input_hash), {}};
  for (const nn::ParamSet* ps : sets)
    for (const auto& [name, v] : ps->items()) {
      if (c.has(name)) throw ValidationError("checkpoint: duplicate tensor name " + name);
      c.tensors.emplace_back(name, v.value());
    }
  return c;
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.first == name; });
}

void Checkpoint::restore(nn::ParamSet& params) const {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  for (const auto& [name, v] : params.items()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw VersionError("checkpoint (" + kind + ") lacks parameter " + name);
    if (it->second->shape() != v.shape())
      throw VersionError("checkpoint parameter " + name + " has shape " + shape_str(it->second->shape()) +
                         ", model expects " + shape_str(v.shape()));
  }
  for (const auto& [name, v] : params.items()) {
    ag::Var dst = v;
    dst.mutable_value() = *by_name.at(name);
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.str(ckpt.kind);
  w.str(ckpt.config_echo);
  w.str(ckpt.input_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.put<float>(static_cast<float>(v));
  }
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "checkpoint");
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw FormatError("checkpoint: bad magic (expected SCDC)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  c.kind = r.str("kind");
  c.config_echo = r.str("config echo");
  c.input_hash = r.str("input hash");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw FormatError("checkpoint: tensor " + name + " has implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint32_t>("tensor dims");
      if (d == 0 || d > (1u << 24)) throw FormatError("checkpoint: tensor " + name + " has invalid extent");
      shape.push_back(static_cast<int>(d));
      n *= d;
    }
    r.need(n * sizeof(float), "tensor data");
    std::vector<double> data(n);
    for (std::size_t k = 0; k < n; ++k) data[k] = r.get<float>("tensor data");
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0)
    throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

std::string git_blob_hash(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("SHA-1: context allocation failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("SHA-1 computation failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string git_blob_hash(const std::string& text) {
  return git_blob_hash(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hash_inputs(std::vector<std::pair<std::string, std::string>> name_and_blob_hash) {
  std::sort(name_and_blob_hash.begin(), name_and_blob_hash.end());
  std::string listing;
  for (const auto& [name, h] : name_and_blob_hash) listing += h + " " + name + "\n";
  return git_blob_hash(listing);
}

}  // namespace scdiff
