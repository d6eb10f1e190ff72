#include "scdiff/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "scdiff/errors.hpp"

namespace scdiff {
namespace {

using FieldRef = std::variant<int*, long*, double*, std::uint64_t*, std::vector<int>*, std::array<int, 3>*>;

struct Field {
  const char* key;
  FieldRef ref;
};

std::vector<Field> fields(RunConfig& c) {
  return {
      {"thresh", &c.thresh},
      {"S", &c.S},
      {"S_l", &c.S_l},
      {"D", &c.D},
      {"K_Z", &c.K_Z},
      {"beta", &c.beta},
      {"gamma_R", &c.gamma_R},
      {"gamma_A", &c.gamma_A},
      {"T", &c.T},
      {"T_inf", &c.T_inf},
      {"beta_1", &c.beta_1},
      {"beta_T", &c.beta_T},
      {"A_res", &c.A_res},
      {"D_CLIP", &c.D_CLIP},
      {"bs", &c.bs},
      {"lr_vqvae", &c.lr_vqvae},
      {"lr_diff", &c.lr_diff},
      {"vq_widths", &c.vq_widths},
      {"unet_widths", &c.unet_widths},
      {"temb_dim", &c.temb_dim},
      {"disc_width", &c.disc_width},
      {"lr_disc", &c.lr_disc},
      {"render_size", &c.render_size},
      {"steps_vqvae", &c.steps_vqvae},
      {"steps_diff", &c.steps_diff},
      {"log_every", &c.log_every},
      {"ckpt_every", &c.ckpt_every},
      {"dead_code_steps", &c.dead_code_steps},
      {"seed", &c.seed},
      {"token_image_size", &c.token_image_size},
      {"drop_tokens", &c.drop_tokens},
      {"drop_partial", &c.drop_partial},
      {"chamfer_points", &c.chamfer_points},
      {"best_of", &c.best_of},
  };
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

std::vector<int> parse_int_list(const std::string& s, bool& ok) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  ok = true;
  while (std::getline(ss, item, ',')) {
    int v;
    if (!parse_number(trim(item), v)) {
      ok = false;
      return {};
    }
    out.push_back(v);
  }
  ok = ok && !out.empty();
  return out;
}

bool assign(FieldRef ref, const std::string& value) {
  return std::visit(
      [&](auto* p) -> bool {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::vector<int>>) {
          bool ok;
          *p = parse_int_list(value, ok);
          return ok;
        } else if constexpr (std::is_same_v<T, std::array<int, 3>>) {
          bool ok;
          const auto v = parse_int_list(value, ok);
          if (!ok || v.size() != 3) return false;
          std::copy(v.begin(), v.end(), p->begin());
          return true;
        } else {
          return parse_number(value, *p);
        }
      },
      ref);
}

std::string format(FieldRef ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::array<int, 3>>) {
          std::string s;
          for (std::size_t i = 0; i < p->size(); ++i) s += (i ? "," : "") + std::to_string((*p)[i]);
          return s;
        } else if constexpr (std::is_same_v<T, double>) {
          char buf[64];
          auto [end, ec] = std::to_chars(buf, buf + sizeof buf, *p);
          return std::string(buf, end);
        } else {
          return std::to_string(*p);
        }
      },
      ref);
}

void require(bool ok, const char* key, const std::string& what) {
  if (!ok) throw ValidationError(std::string("config key '") + key + "': " + what);
}

std::map<std::string, std::string> echo_map(const std::string& echo) {
  std::map<std::string, std::string> m;
  std::stringstream ss(echo);
  std::string line;
  while (std::getline(ss, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    m[trim(std::string_view(line).substr(0, eq))] = trim(std::string_view(line).substr(eq + 1));
  }
  return m;
}

}  // namespace

void RunConfig::validate() const {
  require(thresh > 0, "thresh", "must be positive");
  require(S >= 32 && S % 4 == 0, "S", "must be a multiple of 4 and at least 32");
  require(S_l * 4 == S, "S_l", "must equal S / 4");
  require(D >= 1, "D", "must be positive");
  require(K_Z >= 1, "K_Z", "must be positive");
  require(beta >= 0 && beta <= 1, "beta", "must lie in [0, 1]");
  require(gamma_R >= 0, "gamma_R", "must be nonnegative");
  require(gamma_A >= 0, "gamma_A", "must be nonnegative");
  require(T >= 2, "T", "must be at least 2");
  require(T_inf >= 1 && T_inf <= T, "T_inf", "must lie in [1, T]");
  require(beta_1 > 0 && beta_1 <= beta_T, "beta_1", "must satisfy 0 < beta_1 <= beta_T");
  require(beta_T < 1, "beta_T", "must be below 1");
  for (int r : A_res) require(r >= 1 && S_l % r == 0, "A_res", "every entry must divide S_l");
  require(D_CLIP >= 1, "D_CLIP", "must be positive");
  require(bs >= 1, "bs", "must be positive");
  require(lr_vqvae > 0, "lr_vqvae", "must be positive");
  require(lr_diff > 0, "lr_diff", "must be positive");
  for (int w : vq_widths) require(w >= 1, "vq_widths", "entries must be positive");
  for (int w : unet_widths) require(w >= 1, "unet_widths", "entries must be positive");
  require(temb_dim >= 2 && temb_dim % 2 == 0, "temb_dim", "must be a positive even number");
  require(disc_width >= 1, "disc_width", "must be positive");
  require(lr_disc > 0, "lr_disc", "must be positive");
  require(render_size >= 8, "render_size", "must be at least 8");
  require(steps_vqvae >= 0, "steps_vqvae", "must be nonnegative");
  require(steps_diff >= 0, "steps_diff", "must be nonnegative");
  require(log_every >= 1, "log_every", "must be positive");
  require(ckpt_every >= 0, "ckpt_every", "must be nonnegative");
  require(dead_code_steps >= 0, "dead_code_steps", "must be nonnegative");
  require(token_image_size >= 8, "token_image_size", "must be at least 8");
  require(drop_tokens >= 0 && drop_tokens <= 1, "drop_tokens", "must lie in [0, 1]");
  require(drop_partial >= 0 && drop_partial <= 1, "drop_partial", "must lie in [0, 1]");
  require(chamfer_points >= 1, "chamfer_points", "must be positive");
  require(best_of >= 1, "best_of", "must be positive");
}

vqvae::Architecture RunConfig::vqvae_arch() const { return {S, D, K_Z, thresh, vq_widths}; }

vqvae::LossWeights RunConfig::loss_weights() const { return {beta, gamma_R, gamma_A}; }

denoiser::Architecture RunConfig::denoiser_arch() const {
  denoiser::Architecture a;
  a.latent_channels = D;
  a.latent_resolution = S_l;
  a.grid_resolution = S;
  a.widths = unet_widths;
  a.time_dim = temb_dim;
  a.context_dim = D_CLIP;
  a.attention_resolutions = A_res;
  a.timesteps = T;
  a.token_image_size = token_image_size;
  return a;
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::string out;
  for (const Field& f : fields(copy)) out += std::string(f.key) + " = " + format(f.ref) + "\n";
  return out;
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  auto table = fields(cfg);
  std::set<std::string> seen;
  std::stringstream ss{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(lineno);
    if (eq == std::string::npos) throw ValidationError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) throw ValidationError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ValidationError(where + ": duplicate key '" + key + "'");
    if (!assign(it->ref, value)) throw ValidationError(where + ": malformed value '" + value + "' for key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<std::string> architecture_keys(const std::string& kind) {
  std::vector<std::string> vq{"thresh", "S", "S_l", "D", "K_Z", "vq_widths"};
  if (kind == "vqvae") {
    vq.push_back("disc_width");
    return vq;
  }
  if (kind == "diffusion") {
    vq.insert(vq.end(), {"T", "A_res", "D_CLIP", "unet_widths", "temb_dim", "token_image_size"});
    return vq;
  }
  throw ValidationError("unknown checkpoint kind '" + kind + "'");
}

std::vector<std::string> config_differences(const std::string& echo_a, const std::string& echo_b,
                                            const std::vector<std::string>& keys) {
  const auto a = echo_map(echo_a);
  const auto b = echo_map(echo_b);
  std::vector<std::string> out;
  for (const std::string& k : keys) {
    const auto ia = a.find(k);
    const auto ib = b.find(k);
    const std::string va = ia == a.end() ? "<missing>" : ia->second;
    const std::string vb = ib == b.end() ? "<missing>" : ib->second;
    if (va != vb) out.push_back(k + ": " + va + " vs " + vb);
  }
  return out;
}

}  // namespace scdiff
