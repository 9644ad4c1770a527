#include "cfdiff/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>

#include "cfdiff/errors.hpp"
#include "cfdiff/util.hpp"

namespace cfdiff::config {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string env_name(const std::string& key) {
  std::string out = "CFDIFF_";
  for (char c : key) out += (c == '.' || c == '-' || c == '+') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_int(key, item));
  }
  return out;
}

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

std::string fmt_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Binding {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define BIND_INT(k, f) \
  Binding { k, [](RunConfig& c, const std::string& v) { c.f = to_int(k, v); }, [](const RunConfig& c) { return std::to_string(c.f); } }
#define BIND_DBL(k, f) \
  Binding { k, [](RunConfig& c, const std::string& v) { c.f = to_double(k, v); }, [](const RunConfig& c) { return fmt_double(c.f); } }
#define BIND_STR(k, f) \
  Binding { k, [](RunConfig& c, const std::string& v) { c.f = v; }, [](const RunConfig& c) { return std::string(c.f); } }
#define BIND_PATH(k, f) \
  Binding { k, [](RunConfig& c, const std::string& v) { c.f = v; }, [](const RunConfig& c) { return c.f.string(); } }
#define BIND_LIST(k, f) \
  Binding { k, [](RunConfig& c, const std::string& v) { c.f = to_int_list(k, v); }, [](const RunConfig& c) { return fmt_list(c.f); } }
#define BIND_BOOL(k, f)                                                         \
  Binding {                                                                     \
    k, [](RunConfig& c, const std::string& v) { c.f = to_bool(k, v); },         \
        [](const RunConfig& c) { return std::string(c.f ? "true" : "false"); } \
  }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      BIND_STR("run.profile", profile),
      Binding{"run.dir", [](RunConfig& c, const std::string& v) { c.run_dir = v; },
              [](const RunConfig& c) { return c.run_dir.string(); }},
      Binding{"run.seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64("run.seed", v); },
              [](const RunConfig& c) { return std::to_string(c.seed); }},
      BIND_STR("run.log_level", log_level),
      BIND_PATH("paths.data", data_path),
      BIND_PATH("paths.scm", scm_file),
      BIND_PATH("paths.backbone", backbone_file),
      BIND_PATH("paths.adapter", adapter_file),
      BIND_PATH("paths.evaluators", evaluators_file),
      BIND_INT("data.n_train", n_train),
      BIND_INT("data.n_val", n_val),
      BIND_INT("data.n_test", n_test),
      BIND_INT("data.image_size", image_size),
      BIND_INT("data.supersample", supersample),
      BIND_INT("scm.hidden", scm_hidden),
      BIND_DBL("scm.lr", scm_lr),
      BIND_DBL("scm.weight_decay", scm_weight_decay),
      BIND_INT("scm.steps", scm_steps),
      BIND_INT("scm.batch", scm_batch),
      BIND_INT("scm.eval_every", scm_eval_every),
      BIND_INT("backbone.base_channels", base_channels),
      BIND_LIST("backbone.channel_mult", channel_mult),
      BIND_LIST("backbone.attention_resolutions", attention_resolutions),
      BIND_INT("backbone.token_dim", token_dim),
      BIND_INT("backbone.context_tokens", context_tokens),
      BIND_DBL("backbone.lr", backbone_lr),
      BIND_DBL("backbone.weight_decay", backbone_weight_decay),
      BIND_INT("backbone.batch", backbone_batch),
      BIND_INT("backbone.steps", backbone_steps),
      BIND_DBL("backbone.ema", backbone_ema),
      BIND_DBL("backbone.grad_clip", backbone_grad_clip),
      BIND_STR("adapter.variant", variant),
      BIND_DBL("adapter.lambda", ctc_lambda),
      BIND_DBL("adapter.tau", ctc_tau),
      BIND_DBL("adapter.lr", adapter_lr),
      BIND_DBL("adapter.interface_lr_scale", adapter_interface_lr_scale),
      BIND_DBL("adapter.weight_decay", adapter_weight_decay),
      BIND_INT("adapter.batch", adapter_batch),
      BIND_INT("adapter.steps", adapter_steps),
      BIND_DBL("adapter.grad_clip", adapter_grad_clip),
      BIND_INT("inference.steps", inference_steps),
      BIND_DBL("inference.alpha", alpha),
      BIND_BOOL("inference.attention_guidance", attention_guidance),
      BIND_STR("inference.residual_source", residual_source),
      BIND_INT("eval.images", eval_images),
      BIND_INT("eval.predictor_steps", predictor_steps),
      BIND_DBL("eval.predictor_lr", predictor_lr),
      BIND_INT("eval.predictor_batch", predictor_batch),
      BIND_INT("eval.feature_dim", feature_dim),
      BIND_INT("eval.vae_latent", vae_latent),
      BIND_INT("eval.vae_steps", vae_steps),
      BIND_DBL("eval.predictor_gate", predictor_gate),
      BIND_DBL("eval.vae_gate", vae_gate),
      BIND_INT("eval.batch", eval_batch),
  };
  return table;
}

#undef BIND_INT
#undef BIND_DBL
#undef BIND_STR
#undef BIND_LIST
#undef BIND_PATH
#undef BIND_BOOL

}  // namespace

// ---------------------------------------------------------------- KeyValues

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv.values_[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(read_text_file(path));
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

void KeyValues::apply_env(const std::vector<std::string>& known_keys) {
  for (const auto& key : known_keys) {
    if (const char* v = std::getenv(env_name(key).c_str())) values_[key] = v;
  }
}

std::string KeyValues::to_text() const {
  std::string out, section;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (sec != section || out.empty()) {
      if (!out.empty()) out += "\n";
      if (!sec.empty()) out += "[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + value + "\n";
  }
  return out;
}

// ---------------------------------------------------------------- RunConfig

RunConfig RunConfig::defaults(const std::string& profile) {
  RunConfig c;
  if (profile == "smoke") return c;
  if (profile != "full") throw ConfigError("config key 'run.profile': unknown profile '" + profile + "'");
  c.profile = "full";
  c.run_dir = "runs/full";
  c.n_train = 5000;
  c.n_val = 500;
  c.n_test = 2000;
  c.image_size = 32;
  c.base_channels = 64;
  c.channel_mult = {1, 2, 4};
  c.attention_resolutions = {16, 8};
  c.token_dim = 128;
  c.backbone_lr = 1e-5;
  c.backbone_steps = 100000;
  c.adapter_lr = 1e-5;
  c.adapter_steps = 50000;
  c.inference_steps = 100;
  c.eval_images = 2000;
  c.predictor_steps = 10000;
  c.vae_steps = 10000;
  return c;
}

const std::vector<std::string>& RunConfig::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& b : bindings()) k.push_back(b.key);
    return k;
  }();
  return keys;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv) {
  const std::string profile = kv.has("run.profile") ? kv.get("run.profile") : "smoke";
  RunConfig c = defaults(profile);
  for (const auto& [key, value] : kv.values()) {
    auto it = std::find_if(bindings().begin(), bindings().end(), [&](const Binding& b) { return b.key == key; });
    if (it == bindings().end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(c, value);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  KeyValues kv = path.empty() ? KeyValues{} : KeyValues::load(path);
  kv.apply_env(known_keys());
  return from_key_values(kv);
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  for (const auto& b : bindings()) kv.set(b.key, b.get(*this));
  return kv;
}

std::string RunConfig::hash() const {
  // Locations and log level do not affect any artifact.
  auto kv = to_key_values();
  for (const auto& key : known_keys())
    if (key == "run.dir" || key == "run.log_level" || key.rfind("paths.", 0) == 0) kv.set(key, "");
  return sha256_hex(kv.to_text());
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& b : bindings()) j[b.key] = b.get(*this);
  return j;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config key '" + key + "': " + what);
  };
  need(n_train >= 2, "data.n_train", "must be at least 2");
  need(n_val >= 1, "data.n_val", "must be positive");
  need(n_test >= 1, "data.n_test", "must be positive");
  need(image_size >= 8 && (image_size & (image_size - 1)) == 0, "data.image_size", "must be a power of two >= 8");
  need(supersample >= 1, "data.supersample", "must be positive");
  need(scm_hidden >= 1, "scm.hidden", "must be positive");
  need(scm_lr > 0, "scm.lr", "must be positive");
  need(scm_steps >= 1, "scm.steps", "must be positive");
  need(scm_batch >= 1, "scm.batch", "must be positive");
  need(base_channels >= 1, "backbone.base_channels", "must be positive");
  need(!channel_mult.empty(), "backbone.channel_mult", "must not be empty");
  need(token_dim >= 1, "backbone.token_dim", "must be positive");
  need(context_tokens >= 0, "backbone.context_tokens", "must be non-negative");
  need(backbone_lr > 0, "backbone.lr", "must be positive");
  need(backbone_batch >= 1, "backbone.batch", "must be positive");
  need(backbone_steps >= 1, "backbone.steps", "must be positive");
  need(backbone_ema >= 0 && backbone_ema < 1, "backbone.ema", "must lie in [0, 1)");
  need(variant == "plain" || variant == "pai" || variant == "pai+ctc", "adapter.variant",
       "must be plain, pai or pai+ctc");
  need(ctc_lambda >= 0, "adapter.lambda", "must be non-negative");
  need(ctc_tau > 0, "adapter.tau", "must be positive");
  need(adapter_lr > 0, "adapter.lr", "must be positive");
  need(adapter_interface_lr_scale > 0, "adapter.interface_lr_scale", "must be positive");
  need(adapter_batch >= 1, "adapter.batch", "must be positive");
  need(variant != "pai+ctc" || adapter_batch >= 2, "adapter.batch", "must be at least 2 when CTC is enabled");
  need(adapter_steps >= 1, "adapter.steps", "must be positive");
  need(inference_steps >= 1 && inference_steps <= 1000, "inference.steps", "must lie in [1, 1000]");
  need(alpha >= 0, "inference.alpha", "must be non-negative");
  need(residual_source == "inversion_trajectory" || residual_source == "current_latent", "inference.residual_source",
       "must be inversion_trajectory or current_latent");
  need(eval_images >= 2, "eval.images", "must be at least 2");
  need(predictor_steps >= 1, "eval.predictor_steps", "must be positive");
  need(predictor_lr > 0, "eval.predictor_lr", "must be positive");
  need(predictor_batch >= 1, "eval.predictor_batch", "must be positive");
  need(feature_dim >= 2, "eval.feature_dim", "must be at least 2");
  need(vae_latent >= 1, "eval.vae_latent", "must be positive");
  need(vae_steps >= 1, "eval.vae_steps", "must be positive");
  need(predictor_gate > 0, "eval.predictor_gate", "must be positive");
  need(eval_batch >= 1, "eval.batch", "must be positive");
}

std::filesystem::path RunConfig::adapter_path(const std::string& variant_name) const {
  if (!adapter_file.empty() && variant_name == variant) return adapter_file;
  std::string tag = variant_name;
  std::replace(tag.begin(), tag.end(), '+', '_');
  return run_dir / ("adapter_" + tag + ".ckpt");
}

// ---------------------------------------------------------------- Manifest

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing artifact " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

Manifest Manifest::load(const std::filesystem::path& run_dir) {
  Manifest m;
  m.run_dir_ = run_dir;
  const auto path = run_dir / "MANIFEST";
  if (std::filesystem::exists(path)) {
    try {
      m.entries_ = json::parse(read_text_file(path)).at("artifacts");
    } catch (const json::exception& e) {
      throw IOError("corrupt MANIFEST in " + run_dir.string() + ": " + e.what());
    }
  }
  return m;
}

void Manifest::save() const {
  json j{{"format_version", 1}, {"artifacts", entries_}};
  write_text_file(run_dir_ / "MANIFEST", j.dump(2) + "\n");
}

void Manifest::record(const std::string& name, const std::filesystem::path& path, const std::vector<std::string>& inputs,
                      const std::string& config_hash) {
  json in = json::object();
  for (const auto& i : inputs) in[i] = hash_of(i);
  // Paths inside the run directory are stored relative to it so the whole
  // directory can be moved; anything else is stored absolute.
  const auto abs = std::filesystem::absolute(path.is_absolute() ? path : run_dir_ / path).lexically_normal();
  auto rel = abs.lexically_relative(std::filesystem::absolute(run_dir_).lexically_normal());
  if (rel.empty() || *rel.begin() == "..") rel = abs;
  entries_[name] = {{"path", rel.string()}, {"sha256", file_hash(run_dir_ / rel)}, {"inputs", in},
                    {"config_hash", config_hash}};
}

std::string Manifest::hash_of(const std::string& name) const {
  if (!entries_.contains(name)) throw DependencyError("missing upstream artifact '" + name + "' in " + run_dir_.string());
  return entries_.at(name).at("sha256").get<std::string>();
}

void Manifest::verify(const std::string& name) const {
  if (!entries_.contains(name)) throw DependencyError("missing upstream artifact '" + name + "' in " + run_dir_.string());
  const auto& e = entries_.at(name);
  const auto path = run_dir_ / e.at("path").get<std::string>();
  if (!std::filesystem::exists(path)) throw DependencyError("missing artifact '" + name + "' (" + path.string() + ")");
  if (file_hash(path) != e.at("sha256").get<std::string>())
    throw DependencyError("artifact '" + name + "' changed since it was recorded; re-run its stage");
  for (const auto& [input, hash] : e.at("inputs").items()) {
    if (!entries_.contains(input) || entries_.at(input).at("sha256") != hash)
      throw DependencyError("artifact '" + name + "' was built from a different '" + input + "'; re-run its stage");
    verify(input);
  }
}

}  // namespace cfdiff::config
