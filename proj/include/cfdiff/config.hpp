#pragma once

// Run configuration: a flat `key = value` text file with `[section]`
// headers, overridable from the environment (CFDIFF_<SECTION>_<KEY>), plus
// the run directory's MANIFEST that chains artifact hashes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace cfdiff::config {

/// Ordered "section.key" -> value map.
class KeyValues {
 public:
  /// Throws ConfigError with the offending line on malformed input.
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Applies CFDIFF_<SECTION>_<KEY> environment variables for known keys.
  void apply_env(const std::vector<std::string>& known_keys);

  /// Canonical text: sections in key order, one `key = value` per line.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

struct RunConfig {
  std::string profile = "smoke";
  std::filesystem::path run_dir = "runs/smoke";
  std::uint64_t seed = 0;
  std::string log_level = "info";

  // paths; empty means the default location inside run_dir
  std::filesystem::path data_path, scm_file, backbone_file, adapter_file, evaluators_file;

  // data
  int n_train = 2000;
  int n_val = 200;
  int n_test = 500;
  int image_size = 16;
  int supersample = 2;

  // scm
  int scm_hidden = 64;
  double scm_lr = 1e-3;
  double scm_weight_decay = 1e-2;
  int scm_steps = 20000;
  int scm_batch = 256;
  int scm_eval_every = 500;

  // backbone
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 2};
  std::vector<int> attention_resolutions{8, 4};
  int token_dim = 64;
  int context_tokens = 1;
  double backbone_lr = 2e-4;
  double backbone_weight_decay = 1e-2;
  int backbone_batch = 40;
  int backbone_steps = 20000;
  double backbone_ema = 0.999;
  double backbone_grad_clip = 1.0;

  // adapter
  std::string variant = "pai+ctc";
  double ctc_lambda = 5e-4;
  double ctc_tau = 0.2;
  double adapter_lr = 2e-4;
  double adapter_interface_lr_scale = 10.0;
  double adapter_weight_decay = 1e-2;
  int adapter_batch = 40;
  int adapter_steps = 5000;
  double adapter_grad_clip = 1.0;

  // inference
  int inference_steps = 50;
  double alpha = 1.0;
  bool attention_guidance = false;
  std::string residual_source = "inversion_trajectory";

  // eval
  int eval_images = 200;
  int predictor_steps = 4000;
  double predictor_lr = 1e-3;
  int predictor_batch = 64;
  int feature_dim = 64;
  int vae_latent = 16;
  int vae_steps = 4000;
  double predictor_gate = 0.05;
  double vae_gate = 0.1;
  int eval_batch = 100;

  /// Defaults for "smoke" (16 px, short schedules) or "full" (32 px,
  /// reference hyper-parameters). Throws ConfigError for other names.
  static RunConfig defaults(const std::string& profile);
  /// Starts from the profile named in `[run] profile` (default smoke) and
  /// applies every key; unknown keys throw ConfigError naming the key.
  static RunConfig from_key_values(const KeyValues& kv);
  /// File (optional) + environment overrides.
  static RunConfig load(const std::filesystem::path& path);

  static const std::vector<std::string>& known_keys();

  KeyValues to_key_values() const;
  std::string to_text() const { return to_key_values().to_text(); }
  std::string hash() const;
  nlohmann::json to_json() const;

  void validate() const;

  std::filesystem::path data_dir() const { return data_path.empty() ? run_dir / "data" : data_path; }
  std::filesystem::path scm_path() const { return scm_file.empty() ? run_dir / "scm.json" : scm_file; }
  std::filesystem::path backbone_path() const { return backbone_file.empty() ? run_dir / "backbone.ckpt" : backbone_file; }
  /// The configured adapter file applies to the configured variant only.
  std::filesystem::path adapter_path(const std::string& variant_name) const;
  std::filesystem::path evaluators_path() const {
    return evaluators_file.empty() ? run_dir / "evaluators.ckpt" : evaluators_file;
  }
  std::filesystem::path report_path() const { return run_dir / "report.json"; }
  std::filesystem::path manifest_path() const { return run_dir / "MANIFEST"; }
};

/// sha256 of a file's bytes. Throws DependencyError if it does not exist.
std::string file_hash(const std::filesystem::path& path);

/// Artifact registry of a run directory. Each entry records the artifact's
/// own hash and the hashes of the inputs it was built from.
class Manifest {
 public:
  static Manifest load(const std::filesystem::path& run_dir);
  void save() const;

  /// Records `name` -> path (relative to the run dir) with its inputs, which
  /// must already be registered.
  void record(const std::string& name, const std::filesystem::path& path, const std::vector<std::string>& inputs,
              const std::string& config_hash);

  /// Throws DependencyError naming `name` if it is missing, its file is gone,
  /// the file hash changed, or any recorded input no longer matches.
  void verify(const std::string& name) const;
  bool has(const std::string& name) const { return entries_.contains(name); }
  std::string hash_of(const std::string& name) const;
  const nlohmann::json& entries() const { return entries_; }

 private:
  std::filesystem::path run_dir_;
  nlohmann::json entries_ = nlohmann::json::object();
};

}  // namespace cfdiff::config
