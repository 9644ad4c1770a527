#pragma once

// Reference models trained on the observed data and the four counterfactual
// metrics: effectiveness, composition, realism (Frechet feature distance)
// and minimality (symmetric KL of VAE posteriors).

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cfdiff/pipeline.hpp"
#include "cfdiff/scm.hpp"

namespace cfdiff::eval {

/// Small conv regressor; `features` is the penultimate layer.
struct RegressorImpl : torch::nn::Module {
  RegressorImpl(int image_size, int outputs, int feature_dim);
  torch::Tensor features(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Sequential body{nullptr};
  torch::nn::Linear hidden{nullptr}, head{nullptr};
};
TORCH_MODULE(Regressor);

struct EvalVAEImpl : torch::nn::Module {
  EvalVAEImpl(int image_size, int latent);
  /// Posterior mean and log-variance, [B, latent] each.
  std::pair<torch::Tensor, torch::Tensor> encode(const torch::Tensor& x);
  torch::Tensor decode(const torch::Tensor& z);

  int base;
  torch::nn::Sequential enc{nullptr}, dec{nullptr};
  torch::nn::Linear mu{nullptr}, logvar{nullptr}, expand{nullptr};
};
TORCH_MODULE(EvalVAE);

struct EvaluatorConfig {
  int image_size = 16;
  int num_attributes = 4;
  int feature_dim = 64;
  int vae_latent = 16;
  int steps = 4000;
  int vae_steps = 4000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double predictor_gate = 0.05;
  double vae_gate = 0.1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct Evaluators {
  EvaluatorConfig config;
  std::vector<Regressor> predictors;  // one per attribute
  Regressor extractor{nullptr};       // multi-output, features used for realism / composition
  EvalVAE vae{nullptr};
  std::vector<double> predictor_val_mae;
  double vae_val_mae = 0.0;

  bool gate_passed() const;
  std::string gate_message() const;

  /// [B, 3, H, W] in [0, 1] -> [B, K] normalized attributes.
  torch::Tensor predict(const torch::Tensor& images);
  torch::Tensor embed(const torch::Tensor& images);
  std::pair<torch::Tensor, torch::Tensor> posterior(const torch::Tensor& images);
};

/// Trains every reference model on (train) and measures on (val). Does not
/// throw on a failed gate; callers decide.
Evaluators train_evaluators(const torch::Tensor& train_images, const torch::Tensor& train_attributes,
                            const torch::Tensor& val_images, const torch::Tensor& val_attributes,
                            const EvaluatorConfig& config);

void save_evaluators(const std::filesystem::path& path, const Evaluators& ev, const nlohmann::json& extra = {});
Evaluators load_evaluators(const std::filesystem::path& path);

// ------------------------------------------------------------ metrics

/// Frechet distance between Gaussians fitted to two feature sets [N, m]:
/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with eps * I added to both
/// covariances and the square root taken as (S1^(1/2) S2 S1^(1/2))^(1/2).
/// Throws DegenerateSetError with fewer than 2 rows.
double frechet_distance(const torch::Tensor& a, const torch::Tensor& b, double eps = 1e-6);

/// Per-row KL(p || q) + KL(q || p) for diagonal Gaussians given mean and
/// log-variance, [B] in float64.
torch::Tensor symmetric_kl(const torch::Tensor& mu_p, const torch::Tensor& logvar_p, const torch::Tensor& mu_q,
                           const torch::Tensor& logvar_q);

struct Cell {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;

  static Cell of(const std::vector<double>& values);
  bool operator==(const Cell&) const = default;
};

/// Anything that maps (factual image, factual attributes) to images under new
/// attributes. `abduct` is called once per batch, then `generate` any number
/// of times on that batch.
class CounterfactualModel {
 public:
  virtual ~CounterfactualModel() = default;
  virtual void abduct(const torch::Tensor& images, const torch::Tensor& attributes) = 0;
  virtual torch::Tensor generate(const torch::Tensor& cf_attributes) = 0;
};

/// Returns the factual images unchanged.
class IdentityModel : public CounterfactualModel {
 public:
  void abduct(const torch::Tensor& images, const torch::Tensor&) override { images_ = images; }
  torch::Tensor generate(const torch::Tensor&) override { return images_; }

 private:
  torch::Tensor images_;
};

/// Diffusion pipeline with a shared inversion per batch.
class DiffusionModel : public CounterfactualModel {
 public:
  DiffusionModel(pipeline::Bundle& bundle, int steps, pipeline::PredictOptions options, bool attention_guidance);
  void abduct(const torch::Tensor& images, const torch::Tensor& attributes) override;
  torch::Tensor generate(const torch::Tensor& cf_attributes) override;

 private:
  pipeline::Bundle& bundle_;
  diffusion::DdimSchedule ddim_;
  pipeline::PredictOptions options_;
  bool attention_guidance_;
  pipeline::Trajectory trajectory_;
};

struct MetricReport {
  int schema_version = 1;
  std::string label;
  std::vector<std::string> attributes;
  bool valid = true;
  std::vector<double> predictor_test_mae;
  std::vector<double> predictor_test_std;
  std::vector<std::vector<Cell>> effectiveness;  // [intervened][measured]
  std::vector<std::vector<Cell>> control;        // label-shuffled conditioning
  Cell composition_mae;
  Cell composition_feature;
  double realism = 0.0;
  int realism_n = 0;
  std::vector<Cell> minimality;                          // per intervened attribute
  std::vector<std::vector<double>> minimality_by_magnitude;  // per attribute: median over |delta| terciles
  nlohmann::json config;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  std::string to_table() const;
  bool operator==(const MetricReport&) const = default;

  /// Mean over attributes of the intervened-attribute MAE.
  double mean_effectiveness() const;
};

struct EvalOptions {
  int batch_size = 100;
  double value_low = -0.8;
  double value_high = 0.8;
  std::uint64_t seed = 0;
  bool control = true;
};

/// Runs the four metrics over (images, attributes). The SCM provides the
/// counterfactual targets.
MetricReport evaluate(CounterfactualModel& model, Evaluators& ev, const scm::MechanismSet& scm,
                      const torch::Tensor& images, const torch::Tensor& attributes, const EvalOptions& options);

/// Composition on its own: pixel MAE and feature L2 of null-intervention
/// round trips.
std::pair<Cell, Cell> composition(CounterfactualModel& model, Evaluators& ev, const torch::Tensor& images,
                                  const torch::Tensor& attributes, int batch_size);

/// Predictor MAE and spread on ground-truth renders, per attribute.
std::pair<std::vector<double>, std::vector<double>> predictor_error(Evaluators& ev, const torch::Tensor& images,
                                                                    const torch::Tensor& attributes);

struct AblationRow {
  std::string name;
  double effectiveness = 0.0;  // mean intervened-attribute MAE
  double composition = 0.0;
  double realism = 0.0;
  double minimality = 0.0;
  double ctc_margin = 0.0;
  double alpha = 1.0;
  int steps = 0;

  nlohmann::json to_json() const;
};

std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace cfdiff::eval
