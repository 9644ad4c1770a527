#pragma once

// Abduction, action and prediction on images: invert the factual image under
// its own attributes, push the intervention through the SCM, then sample back
// under the counterfactual attributes.

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cfdiff/adapter.hpp"
#include "cfdiff/diffusion.hpp"
#include "cfdiff/image.hpp"
#include "cfdiff/scm.hpp"

namespace cfdiff::pipeline {

enum class ResidualSource { inversion_trajectory, current_latent };

ResidualSource parse_residual_source(const std::string& name);
std::string residual_source_name(ResidualSource s);

struct Bundle {
  diffusion::Backbone backbone;
  adapter::CausalAdapter adapter;
  scm::MechanismSet scm;
};

/// Loads and cross-checks the three checkpoints. Throws DependencyError for
/// missing files and FrozenViolationError for a backbone/adapter mismatch.
Bundle load_bundle(const std::filesystem::path& backbone, const std::filesystem::path& adapter,
                   const std::filesystem::path& scm);

/// Inversion trajectory z_0*, z_{t_1}*, ..., z_T* for a batch.
struct Trajectory {
  std::vector<torch::Tensor> latents;  // steps + 1 tensors [B, 3, H, W]
  std::vector<int> timesteps;          // matches latents
  torch::Tensor attributes;            // factual attributes [B, K]
};

/// Attention hook that knows which denoising step it is in.
class StepHook : public diffusion::AttentionHook {
 public:
  int step = 0;
};

/// Stores a copy of every attention map keyed by (step, layer).
class AttentionRecorder : public StepHook {
 public:
  torch::Tensor on_attention(int layer_id, const torch::Tensor& weights) override;
  std::map<std::pair<int, int>, torch::Tensor> cache;
  std::vector<int> timesteps;
};

/// Replaces attention columns of unchanged tokens with the recorded maps and
/// renormalizes every row.
class AttentionSplicer : public StepHook {
 public:
  /// changed: [B, N] bool, true for tokens whose attribute value moved.
  AttentionSplicer(const AttentionRecorder& reference, torch::Tensor changed);
  torch::Tensor on_attention(int layer_id, const torch::Tensor& weights) override;

  /// Largest |row sum - 1| after splicing and largest negative entry.
  double max_row_sum_error = 0.0;
  double min_weight = 1.0;
  /// Largest difference between spliced and cached values in unchanged
  /// columns before renormalization (0 when the splice is exact).
  double max_unchanged_deviation = 0.0;
  int calls = 0;

 private:
  const AttentionRecorder& reference_;
  torch::Tensor changed_;
};

struct PredictOptions {
  double alpha = 1.0;
  /// When false the unconditional branch is never evaluated.
  bool use_cfg = false;
  ResidualSource residual_source = ResidualSource::inversion_trajectory;
};

struct Diagnostics {
  std::vector<double> residual_norms;  // per prediction step, conditional branch
  double round_trip_error = -1.0;      // pixel MAE of the null-intervention reconstruction, if computed
};

/// DDIM inversion under the factual condition, no guidance.
Trajectory abduct(Bundle& bundle, const diffusion::DdimSchedule& ddim, const torch::Tensor& images,
                  const torch::Tensor& attributes);

/// Per-sample counterfactual attributes [B, K].
torch::Tensor act(const scm::MechanismSet& scm, const torch::Tensor& attributes, const scm::Interventions& interventions);
scm::AttributeVector act(const scm::MechanismSet& scm, const scm::AttributeVector& attributes,
                         const scm::Interventions& interventions);

/// Samples from z_T* under the counterfactual attributes; returns images in
/// [0, 1]. Throws MissingTrajectoryError if the trajectory is needed but
/// absent.
torch::Tensor predict(Bundle& bundle, const diffusion::DdimSchedule& ddim, const Trajectory* trajectory,
                      const torch::Tensor& cf_attributes, const PredictOptions& options, StepHook* hook = nullptr,
                      Diagnostics* diagnostics = nullptr);

/// [B, P + K] mask of tokens whose attribute differs by more than 1e-9.
torch::Tensor changed_tokens(const torch::Tensor& attributes, const torch::Tensor& cf_attributes, int context_tokens);

struct GuidanceStats {
  double max_row_sum_error = 0.0;
  double min_weight = 1.0;
  double max_unchanged_deviation = 0.0;
};

/// Reference reconstruction pass that records attention, then the
/// counterfactual pass with unchanged tokens' attention spliced in.
/// Throws VariantError for the plain adapter.
torch::Tensor attention_guided_predict(Bundle& bundle, const diffusion::DdimSchedule& ddim, const Trajectory& trajectory,
                                       const torch::Tensor& cf_attributes, const PredictOptions& options,
                                       GuidanceStats* stats = nullptr, Diagnostics* diagnostics = nullptr);

struct CounterfactualRequest {
  Image image;
  scm::AttributeVector attributes;  // normalized
  scm::Interventions interventions;
  double alpha = 1.0;
  int steps = 100;
  bool use_cfg = false;
  bool attention_guidance = false;
  ResidualSource residual_source = ResidualSource::inversion_trajectory;
  bool measure_round_trip = false;
};

struct CounterfactualResult {
  Image image;
  scm::AttributeVector attributes;  // propagated counterfactual attributes
  Trajectory trajectory;
  Diagnostics diagnostics;
};

CounterfactualResult run(Bundle& bundle, const CounterfactualRequest& request);

/// Runs the requests on `threads` worker threads; results keep request order.
std::vector<CounterfactualResult> run_many(Bundle& bundle, const std::vector<CounterfactualRequest>& requests,
                                           int threads);

/// One counterfactual per value of do(attribute = value), sharing one
/// inversion. Returns the images in value order.
std::vector<Image> traverse(Bundle& bundle, const CounterfactualRequest& base, const std::string& attribute,
                            const std::vector<double>& values);

}  // namespace cfdiff::pipeline
