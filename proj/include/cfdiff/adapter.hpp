#pragma once

// Trainable side network that steers a frozen denoiser through residuals on
// its skip connections and bottleneck. Attributes enter either as learned
// spatial maps added to the noisy input (plain) or through per-attribute
// token embeddings fed to cross-attention (pai, pai+ctc).

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cfdiff/diffusion.hpp"

namespace cfdiff::adapter {

enum class Variant { plain, pai, pai_ctc };

/// "plain", "pai", "pai+ctc"; throws VariantError otherwise.
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
inline bool uses_tokens(Variant v) { return v != Variant::plain; }

/// Token sequence: prefix, then c_i + y_i * w_i + b_i per attribute. The
/// prefix is a frozen copy of the backbone's null context tokens;
/// placeholders c start from the null attribute slots; slopes w and offsets
/// b start at zero.
struct TokenEmbeddingsImpl : torch::nn::Module {
  TokenEmbeddingsImpl(const torch::Tensor& null_tokens, int context_tokens);

  /// y: [B, K] -> [B, P + K, d].
  torch::Tensor forward(const torch::Tensor& y);
  /// y: [B, K] -> [B, K, d] (attribute tokens only).
  torch::Tensor attribute_tokens(const torch::Tensor& y);

  int context_tokens;
  int num_attributes;
  torch::Tensor prefix;        // buffer [P, d]
  torch::Tensor placeholders;  // [K, d]
  torch::Tensor slopes;        // [K, d]
  torch::Tensor offsets;       // [K, d]
};
TORCH_MODULE(TokenEmbeddings);

/// Pure form of token construction for a single attribute vector.
torch::Tensor build_tokens(TokenEmbeddings& tokens, const std::vector<double>& y);

/// What the adapter sees besides (z_t, t).
struct AdapterInput {
  torch::Tensor tokens;      // [B, P + K, d] or [P + K, d]
  torch::Tensor attributes;  // [B, K]; plain variant only
};

struct AdapterImpl : torch::nn::Module {
  /// Copies encoder + bottleneck weights from `backbone`; output projections
  /// (and the plain variant's input maps) start at zero.
  AdapterImpl(diffusion::UNet& backbone, Variant variant);

  /// Throws VariantError when the input does not follow the variant's
  /// convention and ShapeError on bad shapes.
  diffusion::ResidualSet forward(const torch::Tensor& z_t, const torch::Tensor& t, const AdapterInput& input,
                                 diffusion::AttentionHook* hook = nullptr);

  Variant variant;
  diffusion::DenoiserConfig config;
  diffusion::Encoder encoder{nullptr};
  torch::nn::ModuleList projections;  // one 1x1 conv per injection site
  torch::Tensor input_maps;           // plain: [K, 1, H, W]
  torch::Tensor input_bias;           // plain: [1, 1, H, W]
};
TORCH_MODULE(Adapter);

/// Layer ids of adapter cross-attention start here so hooks can tell them
/// apart from the backbone's.
inline constexpr int kAdapterLayerOffset = 1000;

/// Contrastive loss over attribute tokens v [B, K, d]: for each anchor
/// (b, k), minus the mean cosine similarity to the same token in the other
/// samples over tau, plus the log-sum-exp of similarities to every other
/// token of every other sample over tau; averaged over anchors.
/// Throws DegenerateBatchError unless B >= 2 and K >= 2.
torch::Tensor ctc_loss(const torch::Tensor& tokens, double tau);

/// Closed-form d ctc_loss / d tokens in float64, [B, K, d].
torch::Tensor ctc_gradient(const torch::Tensor& tokens, double tau);

/// dm + lambda * ctc.
torch::Tensor total_loss(const torch::Tensor& dm_loss, const torch::Tensor& ctc, double lambda);

/// Mean same-token cosine similarity across samples minus mean
/// different-token similarity across samples.
double ctc_margin(const torch::Tensor& tokens);

struct TrainConfig {
  Variant variant = Variant::pai_ctc;
  double lambda = 5e-4;
  double tau = 0.2;
  diffusion::OptimConfig optim;
  /// Learning-rate multiplier for the conditioning interface (token
  /// placeholders and projectors, or the plain variant's input maps); these
  /// get no weight decay.
  double interface_lr_scale = 10.0;

  void validate(int num_attributes) const;
  nlohmann::json to_json() const;
};

/// Everything needed to condition the frozen backbone.
struct CausalAdapter {
  Variant variant = Variant::pai_ctc;
  Adapter net{nullptr};
  TokenEmbeddings tokens{nullptr};  // null for plain
  std::string backbone_hash;
  double lambda = 0.0;
  double tau = 0.2;

  /// Backbone tokens and adapter input for attribute batch y [B, K].
  torch::Tensor backbone_tokens(const diffusion::Backbone& bb, const torch::Tensor& y);
  AdapterInput conditional_input(const diffusion::Backbone& bb, const torch::Tensor& y);
  /// The null condition used by classifier-free guidance. The plain variant
  /// keeps y in its latent input; token variants drop to the null tokens.
  AdapterInput unconditional_input(const diffusion::Backbone& bb, const torch::Tensor& y);

  /// Noise prediction of backbone + adapter for the given condition.
  torch::Tensor predict(diffusion::Backbone& bb, const torch::Tensor& z_t, int t, const torch::Tensor& y,
                        bool unconditional = false, diffusion::AttentionHook* hook = nullptr,
                        const torch::Tensor& residual_latent = {});
};

/// Fresh adapter for `variant` around a frozen backbone.
CausalAdapter make_adapter(diffusion::Backbone& bb, Variant variant, double lambda = 0.0, double tau = 0.2);

struct AdapterTrainLog {
  std::vector<std::pair<int, double>> curve;  // (step, smoothed total loss)
  std::vector<std::pair<int, double>> ctc_curve;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Optimizes the adapter (and tokens for pai variants) on the denoising loss
/// plus lambda * ctc with the backbone frozen. images [N, 3, H, W] in [0, 1],
/// attributes [N, K] normalized. Throws FrozenViolationError if the backbone
/// changes, DivergenceError on blow-up.
CausalAdapter train_adapter(diffusion::Backbone& bb, const torch::Tensor& images, const torch::Tensor& attributes,
                            const TrainConfig& config, AdapterTrainLog* log = nullptr);

void save_adapter(const std::filesystem::path& path, const CausalAdapter& adapter, const nlohmann::json& extra = {});
/// Throws FrozenViolationError when the checkpoint was trained against a
/// different backbone.
CausalAdapter load_adapter(const std::filesystem::path& path, diffusion::Backbone& bb);

}  // namespace cfdiff::adapter
