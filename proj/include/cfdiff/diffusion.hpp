#pragma once

// Small pixel-space conditional U-Net denoiser with cross-attention over a
// token sequence, residual injection sites for a side adapter, a linear-beta
// noise schedule, and deterministic DDIM sampling / inversion.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdiff/image.hpp"

namespace cfdiff::diffusion {

// ---------------------------------------------------------------- schedule

class NoiseSchedule {
 public:
  /// Linear betas from `beta_start` to `beta_end` over `train_steps` steps.
  static NoiseSchedule linear(int train_steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

  int train_steps() const { return train_steps_; }
  /// beta_t for t in 1..T (index 0 holds 0).
  double beta(int t) const { return betas_.at(t); }
  /// alpha_bar_t for t in 0..T, alpha_bar_0 = 1.
  double alpha_bar(int t) const { return alpha_bar_.at(t); }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

  /// `steps` evenly spaced timesteps ending at T, strictly increasing, in 1..T.
  std::vector<int> inference_steps(int steps) const;

  nlohmann::json to_json() const;

 private:
  int train_steps_ = 0;
  double beta_start_ = 0.0, beta_end_ = 0.0;
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. `t` is a scalar or a [B]
/// tensor of timesteps. Throws ShapeError.
torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& z0, int t, const torch::Tensor& eps);
torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& z0, const torch::Tensor& t,
                        const torch::Tensor& eps);

/// Clean-signal estimate (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
torch::Tensor predict_x0(const NoiseSchedule& schedule, const torch::Tensor& z_t, int t, const torch::Tensor& eps);

/// The deterministic DDIM move of z between timesteps `from` and `to` given a
/// noise estimate; used in both directions.
torch::Tensor ddim_transfer(const NoiseSchedule& schedule, const torch::Tensor& z, int from, int to,
                            const torch::Tensor& eps);

/// alpha * cond + (1 - alpha) * uncond. Throws ShapeError.
torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double alpha);

// ---------------------------------------------------------------- config

struct DenoiserConfig {
  int image_size = 32;
  int in_channels = 3;
  int base_channels = 64;
  std::vector<int> channel_mult{1, 2, 4};
  std::vector<int> attention_resolutions{16, 8};
  int token_dim = 128;
  int context_tokens = 1;   // P
  int num_attributes = 4;   // K
  int groups = 8;

  int num_tokens() const { return context_tokens + num_attributes; }
  int levels() const { return static_cast<int>(channel_mult.size()); }
  int channels_at(int level) const { return base_channels * channel_mult.at(level); }
  int resolution_at(int level) const { return image_size >> level; }
  bool attends_at(int resolution) const;
  int time_dim() const { return 4 * base_channels; }

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Shapes (C, H, W) of the injection sites: one per encoder level, then the
/// bottleneck.
std::vector<std::vector<int64_t>> injection_shapes(const DenoiserConfig& config);

/// Residual tensors added to the frozen denoiser's skip connections and
/// bottleneck before the up path reads them.
/// "[2, 3, 16, 16]" style shape text for error messages.
std::string shape_str(const torch::Tensor& t);

struct ResidualSet {
  std::vector<torch::Tensor> skips;
  torch::Tensor mid;

  /// Throws ShapeError unless every tensor is [B, C, H, W] with the site shape.
  void check(const DenoiserConfig& config, int64_t batch) const;
  static ResidualSet zeros(const DenoiserConfig& config, int64_t batch);
  double norm() const;
};

// ---------------------------------------------------------------- attention hook

/// Observes or rewrites cross-attention weights ([B, Q, N], rows sum to 1).
class AttentionHook {
 public:
  virtual ~AttentionHook() = default;
  virtual torch::Tensor on_attention(int layer_id, const torch::Tensor& weights) = 0;
};

// ---------------------------------------------------------------- network pieces

struct TimeEmbeddingImpl : torch::nn::Module {
  TimeEmbeddingImpl(int base_dim, int out_dim);
  torch::Tensor forward(const torch::Tensor& t);

  int base_dim;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeEmbedding);

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Single-head cross-attention from pixels to tokens with a residual add.
struct CrossAttentionImpl : torch::nn::Module {
  CrossAttentionImpl(int channels, int token_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& tokens, AttentionHook* hook);

  int layer_id = -1;
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention);

struct EncoderOutput {
  std::vector<torch::Tensor> skips;
  torch::Tensor mid;
  torch::Tensor temb;
};

/// Input conv, time embedding, down path and bottleneck. Shared by the
/// denoiser and by the adapter's half copy.
struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const DenoiserConfig& config);
  EncoderOutput forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& tokens,
                        AttentionHook* hook);
  /// Numbers cross-attention layers from `first`; returns the next free id.
  int assign_attention_ids(int first);

  DenoiserConfig config;
  TimeEmbedding time_embed{nullptr};
  torch::nn::Conv2d conv_in{nullptr};
  torch::nn::ModuleList down_blocks, down_attn, downsamplers;
  ResBlock mid1{nullptr}, mid2{nullptr};
  CrossAttention mid_attn{nullptr};
  std::vector<int> attn_index;  // level -> index in down_attn or -1
};
TORCH_MODULE(Encoder);

struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const DenoiserConfig& config);
  torch::Tensor forward(const EncoderOutput& enc, const torch::Tensor& tokens, const ResidualSet* residuals,
                        AttentionHook* hook);
  int assign_attention_ids(int first);

  DenoiserConfig config;
  torch::nn::ModuleList up_blocks, up_attn, upsamplers;
  std::vector<int> attn_index;
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(Decoder);

/// epsilon_theta plus the learned null-token sequence.
struct UNetImpl : torch::nn::Module {
  explicit UNetImpl(const DenoiserConfig& config);

  /// tokens: [N, d] or [B, N, d]; t: [B] int64. residuals may be null.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& tokens,
                        const ResidualSet* residuals = nullptr, AttentionHook* hook = nullptr);

  DenoiserConfig config;
  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  torch::Tensor null_tokens;  // [P + K, d]
};
TORCH_MODULE(UNet);

/// Broadcasts [N, d] tokens to [B, N, d]; checks the token count.
torch::Tensor batch_tokens(const torch::Tensor& tokens, int64_t batch, int expected_tokens);

/// One forward pass of the denoiser at a single timestep for the whole batch.
torch::Tensor predict_noise(UNet& model, const torch::Tensor& z_t, int t, const torch::Tensor& tokens,
                            const ResidualSet* residuals = nullptr, AttentionHook* hook = nullptr);

// ---------------------------------------------------------------- DDIM

/// Inference subsequence [0, t_1, ..., t_T] with adjacency checks.
class DdimSchedule {
 public:
  DdimSchedule(const NoiseSchedule& schedule, int steps);

  const NoiseSchedule& noise() const { return schedule_; }
  int steps() const { return static_cast<int>(timesteps_.size()) - 1; }
  /// timesteps()[0] == 0, timesteps()[steps()] == T.
  const std::vector<int>& timesteps() const { return timesteps_; }
  /// Throws ScheduleError unless from == to or the two are neighbours.
  void check_adjacent(int from, int to) const;

 private:
  NoiseSchedule schedule_;
  std::vector<int> timesteps_;
};

/// Noise predictor used by the DDIM loops: (z, t) -> eps_hat.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z, int t)>;

/// z_t -> z_{t_prev}, eps evaluated at (z_t, t).
torch::Tensor ddim_step(const DdimSchedule& ddim, const torch::Tensor& z_t, int t, int t_prev,
                        const NoisePredictor& eps);
/// z_{t_prev} -> z_t, eps evaluated at (z_{t_prev}, t_prev).
torch::Tensor ddim_invert_step(const DdimSchedule& ddim, const torch::Tensor& z_prev, int t_prev, int t,
                               const NoisePredictor& eps);

/// Full inversion; returns [z_0, z_{t_1}, ..., z_T].
std::vector<torch::Tensor> ddim_invert(const DdimSchedule& ddim, const torch::Tensor& z0, const NoisePredictor& eps);
/// Full sampling from z_T down to z_0.
torch::Tensor ddim_sample(const DdimSchedule& ddim, const torch::Tensor& z_T, const NoisePredictor& eps);

/// Image in [0, 1] <-> diffusion space in [-1, 1] (identity encoder).
inline torch::Tensor encode_image(const torch::Tensor& x) { return x * 2.0 - 1.0; }
inline torch::Tensor decode_latent(const torch::Tensor& z) { return ((z + 1.0) * 0.5).clamp(0.0, 1.0); }

// ---------------------------------------------------------------- training

struct OptimConfig {
  double learning_rate = 1e-5;
  double weight_decay = 1e-2;
  int batch_size = 40;
  int steps = 20000;
  double grad_clip = 1.0;
  double ema_decay = 0.0;
  int log_every = 100;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<std::pair<int, double>> curve;  // (step, smoothed loss)
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Trains epsilon_theta and the null tokens on the denoising loss with the
/// tokens fixed to the null sequence. `images` is [N, 3, H, W] in [0, 1].
/// Throws DivergenceError when the smoothed loss exceeds 10x its start.
UNet train_backbone(const torch::Tensor& images, const DenoiserConfig& config, const NoiseSchedule& schedule,
                    const OptimConfig& optim, TrainLog* log = nullptr);

// ---------------------------------------------------------------- checkpoints

/// SHA-256 over every parameter and buffer (name, shape, float bytes).
std::string parameter_hash(const torch::nn::Module& module);

/// Checkpoint layout: a magic/version line, one JSON header line (kind,
/// metadata, parameter index, hash), then raw little-endian float32 data.
void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& meta,
                     const torch::nn::Module& module);
/// Reads only the header.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path, const std::string& kind);
/// Loads parameters into `module` (names and shapes must match) and returns
/// the metadata; verifies the stored hash.
nlohmann::json load_checkpoint(const std::filesystem::path& path, const std::string& kind, torch::nn::Module& module);

inline constexpr int kCheckpointFormatVersion = 1;

struct Backbone {
  DenoiserConfig config;
  NoiseSchedule schedule;
  UNet model{nullptr};
  std::string hash;
};

void save_backbone(const std::filesystem::path& path, const Backbone& backbone, const nlohmann::json& extra = {});
Backbone load_backbone(const std::filesystem::path& path);

/// Stacks images into [N, 3, H, W] float32 in [0, 1].
torch::Tensor images_to_tensor(const std::vector<Image>& images);
/// [3, H, W] or [1, 3, H, W] in [0, 1] -> Image.
Image tensor_to_image(const torch::Tensor& chw);
std::vector<Image> tensor_to_images(const torch::Tensor& nchw);

}  // namespace cfdiff::diffusion
