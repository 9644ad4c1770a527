#include "cfdiff/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "cfdiff/errors.hpp"
#include "cfdiff/log.hpp"
#include "cfdiff/util.hpp"

namespace cfdiff::diffusion {

namespace nn = torch::nn;
using nlohmann::json;

namespace {

int norm_groups(int channels, int groups) {
  int g = std::min(groups, channels);
  while (g > 1 && channels % g != 0) --g;
  return g;
}

}  // namespace

std::string shape_str(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

// ---------------------------------------------------------------- schedule

NoiseSchedule NoiseSchedule::linear(int train_steps, double beta_start, double beta_end) {
  if (train_steps < 2) throw ConfigError("noise schedule needs at least 2 training steps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw ConfigError("noise schedule needs 0 < beta_start < beta_end < 1");
  NoiseSchedule s;
  s.train_steps_ = train_steps;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.betas_.assign(train_steps + 1, 0.0);
  s.alpha_bar_.assign(train_steps + 1, 1.0);
  for (int t = 1; t <= train_steps; ++t) {
    s.betas_[t] = beta_start + (beta_end - beta_start) * (t - 1) / (train_steps - 1);
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.betas_[t]);
    if (!(s.alpha_bar_[t] < s.alpha_bar_[t - 1])) throw ScheduleError("alpha_bar is not strictly decreasing");
  }
  return s;
}

std::vector<int> NoiseSchedule::inference_steps(int steps) const {
  if (steps < 1 || steps > train_steps_)
    throw ConfigError("inference steps must lie in [1, " + std::to_string(train_steps_) + "]");
  std::vector<int> out;
  out.reserve(steps);
  for (int k = 1; k <= steps; ++k) {
    const int t = static_cast<int>(std::llround(static_cast<double>(k) * train_steps_ / steps));
    out.push_back(std::clamp(t, 1, train_steps_));
  }
  return out;
}

json NoiseSchedule::to_json() const {
  return {{"kind", "linear"}, {"train_steps", train_steps_}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
}

torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& z0, int t, const torch::Tensor& eps) {
  if (z0.sizes() != eps.sizes()) throw ShapeError("add_noise: eps " + shape_str(eps) + " vs z0 " + shape_str(z0));
  if (t < 0 || t > schedule.train_steps()) throw ScheduleError("add_noise: timestep out of range");
  if (t == 0) return z0.clone();
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& z0, const torch::Tensor& t,
                        const torch::Tensor& eps) {
  if (z0.sizes() != eps.sizes()) throw ShapeError("add_noise: eps " + shape_str(eps) + " vs z0 " + shape_str(z0));
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ShapeError("add_noise: t must be [B]");
  auto table = torch::tensor(schedule.alpha_bars(), torch::kFloat64);
  auto ab = table.index_select(0, t.to(torch::kInt64)).to(z0.scalar_type());
  std::vector<int64_t> view(z0.dim(), 1);
  view[0] = z0.size(0);
  ab = ab.view(view);
  return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor predict_x0(const NoiseSchedule& schedule, const torch::Tensor& z_t, int t, const torch::Tensor& eps) {
  const double ab = schedule.alpha_bar(t);
  return (z_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
}

torch::Tensor ddim_transfer(const NoiseSchedule& schedule, const torch::Tensor& z, int from, int to,
                            const torch::Tensor& eps) {
  if (z.sizes() != eps.sizes()) throw ShapeError("ddim: eps " + shape_str(eps) + " vs z " + shape_str(z));
  if (from == to) return z;
  const auto x0 = predict_x0(schedule, z, from, eps);
  const double ab = schedule.alpha_bar(to);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double alpha) {
  if (eps_cond.sizes() != eps_uncond.sizes())
    throw ShapeError("cfg_combine: " + shape_str(eps_cond) + " vs " + shape_str(eps_uncond));
  if (alpha == 1.0) return eps_cond;
  return alpha * eps_cond + (1.0 - alpha) * eps_uncond;
}

// ---------------------------------------------------------------- config

bool DenoiserConfig::attends_at(int resolution) const {
  return std::find(attention_resolutions.begin(), attention_resolutions.end(), resolution) !=
         attention_resolutions.end();
}

void DenoiserConfig::validate() const {
  if (image_size < 4 || (image_size & (image_size - 1)) != 0) throw ConfigError("image_size must be a power of two >= 4");
  if (in_channels < 1 || base_channels < 1 || token_dim < 1) throw ConfigError("channel and token sizes must be positive");
  if (channel_mult.empty()) throw ConfigError("channel_mult must not be empty");
  if ((image_size >> (levels() - 1)) < 1) throw ConfigError("too many levels for image_size");
  for (int m : channel_mult)
    if (m < 1) throw ConfigError("channel multipliers must be positive");
  if (context_tokens < 0 || num_attributes < 1) throw ConfigError("token counts must be positive");
  if (groups < 1) throw ConfigError("groups must be positive");
}

json DenoiserConfig::to_json() const {
  return {{"image_size", image_size},       {"in_channels", in_channels},
          {"base_channels", base_channels}, {"channel_mult", channel_mult},
          {"attention_resolutions", attention_resolutions},
          {"token_dim", token_dim},         {"context_tokens", context_tokens},
          {"num_attributes", num_attributes}, {"groups", groups}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
  DenoiserConfig c;
  try {
    c.image_size = j.at("image_size").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.attention_resolutions = j.at("attention_resolutions").get<std::vector<int>>();
    c.token_dim = j.at("token_dim").get<int>();
    c.context_tokens = j.at("context_tokens").get<int>();
    c.num_attributes = j.at("num_attributes").get<int>();
    c.groups = j.at("groups").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad denoiser config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::vector<int64_t>> injection_shapes(const DenoiserConfig& config) {
  std::vector<std::vector<int64_t>> out;
  for (int l = 0; l < config.levels(); ++l) out.push_back({config.channels_at(l), config.resolution_at(l), config.resolution_at(l)});
  const int last = config.levels() - 1;
  out.push_back({config.channels_at(last), config.resolution_at(last), config.resolution_at(last)});
  return out;
}

void ResidualSet::check(const DenoiserConfig& config, int64_t batch) const {
  const auto shapes = injection_shapes(config);
  if (skips.size() + 1 != shapes.size())
    throw ShapeError("residual set has " + std::to_string(skips.size()) + " skip tensors, expected " +
                     std::to_string(shapes.size() - 1));
  auto expect = [&](const torch::Tensor& r, const std::vector<int64_t>& s, const std::string& what) {
    if (!r.defined() || r.dim() != 4 || r.size(0) != batch || r.size(1) != s[0] || r.size(2) != s[1] || r.size(3) != s[2])
      throw ShapeError("residual " + what + " has shape " + (r.defined() ? shape_str(r) : "undefined") +
                       ", expected [" + std::to_string(batch) + ", " + std::to_string(s[0]) + ", " +
                       std::to_string(s[1]) + ", " + std::to_string(s[2]) + "]");
  };
  for (std::size_t i = 0; i < skips.size(); ++i) expect(skips[i], shapes[i], "skip " + std::to_string(i));
  expect(mid, shapes.back(), "mid");
}

ResidualSet ResidualSet::zeros(const DenoiserConfig& config, int64_t batch) {
  ResidualSet r;
  const auto shapes = injection_shapes(config);
  for (std::size_t i = 0; i + 1 < shapes.size(); ++i)
    r.skips.push_back(torch::zeros({batch, shapes[i][0], shapes[i][1], shapes[i][2]}));
  const auto& m = shapes.back();
  r.mid = torch::zeros({batch, m[0], m[1], m[2]});
  return r;
}

double ResidualSet::norm() const {
  double s = 0.0;
  for (const auto& t : skips) s += t.to(torch::kFloat64).pow(2).sum().item<double>();
  if (mid.defined()) s += mid.to(torch::kFloat64).pow(2).sum().item<double>();
  return std::sqrt(s);
}

// ---------------------------------------------------------------- network pieces

TimeEmbeddingImpl::TimeEmbeddingImpl(int base, int out_dim) : base_dim(base) {
  fc1 = register_module("fc1", nn::Linear(base, out_dim));
  fc2 = register_module("fc2", nn::Linear(out_dim, out_dim));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
  const int half = base_dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  return fc2(torch::silu(fc1(emb)));
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups) {
  norm1 = register_module("norm1", nn::GroupNorm(norm_groups(in_ch, groups), in_ch));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out_ch));
  norm2 = register_module("norm2", nn::GroupNorm(norm_groups(out_ch, groups), out_ch));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
  if (in_ch != out_ch) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

CrossAttentionImpl::CrossAttentionImpl(int channels, int token_dim, int groups) {
  norm = register_module("norm", nn::GroupNorm(norm_groups(channels, groups), channels));
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(token_dim, channels).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(token_dim, channels).bias(false)));
  to_out = register_module("to_out", nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& tokens, AttentionHook* hook) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto q = to_q(norm(x).flatten(2).transpose(1, 2));  // [B, HW, C]
  auto k = to_k(tokens);                              // [B, N, C]
  auto v = to_v(tokens);
  auto weights = torch::softmax(torch::bmm(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(c)), -1);
  if (hook) weights = hook->on_attention(layer_id, weights);
  auto out = to_out(torch::bmm(weights, v));
  return x + out.transpose(1, 2).reshape({b, c, h, w});
}

EncoderImpl::EncoderImpl(const DenoiserConfig& cfg) : config(cfg) {
  config.validate();
  const int base = config.base_channels;
  time_embed = register_module("time_embed", TimeEmbedding(base, config.time_dim()));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(config.in_channels, base, 3).padding(1)));
  int prev = base;
  for (int l = 0; l < config.levels(); ++l) {
    const int ch = config.channels_at(l);
    down_blocks->push_back(ResBlock(prev, ch, config.time_dim(), config.groups));
    if (config.attends_at(config.resolution_at(l))) {
      attn_index.push_back(static_cast<int>(down_attn->size()));
      down_attn->push_back(CrossAttention(ch, config.token_dim, config.groups));
    } else {
      attn_index.push_back(-1);
    }
    if (l + 1 < config.levels())
      downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
    prev = ch;
  }
  register_module("down_blocks", down_blocks);
  register_module("down_attn", down_attn);
  register_module("downsamplers", downsamplers);
  mid1 = register_module("mid1", ResBlock(prev, prev, config.time_dim(), config.groups));
  if (config.attends_at(config.resolution_at(config.levels() - 1)))
    mid_attn = register_module("mid_attn", CrossAttention(prev, config.token_dim, config.groups));
  mid2 = register_module("mid2", ResBlock(prev, prev, config.time_dim(), config.groups));
}

EncoderOutput EncoderImpl::forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& tokens,
                                   AttentionHook* hook) {
  EncoderOutput out;
  out.temb = time_embed(t);
  auto h = conv_in(z);
  for (int l = 0; l < config.levels(); ++l) {
    h = down_blocks[l]->as<ResBlock>()->forward(h, out.temb);
    if (attn_index[l] >= 0) h = down_attn[attn_index[l]]->as<CrossAttention>()->forward(h, tokens, hook);
    out.skips.push_back(h);
    if (l + 1 < config.levels()) h = downsamplers[l]->as<nn::Conv2d>()->forward(h);
  }
  h = mid1(h, out.temb);
  if (mid_attn) h = mid_attn(h, tokens, hook);
  out.mid = mid2(h, out.temb);
  return out;
}

int EncoderImpl::assign_attention_ids(int first) {
  for (std::size_t i = 0; i < down_attn->size(); ++i) down_attn[i]->as<CrossAttention>()->layer_id = first++;
  if (mid_attn) mid_attn->layer_id = first++;
  return first;
}

DecoderImpl::DecoderImpl(const DenoiserConfig& cfg) : config(cfg) {
  config.validate();
  const int levels = config.levels();
  attn_index.assign(levels, -1);
  for (int l = levels - 1; l >= 0; --l) {
    const int ch = config.channels_at(l);
    const int below = l == levels - 1 ? ch : config.channels_at(l + 1);
    up_blocks->push_back(ResBlock(below + ch, ch, config.time_dim(), config.groups));
    if (config.attends_at(config.resolution_at(l))) {
      attn_index[l] = static_cast<int>(up_attn->size());
      up_attn->push_back(CrossAttention(ch, config.token_dim, config.groups));
    }
    if (l > 0) upsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).padding(1)));
  }
  register_module("up_blocks", up_blocks);
  register_module("up_attn", up_attn);
  register_module("upsamplers", upsamplers);
  const int base = config.channels_at(0);
  norm_out = register_module("norm_out", nn::GroupNorm(norm_groups(base, config.groups), base));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(base, config.in_channels, 3).padding(1)));
  torch::NoGradGuard ng;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

torch::Tensor DecoderImpl::forward(const EncoderOutput& enc, const torch::Tensor& tokens, const ResidualSet* residuals,
                                   AttentionHook* hook) {
  const int levels = config.levels();
  auto h = residuals ? enc.mid + residuals->mid : enc.mid;
  for (int i = 0; i < levels; ++i) {
    const int l = levels - 1 - i;
    auto skip = residuals ? enc.skips[l] + residuals->skips[l] : enc.skips[l];
    h = up_blocks[i]->as<ResBlock>()->forward(torch::cat({h, skip}, 1), enc.temb);
    if (attn_index[l] >= 0) h = up_attn[attn_index[l]]->as<CrossAttention>()->forward(h, tokens, hook);
    if (l > 0) {
      h = torch::upsample_nearest2d(h, {h.size(2) * 2, h.size(3) * 2});
      h = upsamplers[i]->as<nn::Conv2d>()->forward(h);
    }
  }
  return conv_out(torch::silu(norm_out(h)));
}

int DecoderImpl::assign_attention_ids(int first) {
  for (std::size_t i = 0; i < up_attn->size(); ++i) up_attn[i]->as<CrossAttention>()->layer_id = first++;
  return first;
}

UNetImpl::UNetImpl(const DenoiserConfig& cfg) : config(cfg) {
  config.validate();
  encoder = register_module("encoder", Encoder(config));
  decoder = register_module("decoder", Decoder(config));
  decoder->assign_attention_ids(encoder->assign_attention_ids(0));
  null_tokens = register_parameter("null_tokens", torch::randn({config.num_tokens(), config.token_dim}));
}

torch::Tensor batch_tokens(const torch::Tensor& tokens, int64_t batch, int expected_tokens) {
  if (tokens.dim() == 2) {
    if (tokens.size(0) != expected_tokens)
      throw ShapeError("token sequence has " + std::to_string(tokens.size(0)) + " tokens, expected " +
                       std::to_string(expected_tokens));
    return tokens.unsqueeze(0).expand({batch, tokens.size(0), tokens.size(1)});
  }
  if (tokens.dim() != 3 || tokens.size(0) != batch || tokens.size(1) != expected_tokens)
    throw ShapeError("token batch " + shape_str(tokens) + " does not match batch " + std::to_string(batch) + " x " +
                     std::to_string(expected_tokens) + " tokens");
  return tokens;
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& tokens,
                                const ResidualSet* residuals, AttentionHook* hook) {
  if (z_t.dim() != 4 || z_t.size(1) != config.in_channels || z_t.size(2) != config.image_size ||
      z_t.size(3) != config.image_size)
    throw ShapeError("denoiser input " + shape_str(z_t) + " does not match the configured image shape");
  const auto b = z_t.size(0);
  auto tok = batch_tokens(tokens, b, config.num_tokens());
  if (tok.size(2) != config.token_dim) throw ShapeError("token dimension mismatch");
  if (residuals) residuals->check(config, b);
  auto enc = encoder(z_t, t, tok, hook);
  return decoder(enc, tok, residuals, hook);
}

torch::Tensor predict_noise(UNet& model, const torch::Tensor& z_t, int t, const torch::Tensor& tokens,
                            const ResidualSet* residuals, AttentionHook* hook) {
  auto tt = torch::full({z_t.size(0)}, static_cast<int64_t>(t), torch::kInt64);
  return model->forward(z_t, tt, tokens, residuals, hook);
}

// ---------------------------------------------------------------- DDIM

DdimSchedule::DdimSchedule(const NoiseSchedule& schedule, int steps) : schedule_(schedule) {
  timesteps_.push_back(0);
  for (int t : schedule.inference_steps(steps)) timesteps_.push_back(t);
}

void DdimSchedule::check_adjacent(int from, int to) const {
  if (from == to) return;
  auto pos = [&](int t) {
    auto it = std::find(timesteps_.begin(), timesteps_.end(), t);
    if (it == timesteps_.end()) throw ScheduleError("timestep " + std::to_string(t) + " is not in the inference subsequence");
    return it - timesteps_.begin();
  };
  if (std::abs(pos(from) - pos(to)) != 1)
    throw ScheduleError("timesteps " + std::to_string(from) + " and " + std::to_string(to) + " are not adjacent");
}

torch::Tensor ddim_step(const DdimSchedule& ddim, const torch::Tensor& z_t, int t, int t_prev,
                        const NoisePredictor& eps) {
  ddim.check_adjacent(t, t_prev);
  if (t_prev > t) throw ScheduleError("ddim_step runs from a later to an earlier timestep");
  if (t == t_prev) return z_t;
  return ddim_transfer(ddim.noise(), z_t, t, t_prev, eps(z_t, t));
}

torch::Tensor ddim_invert_step(const DdimSchedule& ddim, const torch::Tensor& z_prev, int t_prev, int t,
                               const NoisePredictor& eps) {
  ddim.check_adjacent(t_prev, t);
  if (t_prev > t) throw ScheduleError("ddim_invert_step runs from an earlier to a later timestep");
  if (t == t_prev) return z_prev;
  return ddim_transfer(ddim.noise(), z_prev, t_prev, t, eps(z_prev, t_prev));
}

std::vector<torch::Tensor> ddim_invert(const DdimSchedule& ddim, const torch::Tensor& z0, const NoisePredictor& eps) {
  const auto& ts = ddim.timesteps();
  std::vector<torch::Tensor> traj{z0};
  for (std::size_t i = 1; i < ts.size(); ++i) traj.push_back(ddim_invert_step(ddim, traj.back(), ts[i - 1], ts[i], eps));
  return traj;
}

torch::Tensor ddim_sample(const DdimSchedule& ddim, const torch::Tensor& z_T, const NoisePredictor& eps) {
  const auto& ts = ddim.timesteps();
  auto z = z_T;
  for (std::size_t i = ts.size() - 1; i > 0; --i) z = ddim_step(ddim, z, ts[i], ts[i - 1], eps);
  return z;
}

// ---------------------------------------------------------------- training

json OptimConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"batch_size", batch_size},
          {"steps", steps},                 {"grad_clip", grad_clip},       {"ema_decay", ema_decay},
          {"seed", seed}};
}

UNet train_backbone(const torch::Tensor& images, const DenoiserConfig& config, const NoiseSchedule& schedule,
                    const OptimConfig& optim, TrainLog* log) {
  config.validate();
  if (images.dim() != 4 || images.size(0) == 0) throw EmptyDatasetError("train_backbone needs a non-empty image batch");
  if (images.size(2) != config.image_size || images.size(3) != config.image_size)
    throw ConfigError("dataset images are " + std::to_string(images.size(2)) + "px but the denoiser expects " +
                      std::to_string(config.image_size) + "px");
  if (optim.batch_size < 1 || optim.steps < 1 || !(optim.learning_rate > 0.0))
    throw ConfigError("batch_size, steps and learning_rate must be positive");

  torch::manual_seed(optim.seed);
  UNet model(config);
  model->train();
  auto data = encode_image(images.to(torch::kFloat32));
  const auto n = data.size(0);

  torch::optim::AdamW opt(model->parameters(),
                          torch::optim::AdamWOptions(optim.learning_rate).weight_decay(optim.weight_decay));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(optim.seed ^ 0x5eedULL);
  std::mt19937_64 rng(optim.seed);
  std::uniform_int_distribution<int64_t> pick(0, n - 1);
  std::uniform_int_distribution<int64_t> pick_t(1, schedule.train_steps());

  std::vector<torch::Tensor> ema;
  if (optim.ema_decay > 0.0)
    for (auto& p : model->parameters()) ema.push_back(p.detach().clone());

  double smooth = 0.0, initial = 0.0;
  TrainLog local;
  for (int step = 1; step <= optim.steps; ++step) {
    std::vector<int64_t> idx(optim.batch_size), ts(optim.batch_size);
    for (auto& i : idx) i = pick(rng);
    for (auto& t : ts) t = pick_t(rng);
    auto z0 = data.index_select(0, torch::tensor(idx));
    auto t = torch::tensor(ts);
    auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
    auto zt = add_noise(schedule, z0, t, eps);
    auto pred = model->forward(zt, t, model->null_tokens);
    auto loss = torch::mse_loss(pred, eps);

    opt.zero_grad();
    loss.backward();
    if (optim.grad_clip > 0.0) nn::utils::clip_grad_norm_(model->parameters(), optim.grad_clip);
    opt.step();
    if (!ema.empty()) {
      torch::NoGradGuard ng;
      auto params = model->parameters();
      for (std::size_t i = 0; i < params.size(); ++i) ema[i].mul_(optim.ema_decay).add_(params[i].detach(), 1.0 - optim.ema_decay);
    }

    const double l = loss.item<double>();
    if (!std::isfinite(l)) throw DivergenceError("backbone loss became non-finite at step " + std::to_string(step));
    if (step == 1) {
      initial = smooth = l;
      local.initial_loss = l;
    } else {
      smooth = 0.98 * smooth + 0.02 * l;
    }
    if (smooth > 10.0 * initial)
      throw DivergenceError("backbone loss " + std::to_string(smooth) + " exceeds 10x its initial value at step " +
                            std::to_string(step));
    if (step % std::max(1, optim.log_every) == 0 || step == optim.steps) {
      local.curve.emplace_back(step, smooth);
      log::info("backbone step {}/{} loss {:.5f}", step, optim.steps, smooth);
    }
  }
  local.final_loss = smooth;
  if (!ema.empty()) {
    torch::NoGradGuard ng;
    auto params = model->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(ema[i]);
  }
  model->eval();
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  if (log) *log = std::move(local);
  return model;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr const char* kMagic = "CFDIFF-CHECKPOINT";

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) out.emplace_back("buffer:" + item.key(), item.value());
  return out;
}

std::vector<float> flat_floats(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  return std::vector<float>(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
}

}  // namespace

std::string parameter_hash(const torch::nn::Module& module) {
  std::vector<unsigned char> bytes;
  for (const auto& [name, t] : named_state(module)) {
    bytes.insert(bytes.end(), name.begin(), name.end());
    bytes.push_back(0);
    for (auto s : t.sizes()) {
      const auto v = static_cast<int64_t>(s);
      const auto* p = reinterpret_cast<const unsigned char*>(&v);
      bytes.insert(bytes.end(), p, p + sizeof v);
    }
    const auto f = flat_floats(t);
    const auto* p = reinterpret_cast<const unsigned char*>(f.data());
    bytes.insert(bytes.end(), p, p + f.size() * sizeof(float));
  }
  return sha256_hex(bytes);
}

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const json& meta,
                     const torch::nn::Module& module) {
  json index = json::array();
  std::vector<float> blob;
  for (const auto& [name, t] : named_state(module)) {
    index.push_back({{"name", name}, {"shape", t.sizes().vec()}, {"offset", blob.size()}});
    const auto f = flat_floats(t);
    blob.insert(blob.end(), f.begin(), f.end());
  }
  json header{{"kind", kind}, {"format_version", kCheckpointFormatVersion}, {"meta", meta},
              {"tensors", index}, {"parameter_hash", parameter_hash(module)}};
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOError("cannot write checkpoint " + path.string());
  out << kMagic << ' ' << kCheckpointFormatVersion << '\n' << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw IOError("failed writing checkpoint " + path.string());
}

namespace {

json read_header(std::istream& in, const std::filesystem::path& path, const std::string& kind) {
  std::string magic_line, header_line;
  if (!std::getline(in, magic_line) || !std::getline(in, header_line))
    throw IOError("truncated checkpoint " + path.string());
  std::istringstream ms(magic_line);
  std::string magic;
  int version = 0;
  ms >> magic >> version;
  if (magic != kMagic) throw IOError(path.string() + " is not a checkpoint");
  if (version != kCheckpointFormatVersion)
    throw IOError(path.string() + " has unsupported checkpoint format version " + std::to_string(version));
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw IOError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("kind", "") != kind)
    throw IOError(path.string() + " holds a '" + header.value("kind", "") + "' checkpoint, expected '" + kind + "'");
  return header;
}

}  // namespace

json read_checkpoint_header(const std::filesystem::path& path, const std::string& kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing checkpoint " + path.string());
  return read_header(in, path, kind);
}

json load_checkpoint(const std::filesystem::path& path, const std::string& kind, torch::nn::Module& module) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing checkpoint " + path.string());
  const json header = read_header(in, path, kind);
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* blob = reinterpret_cast<const float*>(rest.data());
  const std::size_t nfloats = rest.size() / sizeof(float);

  std::map<std::string, json> index;
  for (const auto& e : header.at("tensors")) index[e.at("name").get<std::string>()] = e;
  auto state = named_state(module);
  if (state.size() != index.size()) throw ShapeError(path.string() + ": tensor count does not match the model");
  torch::NoGradGuard ng;
  for (auto& [name, t] : state) {
    auto it = index.find(name);
    if (it == index.end()) throw ShapeError(path.string() + ": missing tensor " + name);
    const auto shape = it->second.at("shape").get<std::vector<int64_t>>();
    if (shape != t.sizes().vec()) throw ShapeError(path.string() + ": shape mismatch for " + name);
    const auto offset = it->second.at("offset").get<std::size_t>();
    if (offset + static_cast<std::size_t>(t.numel()) > nfloats) throw IOError("truncated checkpoint " + path.string());
    auto src = torch::from_blob(const_cast<float*>(blob + offset), shape, torch::kFloat32);
    t.copy_(src);
  }
  const auto stored = header.at("parameter_hash").get<std::string>();
  if (parameter_hash(module) != stored) throw IOError(path.string() + ": parameter hash mismatch (corrupt file?)");
  return header.at("meta");
}

void save_backbone(const std::filesystem::path& path, const Backbone& backbone, const json& extra) {
  json meta{{"denoiser", backbone.config.to_json()}, {"schedule", backbone.schedule.to_json()}, {"extra", extra}};
  save_checkpoint(path, "backbone", meta, *backbone.model);
}

Backbone load_backbone(const std::filesystem::path& path) {
  const json header = read_checkpoint_header(path, "backbone");
  const json& meta = header.at("meta");
  Backbone b;
  b.config = DenoiserConfig::from_json(meta.at("denoiser"));
  const auto& s = meta.at("schedule");
  b.schedule = NoiseSchedule::linear(s.at("train_steps").get<int>(), s.at("beta_start").get<double>(),
                                     s.at("beta_end").get<double>());
  b.model = UNet(b.config);
  load_checkpoint(path, "backbone", *b.model);
  b.model->eval();
  for (auto& p : b.model->parameters()) p.set_requires_grad(false);
  b.hash = parameter_hash(*b.model);
  return b;
}

torch::Tensor images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw EmptyDatasetError("images_to_tensor: no images");
  const int h = images.front().height, w = images.front().width;
  auto out = torch::empty({static_cast<int64_t>(images.size()), 3, h, w}, torch::kFloat32);
  auto acc = out.accessor<float, 4>();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& im = images[n];
    if (im.height != h || im.width != w) throw ShapeError("images_to_tensor: images differ in size");
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int ch = 0; ch < 3; ++ch) acc[n][ch][r][c] = im.at(r, c, ch);
  }
  return out;
}

Image tensor_to_image(const torch::Tensor& chw_in) {
  auto chw = chw_in.detach().to(torch::kFloat32);
  if (chw.dim() == 4 && chw.size(0) == 1) chw = chw[0];
  if (chw.dim() != 3 || chw.size(0) != 3) throw ShapeError("tensor_to_image expects [3, H, W], got " + shape_str(chw));
  chw = chw.contiguous();
  Image im(static_cast<int>(chw.size(1)), static_cast<int>(chw.size(2)));
  auto acc = chw.accessor<float, 3>();
  for (int r = 0; r < im.height; ++r)
    for (int c = 0; c < im.width; ++c)
      for (int ch = 0; ch < 3; ++ch) im.at(r, c, ch) = acc[ch][r][c];
  return im;
}

std::vector<Image> tensor_to_images(const torch::Tensor& nchw) {
  if (nchw.dim() != 4) throw ShapeError("tensor_to_images expects [N, 3, H, W], got " + shape_str(nchw));
  std::vector<Image> out;
  for (int64_t i = 0; i < nchw.size(0); ++i) out.push_back(tensor_to_image(nchw[i]));
  return out;
}

}  // namespace cfdiff::diffusion
