#include "cfdiff/adapter.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <limits>
#include <random>

#include "cfdiff/errors.hpp"
#include "cfdiff/log.hpp"

namespace cfdiff::adapter {

namespace nn = torch::nn;
using nlohmann::json;

Variant parse_variant(const std::string& name) {
  if (name == "plain") return Variant::plain;
  if (name == "pai") return Variant::pai;
  if (name == "pai+ctc" || name == "pai_ctc") return Variant::pai_ctc;
  throw VariantError("unknown adapter variant '" + name + "' (expected plain, pai or pai+ctc)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::pai: return "pai";
    case Variant::pai_ctc: return "pai+ctc";
  }
  return "?";
}

// ---------------------------------------------------------------- tokens

TokenEmbeddingsImpl::TokenEmbeddingsImpl(const torch::Tensor& null_tokens, int p) : context_tokens(p) {
  if (null_tokens.dim() != 2 || null_tokens.size(0) <= p) throw ShapeError("null token table too short for the prefix");
  num_attributes = static_cast<int>(null_tokens.size(0)) - p;
  const auto d = null_tokens.size(1);
  auto base = null_tokens.detach().clone();
  prefix = register_buffer("prefix", base.slice(0, 0, p).clone());
  placeholders = register_parameter("placeholders", base.slice(0, p).clone());
  slopes = register_parameter("slopes", torch::zeros({num_attributes, d}));
  offsets = register_parameter("offsets", torch::zeros({num_attributes, d}));
}

torch::Tensor TokenEmbeddingsImpl::attribute_tokens(const torch::Tensor& y) {
  if (y.dim() != 2 || y.size(1) != num_attributes)
    throw ShapeError("attribute batch must be [B, " + std::to_string(num_attributes) + "]");
  auto yy = y.to(placeholders.scalar_type()).unsqueeze(-1);
  return placeholders.unsqueeze(0) + yy * slopes.unsqueeze(0) + offsets.unsqueeze(0);
}

torch::Tensor TokenEmbeddingsImpl::forward(const torch::Tensor& y) {
  auto attr = attribute_tokens(y);
  auto pre = prefix.unsqueeze(0).expand({attr.size(0), prefix.size(0), prefix.size(1)});
  return torch::cat({pre, attr}, 1);
}

torch::Tensor build_tokens(TokenEmbeddings& tokens, const std::vector<double>& y) {
  if (static_cast<int>(y.size()) != tokens->num_attributes)
    throw ShapeError("build_tokens: expected " + std::to_string(tokens->num_attributes) + " attributes, got " +
                     std::to_string(y.size()));
  auto yt = torch::tensor(y, torch::kFloat64).to(torch::kFloat32).unsqueeze(0);
  return tokens->forward(yt)[0];
}

// ---------------------------------------------------------------- adapter net

AdapterImpl::AdapterImpl(diffusion::UNet& backbone, Variant v) : variant(v), config(backbone->config) {
  encoder = register_module("encoder", diffusion::Encoder(config));
  {
    torch::NoGradGuard ng;
    auto src = backbone->encoder->named_parameters(true);
    for (auto& item : encoder->named_parameters(true)) item.value().copy_(src[item.key()]);
    auto src_buf = backbone->encoder->named_buffers(true);
    for (auto& item : encoder->named_buffers(true)) item.value().copy_(src_buf[item.key()]);
  }
  encoder->assign_attention_ids(kAdapterLayerOffset);
  for (const auto& shape : diffusion::injection_shapes(config)) {
    nn::Conv2d proj(nn::Conv2dOptions(shape[0], shape[0], 1));
    torch::NoGradGuard ng;
    proj->weight.zero_();
    proj->bias.zero_();
    projections->push_back(proj);
  }
  register_module("projections", projections);
  if (variant == Variant::plain) {
    input_maps = register_parameter("input_maps", torch::zeros({config.num_attributes, 1, config.image_size, config.image_size}));
    input_bias = register_parameter("input_bias", torch::zeros({1, 1, config.image_size, config.image_size}));
  }
}

diffusion::ResidualSet AdapterImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const AdapterInput& input,
                                            diffusion::AttentionHook* hook) {
  if (!input.tokens.defined()) throw VariantError("adapter input carries no token sequence");
  const auto b = z_t.size(0);
  auto tokens = diffusion::batch_tokens(input.tokens, b, config.num_tokens());
  torch::Tensor z = z_t;
  if (variant == Variant::plain) {
    if (!input.attributes.defined())
      throw VariantError("plain adapter expects attributes in its latent input");
    const auto& y = input.attributes;
    if (y.dim() != 2 || y.size(0) != b || y.size(1) != config.num_attributes)
      throw ShapeError("plain adapter attributes must be [B, " + std::to_string(config.num_attributes) + "]");
    auto added = (y.to(torch::kFloat32).view({b, config.num_attributes, 1, 1, 1}) * input_maps.unsqueeze(0)).sum(1);
    z = z_t + added + input_bias;
  } else if (input.attributes.defined()) {
    throw VariantError("token adapters carry attributes only in tokens; got a latent attribute input");
  }
  auto enc = encoder(z, t, tokens, hook);
  diffusion::ResidualSet r;
  for (std::size_t l = 0; l < enc.skips.size(); ++l)
    r.skips.push_back(projections[l]->as<nn::Conv2d>()->forward(enc.skips[l]));
  r.mid = projections[enc.skips.size()]->as<nn::Conv2d>()->forward(enc.mid);
  return r;
}

// ---------------------------------------------------------------- losses

namespace {

// Masks over [B, K, B, K] pairs: same token in another sample, and a
// different token in another sample.
std::pair<torch::Tensor, torch::Tensor> pair_masks(int64_t b, int64_t k, torch::Device device) {
  auto bi = torch::arange(b, torch::TensorOptions().device(device));
  auto ki = torch::arange(k, torch::TensorOptions().device(device));
  auto other_sample = bi.view({b, 1, 1, 1}).ne(bi.view({1, 1, b, 1}));
  auto same_token = ki.view({1, k, 1, 1}).eq(ki.view({1, 1, 1, k}));
  auto pos = other_sample.logical_and(same_token).expand({b, k, b, k});
  auto neg = other_sample.logical_and(same_token.logical_not()).expand({b, k, b, k});
  return {pos, neg};
}

torch::Tensor cosine_table(const torch::Tensor& v) {
  const auto b = v.size(0), k = v.size(1), d = v.size(2);
  auto n = v / (v.pow(2).sum(-1, true) + 1e-12).sqrt();
  auto flat = n.reshape({b * k, d});
  return torch::mm(flat, flat.t()).view({b, k, b, k});
}

}  // namespace

torch::Tensor ctc_loss(const torch::Tensor& tokens, double tau) {
  if (tokens.dim() != 3) throw ShapeError("ctc_loss expects [B, K, d] tokens");
  const auto b = tokens.size(0), k = tokens.size(1);
  if (b < 2 || k < 2) throw DegenerateBatchError("ctc_loss needs B >= 2 and K >= 2 (got B=" + std::to_string(b) +
                                                 ", K=" + std::to_string(k) + ")");
  if (!(tau > 0.0)) throw ConfigError("ctc temperature must be positive");
  auto sim = cosine_table(tokens);
  auto [pos, neg] = pair_masks(b, k, tokens.device());
  auto positive = (sim * pos.to(sim.scalar_type())).sum({2, 3}) / static_cast<double>(b - 1);
  auto logits = (sim / tau).masked_fill(neg.logical_not(), -std::numeric_limits<double>::infinity());
  auto lse = torch::logsumexp(logits.reshape({b, k, b * k}), -1);
  return (-positive / tau + lse).mean();
}

torch::Tensor ctc_gradient(const torch::Tensor& tokens, double tau) {
  torch::NoGradGuard ng;
  if (tokens.dim() != 3) throw ShapeError("ctc_gradient expects [B, K, d] tokens");
  const auto b = tokens.size(0), k = tokens.size(1), d = tokens.size(2);
  if (b < 2 || k < 2) throw DegenerateBatchError("ctc_gradient needs B >= 2 and K >= 2");
  const auto m = b * k;
  auto v = tokens.to(torch::kFloat64).reshape({m, d});
  auto n = (v.pow(2).sum(1) + 1e-12).sqrt();  // [M]
  auto u = v / n.unsqueeze(1);
  auto s = torch::mm(u, u.t());
  auto [pos4, neg4] = pair_masks(b, k, tokens.device());
  auto pos = pos4.reshape({m, m}).to(torch::kFloat64);
  auto neg = neg4.reshape({m, m});
  auto logits = (s / tau).masked_fill(neg.logical_not(), -std::numeric_limits<double>::infinity());
  auto soft = torch::softmax(logits, 1);
  // dL / ds(a, c) with the anchor a in the row.
  auto w = (-pos / (tau * static_cast<double>(b - 1)) + soft / tau) / static_cast<double>(m);
  auto ws = w + w.t();
  // ds(a, c) / dv_a = v_c / (n_a n_c) - s(a, c) v_a / n_a^2
  auto g = torch::mm(ws, u) / n.unsqueeze(1) - (ws * s).sum(1, true) * v / n.pow(2).unsqueeze(1);
  return g.reshape({b, k, d});
}

torch::Tensor total_loss(const torch::Tensor& dm_loss, const torch::Tensor& ctc, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (lambda == 0.0 || !ctc.defined()) return dm_loss;
  return dm_loss + lambda * ctc;
}

double ctc_margin(const torch::Tensor& tokens) {
  torch::NoGradGuard ng;
  if (tokens.dim() != 3 || tokens.size(0) < 2 || tokens.size(1) < 2)
    throw DegenerateBatchError("ctc_margin needs [B >= 2, K >= 2, d] tokens");
  auto sim = cosine_table(tokens.to(torch::kFloat64));
  auto [pos, neg] = pair_masks(tokens.size(0), tokens.size(1), tokens.device());
  const double intra = sim.masked_select(pos).mean().item<double>();
  const double inter = sim.masked_select(neg).mean().item<double>();
  return intra - inter;
}

// ---------------------------------------------------------------- bundle

void TrainConfig::validate(int num_attributes) const {
  if (lambda < 0.0) throw ConfigError("config key 'adapter.lambda': must be non-negative");
  if (!(tau > 0.0)) throw ConfigError("config key 'adapter.tau': must be positive");
  if (variant == Variant::pai_ctc && (optim.batch_size < 2 || num_attributes < 2))
    throw ConfigError("config key 'adapter.batch': CTC needs at least 2 samples and 2 attributes");
  if (!(interface_lr_scale > 0.0)) throw ConfigError("config key 'adapter.interface_lr_scale': must be positive");
  if (optim.steps < 1 || optim.batch_size < 1 || !(optim.learning_rate > 0.0))
    throw ConfigError("adapter steps, batch and learning rate must be positive");
}

json TrainConfig::to_json() const {
  return {{"variant", variant_name(variant)}, {"lambda", lambda}, {"tau", tau}, {"interface_lr_scale", interface_lr_scale},
          {"optim", optim.to_json()}};
}

torch::Tensor CausalAdapter::backbone_tokens(const diffusion::Backbone& bb, const torch::Tensor& y) {
  if (!uses_tokens(variant)) return bb.model->null_tokens;
  return tokens->forward(y);
}

AdapterInput CausalAdapter::conditional_input(const diffusion::Backbone& bb, const torch::Tensor& y) {
  if (!uses_tokens(variant)) return {bb.model->null_tokens, y};
  return {tokens->forward(y), {}};
}

AdapterInput CausalAdapter::unconditional_input(const diffusion::Backbone& bb, const torch::Tensor& y) {
  if (!uses_tokens(variant)) return {bb.model->null_tokens, y};
  return {bb.model->null_tokens, {}};
}

torch::Tensor CausalAdapter::predict(diffusion::Backbone& bb, const torch::Tensor& z_t, int t, const torch::Tensor& y,
                                     bool unconditional, diffusion::AttentionHook* hook,
                                     const torch::Tensor& residual_latent) {
  auto tt = torch::full({z_t.size(0)}, static_cast<int64_t>(t), torch::kInt64);
  const auto input = unconditional ? unconditional_input(bb, y) : conditional_input(bb, y);
  const auto& zr = residual_latent.defined() ? residual_latent : z_t;
  auto r = net->forward(zr, tt, input, hook);
  auto tok = unconditional ? bb.model->null_tokens : backbone_tokens(bb, y);
  return bb.model->forward(z_t, tt, tok, &r, hook);
}

CausalAdapter make_adapter(diffusion::Backbone& bb, Variant variant, double lambda, double tau) {
  CausalAdapter a;
  a.variant = variant;
  a.net = Adapter(bb.model, variant);
  if (uses_tokens(variant)) a.tokens = TokenEmbeddings(bb.model->null_tokens, bb.config.context_tokens);
  a.backbone_hash = bb.hash.empty() ? diffusion::parameter_hash(*bb.model) : bb.hash;
  a.lambda = lambda;
  a.tau = tau;
  return a;
}

CausalAdapter train_adapter(diffusion::Backbone& bb, const torch::Tensor& images, const torch::Tensor& attributes,
                            const TrainConfig& config, AdapterTrainLog* log) {
  config.validate(bb.config.num_attributes);
  if (images.dim() != 4 || images.size(0) == 0) throw EmptyDatasetError("train_adapter needs images");
  if (attributes.dim() != 2 || attributes.size(0) != images.size(0) || attributes.size(1) != bb.config.num_attributes)
    throw ShapeError("attributes must be [N, K] and match the images");
  const auto hash_before = diffusion::parameter_hash(*bb.model);
  if (!bb.hash.empty() && hash_before != bb.hash)
    throw FrozenViolationError("backbone parameters do not match the recorded hash before adapter training");

  bb.model->eval();
  for (auto& p : bb.model->parameters()) p.set_requires_grad(false);

  torch::manual_seed(config.optim.seed);
  auto a = make_adapter(bb, config.variant, config.variant == Variant::pai_ctc ? config.lambda : 0.0, config.tau);
  a.net->train();
  std::vector<torch::Tensor> body, interface;
  for (auto& item : a.net->named_parameters(false)) {
    if (item.key() == "input_maps" || item.key() == "input_bias")
      interface.push_back(item.value());
  }
  for (auto& m : a.net->children())
    for (auto& p : m->parameters()) body.push_back(p);
  if (a.tokens) {
    a.tokens->train();
    for (auto& p : a.tokens->parameters()) interface.push_back(p);
  }
  std::vector<torch::Tensor> params = body;
  params.insert(params.end(), interface.begin(), interface.end());
  const auto prefix_before = a.tokens ? a.tokens->prefix.clone() : torch::Tensor{};

  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(body, std::make_unique<torch::optim::AdamWOptions>(
                                torch::optim::AdamWOptions(config.optim.learning_rate).weight_decay(config.optim.weight_decay)));
  groups.emplace_back(interface, std::make_unique<torch::optim::AdamWOptions>(
                                     torch::optim::AdamWOptions(config.optim.learning_rate * config.interface_lr_scale)
                                         .weight_decay(0.0)));
  torch::optim::AdamW opt(groups, torch::optim::AdamWOptions(config.optim.learning_rate));
  auto data = diffusion::encode_image(images.to(torch::kFloat32));
  auto attrs = attributes.to(torch::kFloat32);
  const auto n = data.size(0);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.optim.seed ^ 0xada9ULL);
  std::mt19937_64 rng(config.optim.seed);
  std::uniform_int_distribution<int64_t> pick(0, n - 1);
  std::uniform_int_distribution<int64_t> pick_t(1, bb.schedule.train_steps());

  AdapterTrainLog local;
  double smooth = 0.0, initial = 0.0, smooth_ctc = 0.0;
  const int bsz = config.optim.batch_size;
  for (int step = 1; step <= config.optim.steps; ++step) {
    std::vector<int64_t> idx(bsz), ts(bsz);
    for (auto& i : idx) i = pick(rng);
    for (auto& t : ts) t = pick_t(rng);
    auto index = torch::tensor(idx);
    auto z0 = data.index_select(0, index);
    auto y = attrs.index_select(0, index);
    auto t = torch::tensor(ts);
    auto eps = torch::randn(z0.sizes(), gen, torch::kFloat32);
    auto zt = diffusion::add_noise(bb.schedule, z0, t, eps);

    auto r = a.net->forward(zt, t, a.conditional_input(bb, y));
    auto pred = bb.model->forward(zt, t, a.backbone_tokens(bb, y), &r);
    auto dm = torch::mse_loss(pred, eps);
    torch::Tensor ctc;
    if (config.variant == Variant::pai_ctc) ctc = ctc_loss(a.tokens->attribute_tokens(y), config.tau);
    auto loss = total_loss(dm, ctc, a.lambda);

    opt.zero_grad();
    loss.backward();
    if (config.optim.grad_clip > 0.0) nn::utils::clip_grad_norm_(params, config.optim.grad_clip);
    opt.step();

    const double l = loss.item<double>();
    if (!std::isfinite(l)) throw DivergenceError("adapter loss became non-finite at step " + std::to_string(step));
    const double c = ctc.defined() ? ctc.item<double>() : 0.0;
    if (step == 1) {
      initial = smooth = l;
      smooth_ctc = c;
      local.initial_loss = l;
    } else {
      smooth = 0.98 * smooth + 0.02 * l;
      smooth_ctc = 0.98 * smooth_ctc + 0.02 * c;
    }
    if (smooth > 10.0 * initial)
      throw DivergenceError("adapter loss " + std::to_string(smooth) + " exceeds 10x its initial value at step " +
                            std::to_string(step));
    if (step % std::max(1, config.optim.log_every) == 0 || step == config.optim.steps) {
      local.curve.emplace_back(step, smooth);
      if (ctc.defined()) local.ctc_curve.emplace_back(step, smooth_ctc);
      log::info("adapter[{}] step {}/{} loss {:.5f}{}", variant_name(config.variant), step, config.optim.steps, smooth,
                ctc.defined() ? fmt::format(" ctc {:.4f}", smooth_ctc) : std::string());
    }
  }
  local.final_loss = smooth;

  if (diffusion::parameter_hash(*bb.model) != hash_before)
    throw FrozenViolationError("backbone parameters changed during adapter training");
  if (a.tokens && !torch::equal(prefix_before, a.tokens->prefix))
    throw FrozenViolationError("prefix tokens changed during adapter training");
  a.net->eval();
  if (a.tokens) a.tokens->eval();
  for (auto& p : params) p.set_requires_grad(false);
  if (log) *log = std::move(local);
  return a;
}

namespace {

std::shared_ptr<nn::Module> holder(const CausalAdapter& a) {
  auto h = std::make_shared<nn::Module>("CausalAdapter");
  h->register_module("net", a.net.ptr());
  if (a.tokens) h->register_module("tokens", a.tokens.ptr());
  return h;
}

}  // namespace

void save_adapter(const std::filesystem::path& path, const CausalAdapter& a, const json& extra) {
  json meta{{"variant", variant_name(a.variant)},
            {"lambda", a.lambda},
            {"tau", a.tau},
            {"backbone_hash", a.backbone_hash},
            {"extra", extra}};
  diffusion::save_checkpoint(path, "adapter", meta, *holder(a));
}

CausalAdapter load_adapter(const std::filesystem::path& path, diffusion::Backbone& bb) {
  const auto header = diffusion::read_checkpoint_header(path, "adapter");
  const auto& meta = header.at("meta");
  const auto recorded = meta.at("backbone_hash").get<std::string>();
  const auto current = bb.hash.empty() ? diffusion::parameter_hash(*bb.model) : bb.hash;
  if (recorded != current)
    throw FrozenViolationError("adapter " + path.string() + " was trained against backbone " + recorded.substr(0, 12) +
                               " but the loaded backbone is " + current.substr(0, 12));
  auto a = make_adapter(bb, parse_variant(meta.at("variant").get<std::string>()), meta.at("lambda").get<double>(),
                        meta.at("tau").get<double>());
  auto h = holder(a);
  diffusion::load_checkpoint(path, "adapter", *h);
  a.net->eval();
  for (auto& p : a.net->parameters()) p.set_requires_grad(false);
  if (a.tokens) {
    a.tokens->eval();
    for (auto& p : a.tokens->parameters()) p.set_requires_grad(false);
  }
  return a;
}

}  // namespace cfdiff::adapter
