#include "cfdiff/pipeline.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "cfdiff/errors.hpp"
#include "cfdiff/log.hpp"
#include "cfdiff/util.hpp"

namespace cfdiff::pipeline {

using diffusion::shape_str;

namespace {

torch::Tensor as_row(const scm::AttributeVector& y) {
  auto t = torch::empty({1, static_cast<int64_t>(y.size())}, torch::kFloat32);
  for (std::size_t i = 0; i < y.size(); ++i) t[0][static_cast<int64_t>(i)] = static_cast<float>(y[i]);
  return t;
}

scm::AttributeVector to_vector(const torch::Tensor& row) {
  auto r = row.to(torch::kFloat64).contiguous();
  return {r.data_ptr<double>(), r.data_ptr<double>() + r.numel()};
}

// eps of backbone + adapter; the adapter sees `zr` instead of z when given.
torch::Tensor eps_hat(Bundle& b, const torch::Tensor& z, int t, const torch::Tensor& y, bool unconditional,
                      diffusion::AttentionHook* hook, const torch::Tensor& zr, double* residual_norm) {
  auto& a = b.adapter;
  auto tt = torch::full({z.size(0)}, static_cast<int64_t>(t), torch::kInt64);
  const auto input = unconditional ? a.unconditional_input(b.backbone, y) : a.conditional_input(b.backbone, y);
  auto r = a.net->forward(zr.defined() ? zr : z, tt, input, hook);
  if (residual_norm) *residual_norm = r.norm();
  auto tok = unconditional ? b.backbone.model->null_tokens : a.backbone_tokens(b.backbone, y);
  return b.backbone.model->forward(z, tt, tok, &r, hook);
}

void check_attributes(const Bundle& b, const torch::Tensor& y, int64_t batch) {
  const int k = b.backbone.config.num_attributes;
  if (y.dim() != 2 || y.size(1) != k || y.size(0) != batch)
    throw ShapeError("attributes must be [" + std::to_string(batch) + ", " + std::to_string(k) + "], got " + shape_str(y));
}

}  // namespace

ResidualSource parse_residual_source(const std::string& name) {
  if (name == "inversion_trajectory") return ResidualSource::inversion_trajectory;
  if (name == "current_latent") return ResidualSource::current_latent;
  throw ConfigError("residual source must be inversion_trajectory or current_latent, got '" + name + "'");
}

std::string residual_source_name(ResidualSource s) {
  return s == ResidualSource::inversion_trajectory ? "inversion_trajectory" : "current_latent";
}

Bundle load_bundle(const std::filesystem::path& backbone, const std::filesystem::path& adapter,
                   const std::filesystem::path& scm) {
  for (const auto& p : {backbone, adapter, scm})
    if (!std::filesystem::exists(p)) throw DependencyError("missing artifact " + p.string());
  Bundle b;
  b.backbone = diffusion::load_backbone(backbone);
  b.adapter = adapter::load_adapter(adapter, b.backbone);
  b.scm = scm::load_mechanisms(scm);
  if (static_cast<int>(b.scm.graph().size()) != b.backbone.config.num_attributes)
    throw ConfigError("mechanism file has " + std::to_string(b.scm.graph().size()) + " attributes, backbone expects " +
                      std::to_string(b.backbone.config.num_attributes));
  return b;
}

// ------------------------------------------------------------ hooks

torch::Tensor AttentionRecorder::on_attention(int layer_id, const torch::Tensor& weights) {
  cache[{step, layer_id}] = weights.detach().clone();
  return weights;
}

AttentionSplicer::AttentionSplicer(const AttentionRecorder& reference, torch::Tensor changed)
    : reference_(reference), changed_(std::move(changed)) {}

torch::Tensor AttentionSplicer::on_attention(int layer_id, const torch::Tensor& weights) {
  const auto it = reference_.cache.find({step, layer_id});
  if (it == reference_.cache.end())
    throw CacheMismatchError("no cached attention for step " + std::to_string(step) + ", layer " + std::to_string(layer_id));
  const auto& cached = it->second;
  if (cached.sizes() != weights.sizes())
    throw CacheMismatchError("cached attention " + shape_str(cached) + " vs live " + shape_str(weights) + " at layer " +
                             std::to_string(layer_id));
  if (changed_.size(0) != weights.size(0) || changed_.size(1) != weights.size(2))
    throw CacheMismatchError("token mask " + shape_str(changed_) + " does not fit attention " + shape_str(weights));
  const auto keep = changed_.unsqueeze(1);  // [B, 1, N]
  auto spliced = torch::where(keep, weights, cached);
  auto unchanged = torch::logical_not(keep).expand_as(weights);
  if (unchanged.any().item<bool>())
    max_unchanged_deviation =
        std::max(max_unchanged_deviation, (spliced - cached).abs().masked_select(unchanged).max().item<double>());
  auto mixed = keep.any(-1, true);  // [B, 1, 1]
  auto out = torch::where(mixed, spliced / spliced.sum(-1, true).clamp_min(1e-12), spliced);
  max_row_sum_error = std::max(max_row_sum_error, (out.sum(-1) - 1.0).abs().max().item<double>());
  min_weight = std::min(min_weight, out.min().item<double>());
  ++calls;
  return out;
}

// ------------------------------------------------------------ stages

Trajectory abduct(Bundle& b, const diffusion::DdimSchedule& ddim, const torch::Tensor& images, const torch::Tensor& y) {
  torch::NoGradGuard ng;
  if (images.dim() != 4) throw ShapeError("abduct expects [B, 3, H, W], got " + shape_str(images));
  check_attributes(b, y, images.size(0));
  const auto yf = y.to(torch::kFloat32);
  Trajectory tr;
  tr.latents = diffusion::ddim_invert(ddim, diffusion::encode_image(images), [&](const torch::Tensor& z, int t) {
    return eps_hat(b, z, t, yf, false, nullptr, {}, nullptr);
  });
  tr.timesteps = ddim.timesteps();
  tr.attributes = yf;
  return tr;
}

scm::AttributeVector act(const scm::MechanismSet& scm, const scm::AttributeVector& y,
                         const scm::Interventions& interventions) {
  return scm::counterfactual_attributes(scm, y, interventions);
}

torch::Tensor act(const scm::MechanismSet& scm, const torch::Tensor& y, const scm::Interventions& interventions) {
  if (y.dim() != 2) throw ShapeError("act expects [B, K], got " + shape_str(y));
  auto out = torch::empty({y.size(0), y.size(1)}, torch::kFloat32);
  for (int64_t i = 0; i < y.size(0); ++i) out[i] = as_row(act(scm, to_vector(y[i]), interventions))[0];
  return out;
}

torch::Tensor predict(Bundle& b, const diffusion::DdimSchedule& ddim, const Trajectory* trajectory,
                      const torch::Tensor& cf_attributes, const PredictOptions& options, StepHook* hook,
                      Diagnostics* diagnostics) {
  torch::NoGradGuard ng;
  if (!trajectory || trajectory->latents.empty()) throw MissingTrajectoryError("prediction needs an inversion trajectory");
  if (trajectory->timesteps != ddim.timesteps())
    throw MissingTrajectoryError("trajectory has " + std::to_string(trajectory->timesteps.size() - 1) +
                                 " steps, schedule has " + std::to_string(ddim.steps()));
  const auto& ts = ddim.timesteps();
  auto z = trajectory->latents.back();
  check_attributes(b, cf_attributes, z.size(0));
  const auto y = cf_attributes.to(torch::kFloat32);
  const bool from_traj = options.residual_source == ResidualSource::inversion_trajectory;
  if (diagnostics) diagnostics->residual_norms.clear();
  for (int i = ddim.steps(); i >= 1; --i) {
    if (hook) hook->step = i;
    const auto zr = from_traj ? trajectory->latents[static_cast<std::size_t>(i)] : torch::Tensor{};
    z = diffusion::ddim_step(ddim, z, ts[static_cast<std::size_t>(i)], ts[static_cast<std::size_t>(i - 1)],
                             [&](const torch::Tensor& zt, int t) {
                               double rn = 0.0;
                               auto cond = eps_hat(b, zt, t, y, false, hook, zr, &rn);
                               if (diagnostics) diagnostics->residual_norms.push_back(rn);
                               if (!options.use_cfg) return cond;
                               auto uncond = eps_hat(b, zt, t, y, true, nullptr, zr, nullptr);
                               return diffusion::cfg_combine(cond, uncond, options.alpha);
                             });
  }
  return diffusion::decode_latent(z);
}

torch::Tensor changed_tokens(const torch::Tensor& y, const torch::Tensor& ybar, int context_tokens) {
  if (y.sizes() != ybar.sizes()) throw ShapeError("changed_tokens: " + shape_str(y) + " vs " + shape_str(ybar));
  auto moved = (y.to(torch::kFloat64) - ybar.to(torch::kFloat64)).abs() > 1e-9;
  return torch::cat({torch::zeros({y.size(0), context_tokens}, torch::kBool), moved}, 1);
}

torch::Tensor attention_guided_predict(Bundle& b, const diffusion::DdimSchedule& ddim, const Trajectory& trajectory,
                                       const torch::Tensor& cf_attributes, const PredictOptions& options,
                                       GuidanceStats* stats, Diagnostics* diagnostics) {
  if (!adapter::uses_tokens(b.adapter.variant))
    throw VariantError("attention guidance needs token conditioning; the plain adapter has none");
  AttentionRecorder rec;
  rec.timesteps = ddim.timesteps();
  predict(b, ddim, &trajectory, trajectory.attributes, options, &rec);
  if (rec.timesteps != trajectory.timesteps) throw CacheMismatchError("reference pass used a different schedule");
  AttentionSplicer splice(rec, changed_tokens(trajectory.attributes, cf_attributes, b.backbone.config.context_tokens));
  auto out = predict(b, ddim, &trajectory, cf_attributes, options, &splice, diagnostics);
  if (stats) {
    stats->max_row_sum_error = splice.max_row_sum_error;
    stats->min_weight = splice.min_weight;
    stats->max_unchanged_deviation = splice.max_unchanged_deviation;
  }
  return out;
}

// ------------------------------------------------------------ requests

CounterfactualResult run(Bundle& b, const CounterfactualRequest& req) {
  const auto& cfg = b.backbone.config;
  if (req.image.height != cfg.image_size || req.image.width != cfg.image_size)
    throw ShapeError("image is " + std::to_string(req.image.height) + "x" + std::to_string(req.image.width) +
                     ", model expects " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  if (static_cast<int>(req.attributes.size()) != cfg.num_attributes)
    throw ShapeError("expected " + std::to_string(cfg.num_attributes) + " attributes, got " +
                     std::to_string(req.attributes.size()));
  if (req.attention_guidance && !adapter::uses_tokens(b.adapter.variant))
    throw VariantError("attention guidance needs token conditioning; the plain adapter has none");

  CounterfactualResult res;
  res.attributes = act(b.scm, req.attributes, req.interventions);
  const diffusion::DdimSchedule ddim(b.backbone.schedule, req.steps);
  const auto x = diffusion::images_to_tensor({req.image});
  const auto y = as_row(req.attributes);
  res.trajectory = abduct(b, ddim, x, y);
  PredictOptions opt{req.alpha, req.use_cfg, req.residual_source};
  const auto ybar = as_row(res.attributes);
  const auto img = req.attention_guidance
                       ? attention_guided_predict(b, ddim, res.trajectory, ybar, opt, nullptr, &res.diagnostics)
                       : predict(b, ddim, &res.trajectory, ybar, opt, nullptr, &res.diagnostics);
  res.image = diffusion::tensor_to_image(img);
  if (req.measure_round_trip) {
    const auto rec = predict(b, ddim, &res.trajectory, y, opt);
    res.diagnostics.round_trip_error = mean_abs_diff(diffusion::tensor_to_image(rec), req.image);
  }
  return res;
}

std::vector<CounterfactualResult> run_many(Bundle& b, const std::vector<CounterfactualRequest>& requests, int threads) {
  std::vector<CounterfactualResult> out(requests.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < requests.size(); ++i) out[i] = run(b, requests[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < requests.size(); i = next++) {
        try {
          out[i] = run(b, requests[i]);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<Image> traverse(Bundle& b, const CounterfactualRequest& base, const std::string& attribute,
                            const std::vector<double>& values) {
  const diffusion::DdimSchedule ddim(b.backbone.schedule, base.steps);
  const auto x = diffusion::images_to_tensor({base.image});
  const auto tr = abduct(b, ddim, x, as_row(base.attributes));
  PredictOptions opt{base.alpha, base.use_cfg, base.residual_source};
  std::vector<Image> out;
  for (double v : values) {
    auto iv = base.interventions;
    iv[attribute] = v;
    const auto ybar = as_row(act(b.scm, base.attributes, iv));
    const auto img = base.attention_guidance ? attention_guided_predict(b, ddim, tr, ybar, opt)
                                             : predict(b, ddim, &tr, ybar, opt);
    out.push_back(diffusion::tensor_to_image(img));
    log::debug("traverse {}={:.3f} done", attribute, v);
  }
  return out;
}

}  // namespace cfdiff::pipeline
