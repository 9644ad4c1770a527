#include "cfdiff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "cfdiff/errors.hpp"
#include "cfdiff/log.hpp"

namespace cfdiff::eval {

namespace nn = torch::nn;
using nlohmann::json;

// ------------------------------------------------------------ networks

RegressorImpl::RegressorImpl(int image_size, int outputs, int feature_dim) {
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("regressor needs an image size divisible by 4");
  body = register_module(
      "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 32, 3).padding(1)), nn::SiLU(),
                             nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)), nn::SiLU(),
                             nn::Conv2d(nn::Conv2dOptions(64, 64, 3).padding(1)), nn::SiLU(),
                             nn::Conv2d(nn::Conv2dOptions(64, 128, 3).stride(2).padding(1)), nn::SiLU(), nn::Flatten()));
  const int flat = 128 * (image_size / 4) * (image_size / 4);
  hidden = register_module("hidden", nn::Linear(flat, feature_dim));
  head = register_module("head", nn::Linear(feature_dim, outputs));
}

torch::Tensor RegressorImpl::features(const torch::Tensor& x) { return torch::silu(hidden->forward(body->forward(x * 2.0 - 1.0))); }

torch::Tensor RegressorImpl::forward(const torch::Tensor& x) { return head->forward(features(x)); }

EvalVAEImpl::EvalVAEImpl(int image_size, int latent) : base(image_size / 4) {
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("VAE needs an image size divisible by 4");
  enc = register_module("enc", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 32, 3).stride(2).padding(1)), nn::SiLU(),
                                              nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)), nn::SiLU(),
                                              nn::Flatten()));
  const int flat = 64 * base * base;
  mu = register_module("mu", nn::Linear(flat, latent));
  logvar = register_module("logvar", nn::Linear(flat, latent));
  expand = register_module("expand", nn::Linear(latent, flat));
  dec = register_module(
      "dec", nn::Sequential(nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest)),
                            nn::Conv2d(nn::Conv2dOptions(64, 32, 3).padding(1)), nn::SiLU(),
                            nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest)),
                            nn::Conv2d(nn::Conv2dOptions(32, 3, 3).padding(1)), nn::Sigmoid()));
}

std::pair<torch::Tensor, torch::Tensor> EvalVAEImpl::encode(const torch::Tensor& x) {
  auto h = enc->forward(x * 2.0 - 1.0);
  return {mu->forward(h), logvar->forward(h).clamp(-12.0, 6.0)};
}

torch::Tensor EvalVAEImpl::decode(const torch::Tensor& z) {
  return dec->forward(torch::silu(expand->forward(z)).view({z.size(0), 64, base, base}));
}

// ------------------------------------------------------------ evaluators

json EvaluatorConfig::to_json() const {
  return {{"image_size", image_size}, {"num_attributes", num_attributes}, {"feature_dim", feature_dim},
          {"vae_latent", vae_latent}, {"steps", steps},                   {"vae_steps", vae_steps},
          {"batch_size", batch_size}, {"learning_rate", learning_rate},   {"predictor_gate", predictor_gate},
          {"vae_gate", vae_gate},     {"seed", seed}};
}

bool Evaluators::gate_passed() const {
  for (double m : predictor_val_mae)
    if (!(m < config.predictor_gate)) return false;
  return vae_val_mae < config.vae_gate;
}

std::string Evaluators::gate_message() const {
  std::string s = "predictor held-out MAE (gate " + fmt::format("{}", config.predictor_gate) + "):";
  for (std::size_t i = 0; i < predictor_val_mae.size(); ++i) s += fmt::format(" [{}] {:.4f}", i, predictor_val_mae[i]);
  s += fmt::format("; VAE reconstruction MAE {:.4f} (gate {})", vae_val_mae, config.vae_gate);
  return s;
}

torch::Tensor Evaluators::predict(const torch::Tensor& images) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> cols;
  for (auto& p : predictors) cols.push_back(p->forward(images));
  return torch::cat(cols, 1);
}

torch::Tensor Evaluators::embed(const torch::Tensor& images) {
  torch::NoGradGuard ng;
  return extractor->features(images);
}

std::pair<torch::Tensor, torch::Tensor> Evaluators::posterior(const torch::Tensor& images) {
  torch::NoGradGuard ng;
  return vae->encode(images);
}

namespace {

std::shared_ptr<nn::Module> holder(const Evaluators& ev) {
  auto h = std::make_shared<nn::Module>("Evaluators");
  for (std::size_t i = 0; i < ev.predictors.size(); ++i) h->register_module("predictor" + std::to_string(i), ev.predictors[i].ptr());
  h->register_module("extractor", ev.extractor.ptr());
  h->register_module("vae", ev.vae.ptr());
  return h;
}

Evaluators blank(const EvaluatorConfig& c) {
  Evaluators ev;
  ev.config = c;
  for (int k = 0; k < c.num_attributes; ++k) ev.predictors.emplace_back(c.image_size, 1, c.feature_dim);
  ev.extractor = Regressor(c.image_size, c.num_attributes, c.feature_dim);
  ev.vae = EvalVAE(c.image_size, c.vae_latent);
  return ev;
}

void freeze(Evaluators& ev) {
  auto h = holder(ev);
  h->eval();
  for (auto& p : h->parameters()) p.set_requires_grad(false);
}

torch::Tensor sample_batch(std::mt19937_64& rng, int64_t n, int batch) {
  std::uniform_int_distribution<int64_t> pick(0, n - 1);
  std::vector<int64_t> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = pick(rng);
  return torch::tensor(idx, torch::kInt64);
}

// Piecewise-constant decay: full rate, then x0.1 at 60%, x0.01 at 85%.
double decayed(double lr, int step, int steps) {
  if (step >= steps * 85 / 100) return lr * 0.01;
  if (step >= steps * 60 / 100) return lr * 0.1;
  return lr;
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

torch::Tensor chunked(const torch::Tensor& x, int batch, const std::function<torch::Tensor(const torch::Tensor&)>& f) {
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < x.size(0); s += batch) out.push_back(f(x.slice(0, s, std::min<int64_t>(s + batch, x.size(0)))));
  return torch::cat(out, 0);
}

}  // namespace

Evaluators train_evaluators(const torch::Tensor& train_x, const torch::Tensor& train_y, const torch::Tensor& val_x,
                            const torch::Tensor& val_y, const EvaluatorConfig& c) {
  if (train_x.size(0) < 2 || val_x.size(0) < 1) throw EmptyDatasetError("evaluator training needs data");
  if (train_y.size(1) != c.num_attributes) throw ShapeError("attribute count does not match evaluator config");
  torch::manual_seed(c.seed);
  Evaluators ev = blank(c);
  std::mt19937_64 rng(c.seed);
  const auto ty = train_y.to(torch::kFloat32);

  {
    std::vector<torch::Tensor> params;
    for (auto& p : ev.predictors)
      for (auto& q : p->parameters()) params.push_back(q);
    for (auto& q : ev.extractor->parameters()) params.push_back(q);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(c.learning_rate));
    for (int step = 0; step < c.steps; ++step) {
      set_lr(opt, decayed(c.learning_rate, step, c.steps));
      auto idx = sample_batch(rng, train_x.size(0), c.batch_size);
      auto x = train_x.index_select(0, idx);
      auto y = ty.index_select(0, idx);
      auto loss = torch::mse_loss(ev.extractor->forward(x), y);
      for (int k = 0; k < c.num_attributes; ++k)
        loss = loss + torch::mse_loss(ev.predictors[static_cast<std::size_t>(k)]->forward(x).squeeze(1), y.select(1, k));
      opt.zero_grad();
      loss.backward();
      opt.step();
      if ((step + 1) % 500 == 0) log::info("predictors step {}/{} loss {:.5f}", step + 1, c.steps, loss.item<double>());
    }
  }
  {
    torch::optim::Adam opt(ev.vae->parameters(), torch::optim::AdamOptions(c.learning_rate));
    for (int step = 0; step < c.vae_steps; ++step) {
      set_lr(opt, decayed(c.learning_rate, step, c.vae_steps));
      auto x = train_x.index_select(0, sample_batch(rng, train_x.size(0), c.batch_size));
      auto [m, lv] = ev.vae->encode(x);
      auto z = m + torch::exp(0.5 * lv) * torch::randn_like(m);
      auto rec = ev.vae->decode(z);
      // Gaussian likelihood with fixed variance 0.01.
      auto nll = (rec - x).pow(2).sum({1, 2, 3}) / 0.02;
      auto kl = 0.5 * (m.pow(2) + lv.exp() - lv - 1.0).sum(1);
      auto loss = (nll + kl).mean();
      opt.zero_grad();
      loss.backward();
      opt.step();
      if ((step + 1) % 500 == 0) log::info("vae step {}/{} loss {:.3f}", step + 1, c.vae_steps, loss.item<double>());
    }
  }
  freeze(ev);
  const auto [mae, spread] = predictor_error(ev, val_x, val_y);
  ev.predictor_val_mae = mae;
  {
    torch::NoGradGuard ng;
    auto rec = chunked(val_x, 256, [&](const torch::Tensor& x) { return ev.vae->decode(ev.vae->encode(x).first); });
    ev.vae_val_mae = (rec - val_x).abs().mean().item<double>();
  }
  log::info("{}", ev.gate_message());
  return ev;
}

void save_evaluators(const std::filesystem::path& path, const Evaluators& ev, const json& extra) {
  json meta = extra;
  meta["config"] = ev.config.to_json();
  meta["predictor_val_mae"] = ev.predictor_val_mae;
  meta["vae_val_mae"] = ev.vae_val_mae;
  meta["gate_passed"] = ev.gate_passed();
  diffusion::save_checkpoint(path, "evaluators", meta, *holder(ev));
}

Evaluators load_evaluators(const std::filesystem::path& path) {
  const auto header = diffusion::read_checkpoint_header(path, "evaluators");
  const auto& m = header.at("meta");
  const auto& j = m.at("config");
  EvaluatorConfig c;
  c.image_size = j.at("image_size");
  c.num_attributes = j.at("num_attributes");
  c.feature_dim = j.at("feature_dim");
  c.vae_latent = j.at("vae_latent");
  c.steps = j.at("steps");
  c.vae_steps = j.at("vae_steps");
  c.batch_size = j.at("batch_size");
  c.learning_rate = j.at("learning_rate");
  c.predictor_gate = j.at("predictor_gate");
  c.vae_gate = j.at("vae_gate");
  c.seed = j.at("seed");
  auto ev = blank(c);
  diffusion::load_checkpoint(path, "evaluators", *holder(ev));
  ev.predictor_val_mae = m.at("predictor_val_mae").get<std::vector<double>>();
  ev.vae_val_mae = m.at("vae_val_mae");
  freeze(ev);
  return ev;
}

// ------------------------------------------------------------ metrics

namespace {

torch::Tensor sqrt_psd(const torch::Tensor& m) {
  auto sym = 0.5 * (m + m.transpose(0, 1));
  auto [w, v] = torch::linalg_eigh(sym);
  return torch::matmul(v * w.clamp_min(0.0).sqrt().unsqueeze(0), v.transpose(0, 1));
}

std::pair<torch::Tensor, torch::Tensor> gaussian_fit(const torch::Tensor& f) {
  auto x = f.to(torch::kFloat64);
  auto mu = x.mean(0);
  auto c = x - mu;
  return {mu, torch::matmul(c.transpose(0, 1), c) / static_cast<double>(x.size(0) - 1)};
}

}  // namespace

double frechet_distance(const torch::Tensor& a, const torch::Tensor& b, double eps) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1))
    throw ShapeError("frechet_distance expects [N, m] and [M, m], got " + diffusion::shape_str(a) + " and " +
                     diffusion::shape_str(b));
  if (a.size(0) < 2 || b.size(0) < 2) throw DegenerateSetError("Frechet distance needs at least 2 samples per set");
  auto [m1, s1] = gaussian_fit(a);
  auto [m2, s2] = gaussian_fit(b);
  const auto eye = torch::eye(a.size(1), torch::kFloat64) * eps;
  s1 = s1 + eye;
  s2 = s2 + eye;
  auto r1 = sqrt_psd(s1);
  auto cross = sqrt_psd(torch::matmul(torch::matmul(r1, s2), r1));
  const double mean_term = (m1 - m2).pow(2).sum().item<double>();
  const double trace = (s1.trace() + s2.trace() - 2.0 * cross.trace()).item<double>();
  return mean_term + trace;
}

torch::Tensor symmetric_kl(const torch::Tensor& mu_p, const torch::Tensor& lv_p, const torch::Tensor& mu_q,
                           const torch::Tensor& lv_q) {
  auto vp = lv_p.to(torch::kFloat64).exp();
  auto vq = lv_q.to(torch::kFloat64).exp();
  auto d2 = (mu_p.to(torch::kFloat64) - mu_q.to(torch::kFloat64)).pow(2);
  return (0.5 * ((vp + d2) / vq + (vq + d2) / vp - 2.0)).sum(1);
}

Cell Cell::of(const std::vector<double>& v) {
  Cell c;
  c.n = static_cast<int>(v.size());
  if (v.empty()) return c;
  c.mean = std::accumulate(v.begin(), v.end(), 0.0) / c.n;
  if (c.n > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - c.mean) * (x - c.mean);
    c.std = std::sqrt(ss / (c.n - 1));
  }
  return c;
}

DiffusionModel::DiffusionModel(pipeline::Bundle& bundle, int steps, pipeline::PredictOptions options, bool ag)
    : bundle_(bundle), ddim_(bundle.backbone.schedule, steps), options_(options), attention_guidance_(ag) {}

void DiffusionModel::abduct(const torch::Tensor& images, const torch::Tensor& attributes) {
  trajectory_ = pipeline::abduct(bundle_, ddim_, images, attributes);
}

torch::Tensor DiffusionModel::generate(const torch::Tensor& ybar) {
  if (attention_guidance_) return pipeline::attention_guided_predict(bundle_, ddim_, trajectory_, ybar, options_);
  return pipeline::predict(bundle_, ddim_, &trajectory_, ybar, options_);
}

std::pair<std::vector<double>, std::vector<double>> predictor_error(Evaluators& ev, const torch::Tensor& images,
                                                                    const torch::Tensor& attributes) {
  auto pred = chunked(images, 256, [&](const torch::Tensor& x) { return ev.predict(x); });
  auto err = (pred.to(torch::kFloat64) - attributes.to(torch::kFloat64)).abs();
  std::vector<double> mae, spread;
  for (int64_t k = 0; k < err.size(1); ++k) {
    auto col = err.select(1, k).contiguous();
    std::vector<double> v(col.data_ptr<double>(), col.data_ptr<double>() + col.numel());
    const auto c = Cell::of(v);
    mae.push_back(c.mean);
    spread.push_back(c.std);
  }
  return {mae, spread};
}

namespace {

std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

void append(std::vector<double>& dst, const torch::Tensor& t) {
  const auto v = to_vec(t);
  dst.insert(dst.end(), v.begin(), v.end());
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::pair<Cell, Cell> composition(CounterfactualModel& model, Evaluators& ev, const torch::Tensor& images,
                                  const torch::Tensor& attributes, int batch_size) {
  std::vector<double> pix, feat;
  for (int64_t s = 0; s < images.size(0); s += batch_size) {
    const auto e = std::min<int64_t>(s + batch_size, images.size(0));
    auto x = images.slice(0, s, e);
    auto y = attributes.slice(0, s, e);
    model.abduct(x, y);
    auto rec = model.generate(y);
    append(pix, (rec - x).abs().mean({1, 2, 3}));
    append(feat, (ev.embed(rec) - ev.embed(x)).pow(2).sum(1).sqrt());
  }
  return {Cell::of(pix), Cell::of(feat)};
}

MetricReport evaluate(CounterfactualModel& model, Evaluators& ev, const scm::MechanismSet& scm,
                      const torch::Tensor& images, const torch::Tensor& attributes, const EvalOptions& opt) {
  const int64_t n = images.size(0);
  const int k = static_cast<int>(attributes.size(1));
  if (n < 2) throw DegenerateSetError("evaluation needs at least 2 images");
  const auto& names = scm.graph().names();
  if (static_cast<int>(names.size()) != k) throw ShapeError("attribute count does not match the SCM");

  MetricReport rep;
  rep.attributes = names;
  rep.valid = ev.gate_passed();
  std::tie(rep.predictor_test_mae, rep.predictor_test_std) = predictor_error(ev, images, attributes);

  // Intervention values and counterfactual targets, fixed up front.
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> value(opt.value_low, opt.value_high);
  std::vector<torch::Tensor> targets(static_cast<std::size_t>(k));
  const auto y64 = attributes.to(torch::kFloat64).contiguous();
  for (int j = 0; j < k; ++j) {
    auto t = torch::empty({n, k}, torch::kFloat32);
    for (int64_t i = 0; i < n; ++i) {
      const auto row = to_vec(y64[i]);
      const auto cf = scm::counterfactual_attributes(scm, row, {{names[static_cast<std::size_t>(j)], value(rng)}});
      for (int c = 0; c < k; ++c) t[i][c] = static_cast<float>(cf[static_cast<std::size_t>(c)]);
    }
    targets[static_cast<std::size_t>(j)] = t;
  }
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto perm_t = torch::tensor(perm, torch::kInt64);

  using Grid = std::vector<std::vector<std::vector<double>>>;
  Grid eff(k, std::vector<std::vector<double>>(k)), ctl(k, std::vector<std::vector<double>>(k));
  std::vector<std::vector<double>> kl(k), delta(k);
  std::vector<double> pix, featd;
  std::vector<torch::Tensor> cf_feats, ref_feats;

  for (int64_t s = 0; s < n; s += opt.batch_size) {
    const auto e = std::min<int64_t>(s + opt.batch_size, n);
    auto x = images.slice(0, s, e);
    auto y = attributes.slice(0, s, e).to(torch::kFloat32);
    model.abduct(x, y);
    const auto fx = ev.embed(x);
    ref_feats.push_back(fx);
    auto rec = model.generate(y);
    append(pix, (rec - x).abs().mean({1, 2, 3}));
    append(featd, (ev.embed(rec) - fx).pow(2).sum(1).sqrt());
    const auto [mf, lf] = ev.posterior(x);
    for (int j = 0; j < k; ++j) {
      const auto& tj = targets[static_cast<std::size_t>(j)];
      auto ybar = tj.slice(0, s, e);
      auto xbar = model.generate(ybar);
      auto err = (ev.predict(xbar) - ybar).abs();
      for (int c = 0; c < k; ++c) append(eff[j][c], err.select(1, c));
      cf_feats.push_back(ev.embed(xbar));
      const auto [mc, lc] = ev.posterior(xbar);
      append(kl[j], symmetric_kl(mf, lf, mc, lc));
      append(delta[j], (ybar.select(1, j) - y.select(1, j)).abs());
      if (opt.control) {
        auto shuffled = tj.index_select(0, perm_t.slice(0, s, e));
        auto errc = (ev.predict(model.generate(shuffled)) - ybar).abs();
        for (int c = 0; c < k; ++c) append(ctl[j][c], errc.select(1, c));
      }
    }
    log::info("evaluated {}/{} images", e, n);
  }

  rep.effectiveness.assign(k, std::vector<Cell>(k));
  rep.control.assign(k, std::vector<Cell>(k));
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < k; ++c) {
      rep.effectiveness[j][c] = Cell::of(eff[j][c]);
      if (opt.control) rep.control[j][c] = Cell::of(ctl[j][c]);
    }
  if (!opt.control) rep.control.clear();
  rep.composition_mae = Cell::of(pix);
  rep.composition_feature = Cell::of(featd);
  const auto cf_all = torch::cat(cf_feats, 0);
  rep.realism = frechet_distance(cf_all, torch::cat(ref_feats, 0));
  rep.realism_n = static_cast<int>(cf_all.size(0));
  for (int j = 0; j < k; ++j) {
    rep.minimality.push_back(Cell::of(kl[j]));
    std::vector<std::size_t> order(kl[j].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return delta[j][a] < delta[j][b]; });
    std::vector<double> medians;
    for (int q = 0; q < 3; ++q) {
      std::vector<double> bucket;
      const auto lo = order.size() * q / 3, hi = order.size() * (q + 1) / 3;
      for (auto i = lo; i < hi; ++i) bucket.push_back(kl[j][order[i]]);
      medians.push_back(median(bucket));
    }
    rep.minimality_by_magnitude.push_back(medians);
  }
  return rep;
}

// ------------------------------------------------------------ reports

namespace {

json cell_json(const Cell& c) { return {{"mean", c.mean}, {"std", c.std}, {"n", c.n}}; }
Cell cell_from(const json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("n").get<int>()}; }

json grid_json(const std::vector<std::vector<Cell>>& g) {
  json out = json::array();
  for (const auto& row : g) {
    json r = json::array();
    for (const auto& c : row) r.push_back(cell_json(c));
    out.push_back(r);
  }
  return out;
}

std::vector<std::vector<Cell>> grid_from(const json& j) {
  std::vector<std::vector<Cell>> g;
  for (const auto& row : j) {
    g.emplace_back();
    for (const auto& c : row) g.back().push_back(cell_from(c));
  }
  return g;
}

}  // namespace

json MetricReport::to_json() const {
  json min = json::array();
  for (const auto& c : minimality) min.push_back(cell_json(c));
  return {{"schema_version", schema_version},
          {"label", label},
          {"attributes", attributes},
          {"valid", valid},
          {"predictor_test_mae", predictor_test_mae},
          {"predictor_test_std", predictor_test_std},
          {"effectiveness", grid_json(effectiveness)},
          {"shuffled_control", grid_json(control)},
          {"composition", {{"mae", cell_json(composition_mae)}, {"feature_distance", cell_json(composition_feature)}}},
          {"realism", {{"frechet_feature_distance", realism}, {"n", realism_n}}},
          {"minimality", {{"symmetric_kl", min}, {"median_by_magnitude_tercile", minimality_by_magnitude}}},
          {"config", config}};
}

MetricReport MetricReport::from_json(const json& j) {
  if (j.at("schema_version").get<int>() != 1) throw IOError("unsupported report schema version");
  MetricReport r;
  r.label = j.at("label");
  r.attributes = j.at("attributes").get<std::vector<std::string>>();
  r.valid = j.at("valid");
  r.predictor_test_mae = j.at("predictor_test_mae").get<std::vector<double>>();
  r.predictor_test_std = j.at("predictor_test_std").get<std::vector<double>>();
  r.effectiveness = grid_from(j.at("effectiveness"));
  r.control = grid_from(j.at("shuffled_control"));
  r.composition_mae = cell_from(j.at("composition").at("mae"));
  r.composition_feature = cell_from(j.at("composition").at("feature_distance"));
  r.realism = j.at("realism").at("frechet_feature_distance");
  r.realism_n = j.at("realism").at("n");
  for (const auto& c : j.at("minimality").at("symmetric_kl")) r.minimality.push_back(cell_from(c));
  r.minimality_by_magnitude =
      j.at("minimality").at("median_by_magnitude_tercile").get<std::vector<std::vector<double>>>();
  r.config = j.at("config");
  return r;
}

double MetricReport::mean_effectiveness() const {
  if (effectiveness.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t j = 0; j < effectiveness.size(); ++j) s += effectiveness[j][j].mean;
  return s / static_cast<double>(effectiveness.size());
}

std::string MetricReport::to_table() const {
  std::string out = fmt::format("{}{}\n\n", label.empty() ? "report" : label, valid ? "" : "  [INVALID: predictor gate failed]");
  auto header = [&] {
    std::string h = fmt::format("{:<22}", "");
    for (const auto& a : attributes) h += fmt::format("{:>20}", a);
    return h + "\n";
  };
  auto rows = [&](const std::vector<std::vector<Cell>>& g) {
    std::string s;
    for (std::size_t j = 0; j < g.size(); ++j) {
      s += fmt::format("{:<22}", "do(" + attributes[j] + ")");
      for (const auto& c : g[j]) s += fmt::format("{:>20}", fmt::format("{:.4f} +- {:.4f}", c.mean, c.std));
      s += "\n";
    }
    return s;
  };
  out += "effectiveness (MAE of predicted vs propagated attributes)\n" + header() + rows(effectiveness);
  if (!control.empty()) out += "\nshuffled-condition control\n" + header() + rows(control);
  out += "\npredictor test MAE    ";
  for (double m : predictor_test_mae) out += fmt::format("{:>20.4f}", m);
  out += fmt::format("\n\ncomposition: pixel MAE {:.4f} +- {:.4f}, feature distance {:.4f} +- {:.4f} (n={})\n",
                     composition_mae.mean, composition_mae.std, composition_feature.mean, composition_feature.std,
                     composition_mae.n);
  out += fmt::format("realism: Frechet feature distance {:.4f} (n={})\n", realism, realism_n);
  out += "minimality: symmetric KL of VAE posteriors\n";
  for (std::size_t j = 0; j < minimality.size(); ++j)
    out += fmt::format("  do({}) {:.4f} +- {:.4f}; median by |delta| tercile {:.4f} / {:.4f} / {:.4f}\n", attributes[j],
                       minimality[j].mean, minimality[j].std, minimality_by_magnitude[j][0],
                       minimality_by_magnitude[j][1], minimality_by_magnitude[j][2]);
  return out;
}

json AblationRow::to_json() const {
  return {{"name", name},          {"effectiveness", effectiveness}, {"composition", composition},
          {"realism", realism},    {"minimality", minimality},       {"ctc_margin", ctc_margin},
          {"alpha", alpha},        {"steps", steps}};
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = fmt::format("{:<14}{:>7}{:>7}{:>15}{:>13}{:>10}{:>12}{:>12}\n", "variant", "alpha", "T", "effectiveness",
                                "composition", "realism", "minimality", "ctc margin");
  for (const auto& r : rows)
    out += fmt::format("{:<14}{:>7.2f}{:>7}{:>15.4f}{:>13.4f}{:>10.4f}{:>12.4f}{:>12.4f}\n", r.name, r.alpha, r.steps,
                       r.effectiveness, r.composition, r.realism, r.minimality, r.ctc_margin);
  return out;
}

}  // namespace cfdiff::eval
