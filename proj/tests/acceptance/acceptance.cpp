// Acceptance runner: one PASS/FAIL line per criterion. Criteria 4-9 use the
// trained artifacts in the run directory and build whatever is missing.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cfdiff/adapter.hpp"
#include "cfdiff/config.hpp"
#include "cfdiff/diffusion.hpp"
#include "cfdiff/errors.hpp"
#include "cfdiff/eval.hpp"
#include "cfdiff/log.hpp"
#include "cfdiff/pendulum.hpp"
#include "cfdiff/pipeline.hpp"
#include "cfdiff/stages.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cfdiff;
using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Split {
  torch::Tensor images, attributes;
};

Split load(const config::RunConfig& cfg, const std::string& split, int limit) {
  const auto manifest = pendulum::load_manifest(cfg.data_dir());
  std::vector<Image> images;
  std::vector<float> attrs;
  for (auto& s : pendulum::load_split(cfg.data_dir(), manifest, split, limit)) {
    images.push_back(std::move(s.image));
    for (double a : s.attributes) attrs.push_back(static_cast<float>(a));
  }
  const auto n = static_cast<int64_t>(images.size());
  return {diffusion::images_to_tensor(images), torch::tensor(attrs).view({n, -1})};
}

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

// ---------------------------------------------------------------- 1-3

Verdict scm_oracle() {
  const auto t0 = Clock::now();
  testing::Gen g(2024);
  std::vector<double> maes;
  for (int k : {3, 4, 4}) maes.push_back(testing::linear_scm_counterfactual_mae(g, k, 5000, 1000, 4000));
  const double secs = seconds_since(t0);
  bool ok = secs < 300.0;
  std::string d = "MAE";
  for (double m : maes) {
    ok = ok && m < 0.05;
    d += fmt::format(" {:.4f}", m);
  }
  return {ok, d + fmt::format(" (< 0.05), {:.0f} s (< 300 s)", secs)};
}

Verdict gradients() {
  const auto t0 = Clock::now();
  testing::Gen g(77);
  double nll = 0.0, ctc = 0.0;
  for (int i = 0; i < 20; ++i) nll = std::max(nll, testing::nll_gradient_error(g));
  for (int i = 0; i < 20; ++i) ctc = std::max(ctc, testing::ctc_gradient_error(g));
  const double secs = seconds_since(t0);
  return {nll < 1e-4 && ctc < 1e-4 && secs < 60.0,
          fmt::format("worst rel. error NLL {:.2e}, CTC {:.2e} over 20+20 instances (< 1e-4), {:.1f} s", nll, ctc, secs)};
}

Verdict physics(const config::RunConfig& cfg) {
  const auto root = fs::temp_directory_path() / "cfdiff_acceptance_data";
  fs::remove_all(root);
  pendulum::RenderConfig rc;
  rc.height = rc.width = cfg.image_size;
  rc.supersample = cfg.supersample;
  const auto t0 = Clock::now();
  const auto m1 = pendulum::generate_dataset(root / "a", cfg.n_train, cfg.n_val, cfg.n_test, 11, rc);
  const double secs = seconds_since(t0);
  const auto m2 = pendulum::generate_dataset(root / "b", cfg.n_train, cfg.n_val, cfg.n_test, 11, rc);
  double worst = 0.0;
  int mismatched = 0;
  for (const auto& f : m1.files) {
    const auto o = testing::oracle_shadow(f.attributes_native[0], f.attributes_native[1]);
    worst = std::max({worst, std::abs(f.attributes_native[2] - o.length), std::abs(f.attributes_native[3] - o.position)});
    if (slurp(root / "a" / f.path) != slurp(root / "b" / f.path)) ++mismatched;
  }
  if (slurp(root / "a" / "manifest.json") != slurp(root / "b" / "manifest.json")) ++mismatched;
  fs::remove_all(root);
  return {worst <= 1e-9 && mismatched == 0 && secs < 120.0,
          fmt::format("{} samples, worst formula gap {:.1e} (<= 1e-9), {} byte mismatches, generation {:.1f} s (< 120 s)",
                      m1.files.size(), worst, mismatched, secs)};
}

// ---------------------------------------------------------------- 4, 5, 8

Verdict transparency(const config::RunConfig& cfg) {
  auto bb = diffusion::load_backbone(cfg.backbone_path());
  const auto hash = bb.hash;
  const auto test = load(cfg, "test", 8);
  const auto scm = scm::load_mechanisms(cfg.scm_path());
  const diffusion::DdimSchedule ddim(bb.schedule, 20);

  std::vector<std::string> identical;
  bool ok = true;
  {
    torch::NoGradGuard ng;
    auto bare_eps = [&](const torch::Tensor& z, int t) {
      return bb.model->forward(z, torch::full({z.size(0)}, t, torch::kInt64), bb.model->null_tokens);
    };
    const auto traj = diffusion::ddim_invert(ddim, diffusion::encode_image(test.images), bare_eps);
    const auto bare = diffusion::decode_latent(diffusion::ddim_sample(ddim, traj.back(), bare_eps));
  
    for (auto v : {adapter::Variant::plain, adapter::Variant::pai, adapter::Variant::pai_ctc}) {
      pipeline::Bundle b{bb, adapter::make_adapter(bb, v), scm};
      const auto tr = pipeline::abduct(b, ddim, test.images, test.attributes);
      const auto ybar = pipeline::act(b.scm, test.attributes, {{"pendulum_angle", 0.5}});
      const bool same = torch::equal(tr.latents.back(), traj.back()) &&
                        torch::equal(pipeline::predict(b, ddim, &tr, test.attributes, {}), bare) &&
                        torch::equal(pipeline::predict(b, ddim, &tr, ybar, {}), bare);
      ok = ok && same;
      identical.push_back(adapter::variant_name(v) + (same ? " identical" : " DIFFERS"));
    }
  }

  // Short in-process adapter run, then every trained adapter on disk.
  {
    const auto train = load(cfg, "train", 32);
    adapter::TrainConfig tc;
    tc.variant = adapter::Variant::pai_ctc;
    tc.lambda = cfg.ctc_lambda;
    tc.optim.batch_size = 8;
    tc.optim.steps = 20;
    tc.optim.log_every = 10;
    adapter::train_adapter(bb, train.images, train.attributes, tc);
  }
  const bool hash_kept = diffusion::parameter_hash(*bb.model) == hash;
  int checked = 0;
  for (const char* v : {"plain", "pai", "pai+ctc"}) {
    const auto p = cfg.adapter_path(v);
    if (!fs::exists(p)) continue;
    adapter::load_adapter(p, bb);  // throws FrozenViolationError on a hash mismatch
    ++checked;
  }
  ok = ok && hash_kept && checked == 3;
  std::string d;
  for (const auto& s : identical) d += s + ", ";
  return {ok, d + fmt::format("backbone hash {} after training, {}/3 trained adapters bound to it",
                              hash_kept ? "unchanged" : "CHANGED", checked)};
}

Verdict round_trip(const config::RunConfig& cfg) {
  auto b = pipeline::load_bundle(cfg.backbone_path(), cfg.adapter_path(cfg.variant), cfg.scm_path());
  const auto test = load(cfg, "test", 100);
  pipeline::PredictOptions opt;
  opt.residual_source = pipeline::parse_residual_source(cfg.residual_source);
  std::vector<double> err;
  std::string d;
  for (int t : {50, 100, 200}) {
    const diffusion::DdimSchedule ddim(b.backbone.schedule, t);
    const auto tr = pipeline::abduct(b, ddim, test.images, test.attributes);
    const auto rec = pipeline::predict(b, ddim, &tr, test.attributes, opt);
    err.push_back((rec - test.images).abs().mean().item<double>());
    d += fmt::format("T={} MAE {:.4f}  ", t, err.back());
  }
  const bool ok = err[1] <= 0.05 && err[0] > err[1] && err[1] > err[2];
  return {ok, d + "(T=100 <= 0.05, strictly decreasing)"};
}

Verdict identities(const config::RunConfig& cfg) {
  auto b = pipeline::load_bundle(cfg.backbone_path(), cfg.adapter_path("pai+ctc"), cfg.scm_path());
  const auto test = load(cfg, "test", 16);
  const diffusion::DdimSchedule ddim(b.backbone.schedule, cfg.inference_steps);
  const auto tr = pipeline::abduct(b, ddim, test.images, test.attributes);

  const auto ybar = pipeline::act(b.scm, test.attributes, {{"light_x", 0.4}});
  pipeline::PredictOptions on;
  on.use_cfg = true;
  on.alpha = 1.0;
  const bool cfg_same = torch::equal(pipeline::predict(b, ddim, &tr, ybar, {}), pipeline::predict(b, ddim, &tr, ybar, on));

  pipeline::GuidanceStats null_stats;
  const auto ag = pipeline::attention_guided_predict(b, ddim, tr, test.attributes, {}, &null_stats);
  const double null_gap = max_abs(ag - pipeline::predict(b, ddim, &tr, test.attributes, {}));

  double row_err = null_stats.max_row_sum_error, unchanged = 0.0;
  for (const auto& name : b.scm.graph().names()) {
    pipeline::GuidanceStats st;
    pipeline::attention_guided_predict(b, ddim, tr, pipeline::act(b.scm, test.attributes, {{name, -0.6}}), {}, &st);
    row_err = std::max(row_err, st.max_row_sum_error);
    unchanged = std::max(unchanged, st.max_unchanged_deviation);
  }
  const bool ok = cfg_same && null_gap <= 1e-6 && row_err <= 1e-6 && unchanged == 0.0;
  return {ok, fmt::format("alpha=1 CFG {} no-CFG, AG null-intervention gap {:.1e} (<= 1e-6), spliced row-sum error "
                          "{:.1e} (<= 1e-6), unchanged-token deviation {:.1e}",
                          cfg_same ? "bit-identical to" : "DIFFERS from", null_gap, row_err, unchanged)};
}

// ---------------------------------------------------------------- 6, 7, 9

bool older_than_inputs(const config::RunConfig& cfg, const fs::path& p) {
  if (!fs::exists(p)) return true;
  const auto t = fs::last_write_time(p);
  for (const auto& in : {cfg.backbone_path(), cfg.adapter_path("plain"), cfg.adapter_path("pai"),
                         cfg.adapter_path("pai+ctc"), cfg.evaluators_path()})
    if (fs::exists(in) && fs::last_write_time(in) > t) return true;
  return false;
}

Verdict effectiveness(const config::RunConfig& cfg) {
  const auto rep = eval::MetricReport::from_json(json::parse(slurp(cfg.report_path())));
  const auto scm = scm::load_mechanisms(cfg.scm_path());
  const auto k = rep.attributes.size();
  std::printf("\n%s\n", rep.to_table().c_str());
  bool ok = rep.valid;
  std::string d;
  for (std::size_t i = 0; i < k; ++i) {
    const double e = rep.effectiveness[i][i].mean, c = rep.control[i][i].mean;
    const bool a = e <= 0.5 * c;
    ok = ok && a;
    d += fmt::format("do({}) {:.3f} vs control {:.3f} {}; ", rep.attributes[i], e, c, a ? "ok" : "FAIL");
    for (int j : scm.graph().descendants(static_cast<int>(i))) {
      const double bound = 2.0 * rep.predictor_test_mae[j] + 0.05;
      const double got = rep.effectiveness[i][j].mean;
      const bool bok = got <= bound;
      ok = ok && bok;
      d += fmt::format("{} tracks {:.3f} (<= {:.3f}) {}; ", rep.attributes[j], got, bound, bok ? "ok" : "FAIL");
    }
  }
  if (!rep.valid) d += "report marked invalid by the evaluator quality gate";
  return {ok, d};
}

Verdict ablation(const config::RunConfig& cfg) {
  const auto doc = json::parse(slurp(cfg.run_dir / "ablation.json"));
  std::map<std::string, json> rows;
  for (const auto& r : doc.at("rows")) rows[r.at("name").get<std::string>()] = r;
  double sigma = 0.0;
  const auto sd = doc.at("predictor_test_std").get<std::vector<double>>();
  for (double s : sd) sigma += s / static_cast<double>(sd.size());
  const double plain = rows.at("plain").at("effectiveness"), pai = rows.at("+PAI").at("effectiveness"),
               ctc = rows.at("+PAI+CTC").at("effectiveness");
  const double margin = rows.at("+PAI+CTC").at("ctc_margin");
  // Effectiveness is an error: each added component must not make it worse
  // by more than one predictor sigma.
  const bool order = pai <= plain + sigma && ctc <= pai + sigma;
  return {order && margin >= 0.1,
          fmt::format("intervened-attribute MAE plain {:.4f}, +PAI {:.4f}, +PAI+CTC {:.4f} (ties within sigma {:.4f}): {}; "
                      "CTC margin {:.3f} (>= 0.1)",
                      plain, pai, ctc, sigma, order ? "ordered" : "NOT ordered", margin)};
}

Verdict metric_identities(const config::RunConfig& cfg) {
  auto ev = eval::load_evaluators(cfg.evaluators_path());
  const auto test = load(cfg, "test", 200);
  const auto f = ev.embed(test.images);
  const double realism = std::abs(eval::frechet_distance(f, f));
  eval::IdentityModel id;
  const auto [pix, feat] = eval::composition(id, ev, test.images, test.attributes, cfg.eval_batch);
  const auto [mu, lv] = ev.posterior(test.images);
  const double minimality = max_abs(eval::symmetric_kl(mu, lv, mu, lv));
  testing::Gen g(99);
  double oracle = 0.0;
  for (int i = 0; i < 10; ++i) {
    const int m = g.integer(2, 8);
    auto a = g.tensor({g.integer(m + 2, 60), m}).to(torch::kFloat64);
    auto b = (g.tensor({g.integer(m + 2, 60), m}) * g.uniform(0.5, 2.0) + g.uniform(-1, 1)).to(torch::kFloat64);
    oracle = std::max(oracle, std::abs(eval::frechet_distance(a, b) - testing::frechet_direct(a, b, 1e-6)));
  }
  const bool ok = realism <= 1e-6 && pix.mean == 0.0 && feat.mean == 0.0 && minimality == 0.0 && oracle <= 1e-8;
  return {ok, fmt::format("realism(S,S) {:.1e}, identity composition {:.1e}/{:.1e}, minimality(x,x) {:.1e}, "
                          "Frechet vs direct oracle {:.1e} (<= 1e-8)",
                          realism, pix.mean, feat.mean, minimality, oracle)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string run_dir = "runs/smoke", config_path, only;
  app.add_option("--run-dir", run_dir, "run directory with the smoke artifacts");
  app.add_option("--config", config_path, "run configuration file");
  app.add_option("--only", only, "comma separated criterion numbers");
  CLI11_PARSE(app, argc, argv);

  auto kv = config_path.empty() ? config::KeyValues{} : config::KeyValues::load(config_path);
  kv.apply_env(config::RunConfig::known_keys());
  kv.set("run.dir", run_dir);
  const auto cfg = config::RunConfig::from_key_values(kv);
  log::set_level(log::parse_level(cfg.log_level));
  auto wanted = [&](int id) { return only.empty() || ("," + only + ",").find("," + std::to_string(id) + ",") != std::string::npos; };

  // Artifacts for 4-9.
  bool artifacts_ok = true;
  std::string artifact_error;
  if (wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(8) || wanted(9)) {
    try {
      stages::ensure_pipeline(cfg, {"plain", "pai", "pai+ctc"});
      if (wanted(6) && older_than_inputs(cfg, cfg.report_path())) {
        try {
          stages::evaluate(cfg, cfg.report_path());
        } catch (const QualityGateError& e) {
          log::warn("{}", e.what());
        }
      }
      if (wanted(7) && older_than_inputs(cfg, cfg.run_dir / "ablation.json")) {
        try {
          stages::ablate(cfg, {}, cfg.run_dir / "ablation.json");
        } catch (const QualityGateError& e) {
          log::warn("{}", e.what());
        }
      }
    } catch (const std::exception& e) {
      artifacts_ok = false;
      artifact_error = e.what();
    }
  }

  struct Entry {
    int id;
    std::string name;
    bool needs_artifacts;
    std::function<Verdict()> fn;
  };
  const std::vector<Entry> entries{
      {1, "SCM oracle equivalence", false, scm_oracle},
      {2, "gradient suites", false, gradients},
      {3, "physics/dataset", false, [&] { return physics(cfg); }},
      {4, "transparency and frozenness", true, [&] { return transparency(cfg); }},
      {5, "DDIM round trip", true, [&] { return round_trip(cfg); }},
      {6, "effectiveness trend", true, [&] { return effectiveness(cfg); }},
      {7, "ablation ordering", true, [&] { return ablation(cfg); }},
      {8, "CFG and AG identities", true, [&] { return identities(cfg); }},
      {9, "metric identities", true, [&] { return metric_identities(cfg); }},
  };

  int failed = 0;
  std::vector<std::string> lines;
  for (const auto& e : entries) {
    if (!wanted(e.id)) continue;
    Verdict v;
    const auto t0 = Clock::now();
    if (e.needs_artifacts && !artifacts_ok) {
      v = {false, "artifacts unavailable: " + artifact_error};
    } else {
      try {
        v = e.fn();
      } catch (const std::exception& ex) {
        v = {false, std::string("error: ") + ex.what()};
      }
    }
    if (!v.pass) ++failed;
    lines.push_back(fmt::format("[{}] {} {}: {} [{:.0f} s]", v.pass ? "PASS" : "FAIL", e.id, e.name, v.detail,
                                seconds_since(t0)));
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
  }
  std::printf("\nsummary\n");
  for (const auto& l : lines) std::printf("%s\n", l.substr(0, l.find(':')).c_str());
  return failed == 0 ? 0 : 1;
}
