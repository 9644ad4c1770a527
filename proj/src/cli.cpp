#include "cfdiff/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>

#include "cfdiff/config.hpp"
#include "cfdiff/errors.hpp"
#include "cfdiff/log.hpp"
#include "cfdiff/stages.hpp"

namespace cfdiff::cli {

namespace {

struct Overrides {
  std::map<std::string, std::string> values;

  void bind(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { values[key] = v; }, help);
  }
};

std::pair<std::string, double> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected attr=value, got '" + text + "'");
  try {
    std::size_t pos = 0;
    const std::string num = text.substr(eq + 1);
    const double v = std::stod(num, &pos);
    if (pos != num.size()) throw std::invalid_argument(num);
    return {text.substr(0, eq), v};
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad value in '" + text + "'");
  }
}

stages::Traversal parse_traversal(const std::string& text) {
  // attr=start:stop:n
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("expected --traverse attr=start:stop:n, got '" + text + "'");
  stages::Traversal t;
  t.attribute = text.substr(0, eq);
  std::stringstream ss(text.substr(eq + 1));
  std::string a, b, c;
  if (!std::getline(ss, a, ':') || !std::getline(ss, b, ':') || !std::getline(ss, c))
    throw ConfigError("expected --traverse attr=start:stop:n, got '" + text + "'");
  try {
    t.start = std::stod(a);
    t.stop = std::stod(b);
    t.count = std::stoi(c);
  } catch (const std::exception&) {
    throw ConfigError("bad numbers in --traverse '" + text + "'");
  }
  if (t.count < 2) throw ConfigError("--traverse needs at least 2 steps");
  return t;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      if constexpr (std::is_same_v<T, int>)
        out.push_back(std::stoi(item));
      else
        out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("bad entry '" + item + "' in " + flag);
    }
  }
  return out;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Counterfactual image generation with a causal side adapter on a frozen diffusion model"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path;
  Overrides ov;
  app.add_option("--config", config_path, "run configuration file");
  ov.bind(&app, "--run-dir", "run.dir", "run directory holding every artifact");
  ov.bind(&app, "--profile", "run.profile", "smoke or full");
  ov.bind(&app, "--log-level", "run.log_level", "debug, info, warn, error or off");

  auto* gen = app.add_subcommand("gen-data", "render the pendulum dataset");
  ov.bind(gen, "--out", "paths.data", "dataset directory");
  ov.bind(gen, "--seed", "run.seed", "global seed");
  ov.bind(gen, "--size", "data.image_size", "image side in pixels");
  ov.bind(gen, "--n-train", "data.n_train", "training images");
  ov.bind(gen, "--n-val", "data.n_val", "validation images");
  ov.bind(gen, "--n-test", "data.n_test", "test images");

  auto* fit = app.add_subcommand("fit-scm", "fit the additive-noise mechanisms on the training attributes");
  ov.bind(fit, "--data", "paths.data", "dataset directory");
  ov.bind(fit, "--out", "paths.scm", "mechanism file");
  ov.bind(fit, "--steps", "scm.steps", "optimizer steps");
  ov.bind(fit, "--seed", "run.seed", "global seed");

  auto* bb = app.add_subcommand("train-backbone", "train and freeze the denoiser");
  ov.bind(bb, "--data", "paths.data", "dataset directory");
  ov.bind(bb, "--out", "paths.backbone", "backbone checkpoint");
  ov.bind(bb, "--steps", "backbone.steps", "optimizer steps");
  ov.bind(bb, "--size", "data.image_size", "image side in pixels (must match the data)");
  ov.bind(bb, "--seed", "run.seed", "global seed");

  auto* ad = app.add_subcommand("train-adapter", "train the causal adapter against the frozen backbone");
  ov.bind(ad, "--backbone", "paths.backbone", "backbone checkpoint");
  ov.bind(ad, "--data", "paths.data", "dataset directory");
  ov.bind(ad, "--out", "paths.adapter", "adapter checkpoint");
  ov.bind(ad, "--variant", "adapter.variant", "plain, pai or pai+ctc");
  ov.bind(ad, "--lambda", "adapter.lambda", "contrastive loss weight");
  ov.bind(ad, "--tau", "adapter.tau", "contrastive temperature");
  ov.bind(ad, "--steps", "adapter.steps", "optimizer steps");
  ov.bind(ad, "--seed", "run.seed", "global seed");

  auto* te = app.add_subcommand("train-evaluators", "train the reference regressors, feature extractor and VAE");
  ov.bind(te, "--data", "paths.data", "dataset directory");
  ov.bind(te, "--out", "paths.evaluators", "evaluator checkpoint");
  ov.bind(te, "--steps", "eval.predictor_steps", "regressor optimizer steps");
  ov.bind(te, "--seed", "run.seed", "global seed");

  auto* cf = app.add_subcommand("counterfactual", "generate a counterfactual for one image");
  stages::CounterfactualJob job;
  std::vector<std::string> dos;
  std::string traverse, attrs;
  bool ag = false;
  ov.bind(cf, "--backbone", "paths.backbone", "backbone checkpoint");
  ov.bind(cf, "--adapter", "paths.adapter", "adapter checkpoint");
  ov.bind(cf, "--scm", "paths.scm", "mechanism file");
  ov.bind(cf, "--variant", "adapter.variant", "adapter variant");
  cf->add_option("--image", job.image, "factual image (PNG)")->required();
  cf->add_option("--attrs", attrs, "factual attributes, comma separated, normalized");
  cf->add_option("--do", dos, "intervention attr=value (normalized units); repeatable");
  ov.bind(cf, "--alpha", "inference.alpha", "guidance scale");
  ov.bind(cf, "--steps", "inference.steps", "DDIM steps");
  ov.bind(cf, "--residual-source", "inference.residual_source",
                       "inversion_trajectory or current_latent");
  cf->add_flag("--attention-guidance", ag, "splice cached attention for unchanged tokens");
  cf->add_option("--traverse", traverse, "attr=start:stop:n traversal grid");
  cf->add_option("--out", job.out, "output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "train reference models if needed and write the metric report");
  std::string report_out;
  bool smoke = false;
  ev->add_option("--pipeline-config", config_path, "run configuration file");
  ov.bind(ev, "--data", "paths.data", "dataset directory");
  ov.bind(ev, "--variant", "adapter.variant", "adapter variant");
  ev->add_option("--out", report_out, "report path (JSON)");
  ev->add_flag("--smoke", smoke, "use the smoke profile");

  auto* ab = app.add_subcommand("ablate", "variant / guidance / step sweeps with a combined report");
  std::string variants = "plain,pai,pai+ctc", alphas, steps, ablate_out;
  bool no_ag = false;
  ab->add_option("--variants", variants, "comma separated adapter variants");
  ab->add_option("--alphas", alphas, "guidance scales, e.g. 1,2,3,4,5");
  ab->add_option("--steps", steps, "DDIM step counts, e.g. 50,100,200");
  ab->add_flag("--no-attention-guidance", no_ag, "skip the +AG row");
  ab->add_option("--out", ablate_out, "report path (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto kv = config_path.empty() ? config::KeyValues{} : config::KeyValues::load(config_path);
    kv.apply_env(config::RunConfig::known_keys());
    if (smoke) kv.set("run.profile", "smoke");
    for (const auto& [k, v] : ov.values) kv.set(k, v);
    if (ag) kv.set("inference.attention_guidance", "true");
    const auto cfg = config::RunConfig::from_key_values(kv);
    log::set_level(log::parse_level(cfg.log_level));

    if (*gen) {
      stages::gen_data(cfg);
    } else if (*fit) {
      stages::fit_scm(cfg);
    } else if (*bb) {
      stages::train_backbone(cfg);
    } else if (*ad) {
      stages::train_adapter(cfg, cfg.variant);
    } else if (*te) {
      stages::train_evaluators(cfg);
    } else if (*cf) {
      for (const auto& d : dos) job.interventions.insert(parse_assignment(d));
      if (!attrs.empty()) job.attributes = parse_list<double>(attrs, "--attrs");
      if (!traverse.empty()) job.traverse = parse_traversal(traverse);
      stages::counterfactual(cfg, job);
    } else if (*ev) {
      stages::evaluate(cfg, report_out.empty() ? cfg.report_path() : std::filesystem::path(report_out));
    } else if (*ab) {
      stages::AblationGrid grid;
      grid.variants.clear();
      std::stringstream ss(variants);
      std::string v;
      while (std::getline(ss, v, ',')) grid.variants.push_back(v);
      grid.attention_guidance_row = !no_ag;
      if (!alphas.empty()) grid.alphas = parse_list<double>(alphas, "--alphas");
      if (!steps.empty()) grid.steps = parse_list<int>(steps, "--steps");
      stages::ablate(cfg, grid, ablate_out.empty() ? cfg.run_dir / "ablation.json" : std::filesystem::path(ablate_out));
    }
  } catch (const Error& e) {
    log::error("{}", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    log::error("{}", e.what());
    return 1;
  }
  return 0;
}

}  // namespace cfdiff::cli
