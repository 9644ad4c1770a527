#include <gtest/gtest.h>

#include <cmath>

#include "cfdiff/errors.hpp"
#include "cfdiff/eval.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cfdiff;
using namespace cfdiff::eval;
using cfdiff::testing::Gen;
using cfdiff::testing::frechet_direct;

namespace {

EvaluatorConfig tiny_eval_config() {
  EvaluatorConfig c;
  c.image_size = 8;
  c.feature_dim = 8;
  c.vae_latent = 4;
  c.steps = 20;
  c.vae_steps = 20;
  c.batch_size = 8;
  return c;
}

}  // namespace

TEST(Frechet, IdenticalSetsGiveZero) {
  Gen g(1);
  auto f = g.tensor({50, 6});
  EXPECT_LE(std::abs(frechet_distance(f, f)), 1e-6);
}

TEST(Frechet, ShiftedGaussiansGiveSquaredShift) {
  Gen g(2);
  auto f = g.tensor({40, 5}).to(torch::kFloat64);
  auto shift = torch::zeros({1, 5}, torch::kFloat64);
  shift[0][2] = 1.5;
  shift[0][4] = -0.5;
  const double want = 1.5 * 1.5 + 0.25;
  EXPECT_NEAR(frechet_distance(f, f + shift), want, 1e-8);
}

TEST(Frechet, MatchesDirectFormulaOnRandomSets) {
  Gen g(3);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = g.integer(2, 6);
    auto a = g.tensor({g.integer(m + 2, 40), m}).to(torch::kFloat64);
    auto b = (g.tensor({g.integer(m + 2, 40), m}) * g.uniform(0.5, 2.0) + g.uniform(-1, 1)).to(torch::kFloat64);
    const double ours = frechet_distance(a, b);
    const double direct = frechet_direct(a, b, 1e-6);
    EXPECT_NEAR(ours, direct, 1e-8) << "trial " << trial;
    EXPECT_NEAR(ours, frechet_distance(b, a), 1e-8);
    EXPECT_GE(ours, -1e-9);
  }
}

TEST(Frechet, RejectsDegenerateSets) {
  EXPECT_THROW(frechet_distance(torch::zeros({1, 3}), torch::zeros({5, 3})), DegenerateSetError);
  EXPECT_THROW(frechet_distance(torch::zeros({4, 3}), torch::zeros({5, 2})), ShapeError);
}

TEST(Kl, SymmetricGaussianIdentities) {
  Gen g(4);
  auto mu = g.tensor({6, 4});
  auto lv = g.tensor({6, 4}, 0.3);
  EXPECT_LE(symmetric_kl(mu, lv, mu, lv).abs().max().item<double>(), 1e-12);
  auto mu2 = g.tensor({6, 4});
  auto lv2 = g.tensor({6, 4}, 0.3);
  EXPECT_TRUE(torch::allclose(symmetric_kl(mu, lv, mu2, lv2), symmetric_kl(mu2, lv2, mu, lv)));
  // Unit variances: KL both ways is |d|^2.
  auto zero = torch::zeros({1, 2});
  auto d = torch::tensor({{1.0, 2.0}});
  EXPECT_NEAR(symmetric_kl(zero, zero, d, zero)[0].item<double>(), 5.0, 1e-12);
}

TEST(Cell, MeanStdAndCount) {
  const auto c = Cell::of({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(c.mean, 2.5);
  EXPECT_NEAR(c.std, std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_EQ(c.n, 4);
  EXPECT_EQ(Cell::of({}).n, 0);
}

TEST(Evaluators, TrainProducesFiniteDeterministicOutputs) {
  Gen g(5);
  auto x = cfdiff::testing::random_images(g, 16, 8);
  auto y = cfdiff::testing::random_attributes(g, 16, 4);
  auto ev = train_evaluators(x, y, x.slice(0, 0, 4), y.slice(0, 0, 4), tiny_eval_config());
  EXPECT_EQ(ev.predictor_val_mae.size(), 4u);
  auto constant = torch::full({2, 3, 8, 8}, 0.5);
  EXPECT_TRUE(torch::isfinite(ev.predict(constant)).all().item<bool>());
  auto f1 = ev.embed(x.slice(0, 0, 2));
  auto f2 = ev.embed(x.slice(0, 0, 2));
  EXPECT_TRUE(torch::equal(f1, f2));
  EXPECT_EQ(f1.size(1), 8);
  auto [m, lv] = ev.posterior(x.slice(0, 0, 3));
  EXPECT_EQ(m.sizes(), (std::vector<int64_t>{3, 4}));
  EXPECT_LE(symmetric_kl(m, lv, m, lv).abs().max().item<double>(), 1e-12);
}

TEST(Evaluators, SaveLoadRoundTrip) {
  Gen g(6);
  auto x = cfdiff::testing::random_images(g, 8, 8);
  auto y = cfdiff::testing::random_attributes(g, 8, 4);
  auto ev = train_evaluators(x, y, x, y, tiny_eval_config());
  const auto path = std::filesystem::temp_directory_path() / "cfdiff_eval_rt.ckpt";
  save_evaluators(path, ev);
  auto back = load_evaluators(path);
  EXPECT_TRUE(torch::equal(back.predict(x), ev.predict(x)));
  EXPECT_TRUE(torch::equal(back.embed(x), ev.embed(x)));
  EXPECT_EQ(back.predictor_val_mae, ev.predictor_val_mae);
  EXPECT_EQ(back.gate_passed(), ev.gate_passed());
  std::filesystem::remove(path);
}

TEST(Evaluators, GateIsStrict) {
  Evaluators ev;
  ev.config.predictor_gate = 0.05;
  ev.config.vae_gate = 0.1;
  ev.predictor_val_mae = {0.01, 0.02, 0.049, 0.03};
  ev.vae_val_mae = 0.05;
  EXPECT_TRUE(ev.gate_passed());
  ev.predictor_val_mae[2] = 0.05;
  EXPECT_FALSE(ev.gate_passed());
}

TEST(Harness, IdentityPipelineHasZeroComposition) {
  Gen g(7);
  auto x = cfdiff::testing::random_images(g, 10, 8);
  auto y = cfdiff::testing::random_attributes(g, 10, 4);
  auto ev = train_evaluators(x, y, x, y, tiny_eval_config());
  IdentityModel id;
  const auto [pix, feat] = composition(id, ev, x, y, 4);
  EXPECT_EQ(pix.mean, 0.0);
  EXPECT_EQ(feat.mean, 0.0);
  EXPECT_EQ(pix.n, 10);
}

TEST(Harness, ReportShapeAndDeterminism) {
  Gen g(8);
  auto x = cfdiff::testing::random_images(g, 12, 8);
  auto y = cfdiff::testing::random_attributes(g, 12, 4);
  auto ev = train_evaluators(x, y, x, y, tiny_eval_config());
  auto bundle = cfdiff::testing::tiny_bundle(adapter::Variant::pai, 8);
  EvalOptions opt;
  opt.batch_size = 5;
  IdentityModel id;
  const auto a = evaluate(id, ev, bundle.scm, x, y, opt);
  const auto b = evaluate(id, ev, bundle.scm, x, y, opt);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  ASSERT_EQ(a.effectiveness.size(), 4u);
  for (const auto& row : a.effectiveness) {
    ASSERT_EQ(row.size(), 4u);
    for (const auto& c : row) {
      EXPECT_EQ(c.n, 12);
      EXPECT_TRUE(std::isfinite(c.mean));
      EXPECT_TRUE(std::isfinite(c.std));
    }
  }
  EXPECT_EQ(a.composition_mae.mean, 0.0);
  EXPECT_EQ(a.realism_n, 48);
  // The identity model never changes the image: the counterfactual posterior
  // equals the factual one.
  for (const auto& c : a.minimality) EXPECT_LE(c.mean, 1e-12);
  EXPECT_NE(a.to_table().find("do(pendulum_angle)"), std::string::npos);
}

TEST(Harness, DiffusionModelRuns) {
  Gen g(9);
  auto x = cfdiff::testing::random_images(g, 4, 8);
  auto y = cfdiff::testing::random_attributes(g, 4, 4);
  auto ev = train_evaluators(x, y, x, y, tiny_eval_config());
  auto bundle = cfdiff::testing::tiny_bundle(adapter::Variant::pai, 9);
  DiffusionModel model(bundle, 3, {}, true);
  EvalOptions opt;
  opt.batch_size = 4;
  const auto rep = evaluate(model, ev, bundle.scm, x, y, opt);
  EXPECT_EQ(rep.control.size(), 4u);
  EXPECT_TRUE(std::isfinite(rep.realism));
}

TEST(Report, JsonRoundTrip) {
  MetricReport r;
  r.label = "x";
  r.attributes = {"a", "b"};
  r.predictor_test_mae = {0.1, 0.2};
  r.predictor_test_std = {0.01, 0.02};
  r.effectiveness = {{{0.1, 0.01, 3}, {0.2, 0.02, 3}}, {{0.3, 0.03, 3}, {0.4, 0.04, 3}}};
  r.control = r.effectiveness;
  r.composition_mae = {0.05, 0.01, 3};
  r.composition_feature = {1.0, 0.5, 3};
  r.realism = 2.5;
  r.realism_n = 6;
  r.minimality = {{0.1, 0.0, 3}, {0.2, 0.0, 3}};
  r.minimality_by_magnitude = {{0.1, 0.2, 0.3}, {0.2, 0.3, 0.4}};
  r.config = {{"seed", 0}};
  const auto back = MetricReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back, r);
  EXPECT_NEAR(r.mean_effectiveness(), 0.25, 1e-12);
}

TEST(Report, AblationTableListsRows) {
  std::vector<AblationRow> rows;
  for (const char* n : {"plain", "+PAI", "+PAI+CTC", "+AG"}) rows.push_back({n, 0.1, 0.02, 1.0, 0.3, 0.2, 1.0, 50});
  const auto t = ablation_table(rows);
  for (const char* n : {"plain", "+PAI", "+PAI+CTC", "+AG"}) EXPECT_NE(t.find(n), std::string::npos);
}
