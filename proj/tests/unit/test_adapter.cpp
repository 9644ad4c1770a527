#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cfdiff/adapter.hpp"
#include "cfdiff/errors.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cfdiff;
using namespace cfdiff::adapter;
using cfdiff::testing::Gen;
namespace fs = std::filesystem;

TEST(Variant, ParsesKnownNames) {
  EXPECT_EQ(parse_variant("plain"), Variant::plain);
  EXPECT_EQ(parse_variant("pai"), Variant::pai);
  EXPECT_EQ(parse_variant("pai+ctc"), Variant::pai_ctc);
  EXPECT_EQ(variant_name(Variant::pai_ctc), "pai+ctc");
  EXPECT_THROW(parse_variant("ctc"), VariantError);
}

TEST(Tokens, FollowLinearForm) {
  auto bb = cfdiff::testing::tiny_backbone(1);
  auto a = make_adapter(bb, Variant::pai);
  cfdiff::testing::perturb_adapter(a, 2);
  const std::vector<double> y{0.5, -0.25, 0.0, 1.0};
  auto tok = build_tokens(a.tokens, y);
  ASSERT_EQ(tok.size(0), 5);
  EXPECT_TRUE(torch::equal(tok[0], bb.model->null_tokens[0]));
  for (int k = 0; k < 4; ++k) {
    auto want = a.tokens->placeholders[k] + static_cast<float>(y[k]) * a.tokens->slopes[k] + a.tokens->offsets[k];
    EXPECT_LT((tok[k + 1] - want).abs().max().item<double>(), 1e-6);
  }
  EXPECT_THROW(build_tokens(a.tokens, {0.1, 0.2}), ShapeError);
}

TEST(Tokens, StartFromNullSlotsWithZeroSlopes) {
  auto bb = cfdiff::testing::tiny_backbone(3);
  auto a = make_adapter(bb, Variant::pai);
  auto tok = a.tokens->forward(torch::rand({3, 4}));
  for (int b = 0; b < 3; ++b) EXPECT_TRUE(torch::equal(tok[b], bb.model->null_tokens));
}

TEST(Adapter, ZeroInitIsTransparent) {
  Gen g(4);
  for (auto v : {Variant::plain, Variant::pai, Variant::pai_ctc}) {
    auto bb = cfdiff::testing::tiny_backbone(4);
    auto a = make_adapter(bb, v);
    torch::NoGradGuard ng;
    auto z = g.tensor({2, 3, 8, 8});
    auto y = cfdiff::testing::random_attributes(g, 2, 4);
    for (int t : {1, 250, 999}) {
      auto tt = torch::full({2}, t, torch::kInt64);
      auto bare = bb.model->forward(z, tt, bb.model->null_tokens);
      EXPECT_TRUE(torch::equal(a.predict(bb, z, t, y), bare)) << variant_name(v) << " t=" << t;
    }
    auto r = a.net->forward(z, torch::full({2}, 10, torch::kInt64), a.conditional_input(bb, y));
    EXPECT_EQ(r.norm(), 0.0);
  }
}

TEST(Adapter, HalfCopyStartsFromBackboneEncoder) {
  auto bb = cfdiff::testing::tiny_backbone(5);
  auto a = make_adapter(bb, Variant::pai);
  auto src = bb.model->encoder->named_parameters();
  for (const auto& p : a.net->encoder->named_parameters()) {
    ASSERT_TRUE(src.contains(p.key())) << p.key();
    EXPECT_TRUE(torch::equal(p.value(), src[p.key()]));
  }
}

TEST(Adapter, InputConventionsAreEnforced) {
  auto bb = cfdiff::testing::tiny_backbone(6);
  auto plain = make_adapter(bb, Variant::plain);
  auto pai = make_adapter(bb, Variant::pai);
  torch::NoGradGuard ng;
  auto z = torch::zeros({1, 3, 8, 8});
  auto t = torch::full({1}, 5, torch::kInt64);
  AdapterInput missing_attrs{bb.model->null_tokens, {}};
  EXPECT_THROW(plain.net->forward(z, t, missing_attrs), VariantError);
  AdapterInput extra_attrs{pai.tokens->forward(torch::zeros({1, 4})), torch::zeros({1, 4})};
  EXPECT_THROW(pai.net->forward(z, t, extra_attrs), VariantError);
}

TEST(Ctc, ClosedFormGradientMatchesCentralDifferences) {
  Gen g(7);
  for (int trial = 0; trial < 20; ++trial) EXPECT_LT(cfdiff::testing::ctc_gradient_error(g), 1e-4) << "trial " << trial;
}

TEST(Ctc, AutogradAgreesWithClosedForm) {
  Gen g(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int b = g.integer(2, 4), k = g.integer(2, 4), d = g.integer(2, 6);
    const double tau = g.uniform(0.1, 1.0);
    auto v = g.tensor({b, k, d}).to(torch::kFloat64);
    const auto grad = ctc_gradient(v, tau);
    auto leaf = v.clone().set_requires_grad(true);
    ctc_loss(leaf, tau).backward();
    EXPECT_LT((leaf.grad() - grad).abs().max().item<double>(), 1e-10);
  }
}

TEST(Ctc, LossPrefersAlignedTokens) {
  // Same token identical across samples and orthogonal to others -> low loss.
  auto aligned = torch::zeros({3, 2, 4}, torch::kFloat64);
  for (int b = 0; b < 3; ++b) {
    aligned[b][0][0] = 1.0;
    aligned[b][1][1] = 1.0;
  }
  Gen g(8);
  auto random = g.tensor({3, 2, 4}).to(torch::kFloat64);
  EXPECT_LT(ctc_loss(aligned, 0.2).item<double>(), ctc_loss(random, 0.2).item<double>());
  EXPECT_NEAR(ctc_margin(aligned), 1.0, 1e-9);
}

TEST(Ctc, RejectsDegenerateBatches) {
  EXPECT_THROW(ctc_loss(torch::ones({1, 4, 3}), 0.2), DegenerateBatchError);
  EXPECT_THROW(ctc_loss(torch::ones({4, 1, 3}), 0.2), DegenerateBatchError);
  EXPECT_THROW(ctc_margin(torch::ones({1, 4, 3})), DegenerateBatchError);
  EXPECT_THROW(ctc_loss(torch::ones({2, 2, 3}), 0.0), ConfigError);
}

TEST(Ctc, TotalLossAddsWeightedTerm) {
  auto dm = torch::tensor(2.0);
  auto c = torch::tensor(3.0);
  EXPECT_DOUBLE_EQ(total_loss(dm, c, 0.5).item<double>(), 3.5);
  EXPECT_DOUBLE_EQ(total_loss(dm, c, 0.0).item<double>(), 2.0);
  EXPECT_THROW(total_loss(dm, c, -1.0), ConfigError);
}

TEST(Training, KeepsBackboneFrozenAndPrefixFixed) {
  Gen g(9);
  auto bb = cfdiff::testing::tiny_backbone(9);
  const auto hash = bb.hash;
  auto images = cfdiff::testing::random_images(g, 6, 8);
  auto attrs = cfdiff::testing::random_attributes(g, 6, 4);
  TrainConfig tc;
  tc.variant = Variant::pai_ctc;
  tc.optim.learning_rate = 1e-3;
  tc.optim.batch_size = 3;
  tc.optim.steps = 15;
  tc.optim.log_every = 5;
  AdapterTrainLog log;
  auto a = train_adapter(bb, images, attrs, tc, &log);
  EXPECT_EQ(diffusion::parameter_hash(*bb.model), hash);
  EXPECT_TRUE(torch::equal(a.tokens->prefix, bb.model->null_tokens.slice(0, 0, 1)));
  EXPECT_FALSE(log.ctc_curve.empty());
  EXPECT_GT(a.tokens->slopes.abs().sum().item<double>(), 0.0);
}

TEST(Training, ValidatesConfig) {
  Gen g(10);
  auto bb = cfdiff::testing::tiny_backbone(10);
  auto images = cfdiff::testing::random_images(g, 4, 8);
  auto attrs = cfdiff::testing::random_attributes(g, 4, 4);
  TrainConfig tc;
  tc.optim.batch_size = 1;
  EXPECT_THROW(train_adapter(bb, images, attrs, tc), ConfigError);
  tc.optim.batch_size = 2;
  EXPECT_THROW(train_adapter(bb, images, attrs.slice(1, 0, 3), tc), ShapeError);
  tc.interface_lr_scale = 0.0;
  EXPECT_THROW(train_adapter(bb, images, attrs, tc), ConfigError);
}

TEST(Checkpoint, RoundTripAndBackboneBinding) {
  auto bb = cfdiff::testing::tiny_backbone(11);
  auto a = make_adapter(bb, Variant::pai_ctc, 5e-4, 0.2);
  cfdiff::testing::perturb_adapter(a, 12);
  const auto path = fs::temp_directory_path() / "cfdiff_adapter_rt.ckpt";
  save_adapter(path, a);
  auto back = load_adapter(path, bb);
  EXPECT_EQ(back.variant, Variant::pai_ctc);
  EXPECT_EQ(diffusion::parameter_hash(*back.net), diffusion::parameter_hash(*a.net));
  EXPECT_TRUE(torch::equal(back.tokens->slopes, a.tokens->slopes));

  auto other = cfdiff::testing::tiny_backbone(99);
  EXPECT_THROW(load_adapter(path, other), FrozenViolationError);
  fs::remove(path);
}
