#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cfdiff/errors.hpp"
#include "cfdiff/scm.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cfdiff;
using cfdiff::testing::Gen;
using cfdiff::testing::LinearScm;

namespace {

scm::CausalGraph pendulum_like() {
  return scm::parse_graph("angle\nlight\nlength\nposition\nangle -> length\nlight -> length\nangle -> position\nlight -> position\n");
}

std::vector<scm::AttributeVector> sample_data(Gen& g, const LinearScm& s, int n) {
  std::vector<scm::AttributeVector> d;
  for (int i = 0; i < n; ++i) d.push_back(s.sample(g));
  return d;
}

}  // namespace

TEST(Graph, ParsesNodesAndEdges) {
  const auto g = pendulum_like();
  ASSERT_EQ(g.size(), 4u);
  EXPECT_TRUE(g.is_root(0));
  EXPECT_TRUE(g.is_root(1));
  EXPECT_EQ(g.parents(2), (std::vector<int>{0, 1}));
  EXPECT_EQ(g.descendants(0), (std::vector<int>{2, 3}));
  EXPECT_TRUE(g.descendants(3).empty());
  EXPECT_EQ(g.index_of("light"), 1);
  EXPECT_THROW(g.index_of("colour"), UnknownAttributeError);
}

TEST(Graph, RejectsCyclesAndSelfLoops) {
  EXPECT_THROW(scm::validate_graph({{0, 1}, {1, 0}}), CyclicGraphError);
  EXPECT_THROW(scm::validate_graph({{1}}), CyclicGraphError);
  EXPECT_THROW(scm::parse_graph("a\nb\nc\na -> b\nb -> c\nc -> a\n"), CyclicGraphError);
}

TEST(Graph, TopologicalOrderRespectsEdgesOnRandomDags) {
  Gen g(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = g.integer(1, 7);
    auto adj = g.dag(k, 0.5);
    // Relabel nodes so edges do not simply follow index order.
    std::vector<int> perm(k);
    for (int i = 0; i < k; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), g.rng);
    std::vector<std::vector<int>> shuffled(k, std::vector<int>(k, 0));
    for (int c = 0; c < k; ++c)
      for (int p = 0; p < k; ++p) shuffled[perm[c]][perm[p]] = adj[c][p];
    const auto graph = scm::validate_graph(shuffled);
    std::vector<int> pos(k);
    for (int i = 0; i < k; ++i) pos[graph.topo_order()[i]] = i;
    for (int c = 0; c < k; ++c)
      for (int p : graph.parents(c)) EXPECT_LT(pos[p], pos[c]);
  }
}

TEST(Normalizer, RoundTripsRandomValues) {
  Gen g(3);
  for (int trial = 0; trial < 100; ++trial) {
    const double lo = g.uniform(-5, 5);
    const double hi = lo + g.uniform(0.1, 10);
    scm::Normalizer n({{lo, hi}});
    const double x = g.uniform(lo, hi);
    const double y = n.normalize(0, x);
    EXPECT_GE(y, -1.0 - 1e-12);
    EXPECT_LE(y, 1.0 + 1e-12);
    EXPECT_NEAR(n.denormalize(0, y), x, 1e-9 * std::max(1.0, std::abs(x)));
  }
}

TEST(Nll, GradientMatchesCentralDifferences) {
  Gen g(5);
  for (int trial = 0; trial < 20; ++trial) EXPECT_LT(cfdiff::testing::nll_gradient_error(g), 1e-4) << "trial " << trial;
}

TEST(Propagate, EmptyInterventionReturnsObservedExactly) {
  Gen g(8);
  const auto graph = pendulum_like();
  for (int trial = 0; trial < 30; ++trial) {
    scm::MechanismSet m(graph, 4, 1e-2, g.rng());
    const auto y = g.vec(4, -1, 1);
    EXPECT_EQ(scm::counterfactual_attributes(m, y, {}), y);
  }
}

TEST(Propagate, NonDescendantsKeepObservedBits) {
  Gen g(9);
  for (int trial = 0; trial < 40; ++trial) {
    const int k = g.integer(2, 6);
    const auto graph = scm::validate_graph(g.dag(k, 0.5));
    scm::MechanismSet m(graph, 4, 1e-2, g.rng());
    const auto y = g.vec(k, -1, 1);
    const int node = g.integer(0, k - 1);
    const double v = g.uniform(-1, 1);
    const auto cf = scm::counterfactual_attributes(m, y, {{graph.names()[node], v}});
    EXPECT_EQ(cf[node], v);
    const auto desc = graph.descendants(node);
    for (int i = 0; i < k; ++i) {
      if (i == node) continue;
      if (std::find(desc.begin(), desc.end(), i) == desc.end()) EXPECT_EQ(cf[i], y[i]) << "node " << i;
      EXPECT_GE(cf[i], -1.0);
      EXPECT_LE(cf[i], 1.0);
    }
  }
}

TEST(Propagate, ObserverSeesTopologicalOrder) {
  const auto graph = pendulum_like();
  scm::MechanismSet m(graph, 4, 1e-2, 1);
  std::vector<int> seen;
  scm::counterfactual_attributes(m, {0.1, 0.2, 0.3, 0.4}, {{"angle", 0.5}}, [&](int n) { seen.push_back(n); });
  ASSERT_EQ(seen.size(), 4u);
  std::vector<int> pos(4);
  for (int i = 0; i < 4; ++i) pos[seen[i]] = i;
  EXPECT_LT(pos[0], pos[2]);
  EXPECT_LT(pos[1], pos[3]);
}

TEST(Propagate, RejectsUnknownAndOutOfRange) {
  scm::MechanismSet m(pendulum_like(), 4, 1e-2, 1);
  const scm::AttributeVector y{0, 0, 0, 0};
  EXPECT_THROW(scm::counterfactual_attributes(m, y, {{"colour", 0.1}}), UnknownAttributeError);
  EXPECT_THROW(scm::counterfactual_attributes(m, y, {{"angle", 1.5}}), OutOfRangeError);
}

TEST(Fit, MatchesLinearGaussianOracle) {
  Gen g(21);
  const auto truth = LinearScm::random(g, 3);
  const auto data = sample_data(g, truth, 3000);
  scm::FitConfig fc;
  fc.steps = 4000;
  fc.learning_rate = 3e-3;
  fc.hidden = 16;
  fc.seed = 4;
  scm::FitReport rep;
  const auto m = scm::fit_mechanisms(scm::validate_graph(truth.adjacency, truth.names), data, fc, &rep);
  for (std::size_t i = 1; i < rep.best_so_far.size(); ++i) EXPECT_LE(rep.best_so_far[i], rep.best_so_far[i - 1]);

  double err = 0.0;
  int n = 0;
  for (int i = 0; i < 300; ++i) {
    const auto y = truth.sample(g);
    const int node = g.integer(0, 2);
    const double v = g.uniform(-0.7, 0.7);
    const auto want = truth.counterfactual(y, node, v);
    const auto got = scm::counterfactual_attributes(m, y, {{truth.names[node], v}});
    for (int j = 0; j < 3; ++j, ++n) err += std::abs(want[j] - got[j]);
  }
  EXPECT_LT(err / n, 0.05);
}

TEST(Fit, ChainOracleRecoversNoise) {
  // a -> b -> c with b = 0.5 a + u, c = -0.6 b + u.
  Gen g(2);
  LinearScm chain;
  chain.adjacency = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  chain.weights = {{0, 0, 0}, {0.5, 0, 0}, {0, -0.6, 0}};
  chain.names = {"a", "b", "c"};
  const auto data = sample_data(g, chain, 3000);
  scm::FitConfig fc;
  fc.steps = 3000;
  fc.learning_rate = 3e-3;
  fc.hidden = 16;
  const auto m = scm::fit_mechanisms(scm::validate_graph(chain.adjacency, chain.names), data, fc);
  const auto y = chain.sample(g);
  const auto noise = scm::abduct_noise(m, y);
  EXPECT_FALSE(noise.u[0].has_value());
  ASSERT_TRUE(noise.u[1].has_value());
  EXPECT_NEAR(*noise.u[1], y[1] - 0.5 * y[0], 0.03);
  // do(a) changes b and then c through the chain.
  const auto cf = scm::counterfactual_attributes(m, y, {{"a", 0.6}});
  const auto want = chain.counterfactual(y, 0, 0.6);
  EXPECT_NEAR(cf[1], want[1], 0.05);
  EXPECT_NEAR(cf[2], want[2], 0.05);
}

TEST(Mechanisms, SaveLoadRoundTrip) {
  scm::MechanismSet m(pendulum_like(), 5, 1e-2, 3);
  const auto path = std::filesystem::temp_directory_path() / "cfdiff_scm_roundtrip.json";
  scm::save_mechanisms(m, path);
  const auto back = scm::load_mechanisms(path);
  EXPECT_EQ(back.parameters(), m.parameters());
  EXPECT_EQ(back.graph().names(), m.graph().names());
  std::filesystem::remove(path);
}

TEST(Mechanisms, SigmaRespectsFloor) {
  scm::MechanismSet m(pendulum_like(), 3, 0.2, 3);
  auto p = m.parameters();
  for (auto& v : p) v = -10.0;
  m.set_parameters(p);
  EXPECT_DOUBLE_EQ(m.sigma(2), 0.2);
}
