#pragma once

// Independent reference implementations used by both the unit suites and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <vector>

#include <torch/torch.h>

#include "cfdiff/adapter.hpp"
#include "cfdiff/pendulum.hpp"
#include "cfdiff/scm.hpp"
#include "fixtures.hpp"

namespace cfdiff::testing {

// Intersection of the line through a and b with the horizontal line y = h,
// solved as a 2x2 linear system.
inline double intersect_horizontal(pendulum::Point a, pendulum::Point b, double h) {
  // a + s (b - a) = (x, h)  ->  [bx-ax, -1; by-ay, 0] [s; x] = [-ax; h-ay]
  const double m00 = b.x - a.x, m01 = -1.0, m10 = b.y - a.y, m11 = 0.0;
  const double r0 = -a.x, r1 = h - a.y;
  const double det = m00 * m11 - m01 * m10;
  return (m00 * r1 - m10 * r0) / det;
}

inline pendulum::Shadow oracle_shadow(double angle, double light_x) {
  const pendulum::Point light{light_x, 1.0};
  const pendulum::Point pivot{0.5, 0.8};
  const pendulum::Point bob{0.5 + 0.25 * std::sin(angle), 0.8 - 0.25 * std::cos(angle)};
  const double xp = intersect_horizontal(light, pivot, 0.2);
  const double xb = intersect_horizontal(light, bob, 0.2);
  return {std::abs(xb - xp), 0.5 * (xp + xb)};
}

// Square root of the non-symmetric product S1 S2 by Denman-Beavers
// iteration, unbiased covariance by explicit loops.
inline double frechet_direct(const torch::Tensor& a, const torch::Tensor& b, double eps) {
  auto fit = [&](const torch::Tensor& x) {
    const auto n = x.size(0), m = x.size(1);
    auto xd = x.to(torch::kFloat64).contiguous();
    auto xa = xd.accessor<double, 2>();
    std::vector<double> mu(m, 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) mu[j] += xa[i][j] / n;
    auto cov = torch::zeros({m, m}, torch::kFloat64);
    auto ca = cov.accessor<double, 2>();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < m; ++p)
        for (int64_t q = 0; q < m; ++q) ca[p][q] += (xa[i][p] - mu[p]) * (xa[i][q] - mu[q]) / (n - 1);
    for (int64_t p = 0; p < m; ++p) ca[p][p] += eps;
    return std::make_pair(mu, cov);
  };
  auto [m1, s1] = fit(a);
  auto [m2, s2] = fit(b);
  auto y = torch::matmul(s1, s2);
  auto z = torch::eye(y.size(0), torch::kFloat64);
  for (int it = 0; it < 100; ++it) {
    auto yn = 0.5 * (y + torch::linalg_inv(z));
    auto zn = 0.5 * (z + torch::linalg_inv(y));
    y = yn;
    z = zn;
  }
  double mean = 0.0;
  for (std::size_t i = 0; i < m1.size(); ++i) mean += (m1[i] - m2[i]) * (m1[i] - m2[i]);
  return mean + (s1.trace() + s2.trace() - 2.0 * y.trace()).item<double>();
}

// Relative error (vector norms) between nll_gradient and central differences
// on one random mechanism set.
inline double nll_gradient_error(Gen& g, double h = 1e-5) {
  const int k = g.integer(2, 4);
  auto adj = g.dag(k, 0.7);
  adj[k - 1][0] = 1;
  const auto graph = scm::validate_graph(adj);
  scm::MechanismSet m(graph, g.integer(2, 6), 1e-2, g.rng());
  auto p = m.parameters();
  for (auto& v : p) v += g.normal(0.0, 0.1);
  m.set_parameters(p);
  std::vector<scm::AttributeVector> data;
  for (int i = 0; i < 8; ++i) data.push_back(g.vec(k, -1, 1));

  const auto analytic = scm::nll_gradient(m, data);
  double diff = 0.0, norm_a = 0.0, norm_f = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto q = p;
    q[i] = p[i] + h;
    m.set_parameters(q);
    const double up = scm::nll_loss(m, data);
    q[i] = p[i] - h;
    m.set_parameters(q);
    const double down = scm::nll_loss(m, data);
    const double fd = (up - down) / (2 * h);
    diff += (fd - analytic[i]) * (fd - analytic[i]);
    norm_a += analytic[i] * analytic[i];
    norm_f += fd * fd;
  }
  return std::sqrt(diff) / std::max({std::sqrt(norm_a), std::sqrt(norm_f), 1e-12});
}

// Same for the closed-form contrastive gradient.
inline double ctc_gradient_error(Gen& g, double h = 1e-5) {
  const int b = g.integer(2, 4), k = g.integer(2, 4), d = g.integer(2, 6);
  const double tau = g.uniform(0.1, 1.0);
  auto v = g.tensor({b, k, d}).to(torch::kFloat64);
  const auto grad = adapter::ctc_gradient(v, tau);
  auto fd = torch::zeros_like(v);
  auto flat = v.view(-1);
  auto fd_flat = fd.view(-1);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = adapter::ctc_loss(v, tau).item<double>();
    flat[i] = orig - h;
    const double down = adapter::ctc_loss(v, tau).item<double>();
    flat[i] = orig;
    fd_flat[i] = (up - down) / (2 * h);
  }
  return (grad - fd).norm().item<double>() / std::max(fd.norm().item<double>(), 1e-12);
}

// Fits mechanisms to samples from a random linear-Gaussian SCM and returns
// the mean absolute gap to the closed-form counterfactual.
inline double linear_scm_counterfactual_mae(Gen& g, int k, int samples, int queries, int steps) {
  const auto truth = LinearScm::random(g, k);
  std::vector<scm::AttributeVector> data;
  for (int i = 0; i < samples; ++i) data.push_back(truth.sample(g));
  scm::FitConfig fc;
  fc.steps = steps;
  fc.learning_rate = 3e-3;
  fc.hidden = 16;
  fc.seed = static_cast<std::uint64_t>(g.integer(0, 1 << 20));
  const auto m = scm::fit_mechanisms(scm::validate_graph(truth.adjacency, truth.names), data, fc);
  double err = 0.0;
  int n = 0;
  for (int i = 0; i < queries; ++i) {
    const auto y = truth.sample(g);
    const int node = g.integer(0, k - 1);
    const double v = g.uniform(-0.7, 0.7);
    const auto want = truth.counterfactual(y, node, v);
    const auto got = scm::counterfactual_attributes(m, y, {{truth.names[node], v}});
    for (int j = 0; j < k; ++j, ++n) err += std::abs(want[j] - got[j]);
  }
  return err / n;
}

}  // namespace cfdiff::testing
