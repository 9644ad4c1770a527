#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cfdiff/adapter.hpp"
#include "cfdiff/diffusion.hpp"
#include "cfdiff/pipeline.hpp"
#include "cfdiff/scm.hpp"

namespace cfdiff::testing {

// Hand-rolled generator for property tests.
struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(rng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  std::vector<double> vec(std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }

  /// Random DAG over k nodes: edges only from lower to higher index.
  std::vector<std::vector<int>> dag(int k, double p) {
    std::vector<std::vector<int>> a(k, std::vector<int>(k, 0));
    for (int child = 0; child < k; ++child)
      for (int parent = 0; parent < child; ++parent) a[child][parent] = coin(p) ? 1 : 0;
    return a;
  }

  torch::Tensor tensor(std::vector<int64_t> shape, double sd = 1.0) {
    auto t = torch::empty(shape, torch::kFloat32);
    auto* p = t.data_ptr<float>();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<float>(normal(0.0, sd));
    return t;
  }
};

inline diffusion::DenoiserConfig tiny_config() {
  diffusion::DenoiserConfig c;
  c.image_size = 8;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.attention_resolutions = {8, 4};
  c.token_dim = 16;
  c.context_tokens = 1;
  c.num_attributes = 4;
  c.groups = 4;
  return c;
}

/// Randomly initialized frozen backbone. The output conv starts at zero in
/// training; here it gets random weights so predictions are not trivially 0.
inline diffusion::Backbone tiny_backbone(std::uint64_t seed = 0, diffusion::DenoiserConfig cfg = tiny_config()) {
  torch::manual_seed(seed);
  diffusion::Backbone bb;
  bb.config = cfg;
  bb.schedule = diffusion::NoiseSchedule::linear();
  bb.model = diffusion::UNet(cfg);
  {
    torch::NoGradGuard ng;
    for (auto& p : bb.model->decoder->conv_out->parameters()) p.normal_(0.0, 0.05);
  }
  bb.model->eval();
  for (auto& p : bb.model->parameters()) p.set_requires_grad(false);
  bb.hash = diffusion::parameter_hash(*bb.model);
  return bb;
}

/// Moves every zero-initialized adapter weight away from zero.
inline void perturb_adapter(adapter::CausalAdapter& a, std::uint64_t seed, double sd = 0.05) {
  torch::manual_seed(seed);
  torch::NoGradGuard ng;
  for (auto& p : a.net->projections->parameters()) p.normal_(0.0, sd);
  if (a.net->input_maps.defined()) a.net->input_maps.normal_(0.0, sd);
  if (a.tokens) {
    a.tokens->slopes.normal_(0.0, 0.5);
    a.tokens->offsets.normal_(0.0, 0.1);
  }
}

inline pipeline::Bundle tiny_bundle(adapter::Variant v, std::uint64_t seed = 0, bool perturb = true) {
  pipeline::Bundle b;
  b.backbone = tiny_backbone(seed);
  b.adapter = adapter::make_adapter(b.backbone, v);
  if (perturb) perturb_adapter(b.adapter, seed + 1);
  b.adapter.net->eval();
  for (auto& p : b.adapter.net->parameters()) p.set_requires_grad(false);
  if (b.adapter.tokens)
    for (auto& p : b.adapter.tokens->parameters()) p.set_requires_grad(false);
  b.scm = scm::MechanismSet(scm::validate_graph({{0, 0, 0, 0}, {0, 0, 0, 0}, {1, 1, 0, 0}, {1, 1, 0, 0}},
                                                {"pendulum_angle", "light_x", "shadow_length", "shadow_position"}),
                            8, 1e-2, seed);
  return b;
}

inline torch::Tensor random_images(Gen& g, int n, int size) {
  auto t = g.tensor({n, 3, size, size}, 0.25) + 0.5;
  return t.clamp(0.0, 1.0);
}

inline torch::Tensor random_attributes(Gen& g, int n, int k) {
  auto t = torch::empty({n, k}, torch::kFloat32);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) t[i][j] = static_cast<float>(g.uniform(-0.9, 0.9));
  return t;
}

// ------------------------------------------------------------ linear-Gaussian SCM oracle

/// y_i = sum_j a[i][j] y_j + u_i, roots uniform, u_i ~ N(0, sd^2).
struct LinearScm {
  std::vector<std::vector<int>> adjacency;
  std::vector<std::vector<double>> weights;
  double noise_sd = 0.05;
  std::vector<std::string> names;

  static LinearScm random(Gen& g, int k) {
    LinearScm s;
    s.adjacency = g.dag(k, 0.7);
    // Keep at least one edge so the test has descendants.
    if (k >= 2) s.adjacency[k - 1][0] = 1;
    s.weights.assign(k, std::vector<double>(k, 0.0));
    for (int i = 0; i < k; ++i) {
      int np = 0;
      for (int j = 0; j < k; ++j) np += s.adjacency[i][j];
      for (int j = 0; j < k; ++j)
        if (s.adjacency[i][j]) s.weights[i][j] = (g.coin() ? 1.0 : -1.0) * g.uniform(0.3, 0.7) / std::max(1, np);
    }
    for (int i = 0; i < k; ++i) s.names.push_back("a" + std::to_string(i));
    return s;
  }

  bool is_root(int i) const {
    return std::all_of(adjacency[i].begin(), adjacency[i].end(), [](int v) { return v == 0; });
  }

  std::vector<double> sample(Gen& g) const {
    const int k = static_cast<int>(adjacency.size());
    std::vector<double> y(k, 0.0);
    for (int i = 0; i < k; ++i) {
      if (is_root(i)) {
        y[i] = g.uniform(-0.7, 0.7);
        continue;
      }
      double v = g.normal(0.0, noise_sd);
      for (int j = 0; j < i; ++j) v += weights[i][j] * y[j];
      y[i] = v;
    }
    return y;
  }

  /// Closed-form counterfactual: u_i = y_i - sum a_ij y_j, then recompute.
  std::vector<double> counterfactual(const std::vector<double>& y, int node, double value) const {
    const int k = static_cast<int>(adjacency.size());
    std::vector<double> out(k);
    for (int i = 0; i < k; ++i) {
      if (i == node) {
        out[i] = value;
      } else if (is_root(i)) {
        out[i] = y[i];
      } else {
        double u = y[i], f = 0.0;
        for (int j = 0; j < i; ++j) {
          u -= weights[i][j] * y[j];
          f += weights[i][j] * out[j];
        }
        out[i] = std::clamp(f + u, -1.0, 1.0);
      }
    }
    return out;
  }
};

}  // namespace cfdiff::testing
