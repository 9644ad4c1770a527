#pragma once

// Structural causal model over scalar image attributes: a known DAG, one
// additive-noise mechanism per non-root node, and attribute-level
// abduction / intervention / counterfactual propagation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cfdiff::scm {

/// Normalized attribute values, one per graph node, nominally in [-1, 1].
using AttributeVector = std::vector<double>;

/// do(name = value) assignments, values in normalized units.
using Interventions = std::map<std::string, double>;

class CausalGraph {
 public:
  CausalGraph() = default;

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::vector<int>>& adjacency() const { return adjacency_; }
  const std::vector<int>& topo_order() const { return topo_order_; }

  bool is_parent(int child, int parent) const { return adjacency_[child][parent] != 0; }
  bool is_root(int i) const;
  std::vector<int> parents(int i) const;
  /// Every node reachable from `i` along directed edges, excluding `i`.
  std::vector<int> descendants(int i) const;
  /// Throws UnknownAttributeError.
  int index_of(std::string_view name) const;

  friend CausalGraph validate_graph(std::vector<std::vector<int>> adjacency,
                                    std::vector<std::string> names);

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<int>> adjacency_;
  std::vector<int> topo_order_;
};

/// Checks shape, binarity, zero diagonal and acyclicity, and computes a
/// topological order (Kahn, lowest index first among ready nodes). Names
/// default to "y0".."y{K-1}" when empty.
CausalGraph validate_graph(std::vector<std::vector<int>> adjacency,
                           std::vector<std::string> names = {});

/// Graph text format: one attribute name per line declares a node (in index
/// order), "parent -> child" declares an edge. '#' starts a comment. Nodes
/// first mentioned in an edge are declared implicitly.
CausalGraph parse_graph(std::string_view text);
CausalGraph load_graph_file(const std::filesystem::path& path);
std::string format_graph(const CausalGraph& graph);

/// Per-attribute min-max map between native units and [-1, 1].
struct Range {
  double min = -1.0;
  double max = 1.0;
};

class Normalizer {
 public:
  Normalizer() = default;
  explicit Normalizer(std::vector<Range> ranges);

  std::size_t size() const { return ranges_.size(); }
  const std::vector<Range>& ranges() const { return ranges_; }
  double normalize(std::size_t i, double native) const;
  double denormalize(std::size_t i, double normalized) const;
  AttributeVector normalize(std::span<const double> native) const;
  std::vector<double> denormalize(std::span<const double> normalized) const;

 private:
  std::vector<Range> ranges_;
};

/// f_i(Pa_i) = w2 . tanh(W1 x + b1) + b2 where x holds only the parent
/// coordinates of Y (the masked vector A_i ⊙ Y with zero columns dropped).
struct Mechanism {
  int node = -1;
  std::vector<int> parents;
  int hidden = 64;
  std::vector<double> w1;  // hidden x parents.size(), row-major
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // hidden
  double b2 = 0.0;
  double log_sigma = 0.0;

  double predict(std::span<const double> y) const;
  std::size_t num_parameters() const { return w1.size() + b1.size() + w2.size() + 2; }
};

class MechanismSet {
 public:
  MechanismSet() = default;
  MechanismSet(CausalGraph graph, int hidden, double sigma_floor, std::uint64_t seed);

  const CausalGraph& graph() const { return graph_; }
  double sigma_floor() const { return sigma_floor_; }
  /// nullptr for root nodes.
  const Mechanism* mechanism(int node) const;
  Mechanism* mechanism(int node);
  const std::vector<Mechanism>& mechanisms() const { return mechanisms_; }

  /// max(exp(log sigma_i), floor).
  double sigma(int node) const;

  /// Flat parameter view in a fixed order (per mechanism: w1, b1, w2, b2,
  /// log_sigma). Used by the optimizer and by gradient checks.
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> flat);
  /// 1 where AdamW weight decay applies (w1 and w2), else 0.
  std::vector<double> decay_mask() const;

  nlohmann::json to_json() const;
  static MechanismSet from_json(const nlohmann::json& j);

 private:
  CausalGraph graph_;
  std::vector<Mechanism> mechanisms_;
  std::vector<int> slot_;  // node -> index into mechanisms_, -1 for roots
  double sigma_floor_ = 1e-2;
};

/// Mean over samples of the summed per-node Gaussian negative log-likelihood
///   0.5 * (y_i - f_i)^2 / sigma_i^2 + log sigma_i + 0.5 * log(2 pi).
double nll_loss(const MechanismSet& mechs, std::span<const AttributeVector> data);

/// d nll_loss / d parameters(), in parameters() order. For log sigma below the
/// floor the returned component is the unclamped derivative so a projected
/// optimizer step can leave the floor again.
std::vector<double> nll_gradient(const MechanismSet& mechs, std::span<const AttributeVector> data);

struct FitConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  int steps = 20000;
  int batch_size = 256;
  int hidden = 64;
  double sigma_floor = 1e-2;
  int eval_every = 500;
  /// Above this final loss a convergence warning is logged and flagged.
  double warn_loss = 5.0;
  std::uint64_t seed = 0;
};

struct FitReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, full-data loss)
  std::vector<double> best_so_far;                 // running best, non-increasing
  double best_loss = 0.0;
  bool convergence_warning = false;
};

/// Minimizes nll_loss with AdamW on minibatches; returns the parameters with
/// the lowest full-data loss seen at an evaluation point.
MechanismSet fit_mechanisms(const CausalGraph& graph, std::span<const AttributeVector> data,
                            const FitConfig& config, FitReport* report = nullptr);

/// u_i per node; std::nullopt for roots.
struct ExogenousNoise {
  std::vector<std::optional<double>> u;
};

ExogenousNoise abduct_noise(const MechanismSet& mechs, const AttributeVector& observed);

/// Called once per node when its counterfactual value is final, in
/// evaluation order.
using EvaluationObserver = std::function<void(int node)>;

/// Recomputes every node in topological order with the given noise. Roots
/// keep `observed`, intervened nodes take their pinned value, and other nodes
/// get f_i(parents) + u_i, clamped to [-1, 1]. A node whose parents all kept
/// their observed values keeps its observed value bit-for-bit.
AttributeVector propagate(const MechanismSet& mechs, const AttributeVector& observed,
                          const ExogenousNoise& noise, const std::map<int, double>& interventions,
                          const EvaluationObserver& observer = {});

/// Abduction, action and prediction at the attribute level. Throws
/// UnknownAttributeError / OutOfRangeError for bad interventions.
AttributeVector counterfactual_attributes(const MechanismSet& mechs, const AttributeVector& observed,
                                          const Interventions& interventions,
                                          const EvaluationObserver& observer = {});

/// Resolves names to indices and range-checks values against [-1, 1].
std::map<int, double> resolve_interventions(const CausalGraph& graph, const Interventions& interventions);

void save_mechanisms(const MechanismSet& mechs, const std::filesystem::path& path);
MechanismSet load_mechanisms(const std::filesystem::path& path);

inline constexpr int kMechanismFormatVersion = 1;

}  // namespace cfdiff::scm
