#include "cfdiff/scm.hpp"

#include "cfdiff/log.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "cfdiff/errors.hpp"
#include "cfdiff/util.hpp"

namespace cfdiff::scm {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// AdamW over a flat double vector; decay is decoupled and masked.
class AdamW {
 public:
  AdamW(std::size_t n, double lr, double weight_decay, std::vector<double> decay_mask)
      : lr_(lr), wd_(weight_decay), mask_(std::move(decay_mask)), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i] -= lr_ * wd_ * mask_[i] * params[i];
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_, wd_;
  std::vector<double> mask_, m_, v_;
  int t_ = 0;
};

// Accumulates the gradient of one mechanism's mean NLL over `data` into
// `grad` (laid out like the mechanism's slice of parameters()). Returns the
// summed loss (not averaged).
double accumulate_mechanism(const Mechanism& m, double sigma_floor, std::span<const AttributeVector> data,
                            std::span<const std::size_t> rows, std::span<double> grad) {
  const auto np = m.parents.size();
  const auto H = static_cast<std::size_t>(m.hidden);
  const double log_floor = std::log(sigma_floor);
  const double ls = std::max(m.log_sigma, log_floor);
  const double inv_var = std::exp(-2.0 * ls);

  double* g_w1 = grad.data();
  double* g_b1 = g_w1 + H * np;
  double* g_w2 = g_b1 + H;
  double* g_b2 = g_w2 + H;
  double* g_ls = g_b2 + 1;

  std::vector<double> act(H);
  std::vector<double> x(np);
  double total = 0.0;
  double r2_sum = 0.0;
  for (std::size_t row : rows) {
    const auto& y = data[row];
    for (std::size_t p = 0; p < np; ++p) x[p] = y[m.parents[p]];
    double f = m.b2;
    for (std::size_t h = 0; h < H; ++h) {
      double pre = m.b1[h];
      for (std::size_t p = 0; p < np; ++p) pre += m.w1[h * np + p] * x[p];
      act[h] = std::tanh(pre);
      f += m.w2[h] * act[h];
    }
    const double r = y[m.node] - f;
    total += 0.5 * r * r * inv_var + ls + kHalfLog2Pi;
    r2_sum += r * r;
    const double dl_df = -r * inv_var;
    *g_b2 += dl_df;
    for (std::size_t h = 0; h < H; ++h) {
      g_w2[h] += dl_df * act[h];
      const double dpre = dl_df * m.w2[h] * (1.0 - act[h] * act[h]);
      g_b1[h] += dpre;
      for (std::size_t p = 0; p < np; ++p) g_w1[h * np + p] += dpre * x[p];
    }
  }
  *g_ls += static_cast<double>(rows.size()) - r2_sum * inv_var;
  return total;
}

double evaluate_loss_and_grad(const MechanismSet& mechs, std::span<const AttributeVector> data,
                              std::span<const std::size_t> rows, std::vector<double>* grad) {
  std::vector<double> local;
  double total = 0.0;
  std::size_t offset = 0;
  for (const auto& m : mechs.mechanisms()) {
    const auto n = m.num_parameters();
    if (grad) {
      total += accumulate_mechanism(m, mechs.sigma_floor(), data, rows,
                                    std::span<double>(grad->data() + offset, n));
    } else {
      local.assign(n, 0.0);
      total += accumulate_mechanism(m, mechs.sigma_floor(), data, rows, local);
    }
    offset += n;
  }
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  if (grad) {
    for (auto& g : *grad) g *= inv_n;
  }
  return total * inv_n;
}

void check_dataset(const CausalGraph& graph, std::span<const AttributeVector> data) {
  if (data.empty()) throw EmptyDatasetError("mechanism fitting needs at least one sample");
  for (const auto& y : data) {
    if (y.size() != graph.size()) {
      throw ShapeError("attribute vector has " + std::to_string(y.size()) + " entries, graph has " +
                       std::to_string(graph.size()));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- graph

bool CausalGraph::is_root(int i) const {
  return std::none_of(adjacency_[i].begin(), adjacency_[i].end(), [](int a) { return a != 0; });
}

std::vector<int> CausalGraph::parents(int i) const {
  std::vector<int> out;
  for (int j = 0; j < static_cast<int>(size()); ++j) {
    if (adjacency_[i][j]) out.push_back(j);
  }
  return out;
}

std::vector<int> CausalGraph::descendants(int i) const {
  std::vector<char> seen(size(), 0);
  std::vector<int> stack{i};
  while (!stack.empty()) {
    int n = stack.back();
    stack.pop_back();
    for (int c = 0; c < static_cast<int>(size()); ++c) {
      if (adjacency_[c][n] && !seen[c]) {
        seen[c] = 1;
        stack.push_back(c);
      }
    }
  }
  std::vector<int> out;
  for (int c = 0; c < static_cast<int>(size()); ++c) {
    if (seen[c] && c != i) out.push_back(c);
  }
  return out;
}

int CausalGraph::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw UnknownAttributeError("unknown attribute '" + std::string(name) + "'");
  return static_cast<int>(it - names_.begin());
}

CausalGraph validate_graph(std::vector<std::vector<int>> adjacency, std::vector<std::string> names) {
  const auto K = adjacency.size();
  for (std::size_t i = 0; i < K; ++i) {
    if (adjacency[i].size() != K) throw ShapeError("adjacency matrix is not square");
    for (std::size_t j = 0; j < K; ++j) {
      const int a = adjacency[i][j];
      if (a != 0 && a != 1) throw ShapeError("adjacency entries must be 0 or 1");
      if (i == j && a != 0) throw CyclicGraphError("self-loop on node " + std::to_string(i));
    }
  }
  if (names.empty()) {
    for (std::size_t i = 0; i < K; ++i) names.push_back("y" + std::to_string(i));
  }
  if (names.size() != K) throw ShapeError("attribute name count does not match adjacency size");
  std::set<std::string> unique;
  for (const auto& n : names) {
    if (n.empty()) throw ConfigError("attribute names must be nonempty");
    if (!unique.insert(n).second) throw ConfigError("duplicate attribute name '" + n + "'");
  }

  std::vector<int> indegree(K, 0);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) indegree[i] += adjacency[i][j];
  }
  std::vector<int> order;
  std::vector<char> done(K, 0);
  while (order.size() < K) {
    int next = -1;
    for (std::size_t i = 0; i < K; ++i) {
      if (!done[i] && indegree[i] == 0) {
        next = static_cast<int>(i);
        break;
      }
    }
    if (next < 0) throw CyclicGraphError("causal graph contains a directed cycle");
    done[next] = 1;
    order.push_back(next);
    for (std::size_t c = 0; c < K; ++c) {
      if (adjacency[c][next]) --indegree[c];
    }
  }

  CausalGraph g;
  g.names_ = std::move(names);
  g.adjacency_ = std::move(adjacency);
  g.topo_order_ = std::move(order);
  return g;
}

CausalGraph parse_graph(std::string_view text) {
  std::vector<std::string> names;
  std::vector<std::pair<std::string, std::string>> edges;
  auto declare = [&](const std::string& n) {
    if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  };
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (auto arrow = line.find("->"); arrow != std::string::npos) {
      auto parent = trim(std::string_view(line).substr(0, arrow));
      auto child = trim(std::string_view(line).substr(arrow + 2));
      if (parent.empty() || child.empty() || child.find("->") != std::string::npos) {
        throw ConfigError("malformed edge on line " + std::to_string(lineno) + ": '" + line + "'");
      }
      declare(parent);
      declare(child);
      edges.emplace_back(parent, child);
    } else {
      if (line.find_first_of(" \t") != std::string::npos) {
        throw ConfigError("attribute names cannot contain spaces (line " + std::to_string(lineno) + ")");
      }
      declare(line);
    }
  }
  const auto K = names.size();
  std::vector<std::vector<int>> adj(K, std::vector<int>(K, 0));
  auto idx = [&](const std::string& n) {
    return static_cast<std::size_t>(std::find(names.begin(), names.end(), n) - names.begin());
  };
  for (const auto& [p, c] : edges) adj[idx(c)][idx(p)] = 1;
  return validate_graph(std::move(adj), std::move(names));
}

CausalGraph load_graph_file(const std::filesystem::path& path) { return parse_graph(read_text_file(path)); }

std::string format_graph(const CausalGraph& graph) {
  std::ostringstream out;
  for (const auto& n : graph.names()) out << n << "\n";
  for (std::size_t c = 0; c < graph.size(); ++c) {
    for (std::size_t p = 0; p < graph.size(); ++p) {
      if (graph.adjacency()[c][p]) out << graph.names()[p] << " -> " << graph.names()[c] << "\n";
    }
  }
  return out.str();
}

// ---------------------------------------------------------------- normalization

Normalizer::Normalizer(std::vector<Range> ranges) : ranges_(std::move(ranges)) {
  for (const auto& r : ranges_) {
    if (!(r.max > r.min)) throw ConfigError("normalization range must have max > min");
  }
}

double Normalizer::normalize(std::size_t i, double native) const {
  const auto& r = ranges_.at(i);
  return 2.0 * (native - r.min) / (r.max - r.min) - 1.0;
}

double Normalizer::denormalize(std::size_t i, double normalized) const {
  const auto& r = ranges_.at(i);
  return r.min + (normalized + 1.0) * 0.5 * (r.max - r.min);
}

AttributeVector Normalizer::normalize(std::span<const double> native) const {
  if (native.size() != ranges_.size()) throw ShapeError("normalize: size mismatch");
  AttributeVector out(native.size());
  for (std::size_t i = 0; i < native.size(); ++i) out[i] = normalize(i, native[i]);
  return out;
}

std::vector<double> Normalizer::denormalize(std::span<const double> normalized) const {
  if (normalized.size() != ranges_.size()) throw ShapeError("denormalize: size mismatch");
  std::vector<double> out(normalized.size());
  for (std::size_t i = 0; i < normalized.size(); ++i) out[i] = denormalize(i, normalized[i]);
  return out;
}

// ---------------------------------------------------------------- mechanisms

double Mechanism::predict(std::span<const double> y) const {
  const auto np = parents.size();
  double f = b2;
  for (int h = 0; h < hidden; ++h) {
    double pre = b1[h];
    for (std::size_t p = 0; p < np; ++p) pre += w1[h * np + p] * y[parents[p]];
    f += w2[h] * std::tanh(pre);
  }
  return f;
}

MechanismSet::MechanismSet(CausalGraph graph, int hidden, double sigma_floor, std::uint64_t seed)
    : graph_(std::move(graph)), slot_(graph_.size(), -1), sigma_floor_(sigma_floor) {
  if (hidden <= 0) throw ConfigError("mechanism hidden width must be positive");
  if (!(sigma_floor > 0.0)) throw ConfigError("sigma floor must be positive");
  std::mt19937_64 rng(seed);
  for (int node : graph_.topo_order()) {
    if (graph_.is_root(node)) continue;
    Mechanism m;
    m.node = node;
    m.parents = graph_.parents(node);
    m.hidden = hidden;
    const auto np = m.parents.size();
    std::normal_distribution<double> in_init(0.0, 1.0 / std::sqrt(static_cast<double>(np)));
    std::normal_distribution<double> out_init(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
    m.w1.resize(hidden * np);
    for (auto& w : m.w1) w = in_init(rng);
    m.b1.assign(hidden, 0.0);
    m.w2.resize(hidden);
    for (auto& w : m.w2) w = out_init(rng);
    m.b2 = 0.0;
    m.log_sigma = 0.0;
    slot_[node] = static_cast<int>(mechanisms_.size());
    mechanisms_.push_back(std::move(m));
  }
}

const Mechanism* MechanismSet::mechanism(int node) const {
  const int s = slot_.at(node);
  return s < 0 ? nullptr : &mechanisms_[s];
}

Mechanism* MechanismSet::mechanism(int node) {
  const int s = slot_.at(node);
  return s < 0 ? nullptr : &mechanisms_[s];
}

double MechanismSet::sigma(int node) const {
  const auto* m = mechanism(node);
  if (!m) throw ConfigError("root node " + graph_.names()[node] + " has no noise scale");
  return std::max(std::exp(m->log_sigma), sigma_floor_);
}

std::vector<double> MechanismSet::parameters() const {
  std::vector<double> flat;
  for (const auto& m : mechanisms_) {
    flat.insert(flat.end(), m.w1.begin(), m.w1.end());
    flat.insert(flat.end(), m.b1.begin(), m.b1.end());
    flat.insert(flat.end(), m.w2.begin(), m.w2.end());
    flat.push_back(m.b2);
    flat.push_back(m.log_sigma);
  }
  return flat;
}

void MechanismSet::set_parameters(std::span<const double> flat) {
  std::size_t o = 0;
  auto take = [&](std::vector<double>& dst) {
    if (o + dst.size() > flat.size()) throw ShapeError("parameter vector too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(o), dst.size(), dst.begin());
    o += dst.size();
  };
  for (auto& m : mechanisms_) {
    take(m.w1);
    take(m.b1);
    take(m.w2);
    if (o + 2 > flat.size()) throw ShapeError("parameter vector too short");
    m.b2 = flat[o++];
    m.log_sigma = flat[o++];
  }
  if (o != flat.size()) throw ShapeError("parameter vector too long");
}

std::vector<double> MechanismSet::decay_mask() const {
  std::vector<double> mask;
  for (const auto& m : mechanisms_) {
    mask.insert(mask.end(), m.w1.size(), 1.0);
    mask.insert(mask.end(), m.b1.size(), 0.0);
    mask.insert(mask.end(), m.w2.size(), 1.0);
    mask.push_back(0.0);
    mask.push_back(0.0);
  }
  return mask;
}

nlohmann::json MechanismSet::to_json() const {
  nlohmann::json j;
  j["format"] = "cfdiff.mechanisms";
  j["format_version"] = kMechanismFormatVersion;
  j["graph"] = {{"names", graph_.names()}, {"adjacency", graph_.adjacency()}};
  j["sigma_floor"] = sigma_floor_;
  auto& arr = j["mechanisms"] = nlohmann::json::array();
  for (const auto& m : mechanisms_) {
    arr.push_back({{"node", m.node},
                   {"parents", m.parents},
                   {"hidden", m.hidden},
                   {"w1", m.w1},
                   {"b1", m.b1},
                   {"w2", m.w2},
                   {"b2", m.b2},
                   {"log_sigma", m.log_sigma}});
  }
  return j;
}

MechanismSet MechanismSet::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cfdiff.mechanisms") throw IOError("not a mechanism checkpoint");
  if (j.value("format_version", -1) != kMechanismFormatVersion) {
    throw IOError("unsupported mechanism checkpoint version " + j.value("format_version", nlohmann::json()).dump());
  }
  MechanismSet s;
  s.graph_ = validate_graph(j.at("graph").at("adjacency").get<std::vector<std::vector<int>>>(),
                            j.at("graph").at("names").get<std::vector<std::string>>());
  s.sigma_floor_ = j.at("sigma_floor").get<double>();
  s.slot_.assign(s.graph_.size(), -1);
  for (const auto& e : j.at("mechanisms")) {
    Mechanism m;
    m.node = e.at("node").get<int>();
    m.parents = e.at("parents").get<std::vector<int>>();
    m.hidden = e.at("hidden").get<int>();
    m.w1 = e.at("w1").get<std::vector<double>>();
    m.b1 = e.at("b1").get<std::vector<double>>();
    m.w2 = e.at("w2").get<std::vector<double>>();
    m.b2 = e.at("b2").get<double>();
    m.log_sigma = e.at("log_sigma").get<double>();
    if (m.parents != s.graph_.parents(m.node) || m.w1.size() != m.parents.size() * m.hidden ||
        m.b1.size() != static_cast<std::size_t>(m.hidden) || m.w2.size() != static_cast<std::size_t>(m.hidden)) {
      throw IOError("mechanism checkpoint inconsistent with its graph");
    }
    s.slot_[m.node] = static_cast<int>(s.mechanisms_.size());
    s.mechanisms_.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < s.graph_.size(); ++i) {
    if (!s.graph_.is_root(static_cast<int>(i)) && s.slot_[i] < 0) {
      throw IOError("mechanism checkpoint is missing node " + s.graph_.names()[i]);
    }
  }
  return s;
}

void save_mechanisms(const MechanismSet& mechs, const std::filesystem::path& path) {
  write_text_file(path, mechs.to_json().dump(1) + "\n");
}

MechanismSet load_mechanisms(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IOError("malformed mechanism checkpoint " + path.string() + ": " + e.what());
  }
  return MechanismSet::from_json(j);
}

// ---------------------------------------------------------------- likelihood

double nll_loss(const MechanismSet& mechs, std::span<const AttributeVector> data) {
  check_dataset(mechs.graph(), data);
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return evaluate_loss_and_grad(mechs, data, rows, nullptr);
}

std::vector<double> nll_gradient(const MechanismSet& mechs, std::span<const AttributeVector> data) {
  check_dataset(mechs.graph(), data);
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  std::vector<double> grad(mechs.parameters().size(), 0.0);
  evaluate_loss_and_grad(mechs, data, rows, &grad);
  return grad;
}

MechanismSet fit_mechanisms(const CausalGraph& graph, std::span<const AttributeVector> data,
                            const FitConfig& config, FitReport* report) {
  check_dataset(graph, data);
  if (config.steps < 0 || config.batch_size <= 0 || config.eval_every <= 0) {
    throw ConfigError("fit: steps, batch_size and eval_every must be positive");
  }
  MechanismSet mechs(graph, config.hidden, config.sigma_floor, config.seed);
  auto params = mechs.parameters();
  AdamW opt(params.size(), config.learning_rate, config.weight_decay, mechs.decay_mask());

  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<std::size_t> batch(static_cast<std::size_t>(config.batch_size));
  std::vector<double> grad(params.size());
  const double log_floor = std::log(config.sigma_floor);

  FitReport local;
  FitReport& rep = report ? *report : local;
  rep = FitReport{};
  auto best_params = params;
  double best = evaluate_loss_and_grad(mechs, data, all, nullptr);
  rep.loss_curve.emplace_back(0, best);
  rep.best_so_far.push_back(best);

  for (int step = 1; step <= config.steps; ++step) {
    for (auto& b : batch) b = pick(rng);
    std::fill(grad.begin(), grad.end(), 0.0);
    evaluate_loss_and_grad(mechs, data, batch, &grad);
    opt.step(params, grad);
    // Project log sigma back onto the floor.
    std::size_t o = 0;
    for (const auto& m : mechs.mechanisms()) {
      o += m.num_parameters();
      params[o - 1] = std::max(params[o - 1], log_floor);
    }
    mechs.set_parameters(params);

    if (step % config.eval_every == 0 || step == config.steps) {
      const double loss = evaluate_loss_and_grad(mechs, data, all, nullptr);
      if (!std::isfinite(loss)) throw DivergenceError("mechanism loss became non-finite at step " + std::to_string(step));
      rep.loss_curve.emplace_back(step, loss);
      if (loss < best) {
        best = loss;
        best_params = params;
      }
      rep.best_so_far.push_back(best);
    }
  }
  mechs.set_parameters(best_params);
  rep.best_loss = best;
  if (best > config.warn_loss) {
    rep.convergence_warning = true;
    log::warn("mechanism fit: final loss {:.4f} exceeds threshold {:.4f}", best, config.warn_loss);
  }
  return mechs;
}

// ---------------------------------------------------------------- counterfactuals

ExogenousNoise abduct_noise(const MechanismSet& mechs, const AttributeVector& observed) {
  const auto& g = mechs.graph();
  if (observed.size() != g.size()) throw ShapeError("observed attribute vector has wrong size");
  ExogenousNoise noise;
  noise.u.resize(g.size());
  for (const auto& m : mechs.mechanisms()) noise.u[m.node] = observed[m.node] - m.predict(observed);
  return noise;
}

std::map<int, double> resolve_interventions(const CausalGraph& graph, const Interventions& interventions) {
  std::map<int, double> out;
  for (const auto& [name, value] : interventions) {
    const int idx = graph.index_of(name);
    if (!(value >= -1.0 && value <= 1.0)) {
      throw OutOfRangeError("intervention " + name + "=" + std::to_string(value) + " outside [-1, 1]");
    }
    out[idx] = value;
  }
  return out;
}

AttributeVector propagate(const MechanismSet& mechs, const AttributeVector& observed, const ExogenousNoise& noise,
                          const std::map<int, double>& interventions, const EvaluationObserver& observer) {
  const auto& g = mechs.graph();
  if (observed.size() != g.size() || noise.u.size() != g.size()) throw ShapeError("propagate: size mismatch");
  AttributeVector out = observed;
  for (int node : g.topo_order()) {
    if (auto it = interventions.find(node); it != interventions.end()) {
      out[node] = it->second;
    } else if (const auto* m = mechs.mechanism(node)) {
      const bool parents_unchanged = std::all_of(m->parents.begin(), m->parents.end(),
                                                 [&](int p) { return out[p] == observed[p]; });
      if (!parents_unchanged) {
        const double u = noise.u[node].value_or(0.0);
        double v = m->predict(out) + u;
        if (v < -1.0 || v > 1.0) {
          log::warn("counterfactual value {:.4f} for '{}' clamped to [-1, 1]", v, g.names()[node]);
          v = std::clamp(v, -1.0, 1.0);
        }
        out[node] = v;
      }
    }
    if (observer) observer(node);
  }
  return out;
}

AttributeVector counterfactual_attributes(const MechanismSet& mechs, const AttributeVector& observed,
                                          const Interventions& interventions, const EvaluationObserver& observer) {
  const auto resolved = resolve_interventions(mechs.graph(), interventions);
  return propagate(mechs, observed, abduct_noise(mechs, observed), resolved, observer);
}

}  // namespace cfdiff::scm
