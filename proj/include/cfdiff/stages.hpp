#pragma once

// Pipeline stages behind the CLI subcommands. Every stage reads its inputs
// from the run directory, checks their recorded hashes, writes its artifact
// and registers it in the MANIFEST.

#include <optional>
#include <string>
#include <vector>

#include "cfdiff/config.hpp"
#include "cfdiff/scm.hpp"

namespace cfdiff::stages {

void gen_data(const config::RunConfig& cfg);
void fit_scm(const config::RunConfig& cfg);
void train_backbone(const config::RunConfig& cfg);
void train_adapter(const config::RunConfig& cfg, const std::string& variant);
void train_evaluators(const config::RunConfig& cfg);

/// Writes the metric report for the configured variant to `out` (JSON plus a
/// `.txt` table next to it).
void evaluate(const config::RunConfig& cfg, const std::filesystem::path& out);

struct Traversal {
  std::string attribute;
  double start = -0.8;
  double stop = 0.8;
  int count = 5;
};

struct CounterfactualJob {
  std::filesystem::path image;
  /// Normalized factual attributes; looked up in the dataset manifest when
  /// the image is one of its files and this is empty.
  std::vector<double> attributes;
  scm::Interventions interventions;
  std::optional<Traversal> traverse;
  std::filesystem::path out;
};

/// Writes counterfactual.png, result.json and grid.png into job.out.
void counterfactual(const config::RunConfig& cfg, const CounterfactualJob& job);

struct AblationGrid {
  std::vector<std::string> variants{"plain", "pai", "pai+ctc"};
  bool attention_guidance_row = true;
  std::vector<double> alphas;
  std::vector<int> steps;
};

void ablate(const config::RunConfig& cfg, const AblationGrid& grid, const std::filesystem::path& out);

/// True when `name` is registered and its chain verifies.
bool is_current(const config::RunConfig& cfg, const std::string& name);

/// Runs every stage whose artifact is missing or stale, in dependency order,
/// for the listed adapter variants.
void ensure_pipeline(const config::RunConfig& cfg, const std::vector<std::string>& variants);

}  // namespace cfdiff::stages
