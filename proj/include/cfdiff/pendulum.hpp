#pragma once

// Procedural pendulum world: a pendulum hanging from a fixed pivot, a point
// light moving along the top edge, and the shadow the pendulum casts on the
// floor. Shadow length and position are exact functions of angle and light.

#include <array>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdiff/image.hpp"
#include "cfdiff/scm.hpp"

namespace cfdiff::pendulum {

inline constexpr double kPivotX = 0.5;
inline constexpr double kPivotY = 0.8;
inline constexpr double kLength = 0.25;
inline constexpr double kLightY = 1.0;
inline constexpr double kFloorY = 0.2;
inline constexpr double kMaxAngle = std::numbers::pi / 4.0;
inline constexpr double kLightMin = 0.25;
inline constexpr double kLightMax = 0.75;

/// Attribute order used everywhere: angle, light, shadow length, shadow position.
inline constexpr std::array<const char*, 4> kAttributeNames = {"pendulum_angle", "light_x", "shadow_length",
                                                               "shadow_position"};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Shadow {
  double length = 0.0;
  double position = 0.0;
};

/// Floor x-coordinate of the ray from the light through `p`.
/// Throws DomainError when p is at or above the light height.
double project_to_floor(Point p, double light_x);

Point bob_position(double angle);

/// Throws DomainError outside the angle / light ranges.
Shadow derive_shadow(double angle, double light_x);

struct SceneParams {
  double angle = 0.0;
  double light_x = 0.5;
  double shadow_length = 0.0;
  double shadow_position = 0.5;

  static SceneParams from_causes(double angle, double light_x);
  std::array<double, 4> native() const { return {angle, light_x, shadow_length, shadow_position}; }
};

struct RenderConfig {
  int height = 32;
  int width = 32;
  int supersample = 2;
  double shadow_thickness_px = 2.0;
  // World window shown in the image. It is wider than the unit square so
  // that every shadow endpoint in the sampled domain stays on-canvas.
  double view_x0 = -0.25;
  double view_x1 = 1.25;
  double view_y0 = 0.1;
  double view_y1 = 1.1;

  void validate() const;
  nlohmann::json to_json() const;
  static RenderConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Deterministic anti-aliased render; throws ConfigError on bad dimensions.
Image render_scene(const SceneParams& scene, const RenderConfig& config);

/// Exact min/max of each attribute over the sampled domain.
scm::Normalizer attribute_normalizer();

/// pendulum_angle, light_x -> shadow_length, shadow_position.
scm::CausalGraph causal_graph();
std::string causal_graph_text();

struct FileEntry {
  std::string path;  // relative to the dataset root
  std::string split;
  std::array<double, 4> attributes_native{};
  std::array<double, 4> attributes_normalized{};
};

struct DatasetManifest {
  int n_train = 5000;
  int n_val = 500;
  int n_test = 2000;
  std::uint64_t seed = 0;
  RenderConfig render;
  std::vector<scm::Range> normalization;
  std::vector<FileEntry> files;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  std::vector<const FileEntry*> split(const std::string& name) const;
};

inline constexpr int kManifestFormatVersion = 1;

/// Samples, renders and writes `<out>/<split>/<index>.png` plus
/// `<out>/manifest.json` and `<out>/graph.txt`. Fixed seed -> identical bytes.
DatasetManifest generate_dataset(const std::filesystem::path& out, int n_train, int n_val, int n_test,
                                 std::uint64_t seed, const RenderConfig& render);

/// The scene the generator draws for (split, index) under `seed`.
SceneParams sample_scene(std::uint64_t seed, const std::string& split, int index);

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir);

struct Sample {
  Image image;
  scm::AttributeVector attributes;  // normalized
  SceneParams scene;
};

std::vector<Sample> load_split(const std::filesystem::path& dataset_dir, const DatasetManifest& manifest,
                               const std::string& split, int limit = -1);

/// Scene for normalized (angle, light) causes, with shadows from physics.
SceneParams scene_from_normalized_causes(double angle_norm, double light_norm);

}  // namespace cfdiff::pendulum
