#include "cfdiff/pendulum.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "cfdiff/errors.hpp"
#include "cfdiff/util.hpp"

namespace cfdiff::pendulum {

namespace {

constexpr double kDomainTol = 1e-9;

struct Rgb {
  float r, g, b;
};

constexpr Rgb kBackground{0.90f, 0.92f, 0.95f};
constexpr Rgb kGround{0.45f, 0.55f, 0.40f};
constexpr Rgb kShadow{0.10f, 0.10f, 0.12f};
constexpr Rgb kRod{0.35f, 0.20f, 0.10f};
constexpr Rgb kBob{0.15f, 0.25f, 0.75f};
constexpr Rgb kLight{1.00f, 0.85f, 0.10f};

// Coverage of a shape at signed distance `d` (pixels, negative inside) with a
// one-pixel linear edge ramp.
double coverage(double d) { return std::clamp(0.5 - d, 0.0, 1.0); }

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

void blend(Rgb& dst, const Rgb& src, double alpha) {
  const auto a = static_cast<float>(alpha);
  dst.r += a * (src.r - dst.r);
  dst.g += a * (src.g - dst.g);
  dst.b += a * (src.b - dst.b);
}

int split_id(const std::string& split) {
  if (split == "train") return 0;
  if (split == "val") return 1;
  if (split == "test") return 2;
  throw ConfigError("unknown split '" + split + "'");
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

double project_to_floor(Point p, double light_x) {
  if (p.y >= kLightY) throw DomainError("scene point at or above the light height");
  return light_x + (p.x - light_x) * (kLightY - kFloorY) / (kLightY - p.y);
}

Point bob_position(double angle) { return {kPivotX + kLength * std::sin(angle), kPivotY - kLength * std::cos(angle)}; }

Shadow derive_shadow(double angle, double light_x) {
  if (!(std::abs(angle) <= kMaxAngle + kDomainTol)) throw DomainError("pendulum angle outside [-pi/4, pi/4]");
  if (!(light_x >= kLightMin - kDomainTol && light_x <= kLightMax + kDomainTol)) {
    throw DomainError("light position outside [0.25, 0.75]");
  }
  const double xp = project_to_floor({kPivotX, kPivotY}, light_x);
  const double xb = project_to_floor(bob_position(angle), light_x);
  return {std::abs(xb - xp), 0.5 * (xb + xp)};
}

SceneParams SceneParams::from_causes(double angle, double light_x) {
  const auto s = derive_shadow(angle, light_x);
  return {angle, light_x, s.length, s.position};
}

void RenderConfig::validate() const {
  if (height <= 0 || width <= 0) throw ConfigError("render dimensions must be positive");
  if (supersample <= 0) throw ConfigError("supersample factor must be positive");
  if (shadow_thickness_px <= 0.0) throw ConfigError("shadow thickness must be positive");
  if (!(view_x1 > view_x0) || !(view_y1 > view_y0)) throw ConfigError("empty render viewport");
}

nlohmann::json RenderConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"supersample", supersample},
          {"shadow_thickness_px", shadow_thickness_px},
          {"viewport", {view_x0, view_x1, view_y0, view_y1}}};
}

RenderConfig RenderConfig::from_json(const nlohmann::json& j) {
  RenderConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.supersample = j.at("supersample").get<int>();
  c.shadow_thickness_px = j.at("shadow_thickness_px").get<double>();
  const auto v = j.at("viewport").get<std::vector<double>>();
  if (v.size() != 4) throw ConfigError("render viewport needs 4 numbers");
  c.view_x0 = v[0];
  c.view_x1 = v[1];
  c.view_y0 = v[2];
  c.view_y1 = v[3];
  c.validate();
  return c;
}

std::string RenderConfig::hash() const { return sha256_hex(to_json().dump()); }

Image render_scene(const SceneParams& scene, const RenderConfig& config) {
  config.validate();
  const int H = config.height, W = config.width;
  const double sx = W / (config.view_x1 - config.view_x0);
  const double sy = H / (config.view_y1 - config.view_y0);
  auto to_px = [&](Point p) { return Point{(p.x - config.view_x0) * sx, (config.view_y1 - p.y) * sy}; };

  const Point pivot = to_px({kPivotX, kPivotY});
  const Point bob = to_px(bob_position(scene.angle));
  const Point light = to_px({scene.light_x, kLightY});
  const double floor_py = (config.view_y1 - kFloorY) * sy;
  const double half_len = 0.5 * scene.shadow_length * sx;
  const double shadow_cx = (scene.shadow_position - config.view_x0) * sx;
  const double shadow_cy = floor_py + 0.5 * config.shadow_thickness_px;
  const double shadow_hy = 0.5 * config.shadow_thickness_px;

  const double rod_half = 0.03 * H;
  const double bob_radius = 0.06 * H;
  const double light_radius = 0.07 * H;

  Image img(H, W);
  const int ss = config.supersample;
  const double inv = 1.0 / (ss * ss);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int a = 0; a < ss; ++a) {
        for (int b = 0; b < ss; ++b) {
          const double x = c + (b + 0.5) / ss;
          const double y = r + (a + 0.5) / ss;
          Rgb col = kBackground;
          blend(col, kGround, coverage(floor_py - y));
          const double box = std::max(std::abs(x - shadow_cx) - half_len, std::abs(y - shadow_cy) - shadow_hy);
          blend(col, kShadow, coverage(box));
          blend(col, kRod, coverage(segment_distance(x, y, pivot.x, pivot.y, bob.x, bob.y) - rod_half));
          blend(col, kBob, coverage(std::hypot(x - bob.x, y - bob.y) - bob_radius));
          blend(col, kLight, coverage(std::hypot(x - light.x, y - light.y) - light_radius));
          acc[0] += col.r;
          acc[1] += col.g;
          acc[2] += col.b;
        }
      }
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>(acc[ch] * inv);
    }
  }
  return img;
}

scm::Normalizer attribute_normalizer() {
  // Shadow length and position are monotone in the angle and affine in the
  // light position, so their extrema sit on the corners of the domain.
  double sl_max = 0.0;
  double sp_min = 1e300, sp_max = -1e300;
  for (double a : {-kMaxAngle, kMaxAngle}) {
    for (double l : {kLightMin, kLightMax}) {
      const auto s = derive_shadow(a, l);
      sl_max = std::max(sl_max, s.length);
      sp_min = std::min(sp_min, s.position);
      sp_max = std::max(sp_max, s.position);
    }
  }
  return scm::Normalizer({{-kMaxAngle, kMaxAngle}, {kLightMin, kLightMax}, {0.0, sl_max}, {sp_min, sp_max}});
}

std::string causal_graph_text() {
  return "# pendulum world\n"
         "pendulum_angle\n"
         "light_x\n"
         "shadow_length\n"
         "shadow_position\n"
         "pendulum_angle -> shadow_length\n"
         "light_x -> shadow_length\n"
         "pendulum_angle -> shadow_position\n"
         "light_x -> shadow_position\n";
}

scm::CausalGraph causal_graph() { return scm::parse_graph(causal_graph_text()); }

SceneParams sample_scene(std::uint64_t seed, const std::string& split, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split_id(split)), static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  const double angle = -kMaxAngle + 2.0 * kMaxAngle * uniform01(rng);
  const double light = kLightMin + (kLightMax - kLightMin) * uniform01(rng);
  return SceneParams::from_causes(angle, light);
}

SceneParams scene_from_normalized_causes(double angle_norm, double light_norm) {
  const auto norm = attribute_normalizer();
  const double angle = std::clamp(norm.denormalize(0, angle_norm), -kMaxAngle, kMaxAngle);
  const double light = std::clamp(norm.denormalize(1, light_norm), kLightMin, kLightMax);
  return SceneParams::from_causes(angle, light);
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format_version"] = kManifestFormatVersion;
  j["splits"] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
  j["attribute_names"] = std::vector<std::string>(kAttributeNames.begin(), kAttributeNames.end());
  auto& norm = j["normalization"] = nlohmann::json::array();
  for (std::size_t i = 0; i < normalization.size(); ++i) {
    norm.push_back({{"name", kAttributeNames[i]}, {"min", normalization[i].min}, {"max", normalization[i].max}});
  }
  j["seed"] = seed;
  j["render_config"] = render.to_json();
  j["render_config_hash"] = render.hash();
  auto& files_json = j["files"] = nlohmann::json::array();
  for (const auto& f : files) {
    files_json.push_back({{"path", f.path},
                          {"split", f.split},
                          {"attributes_native", f.attributes_native},
                          {"attributes_normalized", f.attributes_normalized}});
  }
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  if (j.value("format_version", -1) != kManifestFormatVersion) throw IOError("unsupported manifest version");
  DatasetManifest m;
  m.n_train = j.at("splits").at("train").get<int>();
  m.n_val = j.at("splits").at("val").get<int>();
  m.n_test = j.at("splits").at("test").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.render = RenderConfig::from_json(j.at("render_config"));
  for (const auto& n : j.at("normalization")) m.normalization.push_back({n.at("min").get<double>(), n.at("max").get<double>()});
  for (const auto& f : j.at("files")) {
    m.files.push_back({f.at("path").get<std::string>(), f.at("split").get<std::string>(),
                       f.at("attributes_native").get<std::array<double, 4>>(),
                       f.at("attributes_normalized").get<std::array<double, 4>>()});
  }
  return m;
}

std::vector<const FileEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const FileEntry*> out;
  for (const auto& f : files) {
    if (f.split == name) out.push_back(&f);
  }
  return out;
}

DatasetManifest generate_dataset(const std::filesystem::path& out, int n_train, int n_val, int n_test,
                                 std::uint64_t seed, const RenderConfig& render) {
  if (n_train <= 0 || n_val <= 0 || n_test <= 0) throw ConfigError("split sizes must be positive");
  render.validate();
  DatasetManifest manifest;
  manifest.n_train = n_train;
  manifest.n_val = n_val;
  manifest.n_test = n_test;
  manifest.seed = seed;
  manifest.render = render;
  const auto norm = attribute_normalizer();
  manifest.normalization = norm.ranges();

  for (const auto& [split, n] : {std::pair<std::string, int>{"train", n_train}, {"val", n_val}, {"test", n_test}}) {
    for (int i = 0; i < n; ++i) {
      const auto scene = sample_scene(seed, split, i);
      char name[32];
      std::snprintf(name, sizeof(name), "%06d.png", i);
      const std::string rel = split + "/" + name;
      write_png(out / rel, render_scene(scene, render));
      FileEntry e;
      e.path = rel;
      e.split = split;
      e.attributes_native = scene.native();
      const auto normalized = norm.normalize(e.attributes_native);
      std::copy(normalized.begin(), normalized.end(), e.attributes_normalized.begin());
      manifest.files.push_back(std::move(e));
    }
  }
  write_text_file(out / "manifest.json", manifest.to_json().dump(1) + "\n");
  write_text_file(out / "graph.txt", causal_graph_text());
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir) {
  const auto path = dataset_dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw DependencyError("dataset manifest not found: " + path.string());
  try {
    return DatasetManifest::from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw IOError("malformed manifest " + path.string() + ": " + e.what());
  }
}

std::vector<Sample> load_split(const std::filesystem::path& dataset_dir, const DatasetManifest& manifest,
                               const std::string& split, int limit) {
  std::vector<Sample> out;
  for (const auto* f : manifest.split(split)) {
    if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
    Sample s;
    s.image = read_png(dataset_dir / f->path);
    s.attributes.assign(f->attributes_normalized.begin(), f->attributes_normalized.end());
    const auto& n = f->attributes_native;
    s.scene = {n[0], n[1], n[2], n[3]};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cfdiff::pendulum
