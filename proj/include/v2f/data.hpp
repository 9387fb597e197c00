#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "v2f/geometry.hpp"
#include "v2f/hash.hpp"
#include "v2f/image.hpp"

namespace v2f::data {

/// Parameters of the synthetic crowded-scene generator.
struct SceneSpec {
  int width = 160;
  int height = 160;
  int count_min = 6;
  int count_max = 10;
  double height_min = 40;  ///< full-box height, pixels
  double height_max = 80;
  double aspect_min = 2.0;  ///< H / W
  double aspect_max = 2.6;
  double crowding = 0.8;  ///< probability that a pedestrian joins a cluster
  double noise = 0.08;    ///< background noise amplitude
  double min_visible_area = 16;
  double max_pair_iou = 0.8;  ///< near-duplicate placements are re-drawn
  int max_attempts = 200;

  /// Throws SpecInfeasible describing the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
/// Unknown keys are rejected with ConfigError.
void from_json(const nlohmann::json& j, SceneSpec& s);

struct GroundTruthPedestrian {
  Box visible;
  Box full;
  bool ignore = false;
};

struct SceneSample {
  std::string id;
  Image image;
  std::vector<GroundTruthPedestrian> pedestrians;
  std::uint64_t seed = 0;
};

/// Tight bounding box of (full minus the union of occluders) restricted to the
/// image, evaluated on the unit-pixel raster (pixel (x, y) belongs to a box
/// when its center does). Absent when fewer than min_area pixels remain.
std::optional<Box> occlusion_visible_box(const Box& full, std::span<const Box> occluders, ImageBounds bounds,
                                         double min_area = 16);

/// Deterministic in (spec, seed).
SceneSample generate_scene(const SceneSpec& spec, std::uint64_t seed);

struct OdgtRecord {
  std::string id;
  std::vector<GroundTruthPedestrian> pedestrians;
};

std::vector<OdgtRecord> load_odgt(const std::filesystem::path& path);
std::vector<OdgtRecord> parse_odgt(std::istream& in);
std::string odgt_line(const OdgtRecord& record);

/// Dataset directory: images/<id>.png, annotations.odgt, manifest.json.
struct DatasetManifest {
  SceneSpec spec;
  std::uint64_t root_seed = 0;
  std::vector<std::uint64_t> seeds;
  std::string spec_hash;
};

/// Seed of the i-th scene generated from a root seed.
std::uint64_t scene_seed(std::uint64_t root_seed, std::size_t index);

std::vector<SceneSample> generate_dataset(const SceneSpec& spec, std::uint64_t root_seed, std::size_t count);
void write_dataset(const std::filesystem::path& dir, const SceneSpec& spec, std::uint64_t root_seed,
                   std::span<const SceneSample> samples);
std::vector<SceneSample> load_dataset(const std::filesystem::path& dir);

}  // namespace v2f::data
