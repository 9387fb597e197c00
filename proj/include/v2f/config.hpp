#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "v2f/data.hpp"
#include "v2f/eval.hpp"
#include "v2f/netcore.hpp"
#include "v2f/pipeline.hpp"

namespace v2f::config {

/// A dataset on disk, or one generated on the fly from a scene spec.
struct DatasetSource {
  std::optional<std::filesystem::path> path;
  data::SceneSpec spec;
  std::size_t count = 0;
  std::uint64_t seed = 0;
};

std::vector<data::SceneSample> materialize(const DatasetSource& src);

struct ExperimentConfig {
  nn::ArchConfig arch;
  pipeline::TrainConfig train;
  pipeline::InferConfig infer;
  std::optional<DatasetSource> train_data;
  std::optional<DatasetSource> test_data;
  std::filesystem::path output_dir = "out";
  double match_iou = 0.5;
  std::vector<double> sweep_thresholds{std::begin(eval::kDefaultSweepValues), std::end(eval::kDefaultSweepValues)};
};

/// Anchor ratios (H/W) used when the arch section leaves them unset.
std::vector<double> default_anchor_ratios(nn::Variant v);

nlohmann::json to_json(const ExperimentConfig& c);

/// Builds a config from defaults overlaid with each layer in order (later
/// layers win, JSON merge-patch semantics). Unknown keys throw ConfigError.
ExperimentConfig resolve(std::span<const nlohmann::json> layers);
ExperimentConfig parse(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);

nlohmann::json to_json(const pipeline::TrainConfig& c);
nlohmann::json to_json(const pipeline::InferConfig& c);
pipeline::TrainConfig train_config_from_json(const nlohmann::json& j);
pipeline::InferConfig infer_config_from_json(const nlohmann::json& j);

}  // namespace v2f::config
