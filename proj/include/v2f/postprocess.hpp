#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "v2f/geometry.hpp"

namespace v2f {

/// A scored detection. Which boxes are present depends on the pipeline stage.
struct Detection {
  std::optional<Box> full;
  std::optional<Box> visible;
  double score = 0;
  std::optional<std::array<double, kNumParts>> part_scores;
};

enum class BoxKind { Full, Visible };

/// The box of the given kind; throws MissingBox when absent.
const Box& box_of(const Detection& d, BoxKind kind);

namespace post {

/// Greedy NMS. Sorts by score (ties keep input order), suppresses any
/// detection whose IoU on `kind` boxes with an already kept one is strictly
/// greater than `threshold`. Returns kept indices in score order.
std::vector<std::size_t> greedy_nms(std::span<const Detection> dets, BoxKind kind, double threshold);

/// Plain-box overload used for proposal suppression.
std::vector<std::size_t> greedy_nms(std::span<const Box> boxes, std::span<const double> scores, double threshold);

/// Order-preserving subset with score >= min_score.
std::vector<Detection> filter_by_score(std::span<const Detection> dets, double min_score);

}  // namespace post
}  // namespace v2f
