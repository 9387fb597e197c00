#include "v2f/postprocess.hpp"

#include <algorithm>
#include <numeric>

#include "v2f/errors.hpp"

namespace v2f {

const Box& box_of(const Detection& d, BoxKind kind) {
  const auto& b = kind == BoxKind::Full ? d.full : d.visible;
  if (!b) throw MissingBox(kind == BoxKind::Full ? "detection has no full box" : "detection has no visible box");
  return *b;
}

namespace post {

namespace {

std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::vector<std::size_t> greedy_nms(std::span<const Box> boxes, std::span<const double> scores, double threshold) {
  std::vector<std::size_t> kept;
  for (std::size_t i : score_order(scores)) {
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](std::size_t k) { return iou(boxes[k], boxes[i]) > threshold; });
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::vector<std::size_t> greedy_nms(std::span<const Detection> dets, BoxKind kind, double threshold) {
  std::vector<Box> boxes;
  std::vector<double> scores;
  boxes.reserve(dets.size());
  for (const Detection& d : dets) {
    boxes.push_back(box_of(d, kind));
    scores.push_back(d.score);
  }
  return greedy_nms(boxes, scores, threshold);
}

std::vector<Detection> filter_by_score(std::span<const Detection> dets, double min_score) {
  std::vector<Detection> out;
  std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
               [&](const Detection& d) { return d.score >= min_score; });
  return out;
}

}  // namespace post
}  // namespace v2f
