#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "support.hpp"
#include "v2f/data.hpp"
#include "v2f/fen.hpp"
#include "v2f/vdn.hpp"

namespace v2f::testing {

/// Anchor labelling rule on integer boxes with exact fractional IoU.
inline vdn::RpnTargets oracle_rpn(std::span<const Box> anchors, std::span<const Box> gts) {
  vdn::RpnTargets t;
  const std::size_t n = anchors.size();
  t.label.assign(n, vdn::kNegative);
  t.gt_index.assign(n, -1);
  t.target.assign(n, OffsetVector{});
  if (gts.empty()) return t;
  std::vector<std::vector<Ratio>> m(n, std::vector<Ratio>(gts.size()));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t g = 0; g < gts.size(); ++g) m[a][g] = exact_iou(anchors[a], gts[g]);
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < gts.size(); ++g)
      if (m[a][best] < m[a][g]) best = g;
    t.gt_index[a] = static_cast<int>(best);
    const Ratio v = m[a][best];
    bool pos = v.at_least(7, 10);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      bool is_max = m[a][g].num > 0;
      for (std::size_t o = 0; o < n; ++o) is_max = is_max && !(m[a][g] < m[o][g]);
      pos = pos || is_max;
    }
    if (pos) {
      t.label[a] = vdn::kPositive;
      t.target[a] = encode_offsets(anchors[a], gts[best]);
    } else {
      t.label[a] = v.at_least(3, 10) ? vdn::kIgnore : vdn::kNegative;
    }
  }
  return t;
}

inline vdn::AnchorSet anchor_set(std::vector<Box> boxes) {
  vdn::AnchorSet s;
  s.boxes = std::move(boxes);
  s.ratios = {1.0};
  return s;
}

/// Argmax over non-ignore ground truths (lowest index on ties), positive at IoU >= 1/2.
inline fen::AssignmentResult oracle_assign(const Box& v, std::span<const data::GroundTruthPedestrian> gts) {
  int best = -1;
  Ratio best_iou;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].ignore) continue;
    const Ratio r = exact_iou(v, gts[g].visible);
    if (best < 0 || best_iou < r) {
      best = static_cast<int>(g);
      best_iou = r;
    }
  }
  if (best < 0 || !best_iou.at_least(1, 2)) return {};
  return {fen::AssignmentResult::Status::Positive, best};
}

/// Greedy suppression characterized without simulating it: the kept set is
/// the unique subset S where a box (in score order, ties by index) belongs to
/// S exactly when no earlier member of S overlaps it by IoU > 1/2. Every one of
/// the 2^n subsets is tested; returns all that qualify, in score order.
inline std::vector<std::vector<std::size_t>> oracle_nms_fixed_points(std::span<const Box> boxes,
                                                                     std::span<const double> scores) {
  const std::size_t n = boxes.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::vector<bool>> overlaps(n, std::vector<bool>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Ratio r = exact_iou(boxes[i], boxes[j]);
      overlaps[i][j] = r.num * 2 > r.den;
    }
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    bool ok = true;
    for (std::size_t k = 0; k < n && ok; ++k) {
      bool blocked = false;
      for (std::size_t e = 0; e < k; ++e) blocked |= ((mask >> order[e]) & 1u) && overlaps[order[k]][order[e]];
      ok = (((mask >> order[k]) & 1u) != 0) == !blocked;
    }
    if (!ok) continue;
    std::vector<std::size_t> kept;
    for (std::size_t i : order)
      if ((mask >> i) & 1u) kept.push_back(i);
    out.push_back(kept);
  }
  return out;
}

}  // namespace v2f::testing
