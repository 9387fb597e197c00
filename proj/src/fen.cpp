#include "v2f/fen.hpp"

#include "v2f/errors.hpp"
#include "v2f/vdn.hpp"

namespace v2f::fen {

AssignmentResult assign_to_boxes(const Box& b, std::span<const Box> refs, double threshold) {
  AssignmentResult r;
  double best = -1;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const double v = iou(b, refs[i]);
    if (v > best) {
      best = v;
      r.gt_index = static_cast<int>(i);
    }
  }
  if (r.gt_index < 0 || best < threshold) return {};
  r.status = AssignmentResult::Status::Positive;
  return r;
}

AssignmentResult assign_visible_to_gt(const Box& v, std::span<const data::GroundTruthPedestrian> gts,
                                      double threshold) {
  std::vector<Box> refs;
  std::vector<int> index;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].ignore) continue;
    refs.push_back(gts[i].visible);
    index.push_back(static_cast<int>(i));
  }
  AssignmentResult r = assign_to_boxes(v, refs, threshold);
  if (r.positive()) r.gt_index = index[static_cast<std::size_t>(r.gt_index)];
  return r;
}

HeadOutput head_forward(const FeatureMap& fm, std::span<const Box> boxes, const ModelParams& params,
                        const std::string& prefix, HeadCache* cache) {
  const auto& p = params.values;
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  const Mat pooled = nn::roi_align_batch(fm, boxes, params.arch.roi_size, cache ? &c.plans : nullptr);
  HeadOutput out;
  out.features = nn::two_fc_forward(p, prefix, pooled, c.fc);
  out.deltas = nn::linear_forward(p.at(prefix + ".reg.w"), p.at(prefix + ".reg.b"), out.features);
  return out;
}

void head_backward(const HeadCache& cache, const Mat& ddeltas, const Mat& dfeatures, const ModelParams& params,
                   const std::string& prefix, ParamMap& grads, Mat& dfm) {
  const auto& p = params.values;
  Mat dh = nn::linear_backward(p.at(prefix + ".reg.w"), cache.fc.h2, ddeltas, grads.at(prefix + ".reg.w"),
                               grads.at(prefix + ".reg.b"));
  if (dfeatures.size() > 0) dh += dfeatures;
  const Mat dpooled = nn::two_fc_backward(p, prefix, cache.fc, std::move(dh), grads);
  nn::roi_align_backward(cache.plans, dpooled, static_cast<int>(dfm.rows()), dfm);
}

Estimate fen_estimate(const FeatureMap& fm, std::span<const Box> visible, ImageBounds bounds,
                      const ModelParams& params, const std::string& prefix) {
  Estimate e;
  if (visible.empty()) {
    e.features = Mat(params.arch.part_dim, 0);
    return e;
  }
  HeadOutput out = head_forward(fm, visible, params, prefix);
  for (std::size_t i = 0; i < visible.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    try {
      e.full.push_back(decode_offsets(
          visible[i], {out.deltas(0, col), out.deltas(1, col), out.deltas(2, col), out.deltas(3, col)}, bounds));
    } catch (const DegenerateBox&) {
      e.full.push_back(visible[i]);
    }
  }
  e.features = std::move(out.features);
  return e;
}

double fen_loss(const Mat& pred, std::span<const Box> visible, std::span<const Box> gt_full, double beta,
                double weight, Mat* dpred) {
  if (visible.empty()) throw EmptyBatch("full-body regression loss needs at least one positive sample");
  if (visible.size() != gt_full.size() || pred.cols() != static_cast<Eigen::Index>(visible.size()) ||
      pred.rows() != 4) {
    throw ShapeMismatch("fen_loss inputs disagree in size");
  }
  std::vector<OffsetVector> targets;
  std::vector<int> cols;
  for (std::size_t i = 0; i < visible.size(); ++i) {
    targets.push_back(encode_offsets(visible[i], gt_full[i]));
    cols.push_back(static_cast<int>(i));
  }
  return vdn::regression_loss(pred, targets, cols, beta, weight, dpred);
}

}  // namespace v2f::fen
