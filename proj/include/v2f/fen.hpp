#pragma once

#include <span>
#include <string>
#include <vector>

#include "v2f/data.hpp"
#include "v2f/netcore.hpp"

namespace v2f::fen {

using nn::FeatureMap;
using nn::Mat;
using nn::ModelParams;
using nn::ParamMap;

struct AssignmentResult {
  enum class Status { Negative, Positive };
  Status status = Status::Negative;
  int gt_index = -1;

  bool positive() const { return status == Status::Positive; }
};

/// vdt -> vgt: negative when IoU(v, v_i*) < threshold for every non-ignore
/// ground truth, otherwise positive on the argmax (lowest index on ties).
AssignmentResult assign_visible_to_gt(const Box& v, std::span<const data::GroundTruthPedestrian> gts,
                                      double threshold = 0.5);

/// Same rule against arbitrary reference boxes.
AssignmentResult assign_to_boxes(const Box& b, std::span<const Box> refs, double threshold = 0.5);

/// Head output for a batch of input boxes.
struct HeadOutput {
  Mat deltas;    ///< 4 x N full-body offsets relative to the input box
  Mat features;  ///< d_p x N transformed features shared with the part module
};

struct HeadCache {
  std::vector<nn::RoiSampling> plans;
  nn::TwoFcCache fc;
};

/// RoI-Align -> affine(fc_width) + rectifier -> affine(d_p) + rectifier ->
/// affine(4). `prefix` selects the parameter group ("fen" or "refine").
HeadOutput head_forward(const FeatureMap& fm, std::span<const Box> boxes, const ModelParams& params,
                        const std::string& prefix = "fen", HeadCache* cache = nullptr);

/// Backpropagates d(deltas) and an extra gradient on the shared features.
void head_backward(const HeadCache& cache, const Mat& ddeltas, const Mat& dfeatures, const ModelParams& params,
                   const std::string& prefix, ParamMap& grads, Mat& dfm);

struct Estimate {
  std::vector<Box> full;
  Mat features;
};

/// Full boxes decoded from each input box and clipped to the image. An input
/// whose decode collapses keeps the input box itself.
Estimate fen_estimate(const FeatureMap& fm, std::span<const Box> visible, ImageBounds bounds,
                      const ModelParams& params, const std::string& prefix = "fen");

/// Mean over samples of the summed smooth-L1 between predicted offsets
/// (4 x N) and encode_offsets(visible, gt_full). Throws EmptyBatch when N = 0.
double fen_loss(const Mat& pred, std::span<const Box> visible, std::span<const Box> gt_full, double beta,
                double weight = 1.0, Mat* dpred = nullptr);

}  // namespace v2f::fen
