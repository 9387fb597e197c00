#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "v2f/geometry.hpp"
#include "v2f/image.hpp"
#include "v2f/netcore.hpp"
#include "v2f/rng.hpp"

namespace v2f::vdn {

using nn::FeatureMap;
using nn::Mat;
using nn::ModelParams;
using nn::ParamMap;

/// One anchor per (feature cell, ratio); index = (y * W + x) * |ratios| + r.
struct AnchorSet {
  std::vector<Box> boxes;
  int cells_h = 0, cells_w = 0, stride = 0;
  double base = 0, scale = 1;
  std::vector<double> ratios;
};

/// Anchor of ratio r (H/W) centered on each cell: h = base*scale*sqrt(r),
/// w = base*scale/sqrt(r).
AnchorSet generate_anchors(int cells_h, int cells_w, int stride, double base, double scale,
                           std::span<const double> ratios);

enum AnchorLabel : int { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct RpnTargets {
  std::vector<int> label;           ///< AnchorLabel per anchor
  std::vector<int> gt_index;        ///< best-IoU ground truth (-1 when none)
  std::vector<OffsetVector> target;  ///< meaningful for positives
};

struct RpnThresholds {
  double positive = 0.7;
  double negative = 0.3;
};

/// Positive when IoU >= positive threshold or the anchor attains some
/// ground truth's maximum IoU; negative when max IoU < negative threshold;
/// otherwise ignored. Positives regress toward their best-IoU ground truth,
/// ties broken by the lowest index.
RpnTargets assign_rpn_targets(const AnchorSet& anchors, std::span<const Box> gts, RpnThresholds thr = {});

/// Draws up to batch_size labelled entries with at most pos_fraction positives.
/// Returns indices; positives first.
std::vector<int> sample_labels(std::span<const int> labels, int batch_size, double pos_fraction, Rng& rng);

// ------------------------------------------------------------- RPN head

struct RpnOutput {
  Mat logits;  ///< A x (H*W)
  Mat deltas;  ///< 4A x (H*W)
};

struct RpnCache {
  nn::ConvCache conv;
  Mat hidden;
};

RpnOutput rpn_forward(const FeatureMap& fm, const ParamMap& p, RpnCache* cache = nullptr);
/// Returns d(features).
Mat rpn_backward(const RpnCache& cache, const Mat& dlogits, const Mat& ddeltas, const ParamMap& p, ParamMap& grads);

double anchor_logit(const RpnOutput& out, int anchor, int num_ratios);
OffsetVector anchor_delta(const RpnOutput& out, int anchor, int num_ratios);

struct ProposalConfig {
  int pre_nms_top = 2000;
  int post_nms_top = 256;
  double nms_threshold = 0.7;
  double min_size = 2.0;
};

struct Proposals {
  std::vector<Box> boxes;
  std::vector<double> scores;
};

/// Decodes, clips, drops tiny boxes, NMS at the configured IoU, keeps the top N.
Proposals generate_proposals(const AnchorSet& anchors, const RpnOutput& out, ImageBounds bounds,
                             const ProposalConfig& cfg);

// ---------------------------------------------------------- region head

/// RoI-Align(k) -> 2 FC + rectifier -> classification logit and box deltas.
struct RegionOutput {
  Mat logits;      ///< 1 x N
  Mat deltas;      ///< 4 x N, primary regression branch
  Mat deltas_aux;  ///< 4 x N, visible branch of the joint variant (else empty)
};

struct RegionCache {
  std::vector<nn::RoiSampling> plans;
  nn::TwoFcCache fc;
};

RegionOutput region_forward(const FeatureMap& fm, std::span<const Box> rois, const ModelParams& params,
                            RegionCache* cache = nullptr);
/// Accumulates into grads and dfm.
void region_backward(const RegionCache& cache, const Mat& dlogits, const Mat& ddeltas, const Mat& ddeltas_aux,
                     const ModelParams& params, ParamMap& grads, Mat& dfm);

// ------------------------------------------------------------------ loss

/// Sampled anchors with labels and regression targets.
struct AnchorBatch {
  std::vector<int> index;
  std::vector<int> label;
  std::vector<OffsetVector> target;
};

/// Sampled RoIs. target_aux holds the visible-box targets of the joint variant.
struct RoiBatch {
  std::vector<Box> boxes;
  std::vector<int> label;
  std::vector<int> gt_index;
  std::vector<OffsetVector> target;
  std::vector<OffsetVector> target_aux;
};

/// The four detector terms: RPN and region classification / regression.
struct VdnLoss {
  double cls1 = 0, reg1 = 0, cls2 = 0, reg2 = 0;
  double total() const { return cls1 + reg1 + cls2 + reg2; }
};

struct VdnLossWeights {
  double cls1 = 1, reg1 = 1, cls2 = 1, reg2 = 1;
};

struct VdnGrads {
  Mat rpn_dlogits, rpn_ddeltas;
  Mat region_dlogits, region_ddeltas;
};

/// Classification terms: mean binary cross-entropy over the sampled set.
/// Regression terms: smooth-L1 over positives divided by max(1, #positives).
VdnLoss vdn_loss(const RpnOutput& rpn, const AnchorBatch& anchors, int num_ratios, const RegionOutput& region,
                 const RoiBatch& rois, double beta, const VdnLossWeights& w = {}, VdnGrads* grads = nullptr);

/// Smooth-L1 between 4 x N predictions and targets over the given columns,
/// divided by max(1, count). Gradients (scaled by weight) written into dpred.
double regression_loss(const Mat& pred, std::span<const OffsetVector> targets, std::span<const int> columns,
                       double beta, double weight, Mat* dpred);

/// RoI assignment for the region head: positive when IoU >= fg_threshold with
/// the best ground truth (lowest index on ties), else negative.
struct RoiAssignment {
  std::vector<int> label;
  std::vector<int> gt_index;
};
RoiAssignment assign_rois(std::span<const Box> rois, std::span<const Box> gts, double fg_threshold = 0.5);

/// Region-head scores in [0, 1] for externally supplied boxes.
std::vector<double> score_given_boxes(const Image& image, std::span<const Box> boxes, const ModelParams& params);
std::vector<double> score_given_boxes(const FeatureMap& fm, std::span<const Box> boxes, const ModelParams& params);

// ------------------------------------------------------------- forward

struct VdnForwardConfig {
  ProposalConfig proposals;
};

/// Inference view: proposals plus region-head scores and decoded boxes.
struct VdnDetections {
  Proposals proposals;
  std::vector<double> scores;
  std::vector<Box> boxes;      ///< decoded primary branch (clipped), one per proposal
  std::vector<bool> valid;     ///< false where decoding degenerated
  std::vector<Box> aux_boxes;  ///< visible branch of the joint variant
};

AnchorSet anchors_for(const FeatureMap& fm, const nn::ArchConfig& arch);

VdnDetections vdn_forward(const FeatureMap& fm, ImageBounds bounds, const ModelParams& params,
                          const VdnForwardConfig& cfg);
VdnDetections vdn_forward(const Image& image, const ModelParams& params, const VdnForwardConfig& cfg);

}  // namespace v2f::vdn
