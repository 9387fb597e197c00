#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "v2f/data.hpp"
#include "v2f/epm.hpp"
#include "v2f/eval.hpp"
#include "v2f/fen.hpp"
#include "v2f/netcore.hpp"
#include "v2f/postprocess.hpp"
#include "v2f/rng.hpp"
#include "v2f/vdn.hpp"

namespace v2f::pipeline {

using nn::ModelParams;
using nn::Variant;

/// How many second-stage samples are drawn from the augmented box set:
/// min(cap, |V|) or the literal max(cap, |V|) (with replacement past |V|).
enum class SampleRule { Cap, LiteralMax };

struct TrainConfig {
  double alpha = 0.3;
  double beta = 1.0;
  epm::LabelMode label_mode = epm::LabelMode::Hard;
  epm::IoaDenominator ioa_denominator = epm::IoaDenominator::Visible;

  int epochs = 20;
  double learning_rate = 1e-3;
  std::vector<int> lr_decay_epochs{14, 18};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int warmup_iters = 0;
  double grad_clip = 0;  ///< global L2 clip, 0 disables
  int batch_size = 2;
  std::uint64_t seed = 0;

  int sample_cap = 1000;
  double positive_fraction = 0.9;
  SampleRule sample_rule = SampleRule::Cap;
  double assign_iou = 0.5;

  int rpn_batch = 256;
  double rpn_pos_fraction = 0.5;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  int rpn_pre_nms = 2000;
  int train_proposals = 256;
  double proposal_nms = 0.7;
  int roi_batch = 256;
  double roi_pos_fraction = 0.5;
  double roi_fg_iou = 0.5;
  bool add_gt_to_proposals = true;
  double smooth_l1_beta = 1.0 / 9.0;

  void validate() const;
};

struct InferConfig {
  int pre_nms_top = 2000;
  int proposals = 300;
  double proposal_nms = 0.7;
  double score_threshold = 0.05;
  int max_detections = 100;
  std::optional<BoxKind> nms_mode;  ///< unset: visible for V2F, full otherwise
  double nms_threshold = 0.5;

  BoxKind resolved_nms_mode(Variant v) const;
};

// ------------------------------------------------------------------ losses

struct LossBreakdown {
  double cls1 = 0, reg1 = 0, cls2 = 0, reg2 = 0;
  double fen = 0;  ///< full-body regression (or the variant's second-stage term)
  double epm = 0;
  double total = 0;

  double vdn() const { return cls1 + reg1 + cls2 + reg2; }
};

/// L_VDN + alpha * L_FEN + beta * L_EPM.
double total_loss(double l_vdn, double l_fen, double l_epm, double alpha, double beta);

/// Per-term multipliers used for backpropagation.
struct LossWeights {
  double cls1 = 1, reg1 = 1, cls2 = 1, reg2 = 1, fen = 0, epm = 0;

  static LossWeights from_config(const TrainConfig& cfg) { return {1, 1, 1, 1, cfg.alpha, cfg.beta}; }
  LossWeights scaled(double s) const { return {cls1 * s, reg1 * s, cls2 * s, reg2 * s, fen * s, epm * s}; }
};

// ---------------------------------------------------- second-stage samples

/// The augmented box set (detections plus ground-truth boxes, no NMS), its
/// assignments and the drawn subset.
struct TrainingBatchSamples {
  std::vector<Box> candidates;
  std::vector<fen::AssignmentResult> assignment;
  std::size_t num_detected = 0;        ///< leading candidates that came from the detector
  std::vector<std::size_t> sampled;    ///< indices into candidates
  std::vector<bool> positive;          ///< per sampled entry
};

/// Positives are drawn toward `positive_fraction` of the sample, backfilling
/// from the other class when one runs out. `kind` selects which ground-truth
/// box joins the set and drives assignment.
TrainingBatchSamples build_training_batch(std::span<const Box> detected,
                                          std::span<const data::GroundTruthPedestrian> gts, const TrainConfig& cfg,
                                          Rng& rng, BoxKind kind = BoxKind::Visible);

/// Every discrete choice made while computing an image's loss. Once filled,
/// replaying it makes the loss a smooth function of the parameters.
struct ImagePlan {
  bool ready = false;
  vdn::AnchorBatch anchors;
  vdn::RoiBatch rois;
  std::vector<Box> stage2_boxes;
  std::vector<int> stage2_gt;  ///< assigned ground truth or -1
  nn::Mat part_labels;         ///< 5 x |stage2|
};

/// Loss of one image. Fills `plan` on first use and replays it afterwards.
/// When grads is non-null, accumulates d(sum_k weight_k * term_k).
LossBreakdown image_loss(const ModelParams& params, const data::SceneSample& sample, const TrainConfig& cfg,
                         ImagePlan& plan, Rng& rng, const LossWeights& weights, nn::ParamMap* grads);

// ------------------------------------------------------------------ train

struct EpochLog {
  int epoch = 0;
  double learning_rate = 0;
  LossBreakdown mean;
  double seconds = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

/// SGD with momentum and weight decay, stepped decay. Deterministic in the
/// seed. Parameters owned by a loss term whose weight is zero are not updated.
/// Throws DivergedLoss on a non-finite loss.
TrainResult train(std::span<const data::SceneSample> dataset, const nn::ArchConfig& arch, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& progress = {});

std::string training_log_csv(std::span<const EpochLog> log);

// ------------------------------------------------------------------ infer

/// Variant-dispatched inference. V2F: detector -> NMS on visible boxes ->
/// full-body estimation, with no second NMS. The part module is never used.
std::vector<Detection> infer(const Image& image, const ModelParams& params, const InferConfig& cfg);

/// The stages after the detector: NMS and, for V2F and F2, the second head.
/// Candidates carry the detector's box (visible for V2F, full otherwise).
std::vector<Detection> finish_candidates(const nn::FeatureMap& fm, ImageBounds bounds, const ModelParams& params,
                                         const InferConfig& cfg, std::vector<Detection> candidates,
                                         std::vector<Detection>* suppressed = nullptr);

/// Inference plus the score-filtered candidates removed by NMS.
struct InferTrace {
  std::vector<Detection> kept;
  std::vector<Detection> suppressed;
};
InferTrace infer_trace(const Image& image, const ModelParams& params, const InferConfig& cfg);

/// Part responses of the given visible boxes (visualization only).
std::vector<epm::PartVector> part_scores(const Image& image, std::span<const Box> visible,
                                         const ModelParams& params);

enum class Diagnostic { PerfectVdn, PerfectVdnNms, PerfectFen };
std::string to_string(Diagnostic d);
Diagnostic diagnostic_from_string(const std::string& s);

/// All V2F evaluations of one image sharing a single feature extraction.
struct V2fAnalysis {
  std::vector<Detection> visible_nms;  ///< regular V2F
  std::vector<Detection> full_nms;     ///< estimation first, NMS on full boxes
  std::vector<Detection> perfect_vdn;
  std::vector<Detection> perfect_vdn_nms;
  std::vector<Detection> perfect_fen;
};
V2fAnalysis analyze_v2f(const data::SceneSample& sample, const ModelParams& params, const InferConfig& cfg);

std::vector<Detection> diagnostic_detections(Diagnostic mode, const data::SceneSample& sample,
                                             const ModelParams& params, const InferConfig& cfg);

/// Metrics of a diagnostic over a dataset at the given matching threshold.
eval::EvalMetrics run_diagnostic(Diagnostic mode, std::span<const data::SceneSample> dataset,
                                 const ModelParams& params, const InferConfig& cfg, double iou_threshold = 0.5);

/// Matches every image's detections and aggregates.
eval::EvalMetrics evaluate_detections(std::span<const std::vector<Detection>> dets,
                                      std::span<const data::SceneSample> dataset, double iou_threshold = 0.5,
                                      BoxKind kind = BoxKind::Full);

}  // namespace v2f::pipeline
