#include "v2f/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "v2f/errors.hpp"

namespace v2f::pipeline {

using nn::Mat;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid training config: " + m); };
  if (!(alpha >= 0) || !(beta >= 0)) fail("alpha and beta must be >= 0");
  if (!(positive_fraction > 0 && positive_fraction <= 1)) fail("positive_fraction must lie in (0, 1]");
  if (epochs < 0) fail("epochs must be >= 0");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (sample_cap < 0) fail("sample_cap must be >= 0");
  if (rpn_batch < 1 || roi_batch < 1 || train_proposals < 1) fail("sampling sizes must be positive");
  if (!(rpn_pos_fraction > 0 && rpn_pos_fraction <= 1) || !(roi_pos_fraction > 0 && roi_pos_fraction <= 1)) {
    fail("positive fractions must lie in (0, 1]");
  }
  if (!(smooth_l1_beta > 0)) fail("smooth_l1_beta must be positive");
  if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
}

BoxKind InferConfig::resolved_nms_mode(Variant v) const {
  if (nms_mode) return *nms_mode;
  return v == Variant::V2F ? BoxKind::Visible : BoxKind::Full;
}

double total_loss(double l_vdn, double l_fen, double l_epm, double alpha, double beta) {
  return l_vdn + alpha * l_fen + beta * l_epm;
}

namespace {

const Box& gt_box(const data::GroundTruthPedestrian& g, BoxKind kind) {
  return kind == BoxKind::Full ? g.full : g.visible;
}

fen::AssignmentResult assign_kind(const Box& b, std::span<const data::GroundTruthPedestrian> gts, BoxKind kind,
                                  double thr) {
  if (kind == BoxKind::Visible) return fen::assign_visible_to_gt(b, gts, thr);
  std::vector<Box> refs;
  std::vector<int> index;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].ignore) continue;
    refs.push_back(gts[i].full);
    index.push_back(static_cast<int>(i));
  }
  auto r = fen::assign_to_boxes(b, refs, thr);
  if (r.positive()) r.gt_index = index[static_cast<std::size_t>(r.gt_index)];
  return r;
}

std::vector<std::size_t> draw(const std::vector<std::size_t>& pool, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(count, pool.size())));
  while (out.size() < count && !pool.empty()) out.push_back(pool[static_cast<std::size_t>(rng.next() % pool.size())]);
  return out;
}

}  // namespace

TrainingBatchSamples build_training_batch(std::span<const Box> detected,
                                          std::span<const data::GroundTruthPedestrian> gts, const TrainConfig& cfg,
                                          Rng& rng, BoxKind kind) {
  TrainingBatchSamples b;
  b.candidates.assign(detected.begin(), detected.end());
  b.num_detected = detected.size();
  for (const auto& g : gts) {
    if (!g.ignore) b.candidates.push_back(gt_box(g, kind));
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < b.candidates.size(); ++i) {
    b.assignment.push_back(assign_kind(b.candidates[i], gts, kind, cfg.assign_iou));
    (b.assignment.back().positive() ? pos : neg).push_back(i);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const std::size_t total = b.candidates.size();
  const std::size_t cap = static_cast<std::size_t>(cfg.sample_cap);
  const std::size_t n = cfg.sample_rule == SampleRule::Cap ? std::min(cap, total) : (total ? std::max(cap, total) : 0);
  if (n == 0) return b;

  std::size_t n_pos, n_neg;
  const auto want_pos = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.positive_fraction));
  if (cfg.sample_rule == SampleRule::Cap) {
    n_pos = std::min(pos.size(), want_pos);
    n_neg = std::min(neg.size(), n - n_pos);
    if (n_pos + n_neg < n) n_pos = std::min(pos.size(), n - n_neg);
  } else {
    n_pos = pos.empty() ? 0 : (neg.empty() ? n : want_pos);
    n_neg = n - n_pos;
  }
  for (std::size_t i : draw(pos, n_pos, rng)) {
    b.sampled.push_back(i);
    b.positive.push_back(true);
  }
  for (std::size_t i : draw(neg, n_neg, rng)) {
    b.sampled.push_back(i);
    b.positive.push_back(false);
  }
  return b;
}

// ------------------------------------------------------------- image loss

LossBreakdown image_loss(const ModelParams& params, const data::SceneSample& sample, const TrainConfig& cfg,
                         ImagePlan& plan, Rng& rng, const LossWeights& weights, nn::ParamMap* grads) {
  const Variant variant = params.arch.variant;
  const ImageBounds bounds{static_cast<double>(sample.image.width), static_cast<double>(sample.image.height)};
  const BoxKind det_kind = variant == Variant::V2F ? BoxKind::Visible : BoxKind::Full;
  std::vector<Box> gt_det;
  std::vector<int> gt_det_index;
  for (std::size_t i = 0; i < sample.pedestrians.size(); ++i) {
    if (sample.pedestrians[i].ignore) continue;
    gt_det.push_back(gt_box(sample.pedestrians[i], det_kind));
    gt_det_index.push_back(static_cast<int>(i));
  }

  nn::BackboneCache backbone;
  const nn::FeatureMap fm = nn::extract_features(sample.image, params, grads ? &backbone : nullptr);
  const vdn::AnchorSet anchors = vdn::anchors_for(fm, params.arch);
  vdn::RpnCache rpn_cache;
  const vdn::RpnOutput rpn = vdn::rpn_forward(fm, params.values, &rpn_cache);
  const int nr = params.arch.num_anchors();

  if (!plan.ready) {
    const auto targets = vdn::assign_rpn_targets(anchors, gt_det, {cfg.rpn_pos_iou, cfg.rpn_neg_iou});
    plan.anchors = {};
    for (int a : vdn::sample_labels(targets.label, cfg.rpn_batch, cfg.rpn_pos_fraction, rng)) {
      plan.anchors.index.push_back(a);
      plan.anchors.label.push_back(targets.label[static_cast<std::size_t>(a)]);
      plan.anchors.target.push_back(targets.target[static_cast<std::size_t>(a)]);
    }
    const vdn::Proposals props = vdn::generate_proposals(
        anchors, rpn, bounds, {cfg.rpn_pre_nms, cfg.train_proposals, cfg.proposal_nms, 2.0});
    std::vector<Box> rois = props.boxes;
    if (cfg.add_gt_to_proposals) rois.insert(rois.end(), gt_det.begin(), gt_det.end());
    const auto assign = vdn::assign_rois(rois, gt_det, cfg.roi_fg_iou);
    plan.rois = {};
    for (int r : vdn::sample_labels(assign.label, cfg.roi_batch, cfg.roi_pos_fraction, rng)) {
      const auto ri = static_cast<std::size_t>(r);
      plan.rois.boxes.push_back(rois[ri]);
      plan.rois.label.push_back(assign.label[ri]);
      const int g = assign.gt_index[ri];
      plan.rois.gt_index.push_back(g >= 0 ? gt_det_index[static_cast<std::size_t>(g)] : -1);
      if (g >= 0) {
        const auto& ped = sample.pedestrians[static_cast<std::size_t>(gt_det_index[static_cast<std::size_t>(g)])];
        plan.rois.target.push_back(encode_offsets(rois[ri], gt_box(ped, det_kind)));
        plan.rois.target_aux.push_back(encode_offsets(rois[ri], ped.visible));
      } else {
        plan.rois.target.push_back({});
        plan.rois.target_aux.push_back({});
      }
    }
  }

  vdn::RegionCache region_cache;
  vdn::RegionOutput region;
  if (!plan.rois.boxes.empty()) region = vdn::region_forward(fm, plan.rois.boxes, params, &region_cache);
  else region = {Mat(1, 0), Mat(4, 0), Mat()};

  vdn::VdnGrads vg;
  const vdn::VdnLoss vl = vdn::vdn_loss(rpn, plan.anchors, nr, region, plan.rois, cfg.smooth_l1_beta,
                                        {weights.cls1, weights.reg1, weights.cls2, weights.reg2},
                                        grads ? &vg : nullptr);
  LossBreakdown out;
  out.cls1 = vl.cls1;
  out.reg1 = vl.reg1;
  out.cls2 = vl.cls2;
  out.reg2 = vl.reg2;

  Mat dfm;
  if (grads) dfm = Mat::Zero(fm.values.rows(), fm.values.cols());
  Mat ddeltas_aux;

  // V&F: the visible branch regression occupies the second-stage slot.
  if (variant == Variant::VandF && !plan.rois.boxes.empty()) {
    std::vector<int> cols;
    std::vector<OffsetVector> targets;
    for (std::size_t k = 0; k < plan.rois.boxes.size(); ++k) {
      if (plan.rois.label[k] != vdn::kPositive) continue;
      cols.push_back(static_cast<int>(k));
      targets.push_back(plan.rois.target_aux[k]);
    }
    if (grads) ddeltas_aux = Mat::Zero(4, region.deltas_aux.cols());
    out.fen = vdn::regression_loss(region.deltas_aux, targets, cols, cfg.smooth_l1_beta, weights.fen,
                                   grads ? &ddeltas_aux : nullptr);
  }

  // Second stage: full-body estimation (V2F) or full-box refinement (F2).
  if (variant == Variant::V2F || variant == Variant::F2) {
    const BoxKind stage_kind = variant == Variant::V2F ? BoxKind::Visible : BoxKind::Full;
    const std::string prefix = variant == Variant::V2F ? "fen" : "refine";
    if (!plan.ready) {
      std::vector<Box> detected;
      for (std::size_t k = 0; k < plan.rois.boxes.size(); ++k) {
        const auto c = static_cast<Eigen::Index>(k);
        try {
          Box b = decode_offsets(plan.rois.boxes[k],
                                 {region.deltas(0, c), region.deltas(1, c), region.deltas(2, c), region.deltas(3, c)},
                                 bounds);
          if (b.area() >= 1.0) detected.push_back(b);
        } catch (const DegenerateBox&) {
        }
      }
      const TrainingBatchSamples batch = build_training_batch(detected, sample.pedestrians, cfg, rng, stage_kind);
      plan.stage2_boxes.clear();
      plan.stage2_gt.clear();
      plan.part_labels = Mat::Zero(static_cast<Eigen::Index>(kNumParts), static_cast<Eigen::Index>(batch.sampled.size()));
      for (std::size_t k = 0; k < batch.sampled.size(); ++k) {
        const std::size_t ci = batch.sampled[k];
        const Box& v = batch.candidates[ci];
        const int g = batch.positive[k] ? batch.assignment[ci].gt_index : -1;
        plan.stage2_boxes.push_back(v);
        plan.stage2_gt.push_back(g);
        const epm::PartLabelVector y =
            g >= 0 ? epm::part_labels(v, sample.pedestrians[static_cast<std::size_t>(g)].full, cfg.label_mode,
                                      cfg.ioa_denominator)
                   : epm::negative_labels(cfg.label_mode);
        for (std::size_t i = 0; i < kNumParts; ++i) {
          plan.part_labels(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = y.y[i];
        }
      }
    }
    if (!plan.stage2_boxes.empty()) {
      fen::HeadCache head_cache;
      const fen::HeadOutput head = fen::head_forward(fm, plan.stage2_boxes, params, prefix, &head_cache);
      std::vector<int> cols;
      std::vector<OffsetVector> targets;
      for (std::size_t k = 0; k < plan.stage2_boxes.size(); ++k) {
        if (plan.stage2_gt[k] < 0) continue;
        cols.push_back(static_cast<int>(k));
        targets.push_back(
            encode_offsets(plan.stage2_boxes[k], sample.pedestrians[static_cast<std::size_t>(plan.stage2_gt[k])].full));
      }
      Mat ddeltas, dfeat;
      if (grads) ddeltas = Mat::Zero(4, head.deltas.cols());
      // Without positives the regression term is 0 and contributes no gradient.
      if (!cols.empty()) {
        out.fen = vdn::regression_loss(head.deltas, targets, cols, cfg.smooth_l1_beta, weights.fen,
                                       grads ? &ddeltas : nullptr);
      }
      if (variant == Variant::V2F) {
        const epm::EpmBatch eb =
            epm::epm_loss_batch(head.features, params.values.at("epm.embed"), plan.part_labels, weights.epm,
                                grads ? &dfeat : nullptr, grads ? &grads->at("epm.embed") : nullptr);
        out.epm = eb.loss;
      }
      if (grads) fen::head_backward(head_cache, ddeltas, dfeat, params, prefix, *grads, dfm);
    }
  }
  plan.ready = true;
  out.total = total_loss(out.vdn(), out.fen, out.epm, cfg.alpha, cfg.beta);

  if (grads) {
    if (!plan.rois.boxes.empty()) {
      vdn::region_backward(region_cache, vg.region_dlogits, vg.region_ddeltas, ddeltas_aux, params, *grads, dfm);
    }
    dfm += vdn::rpn_backward(rpn_cache, vg.rpn_dlogits, vg.rpn_ddeltas, params.values, *grads);
    nn::backbone_backward(backbone, std::move(dfm), params, *grads);
  }
  return out;
}

// ------------------------------------------------------------------ train

namespace {

bool frozen(const std::string& name, const TrainConfig& cfg) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (cfg.beta == 0 && starts("epm.")) return true;
  if (cfg.alpha == 0 && (starts("fen.reg") || starts("refine.") || starts("rcnn.reg_vis"))) return true;
  if (cfg.alpha == 0 && cfg.beta == 0 && starts("fen.")) return true;
  return false;
}

double lr_at(const TrainConfig& cfg, int epoch, long iter) {
  double lr = cfg.learning_rate;
  for (int step : cfg.lr_decay_epochs) {
    if (epoch >= step) lr *= cfg.lr_decay;
  }
  if (cfg.warmup_iters > 0 && iter < cfg.warmup_iters) {
    lr *= static_cast<double>(iter + 1) / static_cast<double>(cfg.warmup_iters);
  }
  return lr;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& l) {
  acc.cls1 += l.cls1;
  acc.reg1 += l.reg1;
  acc.cls2 += l.cls2;
  acc.reg2 += l.reg2;
  acc.fen += l.fen;
  acc.epm += l.epm;
  acc.total += l.total;
}

}  // namespace

TrainResult train(std::span<const data::SceneSample> dataset, const nn::ArchConfig& arch, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& progress) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  TrainResult result;
  result.params = nn::init_params(arch, cfg.seed);
  ModelParams& params = result.params;
  nn::ParamMap velocity = nn::zeros_like(params.values);
  const LossWeights weights = LossWeights::from_config(cfg);

  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng::derive(cfg.seed, 1, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    LossBreakdown sum;
    double lr = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double scale = 1.0 / static_cast<double>(end - start);
      nn::ParamMap grads = nn::zeros_like(params.values);
      for (std::size_t k = start; k < end; ++k) {
        ImagePlan plan;
        Rng rng = Rng::derive(cfg.seed, 2, static_cast<std::uint64_t>(epoch) * dataset.size() + order[k]);
        const LossBreakdown l = image_loss(params, dataset[order[k]], cfg, plan, rng, weights.scaled(scale), &grads);
        if (!std::isfinite(l.total)) {
          std::ostringstream os;
          os << "non-finite loss at epoch " << epoch + 1 << ", image " << dataset[order[k]].id << " (cls1=" << l.cls1
             << " reg1=" << l.reg1 << " cls2=" << l.cls2 << " reg2=" << l.reg2 << " fen=" << l.fen
             << " epm=" << l.epm << ")";
          throw DivergedLoss(os.str());
        }
        accumulate(sum, l);
      }
      lr = lr_at(cfg, epoch, iter);
      double clip = 1.0;
      if (cfg.grad_clip > 0) {
        double sq = 0;
        for (const auto& [name, g] : grads) sq += g.squaredNorm();
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) clip = cfg.grad_clip / norm;
      }
      for (auto& [name, w] : params.values) {
        if (frozen(name, cfg)) continue;
        Mat& v = velocity.at(name);
        v = cfg.momentum * v + clip * grads.at(name) + cfg.weight_decay * w;
        w -= lr * v;
      }
      ++iter;
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.learning_rate = lr;
    const double n = static_cast<double>(dataset.size());
    log.mean = {sum.cls1 / n, sum.reg1 / n, sum.cls2 / n, sum.reg2 / n, sum.fen / n, sum.epm / n, sum.total / n};
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(log);
    if (progress) progress(log);
  }
  return result;
}

std::string training_log_csv(std::span<const EpochLog> log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,lr,l_cls1,l_reg1,l_cls2,l_reg2,l_vdn,l_fen,l_epm,total\n";
  for (const EpochLog& e : log) {
    const LossBreakdown& m = e.mean;
    os << e.epoch << ',' << e.learning_rate << ',' << m.cls1 << ',' << m.reg1 << ',' << m.cls2 << ',' << m.reg2
       << ',' << m.vdn() << ',' << m.fen << ',' << m.epm << ',' << m.total << '\n';
  }
  return os.str();
}

// ------------------------------------------------------------------ infer

namespace {

ImageBounds bounds_of(const Image& img) { return {static_cast<double>(img.width), static_cast<double>(img.height)}; }

vdn::VdnForwardConfig forward_config(const InferConfig& cfg) {
  vdn::VdnForwardConfig f;
  f.proposals.pre_nms_top = cfg.pre_nms_top;
  f.proposals.post_nms_top = cfg.proposals;
  f.proposals.nms_threshold = cfg.proposal_nms;
  return f;
}

// Score-filtered detector outputs in descending score order.
std::vector<Detection> detector_outputs(const vdn::VdnDetections& d, Variant variant, const InferConfig& cfg) {
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < d.boxes.size(); ++i) {
    if (!d.valid[i] || d.scores[i] < cfg.score_threshold) continue;
    Detection det;
    det.score = d.scores[i];
    if (variant == Variant::V2F) {
      det.visible = d.boxes[i];
    } else {
      det.full = d.boxes[i];
      if (variant == Variant::VandF) det.visible = d.aux_boxes[i];
    }
    dets.push_back(det);
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

std::vector<Detection> apply_nms(const std::vector<Detection>& dets, BoxKind kind, double thr, int max_keep,
                                 std::vector<Detection>* suppressed = nullptr) {
  std::vector<Detection> kept;
  std::vector<bool> is_kept(dets.size(), false);
  for (std::size_t i : post::greedy_nms(dets, kind, thr)) {
    if (static_cast<int>(kept.size()) >= max_keep) break;
    kept.push_back(dets[i]);
    is_kept[i] = true;
  }
  if (suppressed) {
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!is_kept[i]) suppressed->push_back(dets[i]);
    }
  }
  return kept;
}

void estimate_full(const nn::FeatureMap& fm, ImageBounds bounds, const ModelParams& params,
                   std::vector<Detection>& dets) {
  std::vector<Box> vis;
  for (const auto& d : dets) vis.push_back(*d.visible);
  const fen::Estimate est = fen::fen_estimate(fm, vis, bounds, params, "fen");
  for (std::size_t i = 0; i < dets.size(); ++i) dets[i].full = est.full[i];
}

void check_inference_params(const ModelParams& params) {
  for (const auto& [name, shape] : nn::expected_shapes(params.arch)) {
    if (name.rfind("epm.", 0) == 0) continue;
    auto it = params.values.find(name);
    if (it == params.values.end() || it->second.rows() != shape.first || it->second.cols() != shape.second) {
      throw ShapeMismatch("parameter " + name + " missing or mis-shaped");
    }
  }
}

std::vector<Detection> infer_from_features(const nn::FeatureMap& fm, ImageBounds bounds, const ModelParams& params,
                                           const InferConfig& cfg, std::vector<Detection>* suppressed = nullptr) {
  const vdn::VdnDetections raw = vdn::vdn_forward(fm, bounds, params, forward_config(cfg));
  return finish_candidates(fm, bounds, params, cfg, detector_outputs(raw, params.arch.variant, cfg), suppressed);
}

}  // namespace

std::vector<Detection> finish_candidates(const nn::FeatureMap& fm, ImageBounds bounds, const ModelParams& params,
                                         const InferConfig& cfg, std::vector<Detection> dets,
                                         std::vector<Detection>* suppressed) {
  const Variant variant = params.arch.variant;
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  const BoxKind mode = cfg.resolved_nms_mode(variant);
  switch (variant) {
    case Variant::F:
    case Variant::VandF:
      return apply_nms(dets, mode, cfg.nms_threshold, cfg.max_detections, suppressed);
    case Variant::F2: {
      std::vector<Box> fulls;
      for (const auto& d : dets) fulls.push_back(*d.full);
      const fen::Estimate est = fen::fen_estimate(fm, fulls, bounds, params, "refine");
      for (std::size_t i = 0; i < dets.size(); ++i) dets[i].full = est.full[i];
      return apply_nms(dets, BoxKind::Full, cfg.nms_threshold, cfg.max_detections, suppressed);
    }
    case Variant::V2F: {
      if (mode == BoxKind::Visible) {
        std::vector<Detection> kept =
            apply_nms(dets, BoxKind::Visible, cfg.nms_threshold, cfg.max_detections, suppressed);
        estimate_full(fm, bounds, params, kept);
        return kept;
      }
      estimate_full(fm, bounds, params, dets);
      return apply_nms(dets, BoxKind::Full, cfg.nms_threshold, cfg.max_detections, suppressed);
    }
  }
  return {};
}

std::vector<Detection> infer(const Image& image, const ModelParams& params, const InferConfig& cfg) {
  check_inference_params(params);
  const nn::FeatureMap fm = nn::extract_features(image, params);
  return infer_from_features(fm, bounds_of(image), params, cfg);
}

InferTrace infer_trace(const Image& image, const ModelParams& params, const InferConfig& cfg) {
  check_inference_params(params);
  const nn::FeatureMap fm = nn::extract_features(image, params);
  InferTrace t;
  t.kept = infer_from_features(fm, bounds_of(image), params, cfg, &t.suppressed);
  return t;
}

std::vector<epm::PartVector> part_scores(const Image& image, std::span<const Box> visible,
                                         const ModelParams& params) {
  if (params.arch.variant != Variant::V2F) throw ConfigError("part scores need a V2F model");
  std::vector<epm::PartVector> out;
  if (visible.empty()) return out;
  const nn::FeatureMap fm = nn::extract_features(image, params);
  const fen::Estimate est = fen::fen_estimate(fm, visible, bounds_of(image), params, "fen");
  const Mat& embed = params.values.at("epm.embed");
  for (Eigen::Index j = 0; j < est.features.cols(); ++j) {
    out.push_back(epm::part_response(est.features.col(j), embed).r);
  }
  return out;
}

std::string to_string(Diagnostic d) {
  switch (d) {
    case Diagnostic::PerfectVdn: return "P-VDN";
    case Diagnostic::PerfectVdnNms: return "P-VDN+NMS";
    case Diagnostic::PerfectFen: return "P-FEN";
  }
  return "?";
}

Diagnostic diagnostic_from_string(const std::string& s) {
  if (s == "P-VDN" || s == "p-vdn") return Diagnostic::PerfectVdn;
  if (s == "P-VDN+NMS" || s == "p-vdn+nms" || s == "p-vdn-nms") return Diagnostic::PerfectVdnNms;
  if (s == "P-FEN" || s == "p-fen") return Diagnostic::PerfectFen;
  throw ConfigError("unknown diagnostic: " + s);
}

V2fAnalysis analyze_v2f(const data::SceneSample& sample, const ModelParams& params, const InferConfig& cfg) {
  if (params.arch.variant != Variant::V2F) throw ConfigError("V2F analysis needs a V2F model");
  check_inference_params(params);
  const ImageBounds bounds = bounds_of(sample.image);
  const nn::FeatureMap fm = nn::extract_features(sample.image, params);
  V2fAnalysis a;

  const vdn::VdnDetections raw = vdn::vdn_forward(fm, bounds, params, forward_config(cfg));
  const std::vector<Detection> dets = detector_outputs(raw, Variant::V2F, cfg);
  a.visible_nms = apply_nms(dets, BoxKind::Visible, cfg.nms_threshold, cfg.max_detections);
  estimate_full(fm, bounds, params, a.visible_nms);
  std::vector<Detection> all = dets;
  estimate_full(fm, bounds, params, all);
  a.full_nms = apply_nms(all, BoxKind::Full, cfg.nms_threshold, cfg.max_detections);

  // Ground-truth visible boxes scored by the detector's region head.
  std::vector<Box> gt_vis;
  for (const auto& p : sample.pedestrians) {
    if (!p.ignore) gt_vis.push_back(p.visible);
  }
  const std::vector<double> gt_scores = vdn::score_given_boxes(fm, gt_vis, params);
  std::vector<Detection> gt_dets;
  for (std::size_t i = 0; i < gt_vis.size(); ++i) {
    Detection d;
    d.visible = gt_vis[i];
    d.score = gt_scores[i];
    gt_dets.push_back(d);
  }
  std::stable_sort(gt_dets.begin(), gt_dets.end(),
                   [](const Detection& x, const Detection& y) { return x.score > y.score; });
  a.perfect_vdn = apply_nms(gt_dets, BoxKind::Visible, cfg.nms_threshold, cfg.max_detections);
  estimate_full(fm, bounds, params, a.perfect_vdn);
  a.perfect_vdn_nms = gt_dets;
  estimate_full(fm, bounds, params, a.perfect_vdn_nms);

  a.perfect_fen = a.visible_nms;
  for (Detection& d : a.perfect_fen) {
    const fen::AssignmentResult r = fen::assign_visible_to_gt(*d.visible, sample.pedestrians);
    if (r.positive()) d.full = sample.pedestrians[static_cast<std::size_t>(r.gt_index)].full;
  }
  return a;
}

std::vector<Detection> diagnostic_detections(Diagnostic mode, const data::SceneSample& sample,
                                             const ModelParams& params, const InferConfig& cfg) {
  V2fAnalysis a = analyze_v2f(sample, params, cfg);
  switch (mode) {
    case Diagnostic::PerfectVdn: return std::move(a.perfect_vdn);
    case Diagnostic::PerfectVdnNms: return std::move(a.perfect_vdn_nms);
    case Diagnostic::PerfectFen: return std::move(a.perfect_fen);
  }
  return {};
}

eval::EvalMetrics evaluate_detections(std::span<const std::vector<Detection>> dets,
                                      std::span<const data::SceneSample> dataset, double iou_threshold,
                                      BoxKind kind) {
  if (dets.size() != dataset.size()) throw ShapeMismatch("detections and dataset differ in length");
  std::vector<eval::MatchResult> results;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    results.push_back(eval::match_detections(dets[i], dataset[i].pedestrians, iou_threshold, kind));
  }
  return eval::evaluate(results);
}

eval::EvalMetrics run_diagnostic(Diagnostic mode, std::span<const data::SceneSample> dataset,
                                 const ModelParams& params, const InferConfig& cfg, double iou_threshold) {
  std::vector<std::vector<Detection>> dets;
  for (const auto& s : dataset) dets.push_back(diagnostic_detections(mode, s, params, cfg));
  return evaluate_detections(dets, dataset, iou_threshold);
}

}  // namespace v2f::pipeline
