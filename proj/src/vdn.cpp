#include "v2f/vdn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "v2f/errors.hpp"
#include "v2f/postprocess.hpp"

namespace v2f::vdn {

AnchorSet generate_anchors(int cells_h, int cells_w, int stride, double base, double scale,
                           std::span<const double> ratios) {
  AnchorSet set;
  set.cells_h = cells_h;
  set.cells_w = cells_w;
  set.stride = stride;
  set.base = base;
  set.scale = scale;
  set.ratios.assign(ratios.begin(), ratios.end());
  set.boxes.reserve(static_cast<std::size_t>(cells_h) * cells_w * ratios.size());
  for (int y = 0; y < cells_h; ++y) {
    for (int x = 0; x < cells_w; ++x) {
      const double cx = stride * (x + 0.5), cy = stride * (y + 0.5);
      for (double r : ratios) {
        const double h = base * scale * std::sqrt(r);
        const double w = base * scale / std::sqrt(r);
        set.boxes.emplace_back(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
      }
    }
  }
  return set;
}

AnchorSet anchors_for(const FeatureMap& fm, const nn::ArchConfig& arch) {
  return generate_anchors(fm.height, fm.width, fm.stride, arch.anchor_base, arch.anchor_scale, arch.anchor_ratios);
}

RpnTargets assign_rpn_targets(const AnchorSet& anchors, std::span<const Box> gts, RpnThresholds thr) {
  const std::size_t n = anchors.boxes.size();
  RpnTargets t;
  t.label.assign(n, kNegative);
  t.gt_index.assign(n, -1);
  t.target.assign(n, OffsetVector{});
  if (gts.empty()) return t;

  std::vector<double> best(n, -1.0);
  std::vector<double> gt_max(gts.size(), 0.0);
  std::vector<std::vector<double>> table(n, std::vector<double>(gts.size()));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors.boxes[a], gts[g]);
      table[a][g] = v;
      if (v > best[a]) {
        best[a] = v;
        t.gt_index[a] = static_cast<int>(g);
      }
      gt_max[g] = std::max(gt_max[g], v);
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (best[a] >= thr.positive) {
      t.label[a] = kPositive;
    } else if (best[a] < thr.negative) {
      t.label[a] = kNegative;
    } else {
      t.label[a] = kIgnore;
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_max[g] > 0 && table[a][g] == gt_max[g]) t.label[a] = kPositive;
    }
    if (t.label[a] == kPositive) t.target[a] = encode_offsets(anchors.boxes[a], gts[t.gt_index[a]]);
  }
  return t;
}

std::vector<int> sample_labels(std::span<const int> labels, int batch_size, double pos_fraction, Rng& rng) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kPositive) pos.push_back(static_cast<int>(i));
    if (labels[i] == kNegative) neg.push_back(static_cast<int>(i));
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const auto n_pos = std::min<std::size_t>(pos.size(), static_cast<std::size_t>(std::floor(batch_size * pos_fraction)));
  const auto n_neg = std::min<std::size_t>(neg.size(), static_cast<std::size_t>(batch_size) - n_pos);
  std::vector<int> out(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos));
  out.insert(out.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
  return out;
}

// ------------------------------------------------------------- RPN head

RpnOutput rpn_forward(const FeatureMap& fm, const ParamMap& p, RpnCache* cache) {
  RpnCache local;
  RpnCache& c = cache ? *cache : local;
  FeatureMap hidden = nn::conv3x3_forward(fm, p.at("rpn.conv.w"), p.at("rpn.conv.b"), 1, c.conv);
  nn::relu_inplace(hidden.values);
  RpnOutput out;
  out.logits = nn::linear_forward(p.at("rpn.cls.w"), p.at("rpn.cls.b"), hidden.values);
  out.deltas = nn::linear_forward(p.at("rpn.reg.w"), p.at("rpn.reg.b"), hidden.values);
  c.hidden = std::move(hidden.values);
  return out;
}

Mat rpn_backward(const RpnCache& cache, const Mat& dlogits, const Mat& ddeltas, const ParamMap& p, ParamMap& grads) {
  Mat dh = nn::linear_backward(p.at("rpn.cls.w"), cache.hidden, dlogits, grads.at("rpn.cls.w"), grads.at("rpn.cls.b"));
  dh += nn::linear_backward(p.at("rpn.reg.w"), cache.hidden, ddeltas, grads.at("rpn.reg.w"), grads.at("rpn.reg.b"));
  nn::relu_backward_inplace(dh, cache.hidden);
  return nn::conv3x3_backward(cache.conv, dh, p.at("rpn.conv.w"), grads.at("rpn.conv.w"), grads.at("rpn.conv.b"),
                              true);
}

double anchor_logit(const RpnOutput& out, int anchor, int num_ratios) {
  return out.logits(anchor % num_ratios, anchor / num_ratios);
}

OffsetVector anchor_delta(const RpnOutput& out, int anchor, int num_ratios) {
  const int a = anchor % num_ratios, px = anchor / num_ratios;
  return {out.deltas(4 * a, px), out.deltas(4 * a + 1, px), out.deltas(4 * a + 2, px), out.deltas(4 * a + 3, px)};
}

Proposals generate_proposals(const AnchorSet& anchors, const RpnOutput& out, ImageBounds bounds,
                             const ProposalConfig& cfg) {
  const int nr = static_cast<int>(anchors.ratios.size());
  const int n = static_cast<int>(anchors.boxes.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto top = std::min<std::ptrdiff_t>(n, cfg.pre_nms_top);
  std::partial_sort(order.begin(), order.begin() + top, order.end(), [&](int a, int b) {
    const double la = anchor_logit(out, a, nr), lb = anchor_logit(out, b, nr);
    return la > lb || (la == lb && a < b);
  });
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::ptrdiff_t k = 0; k < top; ++k) {
    const int a = order[static_cast<std::size_t>(k)];
    try {
      Box b = decode_offsets(anchors.boxes[a], anchor_delta(out, a, nr), bounds);
      if (b.width() < cfg.min_size || b.height() < cfg.min_size) continue;
      boxes.push_back(b);
      scores.push_back(nn::sigmoid(anchor_logit(out, a, nr)));
    } catch (const DegenerateBox&) {
    }
  }
  Proposals p;
  for (std::size_t i : post::greedy_nms(boxes, scores, cfg.nms_threshold)) {
    if (static_cast<int>(p.boxes.size()) >= cfg.post_nms_top) break;
    p.boxes.push_back(boxes[i]);
    p.scores.push_back(scores[i]);
  }
  return p;
}

// ---------------------------------------------------------- region head

RegionOutput region_forward(const FeatureMap& fm, std::span<const Box> rois, const ModelParams& params,
                            RegionCache* cache) {
  const auto& p = params.values;
  RegionCache local;
  RegionCache& c = cache ? *cache : local;
  const Mat pooled = nn::roi_align_batch(fm, rois, params.arch.roi_size, cache ? &c.plans : nullptr);
  const Mat h = nn::two_fc_forward(p, "rcnn", pooled, c.fc);
  RegionOutput out;
  out.logits = nn::linear_forward(p.at("rcnn.cls.w"), p.at("rcnn.cls.b"), h);
  out.deltas = nn::linear_forward(p.at("rcnn.reg.w"), p.at("rcnn.reg.b"), h);
  if (auto it = p.find("rcnn.reg_vis.w"); it != p.end()) {
    out.deltas_aux = nn::linear_forward(it->second, p.at("rcnn.reg_vis.b"), h);
  }
  return out;
}

void region_backward(const RegionCache& cache, const Mat& dlogits, const Mat& ddeltas, const Mat& ddeltas_aux,
                     const ModelParams& params, ParamMap& grads, Mat& dfm) {
  const auto& p = params.values;
  const Mat& h = cache.fc.h2;
  Mat dh = nn::linear_backward(p.at("rcnn.cls.w"), h, dlogits, grads.at("rcnn.cls.w"), grads.at("rcnn.cls.b"));
  dh += nn::linear_backward(p.at("rcnn.reg.w"), h, ddeltas, grads.at("rcnn.reg.w"), grads.at("rcnn.reg.b"));
  if (ddeltas_aux.size() > 0) {
    dh += nn::linear_backward(p.at("rcnn.reg_vis.w"), h, ddeltas_aux, grads.at("rcnn.reg_vis.w"),
                              grads.at("rcnn.reg_vis.b"));
  }
  const Mat dpooled = nn::two_fc_backward(p, "rcnn", cache.fc, std::move(dh), grads);
  nn::roi_align_backward(cache.plans, dpooled, static_cast<int>(dfm.rows()), dfm);
}

// ------------------------------------------------------------------ loss

double regression_loss(const Mat& pred, std::span<const OffsetVector> targets, std::span<const int> columns,
                       double beta, double weight, Mat* dpred) {
  double loss = 0;
  const double norm = static_cast<double>(std::max<std::size_t>(1, columns.size()));
  for (std::size_t k = 0; k < columns.size(); ++k) {
    const auto t = targets[k].as_array();
    for (int r = 0; r < 4; ++r) {
      double d = 0;
      loss += nn::smooth_l1(pred(r, columns[k]) - t[r], beta, &d);
      if (dpred) (*dpred)(r, columns[k]) += weight * d / norm;
    }
  }
  return loss / norm;
}

VdnLoss vdn_loss(const RpnOutput& rpn, const AnchorBatch& anchors, int num_ratios, const RegionOutput& region,
                 const RoiBatch& rois, double beta, const VdnLossWeights& w, VdnGrads* grads) {
  VdnLoss l;
  if (grads) {
    grads->rpn_dlogits = Mat::Zero(rpn.logits.rows(), rpn.logits.cols());
    grads->rpn_ddeltas = Mat::Zero(rpn.deltas.rows(), rpn.deltas.cols());
    grads->region_dlogits = Mat::Zero(region.logits.rows(), region.logits.cols());
    grads->region_ddeltas = Mat::Zero(region.deltas.rows(), region.deltas.cols());
  }

  // RPN
  const double n_anchor = static_cast<double>(std::max<std::size_t>(1, anchors.index.size()));
  std::size_t n_pos_anchor = 0;
  for (std::size_t k = 0; k < anchors.index.size(); ++k) n_pos_anchor += anchors.label[k] == kPositive;
  const double pos_norm1 = static_cast<double>(std::max<std::size_t>(1, n_pos_anchor));
  for (std::size_t k = 0; k < anchors.index.size(); ++k) {
    const int a = anchors.index[k];
    const int r = a % num_ratios, px = a / num_ratios;
    double dz = 0;
    l.cls1 += nn::bce_with_logit(rpn.logits(r, px), anchors.label[k] == kPositive ? 1.0 : 0.0, &dz);
    if (grads) grads->rpn_dlogits(r, px) += w.cls1 * dz / n_anchor;
    if (anchors.label[k] != kPositive) continue;
    const auto t = anchors.target[k].as_array();
    for (int c = 0; c < 4; ++c) {
      double d = 0;
      l.reg1 += nn::smooth_l1(rpn.deltas(4 * r + c, px) - t[c], beta, &d);
      if (grads) grads->rpn_ddeltas(4 * r + c, px) += w.reg1 * d / pos_norm1;
    }
  }
  l.cls1 /= n_anchor;
  l.reg1 /= pos_norm1;

  // region head
  const double n_roi = static_cast<double>(std::max<std::size_t>(1, rois.boxes.size()));
  std::vector<int> pos_cols;
  std::vector<OffsetVector> pos_targets;
  for (std::size_t k = 0; k < rois.boxes.size(); ++k) {
    double dz = 0;
    l.cls2 += nn::bce_with_logit(region.logits(0, static_cast<Eigen::Index>(k)),
                                 rois.label[k] == kPositive ? 1.0 : 0.0, &dz);
    if (grads) grads->region_dlogits(0, static_cast<Eigen::Index>(k)) += w.cls2 * dz / n_roi;
    if (rois.label[k] == kPositive) {
      pos_cols.push_back(static_cast<int>(k));
      pos_targets.push_back(rois.target[k]);
    }
  }
  l.cls2 /= n_roi;
  l.reg2 = regression_loss(region.deltas, pos_targets, pos_cols, beta, w.reg2,
                           grads ? &grads->region_ddeltas : nullptr);
  return l;
}

RoiAssignment assign_rois(std::span<const Box> rois, std::span<const Box> gts, double fg_threshold) {
  RoiAssignment a;
  for (const Box& r : rois) {
    double best = -1;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(r, gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    const bool pos = best_g >= 0 && best >= fg_threshold;
    a.label.push_back(pos ? kPositive : kNegative);
    a.gt_index.push_back(pos ? best_g : -1);
  }
  return a;
}

std::vector<double> score_given_boxes(const FeatureMap& fm, std::span<const Box> boxes, const ModelParams& params) {
  if (boxes.empty()) return {};
  const RegionOutput out = region_forward(fm, boxes, params);
  std::vector<double> scores(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) scores[i] = nn::sigmoid(out.logits(0, static_cast<Eigen::Index>(i)));
  return scores;
}

std::vector<double> score_given_boxes(const Image& image, std::span<const Box> boxes, const ModelParams& params) {
  if (boxes.empty()) return {};
  return score_given_boxes(nn::extract_features(image, params), boxes, params);
}

// ------------------------------------------------------------- forward

VdnDetections vdn_forward(const FeatureMap& fm, ImageBounds bounds, const ModelParams& params,
                          const VdnForwardConfig& cfg) {
  const AnchorSet anchors = anchors_for(fm, params.arch);
  const RpnOutput rpn = rpn_forward(fm, params.values);
  VdnDetections d;
  d.proposals = generate_proposals(anchors, rpn, bounds, cfg.proposals);
  if (d.proposals.boxes.empty()) return d;
  const RegionOutput region = region_forward(fm, d.proposals.boxes, params);
  const auto decode = [&](const Mat& deltas, std::size_t i, bool& ok) {
    const auto col = static_cast<Eigen::Index>(i);
    try {
      return decode_offsets(d.proposals.boxes[i],
                            {deltas(0, col), deltas(1, col), deltas(2, col), deltas(3, col)}, bounds);
    } catch (const DegenerateBox&) {
      ok = false;
      return d.proposals.boxes[i];
    }
  };
  for (std::size_t i = 0; i < d.proposals.boxes.size(); ++i) {
    bool ok = true;
    d.scores.push_back(nn::sigmoid(region.logits(0, static_cast<Eigen::Index>(i))));
    d.boxes.push_back(decode(region.deltas, i, ok));
    if (region.deltas_aux.size() > 0) d.aux_boxes.push_back(decode(region.deltas_aux, i, ok));
    d.valid.push_back(ok);
  }
  return d;
}

VdnDetections vdn_forward(const Image& image, const ModelParams& params, const VdnForwardConfig& cfg) {
  const FeatureMap fm = nn::extract_features(image, params);
  return vdn_forward(fm, {static_cast<double>(image.width), static_cast<double>(image.height)}, params, cfg);
}

}  // namespace v2f::vdn
