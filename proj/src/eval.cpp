#include "v2f/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <numeric>

#include "v2f/errors.hpp"

namespace v2f::eval {

namespace {

const Box& gt_box(const data::GroundTruthPedestrian& g, BoxKind kind) {
  return kind == BoxKind::Full ? g.full : g.visible;
}

// Overlaps of one image, detections already in score order.
struct OverlapTable {
  std::vector<std::size_t> order;
  std::vector<double> scores;
  std::vector<std::vector<double>> iou;  // [det][gt], only non-ignore gts meaningful
  std::vector<double> best_ignore_ioa;   // per det
  std::vector<bool> gt_ignore;
  std::size_t num_gt = 0;
};

OverlapTable overlaps(std::span<const Detection> dets, std::span<const data::GroundTruthPedestrian> gts,
                      BoxKind kind) {
  OverlapTable t;
  t.order.resize(dets.size());
  std::iota(t.order.begin(), t.order.end(), 0);
  std::stable_sort(t.order.begin(), t.order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  for (const auto& g : gts) {
    t.gt_ignore.push_back(g.ignore);
    if (!g.ignore) ++t.num_gt;
  }
  for (std::size_t i : t.order) {
    const Box& d = box_of(dets[i], kind);
    t.scores.push_back(dets[i].score);
    std::vector<double> row(gts.size(), 0.0);
    double best_ioa = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].ignore) {
        best_ioa = std::max(best_ioa, ioa(d, gt_box(gts[g], kind)));
      } else {
        row[g] = iou(d, gt_box(gts[g], kind));
      }
    }
    t.iou.push_back(std::move(row));
    t.best_ignore_ioa.push_back(best_ioa);
  }
  return t;
}

MatchResult match_table(const OverlapTable& t, double thr) {
  MatchResult r;
  r.scores = t.scores;
  r.det_index = t.order;
  r.gt_matched.assign(t.gt_ignore.size(), false);
  r.num_gt = t.num_gt;
  for (std::size_t k = 0; k < t.order.size(); ++k) {
    double best = -1;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < t.gt_ignore.size(); ++g) {
      if (t.gt_ignore[g] || r.gt_matched[g]) continue;
      if (t.iou[k][g] > best) {
        best = t.iou[k][g];
        best_g = g;
      }
    }
    if (best >= thr) {
      r.gt_matched[best_g] = true;
      r.flags.push_back(MatchFlag::TP);
    } else if (t.best_ignore_ioa[k] >= 0.5) {
      r.flags.push_back(MatchFlag::Ignored);
    } else {
      r.flags.push_back(MatchFlag::FP);
    }
  }
  return r;
}

struct Ranked {
  double score;
  bool tp;
};

// Non-ignored detections of all images in global score order; ties keep
// image order, then per-image order.
std::vector<Ranked> ranked(std::span<const MatchResult> results) {
  std::vector<Ranked> all;
  for (const auto& r : results) {
    for (std::size_t k = 0; k < r.flags.size(); ++k) {
      if (r.flags[k] != MatchFlag::Ignored) all.push_back({r.scores[k], r.flags[k] == MatchFlag::TP});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  return all;
}

std::size_t total_gt(std::span<const MatchResult> results) {
  std::size_t n = 0;
  for (const auto& r : results) n += r.num_gt;
  return n;
}

}  // namespace

MatchResult match_detections(std::span<const Detection> dets, std::span<const data::GroundTruthPedestrian> gts,
                             double iou_threshold, BoxKind kind) {
  return match_table(overlaps(dets, gts, kind), iou_threshold);
}

double average_precision(std::span<const MatchResult> results) {
  const std::size_t n_gt = total_gt(results);
  if (n_gt == 0) return 0.0;
  double ap = 0;
  std::size_t tp = 0, seen = 0;
  for (const Ranked& d : ranked(results)) {
    ++seen;
    if (d.tp) {
      ++tp;
      ap += (static_cast<double>(tp) / seen) / static_cast<double>(n_gt);
    }
  }
  return ap;
}

double recall(std::span<const MatchResult> results) {
  const std::size_t n_gt = total_gt(results);
  if (n_gt == 0) return 0.0;
  std::size_t matched = 0;
  for (const auto& r : results) matched += static_cast<std::size_t>(std::count(r.gt_matched.begin(), r.gt_matched.end(), true));
  return static_cast<double>(matched) / static_cast<double>(n_gt);
}

namespace {

MissRateCurve miss_rate_curve(std::span<const MatchResult> results) {
  MissRateCurve c;
  const std::size_t n_gt = total_gt(results);
  const double n_img = static_cast<double>(std::max<std::size_t>(results.size(), 1));
  std::size_t tp = 0, fp = 0;
  for (const Ranked& d : ranked(results)) {
    (d.tp ? tp : fp) += 1;
    c.fppi.push_back(static_cast<double>(fp) / n_img);
    c.miss_rate.push_back(n_gt == 0 ? 0.0 : 1.0 - static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  return c;
}

double lamr(const MissRateCurve& c) {
  double sum_log = 0;
  for (int i = 0; i < 9; ++i) {
    const double ref = std::pow(10.0, -2.0 + 2.0 * i / 8.0);
    double mr = 1.0;  // curve start: nothing detected yet
    for (std::size_t k = 0; k < c.fppi.size() && c.fppi[k] <= ref; ++k) mr = c.miss_rate[k];
    sum_log += std::log(std::max(mr, 1e-10));
  }
  return std::exp(sum_log / 9.0);
}

}  // namespace

double log_average_miss_rate(std::span<const MatchResult> results) { return lamr(miss_rate_curve(results)); }

EvalMetrics evaluate(std::span<const MatchResult> results) {
  EvalMetrics m;
  m.num_images = results.size();
  m.num_gt = total_gt(results);
  m.ap = average_precision(results);
  m.recall = recall(results);
  m.fppi = miss_rate_curve(results);
  m.mr2 = lamr(m.fppi);
  std::size_t tp = 0, seen = 0;
  for (const Ranked& d : ranked(results)) {
    ++seen;
    if (d.tp) ++tp;
    m.pr.precision.push_back(static_cast<double>(tp) / seen);
    m.pr.recall.push_back(m.num_gt ? static_cast<double>(tp) / m.num_gt : 0.0);
  }
  m.num_tp = tp;
  m.num_fp = seen - tp;
  return m;
}

std::vector<SweepRow> threshold_sweep(std::span<const std::vector<Detection>> dets,
                                      std::span<const std::vector<data::GroundTruthPedestrian>> gts,
                                      std::span<const double> thresholds, BoxKind kind) {
  if (dets.size() != gts.size()) throw ShapeMismatch("detections and ground truths cover different image counts");
  std::vector<OverlapTable> tables;
  tables.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) tables.push_back(overlaps(dets[i], gts[i], kind));
  std::vector<SweepRow> rows;
  for (double thr : thresholds) {
    std::vector<MatchResult> results;
    results.reserve(tables.size());
    for (const auto& t : tables) results.push_back(match_table(t, thr));
    rows.push_back({thr, evaluate(results)});
  }
  return rows;
}

namespace {

nlohmann::json xywh(const Box& b) { return {b.x1(), b.y1(), b.width(), b.height()}; }

Box box_from_xywh(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw ParseError("box must be [x, y, w, h]");
  const auto v = j.get<std::array<double, 4>>();
  try {
    return Box::from_xywh(v[0], v[1], v[2], v[3]);
  } catch (const DegenerateBox& e) {
    throw ParseError(std::string("invalid box: ") + e.what());
  }
}

}  // namespace

nlohmann::json detection_to_json(const std::string& image_id, const Detection& d) {
  nlohmann::json j{{"image_id", image_id}, {"score", d.score}};
  if (d.full) j["fbox"] = xywh(*d.full);
  if (d.visible) j["vbox"] = xywh(*d.visible);
  if (d.part_scores) j["parts"] = *d.part_scores;
  return j;
}

std::pair<std::string, Detection> detection_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw ParseError("detection record must be an object");
    Detection d;
    d.score = j.at("score").get<double>();
    if (j.contains("fbox")) d.full = box_from_xywh(j.at("fbox"));
    if (j.contains("vbox")) d.visible = box_from_xywh(j.at("vbox"));
    if (j.contains("parts")) d.part_scores = j.at("parts").get<std::array<double, 5>>();
    if (!d.full && !d.visible) throw ParseError("detection record has no box");
    return {j.at("image_id").get<std::string>(), d};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad detection record: ") + e.what());
  }
}

void write_detections(std::ostream& out, const std::string& image_id, std::span<const Detection> dets) {
  for (const Detection& d : dets) out << detection_to_json(image_id, d).dump() << '\n';
}

std::map<std::string, std::vector<Detection>> read_detections(std::istream& in) {
  std::map<std::string, std::vector<Detection>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto [id, det] = detection_from_json(nlohmann::json::parse(line));
      out[id].push_back(det);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace v2f::eval
