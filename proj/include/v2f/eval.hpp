#pragma once

#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "v2f/data.hpp"
#include "v2f/postprocess.hpp"

namespace v2f::eval {

enum class MatchFlag { TP, FP, Ignored };

/// Per-image matching outcome. Detections are stored in descending score
/// order (ties keep input order).
struct MatchResult {
  std::vector<double> scores;
  std::vector<MatchFlag> flags;
  std::vector<std::size_t> det_index;  ///< position in the caller's detection list
  std::vector<bool> gt_matched;        ///< per ground truth; ignore entries stay false
  std::size_t num_gt = 0;              ///< non-ignore ground truths
};

/// Greedy score-ordered matching. A detection is TP when its best-IoU
/// unmatched non-ignore ground truth reaches `iou_threshold`; otherwise it is
/// ignored when its IoA with some ignore region is >= 0.5; otherwise FP.
/// `kind` selects which boxes (on both sides) are compared.
MatchResult match_detections(std::span<const Detection> dets, std::span<const data::GroundTruthPedestrian> gts,
                             double iou_threshold, BoxKind kind = BoxKind::Full);

struct PrCurve {
  std::vector<double> precision, recall;
};

struct MissRateCurve {
  std::vector<double> fppi, miss_rate;
};

struct EvalMetrics {
  double ap = 0;
  double mr2 = 1;
  double recall = 0;
  PrCurve pr;
  MissRateCurve fppi;
  std::size_t num_images = 0, num_gt = 0, num_tp = 0, num_fp = 0;
};

/// Area under the un-interpolated precision/recall curve.
double average_precision(std::span<const MatchResult> results);
/// Log-average miss rate over 9 FPPI points log-spaced in [1e-2, 1].
double log_average_miss_rate(std::span<const MatchResult> results);
double recall(std::span<const MatchResult> results);
EvalMetrics evaluate(std::span<const MatchResult> results);

inline constexpr double kDefaultSweepValues[] = {0.5, 0.4, 0.3, 0.2, 0.1};
inline constexpr std::span<const double> kDefaultSweep{kDefaultSweepValues};

struct SweepRow {
  double threshold = 0;
  EvalMetrics metrics;
};

/// One metrics row per matching threshold; pairwise overlaps are computed once.
std::vector<SweepRow> threshold_sweep(std::span<const std::vector<Detection>> dets,
                                      std::span<const std::vector<data::GroundTruthPedestrian>> gts,
                                      std::span<const double> thresholds = kDefaultSweep,
                                      BoxKind kind = BoxKind::Full);

// Detection dumps: one JSON object per line,
// {"image_id", "score", "fbox": [x, y, w, h], "vbox": [...], "parts": [5 scores]}.
nlohmann::json detection_to_json(const std::string& image_id, const Detection& d);
/// Throws ParseError on malformed records.
std::pair<std::string, Detection> detection_from_json(const nlohmann::json& j);
void write_detections(std::ostream& out, const std::string& image_id, std::span<const Detection> dets);
/// Groups records by image id, preserving file order within an image.
std::map<std::string, std::vector<Detection>> read_detections(std::istream& in);

}  // namespace v2f::eval
