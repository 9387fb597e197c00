#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "../support.hpp"
#include "v2f/config.hpp"
#include "v2f/errors.hpp"
#include "v2f/pipeline.hpp"

namespace fs = std::filesystem;
using namespace v2f;
using namespace v2f::pipeline;
using nlohmann::json;
namespace vt = v2f::testing;

namespace {

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = true;
  std::string summary;
  std::vector<std::string> details;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    details.push_back((ok ? "ok    " : "FAIL  ") + what);
  }
  void note(const std::string& what) { details.push_back("      " + what); }
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::string metrics_row(const std::string& name, const eval::EvalMetrics& m) {
  return fmt("%-16s AP %.4f  recall %.4f  MR-2 %.4f", name.c_str(), m.ap, m.recall, m.mr2);
}

// ------------------------------------------------------------ shared runs

class Context {
 public:
  explicit Context(fs::path cache) : cache_(std::move(cache)) { fs::create_directories(cache_); }

  config::ExperimentConfig benchmark(Variant v, epm::LabelMode mode = epm::LabelMode::Hard) const {
    json layer = config::read_json_file(fs::path(V2F_SOURCE_DIR) / "configs" / "benchmark.json");
    layer["arch"]["variant"] = nn::to_string(v);
    layer["train"]["label_mode"] = mode == epm::LabelMode::Hard ? "hard" : "soft";
    const std::vector<json> layers{layer};
    return config::resolve(layers);
  }

  const std::vector<data::SceneSample>& train_set() {
    if (train_.empty()) train_ = config::materialize(*benchmark(Variant::V2F).train_data);
    return train_;
  }
  const std::vector<data::SceneSample>& test_set() {
    if (test_.empty()) test_ = config::materialize(*benchmark(Variant::V2F).test_data);
    return test_;
  }

  struct Trained {
    ModelParams params;
    double train_seconds = 0;
    bool from_cache = false;
  };

  /// Trains the benchmark model of a variant once; later runs load it from the cache.
  const Trained& model(Variant v, epm::LabelMode mode = epm::LabelMode::Hard) {
    auto it = models_.find({v, mode});
    if (it != models_.end()) return it->second;
    const config::ExperimentConfig c = benchmark(v, mode);
    json key = config::to_json(c);
    key.erase("output_dir");
    const fs::path file = cache_ / fmt("%s_%s_%016llx.ckpt", v == Variant::VandF ? "VandF" : nn::to_string(v).c_str(),
                                       mode == epm::LabelMode::Hard ? "hard" : "soft",
                                       static_cast<unsigned long long>(fnv1a(key.dump())));
    Trained t;
    if (fs::exists(file)) {
      json meta;
      t.params = nn::load_checkpoint(file, &meta);
      t.train_seconds = meta.at("train_seconds").get<double>();
      t.from_cache = true;
    } else {
      const auto start = Clock::now();
      TrainResult r = train(train_set(), c.arch, c.train, [&](const EpochLog& e) {
        std::printf("    [%s] epoch %d total %.4f (%.0fs)\n", nn::to_string(v).c_str(), e.epoch, e.mean.total, e.seconds);
        std::fflush(stdout);
      });
      t.train_seconds = since(start);
      t.params = std::move(r.params);
      nn::save_checkpoint(file, t.params, {{"train_seconds", t.train_seconds}, {"config", key}});
    }
    return models_.emplace(std::pair{v, mode}, std::move(t)).first->second;
  }

  struct V2fEval {
    eval::EvalMetrics visible_nms, full_nms, perfect_vdn, perfect_vdn_nms, perfect_fen;
    double seconds = 0;
  };

  const V2fEval& v2f_eval() {
    if (v2f_eval_) return *v2f_eval_;
    const auto start = Clock::now();
    const ModelParams& p = model(Variant::V2F).params;
    const InferConfig ic = benchmark(Variant::V2F).infer;
    std::vector<std::vector<Detection>> vis, full, pv, pvn, pf;
    for (const auto& s : test_set()) {
      V2fAnalysis a = analyze_v2f(s, p, ic);
      vis.push_back(std::move(a.visible_nms));
      full.push_back(std::move(a.full_nms));
      pv.push_back(std::move(a.perfect_vdn));
      pvn.push_back(std::move(a.perfect_vdn_nms));
      pf.push_back(std::move(a.perfect_fen));
    }
    V2fEval e;
    e.visible_nms = evaluate_detections(vis, test_set());
    e.full_nms = evaluate_detections(full, test_set());
    e.perfect_vdn = evaluate_detections(pv, test_set());
    e.perfect_vdn_nms = evaluate_detections(pvn, test_set());
    e.perfect_fen = evaluate_detections(pf, test_set());
    e.seconds = since(start);
    v2f_eval_ = e;
    return *v2f_eval_;
  }

 private:
  fs::path cache_;
  std::vector<data::SceneSample> train_, test_;
  std::map<std::pair<Variant, epm::LabelMode>, Trained> models_;
  std::optional<V2fEval> v2f_eval_;
};

// ------------------------------------------------------------ A1

data::SceneSample tiny_scene() {
  data::SceneSample s;
  s.id = "tiny";
  s.image = vt::random_image(32, 32, 6);
  s.pedestrians = {{Box(2, 4, 8, 28), Box(2, 4, 12, 28), false},
                   {Box(9, 5, 16, 29), Box(7, 5, 16, 29), false},
                   {Box(20, 2, 28, 18), Box(20, 2, 28, 30), false}};
  return s;
}

Outcome gradient_fidelity(Context&) {
  Outcome o;
  const auto start = Clock::now();
  const data::SceneSample scene = tiny_scene();
  struct Case {
    Variant variant;
    epm::LabelMode mode;
  };
  const std::vector<Case> cases{{Variant::F, epm::LabelMode::Hard},
                                {Variant::VandF, epm::LabelMode::Hard},
                                {Variant::F2, epm::LabelMode::Hard},
                                {Variant::V2F, epm::LabelMode::Hard},
                                {Variant::V2F, epm::LabelMode::Soft}};
  const char* term_names[] = {"cls1", "reg1", "cls2", "reg2", "fen", "epm"};
  double worst = 0;
  std::size_t checked = 0, refined = 0, skipped = 0;
  for (const Case& c : cases) {
    ModelParams p = nn::init_params(vt::tiny_arch(c.variant), 5);
    TrainConfig cfg;
    cfg.rpn_batch = 32;
    cfg.rpn_pre_nms = 200;
    cfg.train_proposals = 16;
    cfg.roi_batch = 16;
    cfg.sample_cap = 16;
    cfg.label_mode = c.mode;
    ImagePlan plan;
    Rng rng(2);
    image_loss(p, scene, cfg, plan, rng, LossWeights::from_config(cfg), nullptr);
    const bool has_second = c.variant != Variant::F;
    const bool has_epm = p.values.count("epm.embed") > 0;
    for (int term = 0; term < 6; ++term) {
      if ((term == 4 && !has_second) || (term == 5 && !has_epm)) continue;
      LossWeights w{0, 0, 0, 0, 0, 0};
      double* slots[] = {&w.cls1, &w.reg1, &w.cls2, &w.reg2, &w.fen, &w.epm};
      *slots[term] = 1;
      nn::ParamMap grads;
      for (const auto& [k, v] : p.values) grads[k] = nn::Mat::Zero(v.rows(), v.cols());
      image_loss(p, scene, cfg, plan, rng, w, &grads);
      auto loss = [&] {
        const LossBreakdown l = image_loss(p, scene, cfg, plan, rng, w, nullptr);
        return l.cls1 * w.cls1 + l.reg1 * w.reg1 + l.cls2 * w.cls2 + l.reg2 * w.reg2 + l.fen * w.fen + l.epm * w.epm;
      };
      double case_worst = 0;
      std::string worst_group;
      for (auto& [name, value] : p.values) {
        const auto r = vt::fd_check_kink_aware(value, grads.at(name), loss, 1e-3, -1, 0, 1e-6);
        checked += r.checked;
        refined += r.refined;
        skipped += r.skipped;
        if (r.rel_error >= case_worst) {
          case_worst = r.rel_error;
          worst_group = name;
        }
      }
      worst = std::max(worst, case_worst);
      o.require(case_worst < 1e-4, fmt("%-4s %-4s %-4s worst rel err %.2e (%s)", nn::to_string(c.variant).c_str(),
                                       c.mode == epm::LabelMode::Hard ? "hard" : "soft", term_names[term], case_worst,
                                       worst_group.c_str()));
    }
  }
  const double seconds = since(start);
  const std::size_t total = checked + refined + skipped;
  o.require(skipped * 100 <= total, fmt("coordinates: %zu at 1e-3, %zu at 1e-6 near a kink, %zu skipped", checked,
                                        refined, skipped));
  o.require(seconds < 120, fmt("runtime %.1fs", seconds));
  o.summary = fmt("max rel err %.2e over %zu coordinates, %.1fs", worst, total, seconds);
  return o;
}

// ------------------------------------------------------------ A2

Outcome nms_oracle(Context&) {
  Outcome o;
  Rng rng(101);
  std::size_t mismatches = 0, ambiguous = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(0, 12);
    std::vector<Detection> dets;
    for (int i = 0; i < n; ++i) {
      const Box full = vt::random_int_box(rng, 24, 14);
      const Box vis = vt::random_int_box(rng, 24, 10);
      dets.push_back({full, vis, rng.uniform_int(0, 6) / 6.0, std::nullopt});
    }
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) ties += dets[i].score == dets[j].score;
    for (BoxKind kind : {BoxKind::Full, BoxKind::Visible}) {
      std::vector<Box> boxes;
      std::vector<double> scores;
      for (const auto& d : dets) {
        boxes.push_back(box_of(d, kind));
        scores.push_back(d.score);
      }
      const auto fixed = vt::oracle_nms_fixed_points(boxes, scores);
      ambiguous += fixed.size() != 1;
      if (fixed.size() != 1 || post::greedy_nms(dets, kind, 0.5) != fixed[0]) ++mismatches;
    }
  }
  o.require(ambiguous == 0, fmt("every instance has exactly one fixed point (%zu without)", ambiguous));
  o.require(mismatches == 0, fmt("%zu of 2000 mode-instances disagree", mismatches));
  o.note(fmt("%zu tied score pairs across the instances", ties));
  o.summary = fmt("1000 instances x 2 modes, %zu mismatches", mismatches);
  return o;
}

// ------------------------------------------------------------ A3

Outcome geometry_oracles(Context&) {
  Outcome o;
  Rng rng(202);
  double worst_slack = 0;
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const Box a = vt::random_int_box(rng, 30, 16), b = vt::random_int_box(rng, 30, 16);
    const double bound_iou = 2.0 / std::min(a.area(), b.area());
    const double e_iou = std::abs(iou(a, b) - vt::raster_iou(a, b));
    const double e_ioa = std::abs(ioa(a, b) - vt::raster_ioa(a, b));
    worst_slack = std::max({worst_slack, e_iou, e_ioa});
    violations += e_iou > bound_iou || e_ioa > 2.0 / a.area();
  }
  o.require(violations == 0, fmt("iou/ioa vs raster: %zu outside the 2/area bound, worst gap %.2e", violations,
                                 worst_slack));
  double worst_trip = 0;
  for (int t = 0; t < 1000; ++t) {
    const Box ref = vt::random_box(rng, 200, 2, 80), target = vt::random_box(rng, 200, 2, 80);
    const Box back = decode_offsets(ref, encode_offsets(ref, target), {1000, 1000});
    for (double d : {back.x1() - target.x1(), back.y1() - target.y1(), back.x2() - target.x2(), back.y2() - target.y2()})
      worst_trip = std::max(worst_trip, std::abs(d));
  }
  o.require(worst_trip < 1e-6, fmt("encode/decode round trip worst error %.2e", worst_trip));
  o.summary = fmt("raster gap %.2e, round trip %.2e", worst_slack, worst_trip);
  return o;
}

// ------------------------------------------------------------ A4

Outcome assignment_oracles(Context&) {
  Outcome o;
  Rng rng(303);
  std::size_t fen_bad = 0, fen_pos = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<data::GroundTruthPedestrian> gts;
    for (int g = rng.uniform_int(0, 4); g > 0; --g) {
      const Box v = vt::random_int_box(rng, 20, 12);
      gts.push_back({v, Box(v.x1(), v.y1(), v.x2(), v.y2() + 8), rng.uniform() < 0.2});
    }
    Box v = vt::random_int_box(rng, 20, 12);
    if (!gts.empty() && rng.uniform() < 0.5) {
      const Box& g = gts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(gts.size()) - 1))].visible;
      const double x1 = g.x1() + rng.uniform_int(-2, 2), y1 = g.y1() + rng.uniform_int(-2, 2);
      v = Box(x1, y1, std::max(x1 + 1, g.x2() + rng.uniform_int(-2, 2)), std::max(y1 + 1, g.y2() + rng.uniform_int(-2, 2)));
    }
    const auto want = vt::oracle_assign(v, gts);
    const auto got = fen::assign_visible_to_gt(v, gts);
    fen_pos += want.positive();
    fen_bad += got.positive() != want.positive() || (want.positive() && got.gt_index != want.gt_index);
  }
  o.require(fen_bad == 0, fmt("visible-to-GT assignment: %zu of 1000 differ (%zu positive)", fen_bad, fen_pos));
  std::size_t rpn_bad = 0, rpn_pos = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<Box> anchors, gts;
    for (int a = 0; a < 6; ++a) anchors.push_back(vt::random_int_box(rng, 16, 10));
    for (int g = rng.uniform_int(0, 3); g > 0; --g) gts.push_back(vt::random_int_box(rng, 16, 10));
    const auto want = vt::oracle_rpn(anchors, gts);
    const auto got = vdn::assign_rpn_targets(vt::anchor_set(anchors), gts);
    for (int l : want.label) rpn_pos += l == vdn::kPositive;
    bool same = got.label == want.label;
    for (std::size_t a = 0; same && a < anchors.size(); ++a) {
      if (want.label[a] != vdn::kPositive) continue;
      same = got.gt_index[a] == want.gt_index[a];
      for (std::size_t k = 0; same && k < 4; ++k)
        same = std::abs(got.target[a].as_array()[k] - want.target[a].as_array()[k]) < 1e-12;
    }
    rpn_bad += !same;
  }
  o.require(rpn_bad == 0, fmt("anchor labelling: %zu of 1000 differ (%zu positive anchors)", rpn_bad, rpn_pos));
  o.summary = fmt("%zu + %zu mismatches over 2000 instances", fen_bad, rpn_bad);
  return o;
}

// ------------------------------------------------------------ A5

Detection det(Box b, double score) { return Detection{b, {}, score, {}}; }
data::GroundTruthPedestrian gt(Box b, bool ignore = false) { return {b, b, ignore}; }

std::vector<eval::MatchResult> match_all(const std::vector<std::vector<Detection>>& d,
                                         const std::vector<std::vector<data::GroundTruthPedestrian>>& g) {
  std::vector<eval::MatchResult> r;
  for (std::size_t i = 0; i < d.size(); ++i) r.push_back(eval::match_detections(d[i], g[i], 0.5));
  return r;
}

bool sweep_monotone(const std::vector<eval::SweepRow>& rows) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].metrics.ap < rows[i - 1].metrics.ap - 1e-12) return false;
    if (rows[i].metrics.mr2 > rows[i - 1].metrics.mr2 + 1e-12) return false;
  }
  return rows.size() == eval::kDefaultSweep.size();
}

Outcome metric_oracles(Context&) {
  Outcome o;
  const std::vector<data::GroundTruthPedestrian> two{gt(Box(0, 0, 10, 10)), gt(Box(20, 0, 30, 10))};
  const auto mixed = match_all({{det(Box(0, 0, 10, 10), 0.9), det(Box(50, 50, 60, 60), 0.8), det(Box(20, 0, 30, 10), 0.7)}},
                               {two});
  const double ap = eval::average_precision(mixed);
  o.require(std::abs(ap - 5.0 / 6.0) < 1e-12, fmt("TP, FP, TP on two GTs: AP %.15f (oracle 5/6)", ap));

  const std::vector<data::GroundTruthPedestrian> four{gt(Box(0, 0, 10, 10)), gt(Box(20, 0, 30, 10)),
                                                      gt(Box(40, 0, 50, 10)), gt(Box(60, 0, 70, 10))};
  const auto three = match_all(
      {{det(Box(0, 0, 10, 10), 0.9), det(Box(20, 0, 30, 10), 0.8), det(Box(40, 0, 50, 10), 0.7)}}, {four});
  o.require(eval::recall(three) == 0.75, fmt("three of four found: recall %.4f (oracle 0.75)", eval::recall(three)));

  const std::vector<std::vector<data::GroundTruthPedestrian>> gts{
      {gt(Box(0, 0, 10, 10)), gt(Box(20, 0, 30, 10))}, {gt(Box(0, 0, 10, 10))}, {gt(Box(0, 0, 20, 20), true)}};
  const std::vector<std::vector<Detection>> dets{{det(Box(0, 0, 10, 10), 0.9), det(Box(50, 50, 60, 60), 0.6)},
                                                 {det(Box(100, 100, 110, 110), 0.8), det(Box(0, 0, 10, 10), 0.7)},
                                                 {det(Box(0, 0, 10, 10), 0.95), det(Box(40, 40, 50, 50), 0.5)}};
  const eval::EvalMetrics m = eval::evaluate(match_all(dets, gts));
  o.require(std::abs(m.ap - 0.55555555555555558) < 1e-12 && std::abs(m.recall - 2.0 / 3.0) < 1e-12 &&
                std::abs(m.mr2 - 0.57149598856871531) < 1e-12,
            fmt("three images with an ignore region: AP %.6f recall %.6f MR-2 %.6f", m.ap, m.recall, m.mr2));

  const auto rows = eval::threshold_sweep(dets, gts);
  std::string trend;
  for (const auto& r : rows) trend += fmt(" %.1f:%.3f/%.3f", r.threshold, r.metrics.ap, r.metrics.mr2);
  o.require(sweep_monotone(rows), "sweep on the three-image case (threshold:AP/MR-2)" + trend);

  Rng rng(505);
  std::size_t bad = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<std::vector<Detection>> d(3);
    std::vector<std::vector<data::GroundTruthPedestrian>> g(3);
    for (int i = 0; i < 3; ++i) {
      for (int k = rng.uniform_int(0, 4); k > 0; --k) g[i].push_back(gt(vt::random_box(rng, 40, 4, 20)));
      for (int k = rng.uniform_int(0, 8); k > 0; --k) d[i].push_back(det(vt::random_box(rng, 40, 4, 20), rng.uniform()));
    }
    bad += !sweep_monotone(eval::threshold_sweep(d, g));
  }
  o.require(bad == 0, fmt("sweep monotone on 200 random cases (%zu violations)", bad));
  o.summary = fmt("AP %.4f, recall %.4f, MR-2 %.4f on the three-image case", m.ap, m.recall, m.mr2);
  return o;
}

// ------------------------------------------------------------ A6

Outcome end_to_end(Context& ctx) {
  Outcome o;
  const auto& test = ctx.test_set();
  const auto& train_set = ctx.train_set();
  const data::SceneSpec spec = ctx.benchmark(Variant::V2F).test_data->spec;
  std::size_t peds = 0, crowded = 0;
  for (const auto& s : test) {
    peds += s.pedestrians.size();
    bool pair = false;
    for (std::size_t i = 0; i < s.pedestrians.size() && !pair; ++i)
      for (std::size_t j = i + 1; j < s.pedestrians.size() && !pair; ++j)
        pair = iou(s.pedestrians[i].full, s.pedestrians[j].full) > 0.5;
    crowded += pair;
  }
  const double mean_peds = static_cast<double>(peds) / static_cast<double>(test.size());
  o.require(test.size() == 500, fmt("%zu test scenes, %zu train scenes", test.size(), train_set.size()));
  o.require(mean_peds >= 6, fmt("%.2f pedestrians per test scene", mean_peds));
  o.require(spec.crowding >= 0.7, fmt("crowding factor %.2f; %.1f%% of test scenes hold a pair with full IoU > 0.5",
                                      spec.crowding, 100.0 * static_cast<double>(crowded) / static_cast<double>(test.size())));

  const auto& f = ctx.model(Variant::F);
  const auto& v = ctx.model(Variant::V2F);
  const auto start = Clock::now();
  std::vector<std::vector<Detection>> fd;
  const InferConfig f_infer = ctx.benchmark(Variant::F).infer;
  for (const auto& s : test) fd.push_back(infer(s.image, f.params, f_infer));
  const eval::EvalMetrics fm = evaluate_detections(fd, test);
  const double f_eval = since(start);
  const auto& ve = ctx.v2f_eval();

  o.note(metrics_row("F", fm));
  o.note(metrics_row("V2F visible NMS", ve.visible_nms));
  o.note(metrics_row("V2F full NMS", ve.full_nms));
  o.require(ve.visible_nms.recall >= fm.recall + 0.03,
            fmt("recall gain over F %+.2f points (need +3)", 100 * (ve.visible_nms.recall - fm.recall)));
  o.require(ve.visible_nms.ap >= fm.ap + 0.02, fmt("AP gain over F %+.2f points (need +2)", 100 * (ve.visible_nms.ap - fm.ap)));
  o.require(ve.visible_nms.recall >= ve.full_nms.recall,
            fmt("visible-NMS recall minus full-NMS recall %+.2f points", 100 * (ve.visible_nms.recall - ve.full_nms.recall)));

  const double runtime = f.train_seconds + v.train_seconds + f_eval + ve.seconds;
  o.require(runtime < 45 * 60, fmt("train F %.0fs + train V2F %.0fs + eval %.0fs = %.1f min%s", f.train_seconds,
                                   v.train_seconds, f_eval + ve.seconds, runtime / 60,
                                   f.from_cache || v.from_cache ? " (training times recorded in the model cache)" : ""));

  double fen_iou = 0, gt_score = 0, bg_score = 0;
  std::size_t n_gt = 0, n_bg = 0;
  Rng rng(606);
  for (const auto& s : test) {
    const nn::FeatureMap feat = nn::extract_features(s.image, v.params);
    std::vector<Box> vis, full;
    for (const auto& p : s.pedestrians) {
      if (p.ignore) continue;
      vis.push_back(p.visible);
      full.push_back(p.full);
    }
    if (vis.empty()) continue;
    const ImageBounds bounds{static_cast<double>(s.image.width), static_cast<double>(s.image.height)};
    const fen::Estimate est = fen::fen_estimate(feat, vis, bounds, v.params);
    for (std::size_t i = 0; i < vis.size(); ++i) fen_iou += iou(est.full[i], full[i]);
    for (double sc : vdn::score_given_boxes(feat, vis, v.params)) gt_score += sc;
    n_gt += vis.size();
    std::vector<Box> bg;
    for (int tries = 0; tries < 50 && bg.size() < 3; ++tries) {
      const Box& like = vis[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(vis.size()) - 1))];
      const double x = rng.uniform(0, bounds.width - like.width()), y = rng.uniform(0, bounds.height - like.height());
      const Box b(x, y, x + like.width(), y + like.height());
      double worst = 0;
      for (const auto& p : s.pedestrians) worst = std::max(worst, iou(b, p.visible));
      if (worst < 0.1) bg.push_back(b);
    }
    for (double sc : vdn::score_given_boxes(feat, bg, v.params)) bg_score += sc;
    n_bg += bg.size();
  }
  fen_iou /= static_cast<double>(n_gt);
  o.note(fmt("full-body estimate from GT visible boxes: mean IoU %.3f with GT full boxes (target >= 0.7)", fen_iou));
  o.note(fmt("detector score: GT visible boxes %.3f vs background boxes %.3f", gt_score / static_cast<double>(n_gt),
             bg_score / static_cast<double>(std::max<std::size_t>(n_bg, 1))));
  o.summary = fmt("recall %.4f vs %.4f, AP %.4f vs %.4f (V2F vs F), %.1f min", ve.visible_nms.recall, fm.recall,
                  ve.visible_nms.ap, fm.ap, runtime / 60);
  return o;
}

// ------------------------------------------------------------ A7

Outcome diagnostics_order(Context& ctx) {
  Outcome o;
  const auto& e = ctx.v2f_eval();
  o.note(metrics_row("V2F", e.visible_nms));
  o.note(metrics_row("P-VDN", e.perfect_vdn));
  o.note(metrics_row("P-VDN+NMS", e.perfect_vdn_nms));
  o.note(metrics_row("P-FEN", e.perfect_fen));
  o.require(e.perfect_vdn_nms.ap >= e.perfect_vdn.ap, "AP(P-VDN+NMS) >= AP(P-VDN)");
  o.require(e.perfect_vdn.ap >= e.visible_nms.ap, "AP(P-VDN) >= AP(V2F)");
  o.require(e.perfect_vdn_nms.mr2 <= e.visible_nms.mr2, "MR-2(P-VDN+NMS) <= MR-2(V2F)");
  o.summary = fmt("AP %.4f >= %.4f >= %.4f, MR-2 %.4f <= %.4f", e.perfect_vdn_nms.ap, e.perfect_vdn.ap,
                  e.visible_nms.ap, e.perfect_vdn_nms.mr2, e.visible_nms.mr2);
  return o;
}

// ------------------------------------------------------------ A8

void append_bytes(std::vector<unsigned char>& out, double v) {
  unsigned char b[sizeof v];
  std::memcpy(b, &v, sizeof v);
  out.insert(out.end(), b, b + sizeof v);
}

std::vector<unsigned char> serialize(const std::vector<Detection>& dets) {
  std::vector<unsigned char> out;
  for (const auto& d : dets) {
    append_bytes(out, d.score);
    for (const auto& box : {d.full, d.visible}) {
      append_bytes(out, box ? 1.0 : 0.0);
      if (box)
        for (double c : {box->x1(), box->y1(), box->x2(), box->y2()}) append_bytes(out, c);
    }
    append_bytes(out, d.part_scores ? 1.0 : 0.0);
  }
  return out;
}

Outcome epm_inference_free(Context& ctx) {
  Outcome o;
  const ModelParams& with = ctx.model(Variant::V2F).params;
  ModelParams without = with;
  std::size_t removed = 0;
  for (auto it = without.values.begin(); it != without.values.end();) {
    if (it->first.rfind("epm.", 0) == 0) {
      it = without.values.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  o.require(removed > 0, fmt("%zu part-module groups removed", removed));
  std::size_t differing = 0, images = 0, detections = 0;
  for (BoxKind mode : {BoxKind::Visible, BoxKind::Full}) {
    InferConfig ic = ctx.benchmark(Variant::V2F).infer;
    ic.nms_mode = mode;
    ic.score_threshold = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
      const auto& s = ctx.test_set()[i];
      const auto a = infer(s.image, with, ic);
      const auto b = infer(s.image, without, ic);
      differing += a.size() != b.size() || serialize(a) != serialize(b);
      detections += a.size();
      ++images;
    }
  }
  o.require(differing == 0, fmt("%zu of %zu inferences differ (%zu detections compared bitwise)", differing, images,
                                detections));
  o.summary = fmt("%zu detections over %zu inferences bit-identical without the part module", detections, images);
  return o;
}

// ------------------------------------------------------------ A9

Outcome label_mode_ablation(Context&) {
  Outcome o;
  json base = config::read_json_file(fs::path(V2F_SOURCE_DIR) / "configs" / "smoke.json");
  base["train"]["epochs"] = 50;
  base["train"]["lr_decay_epochs"] = {35};
  base["train_data"]["count"] = 64;
  base["test_data"]["count"] = 32;
  const std::vector<json> layers{base};
  const config::ExperimentConfig c0 = config::resolve(layers);
  const auto train_set = config::materialize(*c0.train_data);
  const auto test_set = config::materialize(*c0.test_data);
  o.note(fmt("%-5s %9s %9s %6s %7s %7s %7s %7s %7s %7s %7s", "mode", "epoch1", "final", "ratio", "cls1", "reg1", "cls2",
             "reg2", "fen", "epm", "AP"));
  for (epm::LabelMode mode : {epm::LabelMode::Hard, epm::LabelMode::Soft}) {
    config::ExperimentConfig c = c0;
    c.train.label_mode = mode;
    const TrainResult r = train(train_set, c.arch, c.train);
    std::vector<std::vector<Detection>> d;
    for (const auto& s : test_set) d.push_back(infer(s.image, r.params, c.infer));
    const double ap = evaluate_detections(d, test_set).ap;
    const LossBreakdown& first = r.log.front().mean;
    const LossBreakdown& last = r.log.back().mean;
    const double ratio = last.total / first.total;
    const char* name = mode == epm::LabelMode::Hard ? "hard" : "soft";
    o.note(fmt("%-5s %9.4f %9.4f %6.3f %7.4f %7.4f %7.4f %7.4f %7.4f %7.4f %7.4f", name, first.total, last.total, ratio,
               last.cls1, last.reg1, last.cls2, last.reg2, last.fen, last.epm, ap));
    o.require(ratio < 0.5, fmt("%s: final total is %.1f%% of epoch 1", name, 100 * ratio));
  }
  double entropy = 0;
  std::size_t positives = 0;
  for (const auto& s : train_set) {
    for (const auto& g : s.pedestrians) {
      if (g.ignore) continue;
      for (double y : epm::part_labels(g.visible, g.full, epm::LabelMode::Soft).y)
        if (y > 0 && y < 1) entropy -= y * std::log(y) + (1 - y) * std::log(1 - y);
      ++positives;
    }
  }
  o.note(fmt("soft labels of GT visible boxes carry %.3f nats of entropy each, a floor under the soft part loss",
             entropy / static_cast<double>(positives)));
  o.summary = fmt("%d epochs on %zu smoke scenes per mode", c0.train.epochs, train_set.size());
  return o;
}

// ------------------------------------------------------------ A10

struct PartCorrelation {
  double soft = 0, hard = 0;
  std::size_t pairs = 0;
};

PartCorrelation part_correlation(const ModelParams& p, std::span<const data::SceneSample> scenes) {
  std::vector<double> responses, soft, hard;
  for (const auto& s : scenes) {
    std::vector<Box> vis;
    std::vector<const data::GroundTruthPedestrian*> peds;
    for (const auto& g : s.pedestrians) {
      if (g.ignore) continue;
      vis.push_back(g.visible);
      peds.push_back(&g);
    }
    if (vis.empty()) continue;
    const auto scores = part_scores(s.image, vis, p);
    for (std::size_t i = 0; i < vis.size(); ++i) {
      const auto ys = epm::part_labels(peds[i]->visible, peds[i]->full, epm::LabelMode::Soft);
      const auto yh = epm::part_labels(peds[i]->visible, peds[i]->full, epm::LabelMode::Hard);
      for (std::size_t k = 0; k < kNumParts; ++k) {
        responses.push_back(scores[i][k]);
        soft.push_back(ys.y[k]);
        hard.push_back(yh.y[k]);
      }
    }
  }
  return {pearson(responses, soft), pearson(responses, hard), responses.size()};
}

Outcome part_score_sanity(Context& ctx) {
  Outcome o;
  const PartCorrelation h = part_correlation(ctx.model(Variant::V2F, epm::LabelMode::Hard).params, ctx.test_set());
  const PartCorrelation s = part_correlation(ctx.model(Variant::V2F, epm::LabelMode::Soft).params, ctx.test_set());
  o.note(fmt("%zu (box, part) pairs on GT visible boxes", s.pairs));
  o.note(fmt("hard-trained model: correlation %.4f with soft labels, %.4f with hard labels", h.soft, h.hard));
  o.require(s.soft >= 0.8, fmt("soft-trained model: correlation %.4f with soft labels (need >= 0.8)", s.soft));
  o.summary = fmt("Pearson %.4f", s.soft);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"A1", gradient_fidelity},  {"A2", nms_oracle},          {"A3", geometry_oracles}, {"A4", assignment_oracles},
      {"A5", metric_oracles},     {"A6", end_to_end},          {"A7", diagnostics_order}, {"A8", epm_inference_free},
      {"A9", label_mode_ablation}, {"A10", part_score_sanity}};
  fs::path cache = fs::path(V2F_ACCEPTANCE_CACHE);
  std::vector<std::string> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cache" && i + 1 < argc) {
      cache = argv[++i];
    } else if (a == "--help" || a == "-h") {
      std::printf("usage: %s [--cache DIR] [A1 ... A10]\n", argv[0]);
      return 0;
    } else {
      wanted.push_back(a);
    }
  }
  for (const auto& w : wanted) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == w; })) {
      std::fprintf(stderr, "unknown criterion %s\n", w.c_str());
      return 2;
    }
  }
  Context ctx(cache);
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    Outcome o;
    const auto start = Clock::now();
    try {
      o = run(ctx);
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("exception: ") + e.what();
    }
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::printf("%s %s  %s [%.1fs]\n", name.c_str(), o.pass ? "PASS" : "FAIL", o.summary.c_str(), since(start));
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
