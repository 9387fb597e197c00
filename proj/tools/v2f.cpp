#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "v2f/config.hpp"
#include "v2f/data.hpp"
#include "v2f/errors.hpp"
#include "v2f/eval.hpp"
#include "v2f/netcore.hpp"
#include "v2f/pipeline.hpp"
#include "v2f/render.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace v2f;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

const char* kCheckpointName = "model.ckpt";

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json metrics_json(const eval::EvalMetrics& m) {
  return {{"ap", m.ap},           {"mr2", m.mr2},       {"recall", m.recall}, {"num_images", m.num_images},
          {"num_gt", m.num_gt},   {"num_tp", m.num_tp}, {"num_fp", m.num_fp}};
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string spec_file;
  std::size_t count = 10;
  std::uint64_t seed = 0;
  std::string out;
};

int gen_data(const GenDataArgs& a) {
  data::SceneSpec spec;
  if (!a.spec_file.empty()) spec = config::read_json_file(a.spec_file).get<data::SceneSpec>();
  spec.validate();
  const auto samples = data::generate_dataset(spec, a.seed, a.count);
  data::write_dataset(a.out, spec, a.seed, samples);
  std::fprintf(stderr, "wrote %zu scenes to %s\n", samples.size(), a.out.c_str());
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config_file;
  std::string variant, label_mode, train_data, out;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, alpha, beta;
};

json train_overrides(const TrainArgs& a) {
  json o = json::object();
  if (!a.variant.empty()) o["arch"]["variant"] = a.variant;
  if (!a.label_mode.empty()) o["train"]["label_mode"] = a.label_mode;
  if (a.epochs) o["train"]["epochs"] = *a.epochs;
  if (a.seed) o["train"]["seed"] = *a.seed;
  if (a.lr) o["train"]["learning_rate"] = *a.lr;
  if (a.alpha) o["train"]["alpha"] = *a.alpha;
  if (a.beta) o["train"]["beta"] = *a.beta;
  if (!a.train_data.empty()) o["train_data"] = {{"path", a.train_data}};
  if (!a.out.empty()) o["output_dir"] = a.out;
  return o;
}

std::vector<json> layers(const std::string& config_file, const json& overrides) {
  std::vector<json> l;
  if (!config_file.empty()) l.push_back(config::read_json_file(config_file));
  l.push_back(overrides);
  return l;
}

int train(const TrainArgs& a) {
  const auto cfg = config::resolve(layers(a.config_file, train_overrides(a)));
  if (!cfg.train_data) throw ConfigError("no training dataset configured");
  const auto dataset = config::materialize(*cfg.train_data);
  if (dataset.empty()) throw ConfigError("training dataset is empty");

  fs::create_directories(cfg.output_dir);
  const json resolved = config::to_json(cfg);
  write_json(cfg.output_dir / "config.json", resolved);

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pipeline::train(dataset, cfg.arch, cfg.train, [](const pipeline::EpochLog& e) {
    std::fprintf(stderr, "epoch %d  lr %.3g  vdn %.4f  fen %.4f  epm %.4f  total %.4f  (%.1fs)\n", e.epoch,
                 e.learning_rate, e.mean.vdn(), e.mean.fen, e.mean.epm, e.mean.total, e.seconds);
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(cfg.output_dir / "train_log.csv", pipeline::training_log_csv(result.log));
  nn::save_checkpoint(cfg.output_dir / kCheckpointName, result.params,
                      {{"config", resolved}, {"epochs", result.log.size()}});
  write_json(cfg.output_dir / "manifest.json", {{"checkpoint", kCheckpointName},
                                                {"arch_hash", nn::arch_hash(cfg.arch)},
                                                {"seed", cfg.train.seed},
                                                {"train_images", dataset.size()},
                                                {"seconds", seconds}});
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, config_file, out = "eval_out", nms_mode, detections;
  std::vector<std::string> diagnostics;
  bool sweep = false;
  bool plots = false;
  std::optional<double> match_iou;
};

void write_plots(const fs::path& dir, const eval::EvalMetrics& m) {
  using render::Series;
  std::vector<Series> pr{{m.pr.recall, m.pr.precision, render::kBlue}};
  render::PlotAxes pr_axes;
  write_png(dir / "pr_curve.png", render::plot_curves(pr, pr_axes));

  std::vector<Series> fp{{m.fppi.fppi, m.fppi.miss_rate, render::kRed}};
  render::PlotAxes fp_axes{1e-2, 1e2, 0.01, 1.0, true, true};
  write_png(dir / "fppi_missrate.png", render::plot_curves(fp, fp_axes));
}

int evaluate(const EvalArgs& a) {
  if (a.checkpoint.empty() && a.detections.empty()) throw ConfigError("--checkpoint or --detections is required");
  std::optional<config::ExperimentConfig> cfg;
  if (!a.config_file.empty()) cfg = config::resolve(layers(a.config_file, json::object()));

  std::vector<data::SceneSample> dataset;
  if (!a.data.empty()) {
    config::DatasetSource src;
    src.path = a.data;
    dataset = config::materialize(src);
  } else if (cfg && cfg->test_data) {
    dataset = config::materialize(*cfg->test_data);
  } else {
    throw ConfigError("no evaluation dataset: pass --data or a config with test_data");
  }

  pipeline::InferConfig infer_cfg = cfg ? cfg->infer : pipeline::InferConfig{};
  if (!a.nms_mode.empty()) {
    if (a.nms_mode == "full") infer_cfg.nms_mode = BoxKind::Full;
    else if (a.nms_mode == "visible") infer_cfg.nms_mode = BoxKind::Visible;
    else throw ConfigError("--nms-mode must be full or visible");
  }
  const double match_iou = a.match_iou.value_or(cfg ? cfg->match_iou : 0.5);
  std::vector<double> thresholds = cfg ? cfg->sweep_thresholds
                                       : std::vector<double>(std::begin(eval::kDefaultSweepValues),
                                                             std::end(eval::kDefaultSweepValues));

  fs::create_directories(a.out);
  json report;
  report["dataset"] = a.data.empty() ? json(nullptr) : json(a.data);
  report["num_images"] = dataset.size();
  report["match_iou"] = match_iou;

  std::vector<std::vector<Detection>> dets(dataset.size());
  std::optional<nn::ModelParams> params;
  if (!a.detections.empty()) {
    std::ifstream in(a.detections);
    if (!in) throw IoError("cannot read " + a.detections);
    auto by_id = eval::read_detections(in);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      auto it = by_id.find(dataset[i].id);
      if (it != by_id.end()) dets[i] = std::move(it->second);
    }
    report["detections"] = a.detections;
  } else {
    params = nn::load_checkpoint(a.checkpoint);
    if (cfg && nn::arch_hash(cfg->arch) != nn::arch_hash(params->arch)) {
      throw ConfigError("checkpoint architecture does not match the config (hash " + nn::arch_hash(params->arch) +
                        " vs " + nn::arch_hash(cfg->arch) + ")");
    }
    report["checkpoint"] = a.checkpoint;
    report["variant"] = nn::to_string(params->arch.variant);
    report["nms_mode"] = infer_cfg.resolved_nms_mode(params->arch.variant) == BoxKind::Full ? "full" : "visible";
    for (std::size_t i = 0; i < dataset.size(); ++i) dets[i] = pipeline::infer(dataset[i].image, *params, infer_cfg);
  }
  report["infer"] = config::to_json(infer_cfg);

  {
    std::ofstream out(fs::path(a.out) / "detections.jsonl");
    for (std::size_t i = 0; i < dataset.size(); ++i) eval::write_detections(out, dataset[i].id, dets[i]);
  }
  const eval::EvalMetrics m = pipeline::evaluate_detections(dets, dataset, match_iou);
  report["metrics"] = metrics_json(m);
  std::printf("AP %.4f  MR-2 %.4f  recall %.4f  (%zu images, %zu gt)\n", m.ap, m.mr2, m.recall, m.num_images,
              m.num_gt);

  if (a.sweep) {
    std::vector<std::vector<data::GroundTruthPedestrian>> gts;
    for (const auto& s : dataset) gts.push_back(s.pedestrians);
    const auto rows = eval::threshold_sweep(dets, gts, thresholds);
    std::string csv = "threshold,ap,mr2,recall\n";
    json sweep = json::array();
    std::printf("%-9s %-8s %-8s %-8s\n", "iou", "AP", "MR-2", "recall");
    for (const auto& r : rows) {
      std::printf("%-9.2f %-8.4f %-8.4f %-8.4f\n", r.threshold, r.metrics.ap, r.metrics.mr2, r.metrics.recall);
      csv += std::to_string(r.threshold) + "," + std::to_string(r.metrics.ap) + "," + std::to_string(r.metrics.mr2) +
             "," + std::to_string(r.metrics.recall) + "\n";
      json row = metrics_json(r.metrics);
      row["threshold"] = r.threshold;
      sweep.push_back(row);
    }
    report["sweep"] = sweep;
    write_text(fs::path(a.out) / "sweep.csv", csv);
  }

  if (!a.diagnostics.empty()) {
    if (!params) throw ConfigError("--diagnostic needs --checkpoint");
    json diag = json::object();
    for (const auto& name : a.diagnostics) {
      const auto mode = pipeline::diagnostic_from_string(name);
      const auto dm = pipeline::run_diagnostic(mode, dataset, *params, infer_cfg, match_iou);
      std::printf("%-10s AP %.4f  MR-2 %.4f  recall %.4f\n", pipeline::to_string(mode).c_str(), dm.ap, dm.mr2,
                  dm.recall);
      diag[pipeline::to_string(mode)] = metrics_json(dm);
    }
    report["diagnostics"] = diag;
  }

  if (a.plots) write_plots(a.out, m);
  write_json(fs::path(a.out) / "metrics.json", report);
  return 0;
}

// --------------------------------------------------------------- visualize

struct VisualizeArgs {
  std::string checkpoint, out = "vis_out";
  std::vector<std::string> images;
  double score_threshold = 0.3;
  int scale = 3;
};

std::vector<fs::path> expand_images(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (e.path().extension() == ".png") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }
  if (files.empty()) throw ConfigError("no PNG images found");
  return files;
}

std::string fmt_score(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf[0] == '0' ? std::string(buf + 1) : std::string(buf);
}

int visualize(const VisualizeArgs& a) {
  const auto params = nn::load_checkpoint(a.checkpoint);
  const bool has_parts = params.arch.variant == nn::Variant::V2F;
  pipeline::InferConfig cfg;
  fs::create_directories(a.out);
  write_json(fs::path(a.out) / "config.json",
             {{"checkpoint", a.checkpoint}, {"score_threshold", a.score_threshold}, {"scale", a.scale},
              {"infer", config::to_json(cfg)}});
  std::ofstream dump(fs::path(a.out) / "detections.jsonl");

  for (const auto& path : expand_images(a.images)) {
    const Image img = read_png_image(path);
    const auto trace = pipeline::infer_trace(img, params, cfg);
    std::vector<Detection> shown;
    for (const auto& d : trace.kept) {
      if (d.score >= a.score_threshold) shown.push_back(d);
    }
    if (has_parts && !shown.empty()) {
      std::vector<Box> vis;
      for (const auto& d : shown) vis.push_back(*d.visible);
      const auto parts = pipeline::part_scores(img, vis, params);
      for (std::size_t i = 0; i < shown.size(); ++i) shown[i].part_scores = parts[i];
    }

    Canvas c = render::upscale(to_canvas(img), a.scale);
    const double s = a.scale;
    for (const auto& d : trace.suppressed) {
      if (d.score < a.score_threshold) continue;
      render::draw_box(c, d.visible ? *d.visible : *d.full, render::kRed, s, true);
    }
    for (const auto& d : shown) {
      if (d.full) {
        if (d.part_scores) {
          const PartBoxes grid = divide_parts(*d.full);
          for (std::size_t p = 0; p < kNumParts; ++p) {
            const Box& pb = grid.parts[p];
            render::draw_box(c, pb, render::kGray, s);
            render::draw_text(c, static_cast<int>(pb.x1() * s) + 2, static_cast<int>(pb.y1() * s) + 2,
                              fmt_score((*d.part_scores)[p]), render::kYellow);
          }
        }
        render::draw_box(c, *d.full, render::kBlue, s);
      }
      if (d.visible) render::draw_box(c, *d.visible, render::kGreen, s);
      const Box& anchor = d.visible ? *d.visible : *d.full;
      render::draw_text(c, static_cast<int>(anchor.x1() * s), static_cast<int>(anchor.y2() * s) - 7,
                        fmt_score(d.score), render::kGreen);
    }
    write_png(fs::path(a.out) / path.filename().replace_extension(".png"), c);
    eval::write_detections(dump, path.stem().string(), shown);
  }
  return 0;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const SpecInfeasible& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ShapeMismatch& e) {
    std::fprintf(stderr, "error: incompatible checkpoint: %s\n", e.what());
    return kExitUsage;
  } catch (const DivergedLoss& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"V2F pedestrian detection toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic crowded-scene dataset");
  gen_cmd->add_option("--spec", gen.spec_file, "Scene spec JSON");
  gen_cmd->add_option("--count", gen.count, "Number of scenes");
  gen_cmd->add_option("--seed", gen.seed, "Root seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a detector variant");
  train_cmd->add_option("--config", tr.config_file, "Experiment config JSON");
  train_cmd->add_option("--variant", tr.variant, "F, V&F, F2 or V2F");
  train_cmd->add_option("--label-mode", tr.label_mode, "hard or soft");
  train_cmd->add_option("--train-data", tr.train_data, "Dataset directory");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--lr", tr.lr);
  train_cmd->add_option("--alpha", tr.alpha);
  train_cmd->add_option("--beta", tr.beta);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or a detection dump");
  eval_cmd->add_option("--checkpoint", ev.checkpoint);
  eval_cmd->add_option("--detections", ev.detections, "JSON-lines detection dump to score");
  eval_cmd->add_option("--data", ev.data, "Dataset directory");
  eval_cmd->add_option("--config", ev.config_file, "Experiment config; its architecture must match the checkpoint");
  eval_cmd->add_option("--out", ev.out, "Output directory");
  eval_cmd->add_option("--nms-mode", ev.nms_mode, "full or visible");
  eval_cmd->add_option("--match-iou", ev.match_iou);
  eval_cmd->add_option("--diagnostic", ev.diagnostics, "P-VDN, P-VDN+NMS or P-FEN (repeatable)");
  eval_cmd->add_flag("--sweep", ev.sweep, "Report metrics at matching IoU 0.5 down to 0.1");
  eval_cmd->add_flag("--plots", ev.plots, "Write PR and FPPI/miss-rate curves");

  VisualizeArgs vis;
  auto* vis_cmd = app.add_subcommand("visualize", "Render detection overlays");
  vis_cmd->add_option("--checkpoint", vis.checkpoint)->required();
  vis_cmd->add_option("--images", vis.images, "PNG files or directories")->required();
  vis_cmd->add_option("--out", vis.out);
  vis_cmd->add_option("--score-threshold", vis.score_threshold);
  vis_cmd->add_option("--scale", vis.scale)->check(CLI::Range(1, 8));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (*gen_cmd) return guarded([&] { return gen_data(gen); });
  if (*train_cmd) return guarded([&] { return train(tr); });
  if (*eval_cmd) return guarded([&] { return evaluate(ev); });
  if (*vis_cmd) return guarded([&] { return visualize(vis); });
  return kExitUsage;
}
