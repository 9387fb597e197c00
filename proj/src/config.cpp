#include "v2f/config.hpp"

#include <fstream>
#include <set>

#include "v2f/errors.hpp"

namespace v2f::config {

using nlohmann::json;
using pipeline::InferConfig;
using pipeline::SampleRule;
using pipeline::TrainConfig;

namespace {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<epm::LabelMode> {
  static constexpr std::pair<epm::LabelMode, const char*> values[] = {{epm::LabelMode::Hard, "hard"},
                                                                      {epm::LabelMode::Soft, "soft"}};
};
template <>
struct EnumNames<epm::IoaDenominator> {
  static constexpr std::pair<epm::IoaDenominator, const char*> values[] = {
      {epm::IoaDenominator::Visible, "visible"}, {epm::IoaDenominator::Part, "part"}};
};
template <>
struct EnumNames<SampleRule> {
  static constexpr std::pair<SampleRule, const char*> values[] = {{SampleRule::Cap, "cap"},
                                                                  {SampleRule::LiteralMax, "literal_max"}};
};
template <>
struct EnumNames<BoxKind> {
  static constexpr std::pair<BoxKind, const char*> values[] = {{BoxKind::Full, "full"},
                                                               {BoxKind::Visible, "visible"}};
};

template <typename T>
json encode(const T& v) {
  if constexpr (std::is_enum_v<T>) {
    for (const auto& [e, name] : EnumNames<T>::values) {
      if (e == v) return name;
    }
    return nullptr;
  } else {
    return v;
  }
}

template <typename T>
void decode(const json& j, const std::string& key, T& out) {
  if constexpr (std::is_enum_v<T>) {
    if (j.is_string()) {
      for (const auto& [e, name] : EnumNames<T>::values) {
        if (j.get<std::string>() == name) {
          out = e;
          return;
        }
      }
    }
    throw ConfigError("bad value for " + key + ": " + j.dump());
  } else {
    try {
      j.get_to(out);
    } catch (const json::exception& e) {
      throw ConfigError("bad value for " + key + ": " + e.what());
    }
  }
}

template <typename T>
void decode(const json& j, const std::string& key, std::optional<T>& out) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  T v{};
  decode(j, key, v);
  out = v;
}

template <typename T>
json encode(const std::optional<T>& v) {
  return v ? encode(*v) : json(nullptr);
}

template <typename C, typename F>
void visit_train(C& c, F&& f) {
  f("alpha", c.alpha);
  f("beta", c.beta);
  f("label_mode", c.label_mode);
  f("ioa_denominator", c.ioa_denominator);
  f("epochs", c.epochs);
  f("learning_rate", c.learning_rate);
  f("lr_decay_epochs", c.lr_decay_epochs);
  f("lr_decay", c.lr_decay);
  f("momentum", c.momentum);
  f("weight_decay", c.weight_decay);
  f("warmup_iters", c.warmup_iters);
  f("grad_clip", c.grad_clip);
  f("batch_size", c.batch_size);
  f("seed", c.seed);
  f("sample_cap", c.sample_cap);
  f("positive_fraction", c.positive_fraction);
  f("sample_rule", c.sample_rule);
  f("assign_iou", c.assign_iou);
  f("rpn_batch", c.rpn_batch);
  f("rpn_pos_fraction", c.rpn_pos_fraction);
  f("rpn_pos_iou", c.rpn_pos_iou);
  f("rpn_neg_iou", c.rpn_neg_iou);
  f("rpn_pre_nms", c.rpn_pre_nms);
  f("train_proposals", c.train_proposals);
  f("proposal_nms", c.proposal_nms);
  f("roi_batch", c.roi_batch);
  f("roi_pos_fraction", c.roi_pos_fraction);
  f("roi_fg_iou", c.roi_fg_iou);
  f("add_gt_to_proposals", c.add_gt_to_proposals);
  f("smooth_l1_beta", c.smooth_l1_beta);
}

template <typename C, typename F>
void visit_infer(C& c, F&& f) {
  f("pre_nms_top", c.pre_nms_top);
  f("proposals", c.proposals);
  f("proposal_nms", c.proposal_nms);
  f("score_threshold", c.score_threshold);
  f("max_detections", c.max_detections);
  f("nms_mode", c.nms_mode);
  f("nms_threshold", c.nms_threshold);
}

template <typename C, typename V>
json encode_fields(const C& c, V visit) {
  json j = json::object();
  visit(c, [&](const char* key, const auto& v) { j[key] = encode(v); });
  return j;
}

template <typename C, typename V>
C decode_fields(const json& j, const std::string& section, V visit) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  C c;
  std::set<std::string> known;
  visit(c, [&](const char* key, auto&) { known.insert(key); });
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown " + section + " key: " + key);
  }
  visit(c, [&](const char* key, auto& field) {
    if (j.contains(key)) decode(j.at(key), section + "." + key, field);
  });
  return c;
}

json source_json(const DatasetSource& s) {
  if (s.path) return {{"path", s.path->string()}};
  return {{"spec", s.spec}, {"count", s.count}, {"seed", s.seed}};
}

DatasetSource source_from_json(const json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "path" && key != "spec" && key != "count" && key != "seed") {
      throw ConfigError("unknown " + section + " key: " + key);
    }
  }
  DatasetSource s;
  if (j.contains("path") && !j.at("path").is_null()) {
    if (j.contains("spec") || j.contains("count")) throw ConfigError(section + ": give either path or spec/count");
    std::string p;
    decode(j.at("path"), section + ".path", p);
    s.path = p;
    return s;
  }
  if (j.contains("spec")) s.spec = j.at("spec").get<data::SceneSpec>();
  if (j.contains("count")) decode(j.at("count"), section + ".count", s.count);
  if (j.contains("seed")) decode(j.at("seed"), section + ".seed", s.seed);
  return s;
}

}  // namespace

std::vector<data::SceneSample> materialize(const DatasetSource& src) {
  if (src.path) {
    if (!std::filesystem::exists(*src.path / "annotations.odgt")) {
      throw ConfigError("no dataset at " + src.path->string());
    }
    return data::load_dataset(*src.path);
  }
  return data::generate_dataset(src.spec, src.seed, src.count);
}

std::vector<double> default_anchor_ratios(nn::Variant v) {
  if (v == nn::Variant::V2F) return {0.5, 1.0, 1.5};
  return {1.0, 2.0, 3.0};
}

json to_json(const TrainConfig& c) { return encode_fields(c, [](auto& x, auto&& f) { visit_train(x, f); }); }
json to_json(const InferConfig& c) { return encode_fields(c, [](auto& x, auto&& f) { visit_infer(x, f); }); }

TrainConfig train_config_from_json(const json& j) {
  return decode_fields<TrainConfig>(j, "train", [](auto& x, auto&& f) { visit_train(x, f); });
}

InferConfig infer_config_from_json(const json& j) {
  return decode_fields<InferConfig>(j, "infer", [](auto& x, auto&& f) { visit_infer(x, f); });
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["arch"] = c.arch;
  j["train"] = to_json(c.train);
  j["infer"] = to_json(c.infer);
  j["train_data"] = c.train_data ? source_json(*c.train_data) : json(nullptr);
  j["test_data"] = c.test_data ? source_json(*c.test_data) : json(nullptr);
  j["output_dir"] = c.output_dir.string();
  j["match_iou"] = c.match_iou;
  j["sweep_thresholds"] = c.sweep_thresholds;
  return j;
}

ExperimentConfig parse(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"arch",       "train",     "infer",           "train_data", "test_data",
                                           "output_dir", "match_iou", "sweep_thresholds"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key: " + key);
  }
  ExperimentConfig c;
  if (j.contains("arch")) {
    const json& a = j.at("arch");
    if (a.is_object() && a.contains("variant")) {
      c.arch.variant = nn::variant_from_string(a.at("variant").get<std::string>());
    }
    c.arch.anchor_ratios = default_anchor_ratios(c.arch.variant);
    from_json(a, c.arch);
  }
  c.arch.validate();
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  c.train.validate();
  if (j.contains("infer")) c.infer = infer_config_from_json(j.at("infer"));
  if (j.contains("train_data") && !j.at("train_data").is_null()) {
    c.train_data = source_from_json(j.at("train_data"), "train_data");
  }
  if (j.contains("test_data") && !j.at("test_data").is_null()) {
    c.test_data = source_from_json(j.at("test_data"), "test_data");
  }
  if (j.contains("output_dir")) {
    std::string p;
    decode(j.at("output_dir"), "output_dir", p);
    c.output_dir = p;
  }
  if (j.contains("match_iou")) decode(j.at("match_iou"), "match_iou", c.match_iou);
  if (j.contains("sweep_thresholds")) decode(j.at("sweep_thresholds"), "sweep_thresholds", c.sweep_thresholds);
  if (!(c.match_iou > 0 && c.match_iou <= 1)) throw ConfigError("match_iou must lie in (0, 1]");
  return c;
}

ExperimentConfig resolve(std::span<const json> layers) {
  json merged = json::object();
  for (const json& layer : layers) {
    if (!layer.is_object()) throw ConfigError("config layer must be a JSON object");
    merged.merge_patch(layer);
  }
  return parse(merged);
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace v2f::config
