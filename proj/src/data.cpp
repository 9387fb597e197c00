#include "v2f/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "v2f/errors.hpp"
#include "v2f/rng.hpp"

namespace v2f::data {

using nlohmann::json;

void SceneSpec::validate() const {
  auto fail = [](const std::string& m) { throw SpecInfeasible("invalid scene spec: " + m); };
  if (width < 64 || height < 64) fail("image dims must be >= 64");
  if (count_min < 0 || count_max < count_min) fail("empty pedestrian count range");
  if (!(height_min > 0) || height_max < height_min) fail("empty height range");
  if (!(aspect_min > 0) || aspect_max < aspect_min) fail("empty aspect range");
  if (!(crowding >= 0 && crowding <= 1)) fail("crowding must lie in [0, 1]");
  if (!(noise >= 0)) fail("noise amplitude must be non-negative");
  if (!(min_visible_area >= 1)) fail("min_visible_area must be >= 1");
  if (height_max > height) fail("height_max exceeds image height");
  if (height_max / aspect_min > width) fail("widest pedestrian exceeds image width");
  if (max_attempts < 1) fail("max_attempts must be positive");
}

void to_json(json& j, const SceneSpec& s) {
  j = json{{"width", s.width},
           {"height", s.height},
           {"count_min", s.count_min},
           {"count_max", s.count_max},
           {"height_min", s.height_min},
           {"height_max", s.height_max},
           {"aspect_min", s.aspect_min},
           {"aspect_max", s.aspect_max},
           {"crowding", s.crowding},
           {"noise", s.noise},
           {"min_visible_area", s.min_visible_area},
           {"max_pair_iou", s.max_pair_iou},
           {"max_attempts", s.max_attempts}};
}

void from_json(const json& j, SceneSpec& s) {
  if (!j.is_object()) throw ConfigError("scene spec must be a JSON object");
  const json defaults = SceneSpec{};
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown scene spec key: " + key);
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      try {
        j.at(key).get_to(field);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for scene spec key ") + key + ": " + e.what());
      }
    }
  };
  get("width", s.width);
  get("height", s.height);
  get("count_min", s.count_min);
  get("count_max", s.count_max);
  get("height_min", s.height_min);
  get("height_max", s.height_max);
  get("aspect_min", s.aspect_min);
  get("aspect_max", s.aspect_max);
  get("crowding", s.crowding);
  get("noise", s.noise);
  get("min_visible_area", s.min_visible_area);
  get("max_pair_iou", s.max_pair_iou);
  get("max_attempts", s.max_attempts);
}

namespace {

struct PixelRange {
  int begin, end;
};

// Pixels whose centers fall inside [lo, hi), clipped to [0, limit).
PixelRange pixel_range(double lo, double hi, int limit) {
  const int b = std::max(0, static_cast<int>(std::ceil(lo - 0.5)));
  const int e = std::min(limit, static_cast<int>(std::ceil(hi - 0.5)));
  return {b, std::max(b, e)};
}

}  // namespace

std::optional<Box> occlusion_visible_box(const Box& full, std::span<const Box> occluders, ImageBounds bounds,
                                         double min_area) {
  const int img_w = static_cast<int>(std::floor(bounds.width));
  const int img_h = static_cast<int>(std::floor(bounds.height));
  const PixelRange xr = pixel_range(full.x1(), full.x2(), img_w);
  const PixelRange yr = pixel_range(full.y1(), full.y2(), img_h);
  const int w = xr.end - xr.begin;
  const int h = yr.end - yr.begin;
  if (w <= 0 || h <= 0) return std::nullopt;

  std::vector<std::uint8_t> covered(static_cast<std::size_t>(w) * h, 0);
  for (const Box& o : occluders) {
    const PixelRange ox = pixel_range(o.x1(), o.x2(), img_w);
    const PixelRange oy = pixel_range(o.y1(), o.y2(), img_h);
    for (int y = std::max(oy.begin, yr.begin); y < std::min(oy.end, yr.end); ++y) {
      for (int x = std::max(ox.begin, xr.begin); x < std::min(ox.end, xr.end); ++x) {
        covered[static_cast<std::size_t>(y - yr.begin) * w + (x - xr.begin)] = 1;
      }
    }
  }
  int min_x = img_w, min_y = img_h, max_x = -1, max_y = -1;
  std::size_t count = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (covered[static_cast<std::size_t>(y) * w + x]) continue;
      ++count;
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
    }
  }
  if (count == 0 || static_cast<double>(count) < min_area) return std::nullopt;
  return Box(xr.begin + min_x, yr.begin + min_y, xr.begin + max_x + 1, yr.begin + max_y + 1);
}

namespace {

struct Placed {
  Box full;
  float color[3];
};

float quantize(double v) {
  return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

void paint_pedestrian(std::vector<double>& canvas, int img_w, int img_h, const Placed& p) {
  const Box& f = p.full;
  const PixelRange xr = pixel_range(f.x1(), f.x2(), img_w);
  const PixelRange yr = pixel_range(f.y1(), f.y2(), img_h);
  const double head_end = f.y1() + 0.2 * f.height();
  const double torso_end = f.y1() + 0.6 * f.height();
  const double mid = f.cx();
  static constexpr double kSkin[3] = {0.95, 0.82, 0.66};
  for (int y = yr.begin; y < yr.end; ++y) {
    const double py = y + 0.5;
    for (int x = xr.begin; x < xr.end; ++x) {
      const double px = x + 0.5;
      double rgb[3];
      const bool border = x == xr.begin || x == xr.end - 1 || y == yr.begin || y == yr.end - 1;
      if (border) {
        rgb[0] = rgb[1] = rgb[2] = 0.05;
      } else if (py < head_end) {
        for (int c = 0; c < 3; ++c) rgb[c] = kSkin[c];
      } else {
        const double shade = (py < torso_end ? 1.0 : 0.55) * (px < mid ? 1.0 : 0.75);
        for (int c = 0; c < 3; ++c) rgb[c] = p.color[c] * shade;
      }
      for (int c = 0; c < 3; ++c) canvas[(static_cast<std::size_t>(y) * img_w + x) * 3 + c] = rgb[c];
    }
  }
}

}  // namespace

SceneSample generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const ImageBounds bounds{static_cast<double>(spec.width), static_cast<double>(spec.height)};
  const int n = rng.uniform_int(spec.count_min, spec.count_max);

  const int n_clusters = 1 + n / 5;
  std::vector<std::pair<double, double>> clusters;
  for (int c = 0; c < n_clusters; ++c) {
    clusters.emplace_back(rng.uniform(0.2, 0.8) * spec.width, rng.uniform(0.35, 0.65) * spec.height);
  }

  std::vector<Placed> placed;
  for (int i = 0; i < n; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      const double h = std::round(rng.uniform(spec.height_min, spec.height_max));
      const double w = std::max(4.0, std::round(h / rng.uniform(spec.aspect_min, spec.aspect_max)));
      double cx, cy;
      if (rng.uniform() < spec.crowding) {
        const auto& cl = clusters[static_cast<std::size_t>(rng.uniform_int(0, n_clusters - 1))];
        cx = cl.first + rng.uniform(-0.9, 0.9) * w;
        cy = cl.second + rng.uniform(-0.15, 0.15) * h;
      } else {
        cx = rng.uniform(0.5 * w, spec.width - 0.5 * w);
        cy = rng.uniform(0.5 * h, spec.height - 0.5 * h);
      }
      const double x1 = std::clamp(std::round(cx - 0.5 * w), 0.0, spec.width - w);
      const double y1 = std::clamp(std::round(cy - 0.5 * h), 0.0, spec.height - h);
      const Box full(x1, y1, x1 + w, y1 + h);
      ok = std::none_of(placed.begin(), placed.end(),
                        [&](const Placed& p) { return iou(p.full, full) > spec.max_pair_iou; });
      if (ok) {
        Placed p{full, {}};
        for (float& c : p.color) c = static_cast<float>(rng.uniform(0.15, 0.95));
        placed.push_back(p);
      }
    }
    if (!ok) {
      throw SpecInfeasible("could not place pedestrian " + std::to_string(i) + " after " +
                           std::to_string(spec.max_attempts) + " attempts");
    }
  }

  // depth[k] = index of the k-th pedestrian from the back.
  std::vector<std::size_t> depth(placed.size());
  std::iota(depth.begin(), depth.end(), 0);
  rng.shuffle(depth);

  SceneSample sample;
  sample.seed = seed;
  sample.image = Image(spec.width, spec.height);
  std::vector<double> canvas(sample.image.data.size());
  for (double& v : canvas) v = 0.5 + rng.uniform(-spec.noise, spec.noise);

  for (std::size_t k = 0; k < depth.size(); ++k) {
    const Placed& p = placed[depth[k]];
    std::vector<Box> nearer;
    for (std::size_t m = k + 1; m < depth.size(); ++m) nearer.push_back(placed[depth[m]].full);
    if (auto vis = occlusion_visible_box(p.full, nearer, bounds, spec.min_visible_area)) {
      sample.pedestrians.push_back({*vis, p.full, false});
    }
    paint_pedestrian(canvas, spec.width, spec.height, p);
  }
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double jitter = spec.noise * 0.5 * rng.uniform(-1.0, 1.0);
    sample.image.data[i] = quantize(canvas[i] + jitter);
  }
  return sample;
}

// ---------------------------------------------------------------- odgt

namespace {

Box parse_xywh(const json& arr, std::size_t line_no, const char* field) {
  if (!arr.is_array() || arr.size() != 4) {
    throw ParseError("line " + std::to_string(line_no) + ": " + field + " must be [x, y, w, h]");
  }
  double v[4];
  for (int i = 0; i < 4; ++i) {
    if (!arr[i].is_number()) throw ParseError("line " + std::to_string(line_no) + ": non-numeric " + field);
    v[i] = arr[i].get<double>();
  }
  if (!(v[2] > 0) || !(v[3] > 0)) {
    throw GeometryError("line " + std::to_string(line_no) + ": " + field + " has non-positive width or height");
  }
  try {
    return Box::from_xywh(v[0], v[1], v[2], v[3]);
  } catch (const DegenerateBox& e) {
    throw GeometryError("line " + std::to_string(line_no) + ": " + e.what());
  }
}

json xywh(const Box& b) { return json::array({b.x1(), b.y1(), b.width(), b.height()}); }

}  // namespace

std::vector<OdgtRecord> parse_odgt(std::istream& in) {
  std::vector<OdgtRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!obj.is_object() || !obj.contains("ID") || !obj.contains("gtboxes") || !obj["gtboxes"].is_array()) {
      throw ParseError("line " + std::to_string(line_no) + ": missing ID or gtboxes");
    }
    OdgtRecord rec;
    rec.id = obj["ID"].is_string() ? obj["ID"].get<std::string>() : obj["ID"].dump();
    for (const json& gt : obj["gtboxes"]) {
      if (!gt.is_object() || !gt.contains("tag")) {
        throw ParseError("line " + std::to_string(line_no) + ": gtbox without tag");
      }
      if (gt["tag"] != "person") continue;
      if (!gt.contains("fbox") || !gt.contains("vbox")) {
        throw ParseError("line " + std::to_string(line_no) + ": person without fbox/vbox");
      }
      const Box full = parse_xywh(gt["fbox"], line_no, "fbox");
      const Box vis = parse_xywh(gt["vbox"], line_no, "vbox");
      bool ignore = false;
      if (gt.contains("extra") && gt["extra"].is_object() && gt["extra"].contains("ignore")) {
        const json& ig = gt["extra"]["ignore"];
        ignore = ig.is_number() ? ig.get<double>() != 0 : ig.is_boolean() && ig.get<bool>();
      }
      rec.pedestrians.push_back({vis, full, ignore});
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<OdgtRecord> load_odgt(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open odgt file: " + path.string());
  return parse_odgt(in);
}

std::string odgt_line(const OdgtRecord& record) {
  json boxes = json::array();
  for (const auto& p : record.pedestrians) {
    boxes.push_back({{"tag", "person"},
                     {"fbox", xywh(p.full)},
                     {"vbox", xywh(p.visible)},
                     {"extra", {{"ignore", p.ignore ? 1 : 0}}}});
  }
  return json{{"ID", record.id}, {"gtboxes", boxes}}.dump();
}

// ---------------------------------------------------------------- datasets

std::uint64_t scene_seed(std::uint64_t root_seed, std::size_t index) {
  return Rng::derive(root_seed, 0x5ce9e, index).next();
}

std::vector<SceneSample> generate_dataset(const SceneSpec& spec, std::uint64_t root_seed, std::size_t count) {
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSample s = generate_scene(spec, scene_seed(root_seed, i));
    s.id = "scene_" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const SceneSpec& spec, std::uint64_t root_seed,
                   std::span<const SceneSample> samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream odgt(dir / "annotations.odgt", std::ios::binary);
  if (!odgt) throw IoError("cannot write " + (dir / "annotations.odgt").string());
  json seeds = json::array();
  for (const SceneSample& s : samples) {
    write_png(dir / "images" / (s.id + ".png"), s.image);
    odgt << odgt_line({s.id, s.pedestrians}) << '\n';
    seeds.push_back(s.seed);
  }
  const json spec_json = spec;
  json manifest{{"spec", spec_json},
                {"spec_hash", hash_json(spec_json)},
                {"root_seed", root_seed},
                {"count", samples.size()},
                {"seeds", seeds}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<SceneSample> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  const auto records = load_odgt(dir / "annotations.odgt");
  std::vector<std::uint64_t> seeds;
  if (fs::exists(dir / "manifest.json")) {
    std::ifstream in(dir / "manifest.json");
    try {
      const json m = json::parse(in);
      if (m.contains("seeds")) seeds = m["seeds"].get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      throw ParseError("bad dataset manifest: " + std::string(e.what()));
    }
  }
  std::vector<SceneSample> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    SceneSample s;
    s.id = records[i].id;
    s.pedestrians = records[i].pedestrians;
    s.image = read_png_image(dir / "images" / (s.id + ".png"));
    s.seed = i < seeds.size() ? seeds[i] : i;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace v2f::data
