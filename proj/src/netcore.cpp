#include "v2f/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "v2f/errors.hpp"
#include "v2f/hash.hpp"
#include "v2f/rng.hpp"

namespace v2f::nn {

using nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::F: return "F";
    case Variant::VandF: return "V&F";
    case Variant::F2: return "F2";
    case Variant::V2F: return "V2F";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "F") return Variant::F;
  if (s == "V&F" || s == "VF" || s == "VandF") return Variant::VandF;
  if (s == "F2" || s == "F^2" || s == "F²") return Variant::F2;
  if (s == "V2F") return Variant::V2F;
  throw ConfigError("unknown variant: " + s);
}

int ArchConfig::stride() const {
  int s = 1;
  for (int v : conv_strides) s *= v;
  return s;
}

void ArchConfig::validate() const {
  if (conv_channels.empty() || conv_channels.size() != conv_strides.size()) {
    throw ConfigError("conv_channels and conv_strides must be non-empty and of equal length");
  }
  for (int c : conv_channels)
    if (c <= 0) throw ConfigError("conv channel counts must be positive");
  for (int s : conv_strides)
    if (s != 1 && s != 2) throw ConfigError("conv strides must be 1 or 2");
  if (rpn_channels <= 0 || roi_size <= 0 || fc_width <= 0 || part_dim <= 0) {
    throw ConfigError("layer widths must be positive");
  }
  if (anchor_ratios.empty() || !(anchor_base > 0) || !(anchor_scale > 0)) {
    throw ConfigError("anchor settings must be positive and non-empty");
  }
  for (double r : anchor_ratios)
    if (!(r > 0)) throw ConfigError("anchor ratios must be positive");
}

void to_json(json& j, const ArchConfig& a) {
  j = json{{"variant", to_string(a.variant)},     {"conv_channels", a.conv_channels},
           {"conv_strides", a.conv_strides},      {"rpn_channels", a.rpn_channels},
           {"roi_size", a.roi_size},              {"fc_width", a.fc_width},
           {"part_dim", a.part_dim},              {"anchor_base", a.anchor_base},
           {"anchor_scale", a.anchor_scale},      {"anchor_ratios", a.anchor_ratios}};
}

void from_json(const json& j, ArchConfig& a) {
  if (!j.is_object()) throw ConfigError("arch must be a JSON object");
  const json defaults = ArchConfig{};
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown arch key: " + key);
  }
  try {
    if (j.contains("variant")) a.variant = variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("conv_channels")) j.at("conv_channels").get_to(a.conv_channels);
    if (j.contains("conv_strides")) j.at("conv_strides").get_to(a.conv_strides);
    if (j.contains("rpn_channels")) j.at("rpn_channels").get_to(a.rpn_channels);
    if (j.contains("roi_size")) j.at("roi_size").get_to(a.roi_size);
    if (j.contains("fc_width")) j.at("fc_width").get_to(a.fc_width);
    if (j.contains("part_dim")) j.at("part_dim").get_to(a.part_dim);
    if (j.contains("anchor_base")) j.at("anchor_base").get_to(a.anchor_base);
    if (j.contains("anchor_scale")) j.at("anchor_scale").get_to(a.anchor_scale);
    if (j.contains("anchor_ratios")) j.at("anchor_ratios").get_to(a.anchor_ratios);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad arch value: ") + e.what());
  }
}

std::string arch_hash(const ArchConfig& a) { return hash_json(json(a)); }

std::map<std::string, std::pair<int, int>> expected_shapes(const ArchConfig& arch) {
  std::map<std::string, std::pair<int, int>> s;
  int cin = 3;
  for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
    const std::string n = "backbone.conv" + std::to_string(i);
    s[n + ".w"] = {arch.conv_channels[i], 9 * cin};
    s[n + ".b"] = {arch.conv_channels[i], 1};
    cin = arch.conv_channels[i];
  }
  const int c = arch.channels(), r = arch.rpn_channels, a = arch.num_anchors();
  const int f = arch.fc_width, roi = arch.roi_features(), dp = arch.part_dim;
  s["rpn.conv.w"] = {r, 9 * c};
  s["rpn.conv.b"] = {r, 1};
  s["rpn.cls.w"] = {a, r};
  s["rpn.cls.b"] = {a, 1};
  s["rpn.reg.w"] = {4 * a, r};
  s["rpn.reg.b"] = {4 * a, 1};
  s["rcnn.fc1.w"] = {f, roi};
  s["rcnn.fc1.b"] = {f, 1};
  s["rcnn.fc2.w"] = {f, f};
  s["rcnn.fc2.b"] = {f, 1};
  s["rcnn.cls.w"] = {1, f};
  s["rcnn.cls.b"] = {1, 1};
  s["rcnn.reg.w"] = {4, f};
  s["rcnn.reg.b"] = {4, 1};
  if (arch.variant == Variant::VandF) {
    s["rcnn.reg_vis.w"] = {4, f};
    s["rcnn.reg_vis.b"] = {4, 1};
  }
  auto estimator = [&](const std::string& prefix) {
    s[prefix + ".fc1.w"] = {f, roi};
    s[prefix + ".fc1.b"] = {f, 1};
    s[prefix + ".fc2.w"] = {dp, f};
    s[prefix + ".fc2.b"] = {dp, 1};
    s[prefix + ".reg.w"] = {4, dp};
    s[prefix + ".reg.b"] = {4, 1};
  };
  if (arch.variant == Variant::V2F) {
    estimator("fen");
    s["epm.embed"] = {static_cast<int>(kNumParts), dp};
  }
  if (arch.variant == Variant::F2) estimator("refine");
  return s;
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  ModelParams p;
  p.arch = arch;
  Rng rng = Rng::derive(seed, 0x1417);
  for (const auto& [name, shape] : expected_shapes(arch)) {
    Mat m = Mat::Zero(shape.first, shape.second);
    const bool is_bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (name == "epm.embed") {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-0.0005, 0.0005);
    } else if (!is_bias) {
      double std_dev = std::sqrt(2.0 / static_cast<double>(shape.second));
      if (name == "rpn.cls.w" || name == "rpn.reg.w" || name == "rcnn.cls.w") std_dev = 0.01;
      if (name.find(".reg") != std::string::npos && name.rfind("rpn", 0) != 0) std_dev = 0.001;
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std_dev * rng.normal();
    }
    p.values.emplace(name, std::move(m));
  }
  return p;
}

void check_params(const ModelParams& p) {
  for (const auto& [name, shape] : expected_shapes(p.arch)) {
    auto it = p.values.find(name);
    if (it == p.values.end()) throw ShapeMismatch("missing parameter " + name);
    if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
      throw ShapeMismatch("parameter " + name + " has shape " + std::to_string(it->second.rows()) + "x" +
                          std::to_string(it->second.cols()) + ", expected " + std::to_string(shape.first) + "x" +
                          std::to_string(shape.second));
    }
  }
}

ParamMap zeros_like(const ParamMap& p) {
  ParamMap z;
  for (const auto& [name, m] : p) z.emplace(name, Mat::Zero(m.rows(), m.cols()));
  return z;
}

FeatureMap image_plane(const Image& img) {
  FeatureMap fm;
  fm.height = img.height;
  fm.width = img.width;
  fm.values.resize(3, static_cast<Eigen::Index>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) fm.values(c, y * img.width + x) = static_cast<double>(img.at(y, x, c)) - 0.5;
    }
  }
  return fm;
}

// ------------------------------------------------------------------ conv

FeatureMap conv3x3_forward(const FeatureMap& in, const Mat& weights, const Mat& bias, int stride, ConvCache& cache) {
  const int cin = in.channels();
  if (weights.cols() != 9 * cin || bias.rows() != weights.rows()) {
    throw ShapeMismatch("conv weights do not match input channels");
  }
  cache.in_h = in.height;
  cache.in_w = in.width;
  cache.in_c = cin;
  cache.stride = stride;
  cache.out_h = (in.height - 1) / stride + 1;
  cache.out_w = (in.width - 1) / stride + 1;
  cache.cols.setZero(9 * cin, static_cast<Eigen::Index>(cache.out_h) * cache.out_w);
  for (int oy = 0; oy < cache.out_h; ++oy) {
    for (int ox = 0; ox < cache.out_w; ++ox) {
      double* col = cache.cols.col(oy * cache.out_w + ox).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= in.width) continue;
          std::memcpy(col + (ky * 3 + kx) * cin, in.values.col(iy * in.width + ix).data(),
                      sizeof(double) * static_cast<std::size_t>(cin));
        }
      }
    }
  }
  FeatureMap out;
  out.height = cache.out_h;
  out.width = cache.out_w;
  out.stride = in.stride * stride;
  out.values.noalias() = weights * cache.cols;
  out.values.colwise() += bias.col(0);
  return out;
}

Mat conv3x3_backward(const ConvCache& cache, const Mat& dout, const Mat& weights, Mat& dW, Mat& db,
                     bool need_input_grad) {
  dW.noalias() += dout * cache.cols.transpose();
  db.col(0) += dout.rowwise().sum();
  if (!need_input_grad) return {};
  const Mat dcols = weights.transpose() * dout;
  const int cin = cache.in_c;
  Mat din = Mat::Zero(cin, static_cast<Eigen::Index>(cache.in_h) * cache.in_w);
  for (int oy = 0; oy < cache.out_h; ++oy) {
    for (int ox = 0; ox < cache.out_w; ++ox) {
      const auto col = dcols.col(oy * cache.out_w + ox);
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * cache.stride + ky - 1;
        if (iy < 0 || iy >= cache.in_h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * cache.stride + kx - 1;
          if (ix < 0 || ix >= cache.in_w) continue;
          din.col(iy * cache.in_w + ix) += col.segment((ky * 3 + kx) * cin, cin);
        }
      }
    }
  }
  return din;
}

namespace {
thread_local BranchPatternRecorder* active_recorder = nullptr;
}  // namespace

BranchPatternRecorder::BranchPatternRecorder() : previous_(active_recorder) { active_recorder = this; }
BranchPatternRecorder::~BranchPatternRecorder() { active_recorder = previous_; }

void BranchPatternRecorder::record(const Mat& pre_activation) {
  for (Eigen::Index i = 0; i < pre_activation.size(); ++i) {
    hash_ ^= pre_activation.data()[i] > 0.0 ? 0x9fu : 0x3au;
    hash_ *= 0x100000001b3ULL;
  }
}

void BranchPatternRecorder::record(bool branch) {
  hash_ ^= branch ? 0x9fu : 0x3au;
  hash_ *= 0x100000001b3ULL;
}

BranchPatternRecorder* BranchPatternRecorder::active() { return active_recorder; }

void relu_inplace(Mat& m) {
  if (active_recorder) active_recorder->record(m);
  m = m.cwiseMax(0.0);
}

void relu_backward_inplace(Mat& dy, const Mat& y) { dy = (y.array() > 0.0).select(dy, 0.0); }

// ---------------------------------------------------------------- linear

Mat linear_forward(const Mat& w, const Mat& b, const Mat& x) {
  if (w.cols() != x.rows()) throw ShapeMismatch("linear layer input width mismatch");
  Mat y = w * x;
  y.colwise() += b.col(0);
  return y;
}

Mat linear_backward(const Mat& w, const Mat& x, const Mat& dy, Mat& dw, Mat& db) {
  dw.noalias() += dy * x.transpose();
  db.col(0) += dy.rowwise().sum();
  return w.transpose() * dy;
}

Mat two_fc_forward(const ParamMap& p, const std::string& prefix, const Mat& x, TwoFcCache& cache) {
  cache.x = x;
  cache.h1 = linear_forward(p.at(prefix + ".fc1.w"), p.at(prefix + ".fc1.b"), x);
  relu_inplace(cache.h1);
  cache.h2 = linear_forward(p.at(prefix + ".fc2.w"), p.at(prefix + ".fc2.b"), cache.h1);
  relu_inplace(cache.h2);
  return cache.h2;
}

Mat two_fc_backward(const ParamMap& p, const std::string& prefix, const TwoFcCache& cache, Mat dh2,
                    ParamMap& grads) {
  relu_backward_inplace(dh2, cache.h2);
  Mat dh1 = linear_backward(p.at(prefix + ".fc2.w"), cache.h1, dh2, grads.at(prefix + ".fc2.w"),
                            grads.at(prefix + ".fc2.b"));
  relu_backward_inplace(dh1, cache.h1);
  return linear_backward(p.at(prefix + ".fc1.w"), cache.x, dh1, grads.at(prefix + ".fc1.w"),
                         grads.at(prefix + ".fc1.b"));
}

// ---------------------------------------------------------------- losses

double bce_with_logit(double z, double y, double* dz) {
  // log(1 + e^z) - y z, evaluated without overflow.
  const double loss = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  if (dz) *dz = sigmoid(z) - y;
  return loss;
}

double smooth_l1(double x, double beta, double* dx) {
  const double ax = std::abs(x);
  if (active_recorder) active_recorder->record(ax < beta);
  if (ax < beta) {
    if (dx) *dx = x / beta;
    return 0.5 * x * x / beta;
  }
  if (dx) *dx = x > 0 ? 1.0 : -1.0;
  return ax - 0.5 * beta;
}

// -------------------------------------------------------------- backbone

FeatureMap extract_features(const FeatureMap& input, const ModelParams& params, BackboneCache* cache) {
  const ArchConfig& arch = params.arch;
  const int stride = arch.stride();
  if (input.height % stride != 0 || input.width % stride != 0) {
    throw ShapeMismatch("image dims " + std::to_string(input.width) + "x" + std::to_string(input.height) +
                        " are not divisible by the feature stride " + std::to_string(stride));
  }
  if (cache) {
    cache->convs.assign(arch.conv_channels.size(), {});
    cache->outputs.clear();
  }
  FeatureMap cur = input;
  for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
    const std::string n = "backbone.conv" + std::to_string(i);
    auto w = params.values.find(n + ".w");
    auto b = params.values.find(n + ".b");
    if (w == params.values.end() || b == params.values.end()) throw ShapeMismatch("missing parameter " + n);
    ConvCache local;
    ConvCache& cc = cache ? cache->convs[i] : local;
    cur = conv3x3_forward(cur, w->second, b->second, arch.conv_strides[i], cc);
    relu_inplace(cur.values);
    if (cache) cache->outputs.push_back(cur.values);
  }
  return cur;
}

FeatureMap extract_features(const Image& img, const ModelParams& params, BackboneCache* cache) {
  return extract_features(image_plane(img), params, cache);
}

void backbone_backward(const BackboneCache& cache, Mat dfeatures, const ModelParams& params, ParamMap& grads) {
  for (std::size_t i = cache.convs.size(); i-- > 0;) {
    const std::string n = "backbone.conv" + std::to_string(i);
    relu_backward_inplace(dfeatures, cache.outputs[i]);
    dfeatures = conv3x3_backward(cache.convs[i], dfeatures, params.values.at(n + ".w"), grads.at(n + ".w"),
                                 grads.at(n + ".b"), i > 0);
  }
}

// -------------------------------------------------------------- roi align

RoiSampling roi_sampling(const FeatureMap& fm, const Box& box, int k) {
  if (box.area() < 1.0) throw DegenerateBox("RoI smaller than one pixel");
  const double s = fm.stride;
  const double x0 = box.x1() / s - 0.5, y0 = box.y1() / s - 0.5;
  const double bw = box.width() / s / k, bh = box.height() / s / k;
  const int H = fm.height, W = fm.width;

  RoiSampling plan;
  plan.k = k;
  plan.bin_begin.reserve(static_cast<std::size_t>(k) * k + 1);
  plan.taps.reserve(static_cast<std::size_t>(k) * k * 16);
  for (int ph = 0; ph < k; ++ph) {
    for (int pw = 0; pw < k; ++pw) {
      plan.bin_begin.push_back(static_cast<int>(plan.taps.size()));
      for (int iy = 0; iy < 2; ++iy) {
        double y = y0 + ph * bh + (iy + 0.5) * bh / 2;
        for (int ix = 0; ix < 2; ++ix) {
          double x = x0 + pw * bw + (ix + 0.5) * bw / 2;
          if (y < -1.0 || y > H || x < -1.0 || x > W) continue;
          y = std::clamp(y, 0.0, static_cast<double>(H - 1));
          x = std::clamp(x, 0.0, static_cast<double>(W - 1));
          const int ylo = std::min(static_cast<int>(y), H - 1), xlo = std::min(static_cast<int>(x), W - 1);
          const int yhi = std::min(ylo + 1, H - 1), xhi = std::min(xlo + 1, W - 1);
          const double ly = y - ylo, lx = x - xlo;
          const double hy = 1 - ly, hx = 1 - lx;
          plan.taps.emplace_back(ylo * W + xlo, 0.25 * hy * hx);
          plan.taps.emplace_back(ylo * W + xhi, 0.25 * hy * lx);
          plan.taps.emplace_back(yhi * W + xlo, 0.25 * ly * hx);
          plan.taps.emplace_back(yhi * W + xhi, 0.25 * ly * lx);
        }
      }
    }
  }
  plan.bin_begin.push_back(static_cast<int>(plan.taps.size()));
  return plan;
}

namespace {

void pool_into(const FeatureMap& fm, const RoiSampling& plan, double* out) {
  const int c = fm.channels();
  for (int bin = 0; bin < plan.k * plan.k; ++bin) {
    Eigen::Map<Vec> dst(out + static_cast<std::ptrdiff_t>(bin) * c, c);
    dst.setZero();
    for (int t = plan.bin_begin[bin]; t < plan.bin_begin[bin + 1]; ++t) {
      dst.noalias() += plan.taps[t].second * fm.values.col(plan.taps[t].first);
    }
  }
}

}  // namespace

Vec roi_align(const FeatureMap& fm, const Box& box, int k) {
  const RoiSampling plan = roi_sampling(fm, box, k);
  Vec out(static_cast<Eigen::Index>(fm.channels()) * k * k);
  pool_into(fm, plan, out.data());
  return out;
}

Mat roi_align_batch(const FeatureMap& fm, std::span<const Box> boxes, int k, std::vector<RoiSampling>* plans) {
  Mat out(static_cast<Eigen::Index>(fm.channels()) * k * k, static_cast<Eigen::Index>(boxes.size()));
  if (plans) plans->clear();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    RoiSampling plan = roi_sampling(fm, boxes[i], k);
    pool_into(fm, plan, out.col(static_cast<Eigen::Index>(i)).data());
    if (plans) plans->push_back(std::move(plan));
  }
  return out;
}

void roi_align_backward(const std::vector<RoiSampling>& plans, const Mat& dpooled, int channels, Mat& dfm) {
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const RoiSampling& plan = plans[i];
    const double* g = dpooled.col(static_cast<Eigen::Index>(i)).data();
    for (int bin = 0; bin < plan.k * plan.k; ++bin) {
      Eigen::Map<const Vec> src(g + static_cast<std::ptrdiff_t>(bin) * channels, channels);
      for (int t = plan.bin_begin[bin]; t < plan.bin_begin[bin + 1]; ++t) {
        dfm.col(plan.taps[t].first).noalias() += plan.taps[t].second * src;
      }
    }
  }
}

// ------------------------------------------------------------ checkpoints

namespace {
constexpr char kMagic[] = "V2FCKPT1\n";
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const json& metadata) {
  check_params(params);
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : params.values) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  }
  const json manifest{{"format", "v2f-checkpoint"},
                      {"dtype", "float64"},
                      {"arch", params.arch},
                      {"arch_hash", arch_hash(params.arch)},
                      {"tensors", tensors},
                      {"metadata", metadata}};
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic) - 1);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : params.values) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, json* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw ParseError("not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 28)) throw ParseError("corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  ModelParams p;
  try {
    p.arch = manifest.at("arch").get<ArchConfig>();
    if (manifest.at("arch_hash").get<std::string>() != arch_hash(p.arch)) {
      throw ShapeMismatch("checkpoint arch hash does not match its architecture");
    }
    for (const json& t : manifest.at("tensors")) {
      const auto rows = t.at("shape").at(0).get<Eigen::Index>();
      const auto cols = t.at("shape").at(1).get<Eigen::Index>();
      Mat m(rows, cols);
      in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
      if (!in) throw ParseError("truncated checkpoint data");
      p.values.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    if (metadata) *metadata = manifest.value("metadata", json::object());
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad checkpoint manifest: ") + e.what());
  }
  check_params(p);
  return p;
}

}  // namespace v2f::nn
