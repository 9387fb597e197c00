#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "v2f/geometry.hpp"
#include "v2f/image.hpp"

namespace v2f::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Detector family. Decides which heads exist and what the region head regresses.
enum class Variant {
  F,         ///< full-box detector
  VandF,     ///< joint full + visible regression from one region head
  F2,        ///< full-box detector followed by a second full-box refinement head
  V2F,       ///< visible-box detector followed by full-body estimation (+ part module)
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// Architecture hyper-parameters. Everything that changes parameter shapes or
/// forward semantics lives here and feeds the checkpoint compatibility hash.
struct ArchConfig {
  Variant variant = Variant::V2F;
  std::vector<int> conv_channels{16, 32, 64, 64};
  std::vector<int> conv_strides{2, 2, 2, 1};
  int rpn_channels = 64;
  int roi_size = 7;
  int fc_width = 256;
  int part_dim = 64;
  double anchor_base = 32;  ///< stride * 4 at stride 8
  double anchor_scale = 1;
  std::vector<double> anchor_ratios{0.5, 1.0, 1.5};  ///< H / W

  int stride() const;
  int channels() const { return conv_channels.empty() ? 3 : conv_channels.back(); }
  int num_anchors() const { return static_cast<int>(anchor_ratios.size()); }
  int roi_features() const { return channels() * roi_size * roi_size; }

  /// Throws ShapeMismatch / ConfigError on inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);
std::string arch_hash(const ArchConfig& a);

using ParamMap = std::map<std::string, Mat>;

/// Named parameter arrays plus the architecture that fixes their shapes.
struct ModelParams {
  ArchConfig arch;
  ParamMap values;
};

/// Names and shapes every parameter of the architecture must have.
std::map<std::string, std::pair<int, int>> expected_shapes(const ArchConfig& arch);

/// He-normal convolution / FC init, small output layers, part embeddings
/// uniform in [-0.0005, 0.0005].
ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);

/// Throws ShapeMismatch if any tensor is missing or mis-shaped.
void check_params(const ModelParams& p);

ParamMap zeros_like(const ParamMap& p);

/// Channels x (H*W) values, column p = pixel (p / W, p % W).
struct FeatureMap {
  Mat values;
  int height = 0;
  int width = 0;
  int stride = 1;

  int channels() const { return static_cast<int>(values.rows()); }
};

/// Converts an image into a 3 x (H*W) centered input plane.
FeatureMap image_plane(const Image& img);

// ------------------------------------------------------------------ conv

struct ConvCache {
  Mat cols;  ///< (9 * Cin) x (Hout * Wout)
  int in_h = 0, in_w = 0, in_c = 0, out_h = 0, out_w = 0, stride = 1;
};

/// 3x3 convolution, zero padding 1. weights: Cout x (9 * Cin) with row index
/// (ky * 3 + kx) * Cin + ci.
FeatureMap conv3x3_forward(const FeatureMap& in, const Mat& weights, const Mat& bias, int stride, ConvCache& cache);
/// Accumulates into dW/db; returns d(input) when need_input_grad.
Mat conv3x3_backward(const ConvCache& cache, const Mat& dout, const Mat& weights, Mat& dW, Mat& db,
                     bool need_input_grad);

void relu_inplace(Mat& m);

/// While alive, folds the branch taken by every piecewise operation evaluated
/// on this thread (rectifier on/off, smooth-L1 regime, log clamp) into a
/// fingerprint. Gradient checks use it to spot finite-difference steps that
/// cross a kink.
class BranchPatternRecorder {
 public:
  BranchPatternRecorder();
  ~BranchPatternRecorder();
  BranchPatternRecorder(const BranchPatternRecorder&) = delete;
  BranchPatternRecorder& operator=(const BranchPatternRecorder&) = delete;

  std::uint64_t fingerprint() const { return hash_; }
  void reset() { hash_ = 0xcbf29ce484222325ULL; }
  void record(const Mat& pre_activation);
  void record(bool branch);

  /// Recorder active on this thread, or null.
  static BranchPatternRecorder* active();

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  BranchPatternRecorder* previous_;
};
/// dY masked by (Y > 0).
void relu_backward_inplace(Mat& dy, const Mat& y);

// ---------------------------------------------------------------- linear

/// Y = W X + b, columns are samples.
Mat linear_forward(const Mat& w, const Mat& b, const Mat& x);
/// Accumulates dW/db, returns dX.
Mat linear_backward(const Mat& w, const Mat& x, const Mat& dy, Mat& dw, Mat& db);

/// Two FC layers with rectifiers: h2 = relu(W2 relu(W1 x + b1) + b2).
struct TwoFcCache {
  Mat x, h1, h2;
};
Mat two_fc_forward(const ParamMap& p, const std::string& prefix, const Mat& x, TwoFcCache& cache);
/// dh2 -> dx, accumulating into grads.
Mat two_fc_backward(const ParamMap& p, const std::string& prefix, const TwoFcCache& cache, Mat dh2,
                    ParamMap& grads);

// ---------------------------------------------------------------- losses

/// Binary cross-entropy on a logit; writes dL/dz.
double bce_with_logit(double z, double y, double* dz);

/// Smooth-L1 with transition point beta; writes dL/dx.
double smooth_l1(double x, double beta, double* dx);

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// -------------------------------------------------------------- backbone

struct BackboneCache {
  std::vector<ConvCache> convs;
  std::vector<Mat> outputs;  ///< post-rectifier activations per layer
};

/// Strided 3x3 conv stack with rectifiers. Throws ShapeMismatch if params do
/// not fit the architecture or the image is not divisible by the stride.
FeatureMap extract_features(const Image& img, const ModelParams& params, BackboneCache* cache = nullptr);
FeatureMap extract_features(const FeatureMap& input, const ModelParams& params, BackboneCache* cache = nullptr);
void backbone_backward(const BackboneCache& cache, Mat dfeatures, const ModelParams& params, ParamMap& grads);

// -------------------------------------------------------------- roi align

/// Sparse bilinear sampling plan for one box: for each of k*k bins, a list of
/// (feature pixel, weight) pairs.
struct RoiSampling {
  int k = 0;
  std::vector<int> bin_begin;  ///< size k*k + 1
  std::vector<std::pair<int, double>> taps;
};

/// 2x2 bilinear samples per bin, feature coordinates = image / stride - 0.5.
/// Throws DegenerateBox if area < 1 px^2.
RoiSampling roi_sampling(const FeatureMap& fm, const Box& box, int k);

/// Pooled feature, layout bin-major: element bin * C + c.
Vec roi_align(const FeatureMap& fm, const Box& box, int k);

/// Batched RoI-Align: (C*k*k) x N.
Mat roi_align_batch(const FeatureMap& fm, std::span<const Box> boxes, int k, std::vector<RoiSampling>* plans);
/// Scatter-adds the gradient of a batch back onto the feature map.
void roi_align_backward(const std::vector<RoiSampling>& plans, const Mat& dpooled, int channels, Mat& dfm);

// ------------------------------------------------------------ checkpoints

/// Single-file archive: magic line, manifest length, JSON manifest (names,
/// shapes, dtype, arch config and hash, caller metadata), raw float64 data.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const nlohmann::json& metadata = nlohmann::json::object());
/// Throws IoError / ParseError / ShapeMismatch.
ModelParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

}  // namespace v2f::nn
