#pragma once

#include <array>

#include "v2f/geometry.hpp"
#include "v2f/netcore.hpp"

namespace v2f::epm {

enum class LabelMode { Hard, Soft };

/// Which area normalizes the part overlap: the input visible box (as the
/// IoA definition is written) or the part itself.
enum class IoaDenominator { Visible, Part };

using PartVector = std::array<double, kNumParts>;

struct PartLabelVector {
  PartVector y{};
  LabelMode mode = LabelMode::Hard;
};

/// Sigmoid responses, one per part.
struct PartResponseVector {
  PartVector r{};
};

inline constexpr double kLogEps = 1e-7;

/// r_i = sigmoid(<f, E_i>). Throws ShapeMismatch when dims disagree.
PartResponseVector part_response(const nn::Vec& feature, const nn::Mat& embedding);

/// Labels from the overlap of v with the five parts of the assigned full box.
PartLabelVector part_labels(const Box& visible, const Box& assigned_full, LabelMode mode,
                            IoaDenominator denom = IoaDenominator::Visible);

/// Labels for a box with no assigned pedestrian: nothing visible.
PartLabelVector negative_labels(LabelMode mode);

/// Summed binary cross-entropy over the parts, responses clamped to
/// [eps, 1 - eps] before the logs.
double epm_loss(const PartResponseVector& r, const PartLabelVector& y);

/// Batched loss, mean over samples. features: d_p x N, labels: 5 x N.
/// Gradients are scaled by `weight` and written to dfeatures / accumulated into dembedding.
struct EpmBatch {
  double loss = 0;
  nn::Mat responses;  ///< 5 x N
};
EpmBatch epm_loss_batch(const nn::Mat& features, const nn::Mat& embedding, const nn::Mat& labels, double weight,
                        nn::Mat* dfeatures, nn::Mat* dembedding);

}  // namespace v2f::epm
