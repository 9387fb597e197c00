#include "v2f/epm.hpp"

#include <algorithm>
#include <cmath>

#include "v2f/errors.hpp"

namespace v2f::epm {

PartResponseVector part_response(const nn::Vec& feature, const nn::Mat& embedding) {
  if (embedding.rows() != static_cast<Eigen::Index>(kNumParts) || embedding.cols() != feature.size()) {
    throw ShapeMismatch("part embedding is " + std::to_string(embedding.rows()) + "x" +
                        std::to_string(embedding.cols()) + ", feature has " + std::to_string(feature.size()) +
                        " dims");
  }
  PartResponseVector out;
  for (std::size_t i = 0; i < kNumParts; ++i) {
    out.r[i] = nn::sigmoid(embedding.row(static_cast<Eigen::Index>(i)).dot(feature));
  }
  return out;
}

PartLabelVector part_labels(const Box& visible, const Box& assigned_full, LabelMode mode, IoaDenominator denom) {
  const PartBoxes parts = divide_parts(assigned_full);
  PartLabelVector out;
  out.mode = mode;
  for (std::size_t i = 0; i < kNumParts; ++i) {
    const double overlap =
        denom == IoaDenominator::Visible ? ioa(visible, parts.parts[i]) : ioa(parts.parts[i], visible);
    out.y[i] = mode == LabelMode::Hard ? (overlap >= 0.5 ? 1.0 : 0.0) : overlap;
  }
  return out;
}

PartLabelVector negative_labels(LabelMode mode) { return {PartVector{}, mode}; }

namespace {

double clamped_bce(double r, double y, double* dz) {
  const double rc = std::clamp(r, kLogEps, 1.0 - kLogEps);
  if (auto* rec = nn::BranchPatternRecorder::active()) rec->record(rc == r);
  if (dz) *dz = (r > kLogEps && r < 1.0 - kLogEps) ? r - y : 0.0;
  return -(y * std::log(rc) + (1.0 - y) * std::log(1.0 - rc));
}

}  // namespace

double epm_loss(const PartResponseVector& r, const PartLabelVector& y) {
  double loss = 0;
  for (std::size_t i = 0; i < kNumParts; ++i) loss += clamped_bce(r.r[i], y.y[i], nullptr);
  return loss;
}

EpmBatch epm_loss_batch(const nn::Mat& features, const nn::Mat& embedding, const nn::Mat& labels, double weight,
                        nn::Mat* dfeatures, nn::Mat* dembedding) {
  if (embedding.cols() != features.rows() || labels.rows() != embedding.rows() || labels.cols() != features.cols()) {
    throw ShapeMismatch("EPM batch shapes disagree");
  }
  EpmBatch out;
  const Eigen::Index n = features.cols();
  const nn::Mat logits = embedding * features;
  out.responses = logits.unaryExpr([](double z) { return nn::sigmoid(z); });
  nn::Mat dlogits(logits.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      double dz = 0;
      out.loss += clamped_bce(out.responses(i, j), labels(i, j), &dz);
      dlogits(i, j) = dz;
    }
  }
  if (n > 0) {
    out.loss /= static_cast<double>(n);
    dlogits *= weight / static_cast<double>(n);
  }
  if (dfeatures) *dfeatures = embedding.transpose() * dlogits;
  if (dembedding) dembedding->noalias() += dlogits * features.transpose();
  return out;
}

}  // namespace v2f::epm
