#pragma once

#include <array>
#include <cstddef>

namespace v2f {

/// Axis-aligned rectangle in continuous pixel coordinates, corner convention.
/// Construction rejects non-finite coordinates and non-positive extents.
class Box {
 public:
  Box(double x1, double y1, double x2, double y2);

  /// Builds from CrowdHuman-style (x, y, w, h).
  static Box from_xywh(double x, double y, double w, double h);

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1_ + x2_); }
  double cy() const { return 0.5 * (y1_ + y2_); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  double x1_, y1_, x2_, y2_;
};

/// Image extent used for clipping decoded boxes.
struct ImageBounds {
  double width = 0;
  double height = 0;
};

/// Regression parameterization of one box relative to a reference box.
struct OffsetVector {
  double tx = 0, ty = 0, tw = 0, th = 0;

  std::array<double, 4> as_array() const { return {tx, ty, tw, th}; }
  static OffsetVector from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
};

inline constexpr double kDefaultOffsetClamp = 4.0;
inline constexpr std::size_t kNumParts = 5;

/// Five-way subdivision of a full-body box: head, upper-left, upper-right,
/// lower-left, lower-right.
struct PartBoxes {
  std::array<Box, kNumParts> parts;
};

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);
/// area(a ∩ b) / area(a). Asymmetric.
double ioa(const Box& a, const Box& b);

OffsetVector encode_offsets(const Box& ref, const Box& target);

/// Inverse of encode_offsets, clipped to [0, bounds]. tw/th are clamped to
/// +-clamp before exponentiation. Throws DegenerateBox when clipping leaves
/// no area.
Box decode_offsets(const Box& ref, const OffsetVector& off, ImageBounds bounds,
                   double clamp = kDefaultOffsetClamp);

/// Clip to image; throws DegenerateBox if nothing is left.
Box clip_box(const Box& b, ImageBounds bounds);

PartBoxes divide_parts(const Box& full);

}  // namespace v2f
