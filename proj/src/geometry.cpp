#include "v2f/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "v2f/errors.hpp"

namespace v2f {

Box::Box(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
  if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2)) ||
      !(x2 > x1) || !(y2 > y1)) {
    std::ostringstream os;
    os << "degenerate box [" << x1 << ", " << y1 << ", " << x2 << ", " << y2 << "]";
    throw DegenerateBox(os.str());
  }
}

Box Box::from_xywh(double x, double y, double w, double h) { return Box(x, y, x + w, y + h); }

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double h = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

double ioa(const Box& a, const Box& b) { return intersection_area(a, b) / a.area(); }

OffsetVector encode_offsets(const Box& ref, const Box& target) {
  return {(target.cx() - ref.cx()) / ref.width(), (target.cy() - ref.cy()) / ref.height(),
          std::log(target.width() / ref.width()), std::log(target.height() / ref.height())};
}

Box clip_box(const Box& b, ImageBounds bounds) {
  const double x1 = std::clamp(b.x1(), 0.0, bounds.width);
  const double y1 = std::clamp(b.y1(), 0.0, bounds.height);
  const double x2 = std::clamp(b.x2(), 0.0, bounds.width);
  const double y2 = std::clamp(b.y2(), 0.0, bounds.height);
  return Box(x1, y1, x2, y2);
}

Box decode_offsets(const Box& ref, const OffsetVector& off, ImageBounds bounds, double clamp) {
  if (!(std::isfinite(off.tx) && std::isfinite(off.ty) && std::isfinite(off.tw) &&
        std::isfinite(off.th))) {
    throw DegenerateBox("non-finite offsets");
  }
  const double cx = ref.cx() + off.tx * ref.width();
  const double cy = ref.cy() + off.ty * ref.height();
  const double w = ref.width() * std::exp(std::clamp(off.tw, -clamp, clamp));
  const double h = ref.height() * std::exp(std::clamp(off.th, -clamp, clamp));
  const double x1 = std::clamp(cx - 0.5 * w, 0.0, bounds.width);
  const double y1 = std::clamp(cy - 0.5 * h, 0.0, bounds.height);
  const double x2 = std::clamp(cx + 0.5 * w, 0.0, bounds.width);
  const double y2 = std::clamp(cy + 0.5 * h, 0.0, bounds.height);
  return Box(x1, y1, x2, y2);
}

PartBoxes divide_parts(const Box& full) {
  const double h = full.height();
  const double y20 = full.y1() + 0.2 * h;
  const double y60 = full.y1() + 0.6 * h;
  const double xm = full.cx();
  return PartBoxes{{
      Box(full.x1(), full.y1(), full.x2(), y20),
      Box(full.x1(), y20, xm, y60),
      Box(xm, y20, full.x2(), y60),
      Box(full.x1(), y60, xm, full.y2()),
      Box(xm, y60, full.x2(), full.y2()),
  }};
}

}  // namespace v2f
