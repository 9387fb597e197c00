#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "v2f/geometry.hpp"
#include "v2f/image.hpp"
#include "v2f/netcore.hpp"
#include "v2f/rng.hpp"

namespace v2f::testing {

/// Small enough for exhaustive finite differences: 16x16 image, stride 2.
inline nn::ArchConfig tiny_arch(nn::Variant v = nn::Variant::V2F) {
  nn::ArchConfig a;
  a.variant = v;
  a.conv_channels = {4, 6};
  a.conv_strides = {2, 1};
  a.rpn_channels = 5;
  a.roi_size = 3;
  a.fc_width = 8;
  a.part_dim = 6;
  a.anchor_base = 8;
  return a;
}

inline Image random_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Image img(w, h);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

/// Unit pixels whose centers lie inside the box.
inline std::set<std::pair<int, int>> raster(const Box& b) {
  std::set<std::pair<int, int>> px;
  for (int y = static_cast<int>(std::floor(b.y1())); y < static_cast<int>(std::ceil(b.y2())); ++y) {
    for (int x = static_cast<int>(std::floor(b.x1())); x < static_cast<int>(std::ceil(b.x2())); ++x) {
      if (x + 0.5 >= b.x1() && x + 0.5 < b.x2() && y + 0.5 >= b.y1() && y + 0.5 < b.y2()) px.insert({x, y});
    }
  }
  return px;
}

inline std::size_t overlap_count(const std::set<std::pair<int, int>>& a, const std::set<std::pair<int, int>>& b) {
  std::size_t n = 0;
  for (const auto& p : a) n += b.count(p);
  return n;
}

inline double raster_iou(const Box& a, const Box& b) {
  const auto ra = raster(a), rb = raster(b);
  const double inter = static_cast<double>(overlap_count(ra, rb));
  return inter / (static_cast<double>(ra.size() + rb.size()) - inter);
}

inline double raster_ioa(const Box& a, const Box& b) {
  const auto ra = raster(a), rb = raster(b);
  return static_cast<double>(overlap_count(ra, rb)) / static_cast<double>(ra.size());
}

/// IoU of integer boxes as an exact fraction of raster pixel counts.
struct Ratio {
  long long num = 0, den = 1;

  friend bool operator<(Ratio a, Ratio b) { return a.num * b.den < b.num * a.den; }
  friend bool operator==(Ratio a, Ratio b) { return a.num * b.den == b.num * a.den; }
  bool at_least(long long p, long long q) const { return num * q >= p * den; }
};

inline Ratio exact_iou(const Box& a, const Box& b) {
  const auto ra = raster(a), rb = raster(b);
  const auto inter = static_cast<long long>(overlap_count(ra, rb));
  return {inter, static_cast<long long>(ra.size() + rb.size()) - inter};
}

/// Integer-cornered box inside [0, extent).
inline Box random_int_box(Rng& rng, int extent, int max_side) {
  const int w = rng.uniform_int(1, max_side), h = rng.uniform_int(1, max_side);
  const int x = rng.uniform_int(0, extent - w), y = rng.uniform_int(0, extent - h);
  return Box(x, y, x + w, y + h);
}

inline Box random_box(Rng& rng, double extent, double min_side, double max_side) {
  const double w = rng.uniform(min_side, max_side), h = rng.uniform(min_side, max_side);
  const double x = rng.uniform(0, extent - w), y = rng.uniform(0, extent - h);
  return Box(x, y, x + w, y + h);
}

struct FdReport {
  double rel_error = 0;
  std::size_t checked = 0;  ///< at the requested step
  std::size_t refined = 0;  ///< at fine_step, after the requested step crossed a kink
  std::size_t skipped = 0;  ///< crossed a kink at every tried step
};

/// Like fd_relative_error, but compares the branch pattern of piecewise
/// operations (see BranchPatternRecorder) at x +- step with the pattern at x.
/// A coordinate whose step changes it is retried at fine_step when that is
/// positive and skipped otherwise.
template <typename F>
FdReport fd_check_kink_aware(Eigen::MatrixXd& x, const Eigen::MatrixXd& analytic, F&& f, double step = 1e-3,
                             int max_coords = -1, std::uint64_t seed = 0, double fine_step = 0) {
  auto eval = [&](std::uint64_t& pattern) {
    nn::BranchPatternRecorder rec;
    const double v = f();
    pattern = rec.fingerprint();
    return v;
  };
  std::uint64_t base_pattern = 0;
  eval(base_pattern);
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  if (max_coords >= 0 && static_cast<std::size_t>(max_coords) < coords.size()) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(static_cast<std::size_t>(max_coords));
  }
  auto central = [&](Eigen::Index i, double h, double& num) {
    const double keep = x.data()[i];
    std::uint64_t pu = 0, pd = 0;
    x.data()[i] = keep + h;
    const double up = eval(pu);
    x.data()[i] = keep - h;
    const double down = eval(pd);
    x.data()[i] = keep;
    num = (up - down) / (2 * h);
    return pu == base_pattern && pd == base_pattern;
  };
  FdReport r;
  double diff = 0, na = 0, nn = 0;
  for (Eigen::Index i : coords) {
    double num = 0;
    if (central(i, step, num)) {
      ++r.checked;
    } else if (fine_step > 0 && central(i, fine_step, num)) {
      ++r.refined;
    } else {
      ++r.skipped;
      continue;
    }
    const double a = analytic.data()[i];
    diff += (a - num) * (a - num);
    na += a * a;
    nn += num * num;
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nn));
  r.rel_error = scale == 0 ? 0.0 : std::sqrt(diff) / scale;
  return r;
}

/// Relative error ||a - n|| / max(||a||, ||n||) between an analytic gradient
/// and central differences of f over the entries of x (all of them, or a
/// random subset of `max_coords`). x is restored afterwards.
template <typename F>
double fd_relative_error(Eigen::MatrixXd& x, const Eigen::MatrixXd& analytic, F&& f, double step = 1e-3,
                         int max_coords = -1, std::uint64_t seed = 0) {
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  if (max_coords >= 0 && static_cast<std::size_t>(max_coords) < coords.size()) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(static_cast<std::size_t>(max_coords));
  }
  double diff = 0, na = 0, nn = 0;
  for (Eigen::Index i : coords) {
    const double keep = x.data()[i];
    x.data()[i] = keep + step;
    const double up = f();
    x.data()[i] = keep - step;
    const double down = f();
    x.data()[i] = keep;
    const double num = (up - down) / (2 * step);
    const double a = analytic.data()[i];
    diff += (a - num) * (a - num);
    na += a * a;
    nn += num * num;
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nn));
  return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace v2f::testing
