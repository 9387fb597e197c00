#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "v2f/geometry.hpp"
#include "v2f/image.hpp"

namespace v2f::render {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline constexpr Color kGreen{0, 200, 0};
inline constexpr Color kBlue{40, 90, 255};
inline constexpr Color kRed{230, 30, 30};
inline constexpr Color kYellow{250, 220, 0};
inline constexpr Color kBlack{0, 0, 0};
inline constexpr Color kGray{150, 150, 150};

void set_pixel(Canvas& c, int x, int y, Color color);
void draw_line(Canvas& c, int x0, int y0, int x1, int y1, Color color, bool dashed = false);
/// Box outline in canvas coordinates scaled by `scale`.
void draw_box(Canvas& c, const Box& b, Color color, double scale = 1.0, bool dashed = false);

/// 3x5 bitmap glyphs for digits, '.', '-', '+', '%' and a few lowercase letters; others render as blanks.
void draw_text(Canvas& c, int x, int y, std::string_view text, Color color, int size = 1);
int text_width(std::string_view text, int size = 1);

/// Nearest-neighbour enlargement.
Canvas upscale(const Canvas& c, int factor);

struct Series {
  std::vector<double> x, y;
  Color color;
};

struct PlotAxes {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool log_x = false;
  bool log_y = false;
};

/// Line plot with a frame, grid and numeric tick labels.
Canvas plot_curves(std::span<const Series> series, const PlotAxes& axes, int width = 480, int height = 360);

}  // namespace v2f::render
