#include "v2f/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace v2f::render {

namespace {

struct Glyph {
  char ch;
  std::array<const char*, 5> rows;
};

constexpr Glyph kFont[] = {
    {'0', {"###", "#.#", "#.#", "#.#", "###"}}, {'1', {".#.", "##.", ".#.", ".#.", "###"}},
    {'2', {"###", "..#", "###", "#..", "###"}}, {'3', {"###", "..#", "###", "..#", "###"}},
    {'4', {"#.#", "#.#", "###", "..#", "..#"}}, {'5', {"###", "#..", "###", "..#", "###"}},
    {'6', {"###", "#..", "###", "#.#", "###"}}, {'7', {"###", "..#", "..#", "..#", "..#"}},
    {'8', {"###", "#.#", "###", "#.#", "###"}}, {'9', {"###", "#.#", "###", "..#", "###"}},
    {'.', {"...", "...", "...", "...", ".#."}}, {'-', {"...", "...", "###", "...", "..."}},
    {'+', {"...", ".#.", "###", ".#.", "..."}}, {'%', {"#.#", "..#", ".#.", "#..", "#.#"}},
    {'e', {"...", "###", "###", "#..", "###"}}, {'p', {"...", "###", "#.#", "###", "#.."}},
    {'r', {"...", "###", "#..", "#..", "#.."}}, {'f', {".##", "#..", "###", "#..", "#.."}},
    {'i', {".#.", "...", ".#.", ".#.", ".#."}}, {'m', {"...", "###", "###", "#.#", "#.#"}},
    {'s', {"...", ".##", ".#.", "..#", "##."}}, {'c', {"...", "###", "#..", "#..", "###"}},
    {'a', {"...", "##.", "..#", "###", "###"}}, {'l', {"#..", "#..", "#..", "#..", ".##"}},
};

const Glyph* find_glyph(char ch) {
  for (const Glyph& g : kFont) {
    if (g.ch == ch) return &g;
  }
  return nullptr;
}

}  // namespace

void set_pixel(Canvas& c, int x, int y, Color color) {
  if (x < 0 || y < 0 || x >= c.width || y >= c.height) return;
  auto* p = &c.rgb[(static_cast<std::size_t>(y) * c.width + x) * 3];
  p[0] = color.r;
  p[1] = color.g;
  p[2] = color.b;
}

void draw_line(Canvas& c, int x0, int y0, int x1, int y1, Color color, bool dashed) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (int step = 0;; ++step) {
    if (!dashed || (step / 4) % 2 == 0) set_pixel(c, x0, y0, color);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void draw_box(Canvas& c, const Box& b, Color color, double scale, bool dashed) {
  const int x1 = static_cast<int>(std::lround(b.x1() * scale));
  const int y1 = static_cast<int>(std::lround(b.y1() * scale));
  const int x2 = static_cast<int>(std::lround(b.x2() * scale)) - 1;
  const int y2 = static_cast<int>(std::lround(b.y2() * scale)) - 1;
  draw_line(c, x1, y1, x2, y1, color, dashed);
  draw_line(c, x2, y1, x2, y2, color, dashed);
  draw_line(c, x2, y2, x1, y2, color, dashed);
  draw_line(c, x1, y2, x1, y1, color, dashed);
}

int text_width(std::string_view text, int size) { return static_cast<int>(text.size()) * 4 * size; }

void draw_text(Canvas& c, int x, int y, std::string_view text, Color color, int size) {
  for (char ch : text) {
    if (const Glyph* g = find_glyph(ch)) {
      for (int r = 0; r < 5; ++r) {
        for (int col = 0; col < 3; ++col) {
          if (g->rows[static_cast<std::size_t>(r)][col] != '#') continue;
          for (int sy = 0; sy < size; ++sy) {
            for (int sx = 0; sx < size; ++sx) set_pixel(c, x + col * size + sx, y + r * size + sy, color);
          }
        }
      }
    }
    x += 4 * size;
  }
}

Canvas upscale(const Canvas& c, int factor) {
  Canvas out(c.width * factor, c.height * factor);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const auto* src = &c.rgb[(static_cast<std::size_t>(y / factor) * c.width + x / factor) * 3];
      std::copy(src, src + 3, &out.rgb[(static_cast<std::size_t>(y) * out.width + x) * 3]);
    }
  }
  return out;
}

Canvas plot_curves(std::span<const Series> series, const PlotAxes& axes, int width, int height) {
  Canvas c(width, height);
  const int left = 44, right = width - 12, top = 12, bottom = height - 24;
  auto tx = [&](double v) {
    double t = axes.log_x ? (std::log10(std::max(v, 1e-12)) - std::log10(axes.x_min)) /
                                (std::log10(axes.x_max) - std::log10(axes.x_min))
                          : (v - axes.x_min) / (axes.x_max - axes.x_min);
    return left + static_cast<int>(std::lround(std::clamp(t, 0.0, 1.0) * (right - left)));
  };
  auto ty = [&](double v) {
    double t = axes.log_y ? (std::log10(std::max(v, 1e-12)) - std::log10(axes.y_min)) /
                                (std::log10(axes.y_max) - std::log10(axes.y_min))
                          : (v - axes.y_min) / (axes.y_max - axes.y_min);
    return bottom - static_cast<int>(std::lround(std::clamp(t, 0.0, 1.0) * (bottom - top)));
  };
  auto ticks = [](double lo, double hi, bool log) {
    std::vector<double> t;
    if (log) {
      for (double v = std::pow(10.0, std::ceil(std::log10(lo) - 1e-9)); v <= hi * (1 + 1e-9); v *= 10) t.push_back(v);
    } else {
      for (int i = 0; i <= 5; ++i) t.push_back(lo + (hi - lo) * i / 5.0);
    }
    return t;
  };
  char buf[32];
  for (double v : ticks(axes.x_min, axes.x_max, axes.log_x)) {
    draw_line(c, tx(v), top, tx(v), bottom, {225, 225, 225}, false);
    std::snprintf(buf, sizeof buf, axes.log_x ? "%g" : "%.1f", v);
    draw_text(c, tx(v) - text_width(buf) / 2, bottom + 6, buf, kBlack);
  }
  for (double v : ticks(axes.y_min, axes.y_max, axes.log_y)) {
    draw_line(c, left, ty(v), right, ty(v), {225, 225, 225}, false);
    std::snprintf(buf, sizeof buf, axes.log_y ? "%g" : "%.1f", v);
    draw_text(c, left - 4 - text_width(buf), ty(v) - 2, buf, kBlack);
  }
  draw_line(c, left, top, left, bottom, kBlack);
  draw_line(c, left, bottom, right, bottom, kBlack);
  for (const Series& s : series) {
    for (std::size_t i = 1; i < std::min(s.x.size(), s.y.size()); ++i) {
      draw_line(c, tx(s.x[i - 1]), ty(s.y[i - 1]), tx(s.x[i]), ty(s.y[i]), s.color);
    }
  }
  return c;
}

}  // namespace v2f::render
