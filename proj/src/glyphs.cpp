#include <algorithm>
#include <cmath>
#include <numbers>

#include "purview/data.hpp"
#include "purview/rng.hpp"

namespace purview {
namespace {

struct Point {
  double x;
  double y;
};
using Stroke = std::vector<Point>;
using Glyph = std::vector<Stroke>;

/// Elliptical arc in the unit box, angles in degrees, counter-clockwise as drawn.
Stroke arc(double cx, double cy, double rx, double ry, double from_deg, double to_deg, int segments = 14) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double a = (from_deg + (to_deg - from_deg) * i / segments) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(a), cy - ry * std::sin(a)});
  }
  return s;
}

Stroke join(Stroke a, const Stroke& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Glyph digit_glyph(int d) {
  switch (d) {
    case 0: return {arc(0.5, 0.5, 0.27, 0.38, 0, 360, 24)};
    case 1: return {{{0.36, 0.25}, {0.52, 0.12}, {0.52, 0.88}}};
    case 2: return {join(arc(0.5, 0.32, 0.24, 0.2, 160, -30), {{0.26, 0.88}, {0.78, 0.88}})};
    case 3: return {join(arc(0.49, 0.3, 0.22, 0.18, 150, -90), arc(0.49, 0.68, 0.25, 0.2, 90, -150))};
    case 4: return {{{0.64, 0.88}, {0.64, 0.12}, {0.22, 0.64}, {0.8, 0.64}}};
    case 5: return {join({{0.74, 0.12}, {0.34, 0.12}, {0.31, 0.46}}, arc(0.5, 0.65, 0.25, 0.23, 125, -145))};
    case 6: return {{{0.68, 0.13}, {0.46, 0.28}, {0.31, 0.55}}, arc(0.5, 0.67, 0.2, 0.2, 0, 360, 20)};
    case 7: return {{{0.23, 0.12}, {0.78, 0.12}, {0.44, 0.88}}};
    case 8: return {arc(0.5, 0.3, 0.19, 0.17, 0, 360, 18), arc(0.5, 0.68, 0.23, 0.2, 0, 360, 20)};
    case 9: return {arc(0.5, 0.33, 0.21, 0.2, 0, 360, 18), {{0.71, 0.33}, {0.62, 0.88}}};
    default: return {};
  }
}

Glyph shape_glyph(int s) {
  switch (s) {
    case 0: return {{{0.2, 0.2}, {0.8, 0.2}, {0.8, 0.8}, {0.2, 0.8}, {0.2, 0.2}}};              // square
    case 1: return {{{0.5, 0.15}, {0.85, 0.82}, {0.15, 0.82}, {0.5, 0.15}}};                    // triangle
    case 2: return {{{0.2, 0.2}, {0.8, 0.8}}, {{0.8, 0.2}, {0.2, 0.8}}};                         // cross
    case 3: return {{{0.5, 0.15}, {0.5, 0.85}}, {{0.15, 0.5}, {0.85, 0.5}}};                     // plus
    case 4: return {{{0.5, 0.12}, {0.85, 0.5}, {0.5, 0.88}, {0.15, 0.5}, {0.5, 0.12}}};         // diamond
    case 5: return {{{0.15, 0.3}, {0.85, 0.3}}, {{0.15, 0.5}, {0.85, 0.5}}, {{0.15, 0.7}, {0.85, 0.7}}};  // bars
    case 6: return {{{0.2, 0.15}, {0.8, 0.15}, {0.2, 0.85}, {0.8, 0.85}, {0.2, 0.15}}};         // hourglass
    case 7: {                                                                                    // star
      Stroke star;
      for (int i = 0; i <= 5; ++i) {
        const double a = (90.0 + 144.0 * i) * std::numbers::pi / 180.0;
        star.push_back({0.5 + 0.38 * std::cos(a), 0.52 - 0.38 * std::sin(a)});
      }
      return {star};
    }
    case 8: return {arc(0.5, 0.5, 0.36, 0.36, 0, 360, 24), arc(0.5, 0.5, 0.14, 0.14, 0, 360, 12)};  // rings
    case 9: return {{{0.15, 0.8}, {0.3, 0.2}, {0.5, 0.8}, {0.7, 0.2}, {0.85, 0.8}}};            // zigzag
    default: return {};
  }
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0.0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

void render(const Glyph& glyph, std::size_t size, Rng& rng, std::span<float> out) {
  const double px = static_cast<double>(size);
  const double angle = rng.uniform(-0.35, 0.35);
  const double scale = rng.uniform(0.78, 1.02) * px * (20.0 / 28.0);
  const double aspect = rng.uniform(0.85, 1.1);
  const double shear = rng.uniform(-0.3, 0.3);
  const double tx = px / 2.0 + rng.uniform(-0.08, 0.08) * px;
  const double ty = px / 2.0 + rng.uniform(-0.08, 0.08) * px;
  const double half_width = rng.uniform(0.65, 1.3) * px / 28.0;
  const double ink = rng.uniform(0.8, 1.0);
  const double c = std::cos(angle), s = std::sin(angle);

  std::vector<std::pair<Point, Point>> segments;
  for (const auto& stroke : glyph) {
    std::vector<Point> pts;
    for (const auto& q : stroke) {
      const double ux = (q.x - 0.5 + rng.normal(0.0, 0.05)) * aspect;
      const double uy = q.y - 0.5 + rng.normal(0.0, 0.05);
      const double sx = ux + shear * uy;
      pts.push_back({tx + scale * (c * sx - s * uy), ty + scale * (s * sx + c * uy)});
    }
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) segments.emplace_back(pts[i], pts[i + 1]);
  }
  // stray pen stroke
  if (rng.uniform() < 0.3) {
    const Point a{rng.uniform(0.15, 0.85) * px, rng.uniform(0.15, 0.85) * px};
    const double t = rng.uniform(0.0, 2.0 * std::numbers::pi), len = rng.uniform(0.1, 0.3) * px;
    segments.emplace_back(a, Point{a.x + len * std::cos(t), a.y + len * std::sin(t)});
  }

  for (std::size_t row = 0; row < size; ++row) {
    for (std::size_t col = 0; col < size; ++col) {
      const Point p{static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5};
      double best = 1e9;
      for (const auto& [a, b] : segments) best = std::min(best, segment_distance(p, a, b));
      // one pixel of anti-aliased falloff outside the stroke core
      const double v = std::clamp(1.0 - (best - half_width), 0.0, 1.0);
      out[row * size + col] = static_cast<float>(ink * v);
    }
  }
}

}  // namespace

Dataset synth_glyphs(GlyphFamily family, std::size_t n, std::uint64_t seed, std::size_t size) {
  if (n == 0) throw ConfigError("glyph dataset size must be positive");
  if (size < 8) throw ConfigError("glyph images must be at least 8 pixels wide");
  static const std::vector<std::string> digit_names{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};
  static const std::vector<std::string> shape_names{"square", "triangle", "cross", "plus",  "diamond",
                                                    "bars",   "hourglass", "star", "rings", "zigzag"};
  Rng rng(seed);
  std::vector<float> pixels(n * size * size);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(rng.below(10));
    labels[i] = cls;
    const Glyph glyph = family == GlyphFamily::digits ? digit_glyph(cls) : shape_glyph(cls);
    render(glyph, size, rng, std::span<float>(pixels).subspan(i * size * size, size * size));
  }
  return make_dataset(family == GlyphFamily::digits ? "digits" : "shapes", {1, size, size}, std::move(pixels),
                      std::move(labels), family == GlyphFamily::digits ? digit_names : shape_names);
}

}  // namespace purview
