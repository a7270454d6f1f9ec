#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfm {

// Row-major h x w grid of doubles. v[y * w + x]; x is the column, y the row.
struct Grid {
  int h = 0, w = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(int h_, int w_, double fill = 0.0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * static_cast<size_t>(w_), fill) {}

  double& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

  size_t size() const { return v.size(); }
  bool same_shape(const Grid& o) const { return h == o.h && w == o.w; }
  bool is_scalar() const { return h == 1 && w == 1; }

  static Grid scalar(double x) {
    Grid g(1, 1);
    g.v[0] = x;
    return g;
  }
};

// Per-pixel boolean mask with Grid indexing.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_, uint8_t fill = 0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * static_cast<size_t>(w_), fill) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

  size_t size() const { return v.size(); }
  int count() const {
    int n = 0;
    for (uint8_t b : v) n += b ? 1 : 0;
    return n;
  }
  Grid to_grid() const {
    Grid g(h, w);
    for (size_t i = 0; i < v.size(); ++i) g.v[i] = v[i] ? 1.0 : 0.0;
    return g;
  }
};

// Planar multi-channel image; intensities live in [0, 1].
struct Image {
  std::vector<Grid> ch;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0) : ch(c, Grid(h, w, fill)) {}

  int height() const { return ch.empty() ? 0 : ch[0].h; }
  int width() const { return ch.empty() ? 0 : ch[0].w; }
  int channels() const { return static_cast<int>(ch.size()); }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace sfm
