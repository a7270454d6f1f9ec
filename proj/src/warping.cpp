#include "sfm/warping.hpp"

#include <algorithm>
#include <cmath>

namespace sfm::warp {

double bilinear_sample(const Grid& src, double x, double y, bool* valid) {
  const int W = src.w, H = src.h;
  const bool ok = x >= 0.0 && x <= W - 1.0 && y >= 0.0 && y <= H - 1.0;
  if (valid) *valid = ok;
  if (!ok) return 0.0;
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  x0 = std::min(std::max(x0, 0), std::max(W - 2, 0));
  y0 = std::min(std::max(y0, 0), std::max(H - 2, 0));
  const int x1 = std::min(x0 + 1, W - 1);
  const int y1 = std::min(y0 + 1, H - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  return src.at(y0, x0) * (1 - fx) * (1 - fy) + src.at(y0, x1) * fx * (1 - fy) +
         src.at(y1, x0) * (1 - fx) * fy + src.at(y1, x1) * fx * fy;
}

Grid sample_grid(const Grid& src, const Grid& xs, const Grid& ys, Mask* valid) {
  require(xs.same_shape(ys), "sample_grid: coordinate shape mismatch");
  Grid out(xs.h, xs.w);
  if (valid) *valid = Mask(xs.h, xs.w);
  for (size_t i = 0; i < out.size(); ++i) {
    bool ok = false;
    out.v[i] = bilinear_sample(src, xs.v[i], ys.v[i], &ok);
    if (valid) valid->v[i] = ok ? 1 : 0;
  }
  return out;
}

Image inverse_warp(const Image& target, const Grid& u, const Grid& v, Mask* valid) {
  require(u.same_shape(v), "inverse_warp: flow shape mismatch");
  Image out(u.h, u.w, target.channels());
  Grid xs(u.h, u.w), ys(u.h, u.w);
  for (int y = 0; y < u.h; ++y)
    for (int x = 0; x < u.w; ++x) {
      xs.at(y, x) = x + u.at(y, x);
      ys.at(y, x) = y + v.at(y, x);
    }
  Mask m;
  for (int c = 0; c < target.channels(); ++c) out.ch[c] = sample_grid(target.ch[c], xs, ys, &m);
  if (valid) *valid = m;
  return out;
}

Grid base_x(int h, int w) {
  Grid g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.at(y, x) = x;
  return g;
}

Grid base_y(int h, int w) {
  Grid g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.at(y, x) = y;
  return g;
}

std::pair<Var, Var> warp_coords_tape(Tape& t, Var u, Var v) {
  const int h = t.value(u).h, w = t.value(u).w;
  Var xs = t.add(u, t.constant(base_x(h, w)));
  Var ys = t.add(v, t.constant(base_y(h, w)));
  return {xs, ys};
}

WarpResult inverse_warp_tape(Tape& t, const Image& target, Var u, Var v) {
  require(target.channels() > 0, "inverse_warp_tape: empty image");
  auto [xs, ys] = warp_coords_tape(t, u, v);
  WarpResult r;
  for (int c = 0; c < target.channels(); ++c)
    r.channels.push_back(t.bilinear(t.constant(target.ch[c]), xs, ys));
  r.valid = t.valid_of(r.channels[0]);
  return r;
}

}  // namespace sfm::warp
