#pragma once

#include <utility>
#include <vector>

#include "sfm/array.hpp"
#include "sfm/autodiff.hpp"

namespace sfm::warp {

using ad::Tape;
using ad::Var;

// Bilinear lookup at pixel coordinates (x, y); pixel centers sit at integer
// positions. Out-of-bounds samples return 0 and clear *valid. Matches the
// tape bilinear op bit for bit.
double bilinear_sample(const Grid& src, double x, double y, bool* valid = nullptr);

// Samples src at (xs(i), ys(i)) for every pixel; invalid samples are 0 and
// cleared in *valid when given.
Grid sample_grid(const Grid& src, const Grid& xs, const Grid& ys, Mask* valid = nullptr);

// Pulls `target` back through the flow: out(x, y) = target(x + u, y + v).
// All channels share one validity mask.
Image inverse_warp(const Image& target, const Grid& u, const Grid& v, Mask* valid = nullptr);

// Pixel index grids (0..w-1 per row / 0..h-1 per column).
Grid base_x(int h, int w);
Grid base_y(int h, int w);

// xs = x + u, ys = y + v as tape nodes.
std::pair<Var, Var> warp_coords_tape(Tape& t, Var u, Var v);

struct WarpResult {
  std::vector<Var> channels;
  Var valid;  // 0/1 grid, constant w.r.t. all inputs
};

WarpResult inverse_warp_tape(Tape& t, const Image& target, Var u, Var v);

}  // namespace sfm::warp
