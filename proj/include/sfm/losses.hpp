#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfm/array.hpp"
#include "sfm/autodiff.hpp"
#include "sfm/geometry.hpp"

namespace sfm::loss {

using ad::Tape;
using ad::Var;

struct LossWeights {
  double color = 1.0;
  double flow_smooth = 0.1;
  double mask_smooth = 0.1;
  double depth_smooth = 0.1;
  double fb = 0.1;
  double depth_sup = 1.0;
  double pose_trans = 1.0;
  double pose_rot = 1.0;
  double flow_sup = 1.0;

  void validate() const;  // all >= 0, at least one > 0
};

struct DepthSupervision {
  Grid d_gt;
  Mask dmask;
};

struct FlowPair {
  Grid u, v;
};

// Ground truth and images for one warping direction; losses warp `dst` back
// to `src` through the predicted flow.
struct DirectionObs {
  Image src, dst;
  std::optional<DepthSupervision> depth_sup;
  std::optional<geom::Pose> pose_gt;
  std::optional<FlowPair> flow_gt;
};

struct Observations {
  geom::Intrinsics K;
  DirectionObs fwd, bwd;
  bool symmetric = true;  // also add the inverted-pair direction to the total
};

// ---------------------------------------------------------------------------
// Plain per-term losses (direct loops; obey the same sampling and validity
// rules as the tape builders).

// Mean over valid pixels and channels of |src - dst(x+u, y+v)|. Zero valid
// pixels yield 0 and report the count through *valid_count.
double photometric_loss(const Image& I_t, const Image& I_tp1, const geom::FlowField& flow,
                        int* valid_count = nullptr);

// Sum over stack components of (sum |df/dx| + sum |df/dy|) / #adjacent-pairs.
double first_order_smoothness(const std::vector<Grid>& stack);

// Mean over strictly interior pixels of |d_xx| + |d_yy|; 0 when there is no
// interior.
double second_order_depth_smoothness(const Grid& d);

// Mean over valid samples of |(d_t + W) - d_tp1(x+u, y+v)|.
double forward_backward_loss(const Grid& d_t, const Grid& d_tp1, const geom::FlowField& flow,
                             int* valid_count = nullptr);

// (1 / (w h)) * sum dmask |d - d_gt|; normalized by pixel count, not by the
// mask population.
double depth_supervision_loss(const Grid& d, const DepthSupervision& sup);

// trans_err = |R_pred^T (t_gt - t_pred)|, rot_err = angle of R_pred^T R_gt.
std::pair<double, double> pose_error(const geom::Pose& pred, const geom::Pose& gt);
std::pair<double, double> pose_error(const geom::RigidMotion& pred, const geom::Pose& gt);

// Mean over pixels of |u - u_gt| + |v - v_gt|.
double flow_supervision_loss(const geom::FlowField& flow, const Grid& u_gt, const Grid& v_gt);

// ---------------------------------------------------------------------------
// Tape builders. Each returns a scalar Var.

Var photometric_loss_tape(Tape& t, const Image& I_t, const Image& I_tp1, Var u, Var v);
Var first_order_smoothness_tape(Tape& t, const std::vector<Var>& stack);
Var second_order_depth_smoothness_tape(Tape& t, Var depth);
// d_tp1 may be a leaf (shared with the other direction's state) or constant.
Var forward_backward_loss_tape(Tape& t, Var d_t, Var d_tp1, Var u, Var v, Var w);
Var depth_supervision_loss_tape(Tape& t, Var d, const DepthSupervision& sup);
std::pair<Var, Var> pose_error_tape(Tape& t, const geom::VarMotion& pred, const geom::Pose& gt);
Var flow_supervision_loss_tape(Tape& t, Var u, Var v, const FlowPair& gt);

// Physical (constrained) quantities of one direction as tape nodes.
struct DirectionState {
  Var depth;  // source-frame depth
  geom::VarMotion cam;
  std::vector<geom::VarMotion> objects;
  std::vector<Var> masks;
  Var depth_other;  // destination-frame depth, used by the fb term
};

// One term of the assembled objective, for diagnostics: nodes in
// [node_first, node_last] belong to this term.
struct TermReport {
  std::string name;
  double weight = 0.0;
  double value = 0.0;  // filled when the owner evaluates the tape
  Var node;
  int node_first = 0, node_last = 0;
};

// Weighted sum of all enabled terms for one direction. Supervised terms are
// included only when the observation carries the ground truth.
Var direction_loss_tape(Tape& t, const DirectionState& s, const DirectionObs& o,
                        const geom::Intrinsics& K, const LossWeights& w,
                        std::vector<TermReport>* terms = nullptr);

// Value-level state for whole-objective evaluation without a solver.
struct DirectionStateValues {
  Grid depth;
  geom::RigidMotion cam;
  std::vector<geom::RigidMotion> objects;
  std::vector<Grid> masks;
};

struct PairStateValues {
  DirectionStateValues fwd, bwd;
};

// Binds the pair state as tape leaves and sums the direction losses (both
// directions when obs.symmetric). Returns the scalar total.
double total_loss(const PairStateValues& state, const Observations& obs, const LossWeights& w,
                  std::vector<TermReport>* terms = nullptr);

// Tape form of the same: the caller owns the state (typically built from
// constrained parameters).
Var total_loss_tape(Tape& t, const DirectionState& fwd, const DirectionState& bwd,
                    const Observations& obs, const LossWeights& w,
                    std::vector<TermReport>* terms = nullptr);

}  // namespace sfm::loss
