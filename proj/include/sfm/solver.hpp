#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfm/array.hpp"
#include "sfm/autodiff.hpp"
#include "sfm/geometry.hpp"
#include "sfm/losses.hpp"

namespace sfm::solve {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Constraint ops mapping unconstrained raw parameters to physical quantities.

// d = min(1 + softplus(u), 100); smooth, monotone, d in [1, 100].
double constrain_depth(double u);
Grid constrain_depth_grid(const Grid& u);
Var constrain_depth_tape(Tape& t, Var u);

// s = tanh(v); smooth odd map onto [-1, 1].
double constrain_sin(double v);
Var constrain_sin_tape(Tape& t, Var v);

// m = sigmoid(multiplier * logits). The multiplier grows with the iteration
// index so masks harden as optimization proceeds.
Grid sharpen_mask(const Grid& logits, double multiplier);
Var sharpen_mask_tape(Tape& t, Var logits, Var multiplier);

struct SharpenSchedule {
  double base = 1.0;
  double rate = 1e-3;  // growth per iteration
  double cap = 10.0;

  double multiplier(int step) const {
    double m = base + rate * static_cast<double>(step);
    return m < cap ? m : cap;
  }
};

// ---------------------------------------------------------------------------
// Problem state: raw (unconstrained) parameters for one frame pair.

// Unconstrained rigid-motion parameters; rot becomes Euler sines via tanh.
struct RawMotion {
  geom::Vec3 t;
  geom::Vec3 pivot;
  std::array<double, 3> rot{0, 0, 0};
};

geom::RigidMotion to_motion(const RawMotion& raw);

struct ProblemState {
  int K = 0;
  Grid u_t, u_tp1;                         // depth pre-activations per frame
  std::vector<Grid> logits_t, logits_tp1;  // K mask logit grids per frame
  RawMotion cam_fwd, cam_bwd;              // t -> t+1 and t+1 -> t
  std::vector<RawMotion> obj_fwd, obj_bwd;

  void validate() const;  // consistent K, matching grid shapes, finite values
};

struct SolverConfig {
  int iterations = 2000;
  double step_size = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  SharpenSchedule sharpen;
  std::uint64_t seed = 0;
  int K = 3;
  loss::LossWeights weights;
  bool freeze_pivots = true;  // pivots are redundant with translation
  bool symmetric = true;      // optimize both warping directions jointly
  bool pyramid = false;       // optional coarse-to-fine schedule
  int pyramid_levels = 2;

  void validate() const;  // iterations >= 0, step_size > 0, K >= 0, weights
};

// Depth ~2 everywhere, zero motions, mask logits from N(0, 0.01^2) with the
// given seed to break symmetry between the K masks.
ProblemState init_state(int h, int w, const SolverConfig& cfg);

// Constrained values implied by the raw state at a given sharpening
// multiplier.
loss::PairStateValues physical_state(const ProblemState& s, double multiplier);

// Optional ground truth attached to the objective when present.
struct Supervision {
  std::optional<loss::DepthSupervision> depth_fwd, depth_bwd;
  std::optional<geom::Pose> pose_fwd, pose_bwd;
  std::optional<loss::FlowPair> flow_fwd, flow_bwd;
};

// ---------------------------------------------------------------------------
// Optimization.

// Raised when the loss or a parameter turns non-finite during optimization.
struct SolveError : std::runtime_error {
  int iteration = -1;
  int node_id = -1;
  std::string term;  // offending objective term, when attributable

  SolveError(int it, int node, std::string term_name, const std::string& what)
      : std::runtime_error(what), iteration(it), node_id(node), term(std::move(term_name)) {}
};

struct AdamConfig {
  int iterations = 500;
  double step_size = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct MinimizeResult {
  ad::ParamSet params;
  std::vector<double> trace;  // loss before each step; size == iterations
  double final_loss = 0.0;    // loss at the returned parameters
};

// Called before each forward pass (and once more for the final evaluation)
// so the owner can refresh auxiliary leaves such as the sharpening
// multiplier.
using StepHook = std::function<void(Tape&, int step)>;

// First-order moment-based descent on a static graph: the builder runs once,
// then each iteration refreshes the leaves and replays forward/backward.
// Deterministic; throws SolveError on non-finite loss or parameters.
MinimizeResult adam_minimize(const ad::LossBuilder& builder, const ad::ParamSet& init,
                             const AdamConfig& cfg, const StepHook& hook = nullptr);

struct SolveResult {
  ProblemState state;
  std::vector<double> trace;
  double final_loss = 0.0;
  // Final per-term values; masks evaluated at the post-run multiplier.
  std::vector<loss::TermReport> terms;
};

// Gradient-based recovery of depth, motions and masks for one frame pair.
// iterations == 0 returns init unchanged. Deterministic given the config.
SolveResult optimize(const Image& I_t, const Image& I_tp1, const geom::Intrinsics& K_intr,
                     const ProblemState& init, const SolverConfig& cfg,
                     const Supervision& sup = {});

}  // namespace sfm::solve
