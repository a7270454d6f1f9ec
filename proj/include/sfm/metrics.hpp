#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sfm/array.hpp"
#include "sfm/geometry.hpp"
#include "sfm/losses.hpp"

namespace sfm::metrics {

// Variance of the per-pixel log-depth ratio over valid pixels:
// mean(r^2) - mean(r)^2 with r = log d - log d_gt. Invariant to a global
// depth scale. Throws when no pixel is valid or depths are nonpositive on a
// valid pixel.
double scale_invariant_log_rmse(const Grid& d, const Grid& d_gt, const Mask& valid);

// trans_err = |R_pred^T (t_gt - t_pred)|, rot_err = angle of R_pred^T R_gt.
std::pair<double, double> relative_pose_error(const geom::RigidMotion& pred,
                                              const geom::Pose& gt);
std::pair<double, double> relative_pose_error(const geom::Pose& pred, const geom::Pose& gt);

// Binarizes the K predicted masks at `threshold`, forms 2K proposals (each
// mask and its complement), takes the best IoU per ground-truth object and
// averages over objects. Throws when gt_masks is empty.
double mask_iou(const std::vector<Grid>& pred, const std::vector<Grid>& gt_masks,
                double threshold = 0.5);

// Mean endpoint error sqrt((u-u_gt)^2 + (v-v_gt)^2) over valid pixels;
// valid may be empty-shaped (0x0) to mean all pixels.
double endpoint_error(const Grid& u, const Grid& v, const Grid& u_gt, const Grid& v_gt,
                      const Mask& valid = Mask());

// Named scalar results for one frame pair plus aggregates over many.
struct EvalReport {
  std::map<std::string, double> values;

  void set(const std::string& key, double v);
  // key=value lines, sorted by key
  std::string to_text() const;
  // mean of each key present in every report
  static EvalReport aggregate(const std::vector<EvalReport>& reports);
};

}  // namespace sfm::metrics
