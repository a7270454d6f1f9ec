#include "sfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sfm::metrics {

double scale_invariant_log_rmse(const Grid& d, const Grid& d_gt, const Mask& valid) {
  require(d.same_shape(d_gt), "scale_invariant_log_rmse: shape mismatch");
  require(valid.h == d.h && valid.w == d.w, "scale_invariant_log_rmse: mask shape mismatch");
  double s1 = 0.0, s2 = 0.0;
  long n = 0;
  for (size_t i = 0; i < d.size(); ++i) {
    if (!valid.v[i]) continue;
    require(d.v[i] > 0.0 && d_gt.v[i] > 0.0,
            "scale_invariant_log_rmse: nonpositive depth on a valid pixel");
    const double r = std::log(d.v[i]) - std::log(d_gt.v[i]);
    s1 += r;
    s2 += r * r;
    ++n;
  }
  require(n > 0, "scale_invariant_log_rmse: empty valid mask");
  const double m = s1 / n;
  return s2 / n - m * m;
}

std::pair<double, double> relative_pose_error(const geom::RigidMotion& pred,
                                              const geom::Pose& gt) {
  return loss::pose_error(pred, gt);
}

std::pair<double, double> relative_pose_error(const geom::Pose& pred, const geom::Pose& gt) {
  return loss::pose_error(pred, gt);
}

namespace {

double iou(const std::vector<uint8_t>& a, const Grid& b) {
  long inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] != 0, pb = b.v[i] != 0.0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double mask_iou(const std::vector<Grid>& pred, const std::vector<Grid>& gt_masks,
                double threshold) {
  require(!gt_masks.empty(), "mask_iou: no ground-truth objects");
  require(threshold > 0.0 && threshold < 1.0, "mask_iou: threshold must lie in (0,1)");
  for (const Grid& m : pred)
    require(m.same_shape(gt_masks[0]), "mask_iou: mask shape mismatch");
  for (const Grid& m : gt_masks)
    require(m.same_shape(gt_masks[0]), "mask_iou: mask shape mismatch");

  // 2K proposals: each binarized mask and its complement
  std::vector<std::vector<uint8_t>> proposals;
  for (const Grid& m : pred) {
    std::vector<uint8_t> on(m.size()), off(m.size());
    for (size_t i = 0; i < m.size(); ++i) {
      on[i] = m.v[i] >= threshold ? 1 : 0;
      off[i] = on[i] ? 0 : 1;
    }
    proposals.push_back(std::move(on));
    proposals.push_back(std::move(off));
  }

  double total = 0.0;
  for (const Grid& gt : gt_masks) {
    double best = 0.0;
    for (const auto& p : proposals) best = std::max(best, iou(p, gt));
    total += best;
  }
  return total / static_cast<double>(gt_masks.size());
}

double endpoint_error(const Grid& u, const Grid& v, const Grid& u_gt, const Grid& v_gt,
                      const Mask& valid) {
  require(u.same_shape(v) && u.same_shape(u_gt) && u.same_shape(v_gt),
          "endpoint_error: shape mismatch");
  const bool all = valid.size() == 0;
  if (!all)
    require(valid.h == u.h && valid.w == u.w, "endpoint_error: mask shape mismatch");
  double s = 0.0;
  long n = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    if (!all && !valid.v[i]) continue;
    const double du = u.v[i] - u_gt.v[i], dv = v.v[i] - v_gt.v[i];
    s += std::sqrt(du * du + dv * dv);
    ++n;
  }
  return n == 0 ? 0.0 : s / n;
}

void EvalReport::set(const std::string& key, double v) { values[key] = v; }

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os.precision(12);
  for (const auto& [k, v] : values) os << k << "=" << v << "\n";
  return os.str();
}

EvalReport EvalReport::aggregate(const std::vector<EvalReport>& reports) {
  EvalReport out;
  if (reports.empty()) return out;
  for (const auto& [k, v0] : reports[0].values) {
    double s = v0;
    bool everywhere = true;
    for (size_t i = 1; i < reports.size(); ++i) {
      auto it = reports[i].values.find(k);
      if (it == reports[i].values.end()) {
        everywhere = false;
        break;
      }
      s += it->second;
    }
    if (everywhere) out.values[k] = s / static_cast<double>(reports.size());
  }
  return out;
}

}  // namespace sfm::metrics
