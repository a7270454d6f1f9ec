#include "sfm/losses.hpp"

#include <algorithm>
#include <cmath>

#include "sfm/warping.hpp"

namespace sfm::loss {

void LossWeights::validate() const {
  const double all[] = {color,    flow_smooth, mask_smooth, depth_smooth, fb,
                        depth_sup, pose_trans,  pose_rot,    flow_sup};
  double total = 0.0;
  for (double w : all) {
    require(w >= 0.0 && std::isfinite(w), "loss weights must be finite and nonnegative");
    total += w;
  }
  require(total > 0.0, "at least one loss weight must be positive");
}

// ---------------------------------------------------------------------------
// Plain terms

double photometric_loss(const Image& I_t, const Image& I_tp1, const geom::FlowField& flow,
                        int* valid_count) {
  require(I_t.channels() == I_tp1.channels() && I_t.channels() > 0,
          "photometric_loss: channel mismatch");
  require(I_t.height() == flow.u.h && I_t.width() == flow.u.w,
          "photometric_loss: flow shape mismatch");
  Mask valid;
  Image warped = warp::inverse_warp(I_tp1, flow.u, flow.v, &valid);
  const int n = valid.count();
  if (valid_count) *valid_count = n;
  if (n == 0) return 0.0;
  double s = 0.0;
  for (int c = 0; c < I_t.channels(); ++c)
    for (size_t i = 0; i < valid.size(); ++i)
      if (valid.v[i]) s += std::fabs(I_t.ch[c].v[i] - warped.ch[c].v[i]);
  return s / (static_cast<double>(I_t.channels()) * n);
}

double first_order_smoothness(const std::vector<Grid>& stack) {
  require(!stack.empty(), "first_order_smoothness: empty stack");
  double total = 0.0;
  for (const Grid& f : stack) {
    require(f.size() > 0, "first_order_smoothness: empty field");
    const long nh = static_cast<long>(f.h) * (f.w - 1);
    const long nv = static_cast<long>(f.h - 1) * f.w;
    if (nh + nv == 0) continue;
    double s = 0.0;
    for (int y = 0; y < f.h; ++y)
      for (int x = 0; x + 1 < f.w; ++x) s += std::fabs(f.at(y, x + 1) - f.at(y, x));
    for (int y = 0; y + 1 < f.h; ++y)
      for (int x = 0; x < f.w; ++x) s += std::fabs(f.at(y + 1, x) - f.at(y, x));
    total += s / (nh + nv);
  }
  return total;
}

double second_order_depth_smoothness(const Grid& d) {
  require(d.size() > 0, "second_order_depth_smoothness: empty depth");
  const long n = static_cast<long>(d.h - 2) * (d.w - 2);
  if (n <= 0) return 0.0;
  double s = 0.0;
  for (int y = 1; y + 1 < d.h; ++y)
    for (int x = 1; x + 1 < d.w; ++x) {
      s += std::fabs(d.at(y, x + 1) - 2.0 * d.at(y, x) + d.at(y, x - 1));
      s += std::fabs(d.at(y + 1, x) - 2.0 * d.at(y, x) + d.at(y - 1, x));
    }
  return s / n;
}

double forward_backward_loss(const Grid& d_t, const Grid& d_tp1, const geom::FlowField& flow,
                             int* valid_count) {
  require(d_t.same_shape(flow.u) && d_t.same_shape(flow.w),
          "forward_backward_loss: shape mismatch");
  double s = 0.0;
  int n = 0;
  for (int y = 0; y < d_t.h; ++y)
    for (int x = 0; x < d_t.w; ++x) {
      bool ok = false;
      const double sampled =
          warp::bilinear_sample(d_tp1, x + flow.u.at(y, x), y + flow.v.at(y, x), &ok);
      if (!ok) continue;
      s += std::fabs(d_t.at(y, x) + flow.w.at(y, x) - sampled);
      ++n;
    }
  if (valid_count) *valid_count = n;
  return n == 0 ? 0.0 : s / n;
}

double depth_supervision_loss(const Grid& d, const DepthSupervision& sup) {
  require(d.same_shape(sup.d_gt), "depth_supervision_loss: shape mismatch");
  require(d.h == sup.dmask.h && d.w == sup.dmask.w, "depth_supervision_loss: mask mismatch");
  double s = 0.0;
  for (size_t i = 0; i < d.size(); ++i)
    if (sup.dmask.v[i]) s += std::fabs(d.v[i] - sup.d_gt.v[i]);
  return s / static_cast<double>(d.size());
}

std::pair<double, double> pose_error(const geom::Pose& pred, const geom::Pose& gt) {
  const geom::Mat3 Rt = pred.R.transposed();
  const geom::Vec3 te = Rt.apply(gt.t - pred.t);
  const geom::Mat3 Re = Rt * gt.R;
  const double c = std::clamp((Re.trace() - 1.0) / 2.0, -1.0, 1.0);
  return {te.norm(), std::acos(c)};
}

std::pair<double, double> pose_error(const geom::RigidMotion& pred, const geom::Pose& gt) {
  return pose_error(geom::to_pose(pred), gt);
}

double flow_supervision_loss(const geom::FlowField& flow, const Grid& u_gt, const Grid& v_gt) {
  require(flow.u.same_shape(u_gt) && flow.v.same_shape(v_gt),
          "flow_supervision_loss: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < u_gt.size(); ++i)
    s += std::fabs(flow.u.v[i] - u_gt.v[i]) + std::fabs(flow.v.v[i] - v_gt.v[i]);
  return s / static_cast<double>(u_gt.size());
}

// ---------------------------------------------------------------------------
// Tape builders

namespace {

// sum(|resid| * vmask) / max(sum(vmask), 1); vmask carries no gradient.
Var masked_mean_abs(Tape& t, Var resid, Var vmask, double denom_scale = 1.0) {
  Var num = t.sum(t.mul(t.abs(resid), vmask));
  Var den = t.max_const(t.sum(vmask), 1.0);
  if (denom_scale != 1.0) den = t.mul_const(den, denom_scale);
  return t.div(num, den);
}

}  // namespace

Var photometric_loss_tape(Tape& t, const Image& I_t, const Image& I_tp1, Var u, Var v) {
  require(I_t.channels() == I_tp1.channels() && I_t.channels() > 0,
          "photometric_loss_tape: channel mismatch");
  warp::WarpResult r = warp::inverse_warp_tape(t, I_tp1, u, v);
  Var num;
  for (int c = 0; c < I_t.channels(); ++c) {
    Var resid = t.sub(t.constant(I_t.ch[c]), r.channels[c]);
    Var part = t.sum(t.mul(t.abs(resid), r.valid));
    num = c == 0 ? part : t.add(num, part);
  }
  Var den = t.mul_const(t.max_const(t.sum(r.valid), 1.0), I_t.channels());
  return t.div(num, den);
}

Var first_order_smoothness_tape(Tape& t, const std::vector<Var>& stack) {
  require(!stack.empty(), "first_order_smoothness_tape: empty stack");
  Var total;
  bool first = true;
  for (Var f : stack) {
    const int h = t.value(f).h, w = t.value(f).w;
    const long nh = static_cast<long>(h) * (w - 1);
    const long nv = static_cast<long>(h - 1) * w;
    if (nh + nv == 0) continue;
    Var s;
    bool have = false;
    if (nh > 0) {
      s = t.sum(t.abs(t.diff_x(f)));
      have = true;
    }
    if (nv > 0) {
      Var sy = t.sum(t.abs(t.diff_y(f)));
      s = have ? t.add(s, sy) : sy;
    }
    Var m = t.mul_const(s, 1.0 / static_cast<double>(nh + nv));
    total = first ? m : t.add(total, m);
    first = false;
  }
  return first ? t.constant_scalar(0.0) : total;
}

Var second_order_depth_smoothness_tape(Tape& t, Var depth) {
  const int h = t.value(depth).h, w = t.value(depth).w;
  const long n = static_cast<long>(h - 2) * (w - 2);
  if (n <= 0) return t.constant_scalar(0.0);
  // |d_xx| lives on h x (w-2); keep rows 1..h-2. |d_yy| lives on (h-2) x w;
  // keep columns 1..w-2.
  Grid row_keep(h, w - 2, 1.0);
  for (int x = 0; x < w - 2; ++x) {
    row_keep.at(0, x) = 0.0;
    row_keep.at(h - 1, x) = 0.0;
  }
  Grid col_keep(h - 2, w, 1.0);
  for (int y = 0; y < h - 2; ++y) {
    col_keep.at(y, 0) = 0.0;
    col_keep.at(y, w - 1) = 0.0;
  }
  Var dxx = t.abs(t.diff_x(t.diff_x(depth)));
  Var dyy = t.abs(t.diff_y(t.diff_y(depth)));
  Var s = t.add(t.sum(t.mul(dxx, t.constant(row_keep))), t.sum(t.mul(dyy, t.constant(col_keep))));
  return t.mul_const(s, 1.0 / static_cast<double>(n));
}

Var forward_backward_loss_tape(Tape& t, Var d_t, Var d_tp1, Var u, Var v, Var w) {
  auto [xs, ys] = warp::warp_coords_tape(t, u, v);
  Var sampled = t.bilinear(d_tp1, xs, ys);
  Var vmask = t.valid_of(sampled);
  Var resid = t.sub(t.add(d_t, w), sampled);
  return masked_mean_abs(t, resid, vmask);
}

Var depth_supervision_loss_tape(Tape& t, Var d, const DepthSupervision& sup) {
  const size_t n = t.value(d).size();
  require(sup.d_gt.size() == n, "depth_supervision_loss_tape: shape mismatch");
  Var resid = t.sub(d, t.constant(sup.d_gt));
  Var s = t.sum(t.mul(t.abs(resid), t.constant(sup.dmask.to_grid())));
  return t.mul_const(s, 1.0 / static_cast<double>(n));
}

std::pair<Var, Var> pose_error_tape(Tape& t, const geom::VarMotion& pred, const geom::Pose& gt) {
  geom::VarMat3 R = geom::rotation_from_sins_tape(t, pred.sins[0], pred.sins[1], pred.sins[2]);
  // effective translation of the pose R (X - p) + t is t - R p
  std::array<Var, 3> te;
  const std::array<Var, 3> piv{pred.pivot.x, pred.pivot.y, pred.pivot.z};
  const std::array<Var, 3> tr{pred.t.x, pred.t.y, pred.t.z};
  for (int i = 0; i < 3; ++i) {
    Var rp = t.add(t.add(t.mul(R.m[i * 3 + 0], piv[0]), t.mul(R.m[i * 3 + 1], piv[1])),
                   t.mul(R.m[i * 3 + 2], piv[2]));
    te[i] = t.sub(tr[i], rp);
  }
  const double gt_t[3] = {gt.t.x, gt.t.y, gt.t.z};
  std::array<Var, 3> dt;
  for (int i = 0; i < 3; ++i) dt[i] = t.sub(t.constant_scalar(gt_t[i]), te[i]);
  // R^T dt
  Var q;
  for (int i = 0; i < 3; ++i) {
    Var comp = t.add(t.add(t.mul(R.m[0 * 3 + i], dt[0]), t.mul(R.m[1 * 3 + i], dt[1])),
                     t.mul(R.m[2 * 3 + i], dt[2]));
    Var sq = t.square(comp);
    q = i == 0 ? sq : t.add(q, sq);
  }
  Var trans = t.sqrt(q);
  // trace(R^T R_gt) = sum_ij R_ij gt_ij
  Var tr_sum;
  for (int i = 0; i < 9; ++i) {
    Var term = t.mul_const(R.m[i], gt.R.m[i]);
    tr_sum = i == 0 ? term : t.add(tr_sum, term);
  }
  Var rot = t.acos_clamped(t.mul_const(t.add_const(tr_sum, -1.0), 0.5));
  return {trans, rot};
}

Var flow_supervision_loss_tape(Tape& t, Var u, Var v, const FlowPair& gt) {
  const size_t n = t.value(u).size();
  require(gt.u.size() == n && gt.v.size() == n, "flow_supervision_loss_tape: shape mismatch");
  Var s = t.add(t.sum(t.abs(t.sub(u, t.constant(gt.u)))),
                t.sum(t.abs(t.sub(v, t.constant(gt.v)))));
  return t.mul_const(s, 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Assembly

namespace {

void add_term(Tape& t, std::vector<TermReport>* terms, Var& total, bool& first,
              const std::string& name, double weight, int node_first, Var term) {
  Var weighted = t.mul_const(term, weight);
  total = first ? weighted : t.add(total, weighted);
  first = false;
  if (terms) {
    TermReport tr;
    tr.name = name;
    tr.weight = weight;
    tr.node = term;
    tr.node_first = node_first;
    tr.node_last = t.num_nodes() - 1;
    terms->push_back(tr);
  }
}

}  // namespace

Var direction_loss_tape(Tape& t, const DirectionState& s, const DirectionObs& o,
                        const geom::Intrinsics& K, const LossWeights& w,
                        std::vector<TermReport>* terms) {
  require(s.objects.size() == s.masks.size(), "direction_loss_tape: object/mask count mismatch");
  Var total;
  bool first = true;

  geom::VarFlow flow = geom::flow_tape(t, s.depth, K, s.cam, s.objects, s.masks);

  if (w.color > 0.0) {
    const int n0 = t.num_nodes();
    Var term = photometric_loss_tape(t, o.src, o.dst, flow.u, flow.v);
    add_term(t, terms, total, first, "color", w.color, n0, term);
  }
  if (w.flow_smooth > 0.0) {
    const int n0 = t.num_nodes();
    Var term = first_order_smoothness_tape(t, {flow.u, flow.v});
    add_term(t, terms, total, first, "flow_smooth", w.flow_smooth, n0, term);
  }
  if (w.mask_smooth > 0.0 && !s.masks.empty()) {
    const int n0 = t.num_nodes();
    Var term = first_order_smoothness_tape(t, s.masks);
    add_term(t, terms, total, first, "mask_smooth", w.mask_smooth, n0, term);
  }
  if (w.depth_smooth > 0.0) {
    const int n0 = t.num_nodes();
    Var term = second_order_depth_smoothness_tape(t, s.depth);
    add_term(t, terms, total, first, "depth_smooth", w.depth_smooth, n0, term);
  }
  if (w.fb > 0.0) {
    const int n0 = t.num_nodes();
    Var term = forward_backward_loss_tape(t, s.depth, s.depth_other, flow.u, flow.v, flow.w);
    add_term(t, terms, total, first, "fb", w.fb, n0, term);
  }
  if (w.depth_sup > 0.0 && o.depth_sup) {
    const int n0 = t.num_nodes();
    Var term = depth_supervision_loss_tape(t, s.depth, *o.depth_sup);
    add_term(t, terms, total, first, "depth_sup", w.depth_sup, n0, term);
  }
  if ((w.pose_trans > 0.0 || w.pose_rot > 0.0) && o.pose_gt) {
    const int n0 = t.num_nodes();
    auto [trans, rot] = pose_error_tape(t, s.cam, *o.pose_gt);
    if (w.pose_trans > 0.0) add_term(t, terms, total, first, "pose_trans", w.pose_trans, n0, trans);
    if (w.pose_rot > 0.0)
      add_term(t, terms, total, first, "pose_rot", w.pose_rot, n0, rot);
  }
  if (w.flow_sup > 0.0 && o.flow_gt) {
    const int n0 = t.num_nodes();
    Var term = flow_supervision_loss_tape(t, flow.u, flow.v, *o.flow_gt);
    add_term(t, terms, total, first, "flow_sup", w.flow_sup, n0, term);
  }
  require(!first, "direction_loss_tape: no loss term enabled");
  return total;
}

Var total_loss_tape(Tape& t, const DirectionState& fwd, const DirectionState& bwd,
                    const Observations& obs, const LossWeights& w,
                    std::vector<TermReport>* terms) {
  w.validate();
  std::vector<TermReport> local;
  Var total = direction_loss_tape(t, fwd, obs.fwd, obs.K, w, terms ? &local : nullptr);
  if (terms)
    for (auto& tr : local) tr.name = "fwd." + tr.name;
  if (obs.symmetric) {
    std::vector<TermReport> back;
    Var b = direction_loss_tape(t, bwd, obs.bwd, obs.K, w, terms ? &back : nullptr);
    total = t.add(total, b);
    if (terms)
      for (auto& tr : back) {
        tr.name = "bwd." + tr.name;
        local.push_back(tr);
      }
  }
  if (terms) *terms = std::move(local);
  return total;
}

namespace {

geom::VarMotion bind_motion_const(Tape& t, const geom::RigidMotion& m) {
  geom::VarMotion vm;
  vm.sins = {t.constant_scalar(m.sins[0]), t.constant_scalar(m.sins[1]),
             t.constant_scalar(m.sins[2])};
  vm.t = {t.constant_scalar(m.t.x), t.constant_scalar(m.t.y), t.constant_scalar(m.t.z)};
  vm.pivot = {t.constant_scalar(m.pivot.x), t.constant_scalar(m.pivot.y),
              t.constant_scalar(m.pivot.z)};
  return vm;
}

DirectionState bind_state_const(Tape& t, const DirectionStateValues& s, const Grid& other_depth) {
  DirectionState d;
  d.depth = t.constant(s.depth);
  d.cam = bind_motion_const(t, s.cam);
  for (const auto& o : s.objects) d.objects.push_back(bind_motion_const(t, o));
  for (const auto& m : s.masks) d.masks.push_back(t.constant(m));
  d.depth_other = t.constant(other_depth);
  return d;
}

}  // namespace

double total_loss(const PairStateValues& state, const Observations& obs, const LossWeights& w,
                  std::vector<TermReport>* terms) {
  Tape t;
  t.set_record_branches(false);
  DirectionState fwd = bind_state_const(t, state.fwd, state.bwd.depth);
  DirectionState bwd = bind_state_const(t, state.bwd, state.fwd.depth);
  Var total = total_loss_tape(t, fwd, bwd, obs, w, terms);
  t.forward();
  if (terms)
    for (auto& tr : *terms) tr.value = t.value_scalar(tr.node);
  return t.value_scalar(total);
}

}  // namespace sfm::loss
