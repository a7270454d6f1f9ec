#include "sfm/geometry.hpp"

#include <algorithm>

namespace sfm::geom {

namespace {

double cos_from_sin(double s) { return std::sqrt(std::max(1.0 - s * s, 0.0)); }

}  // namespace

Mat3 rot_x_sin(double s) {
  const double c = cos_from_sin(s);
  Mat3 r;
  r.m = {1, 0, 0, 0, c, -s, 0, s, c};
  return r;
}

Mat3 rot_y_sin(double s) {
  const double c = cos_from_sin(s);
  Mat3 r;
  r.m = {c, 0, s, 0, 1, 0, -s, 0, c};
  return r;
}

Mat3 rot_z_sin(double s) {
  const double c = cos_from_sin(s);
  Mat3 r;
  r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
  return r;
}

Mat3 rotation_from_sins(double sx, double sy, double sz) {
  return rot_x_sin(sx) * rot_y_sin(sy) * rot_z_sin(sz);
}

namespace {

Mat3 rot_axis_full(int axis, double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  switch (axis) {
    case 0: r.m = {1, 0, 0, 0, c, -s, 0, s, c}; break;
    case 1: r.m = {c, 0, s, 0, 1, 0, -s, 0, c}; break;
    default: r.m = {c, -s, 0, s, c, 0, 0, 0, 1}; break;
  }
  return r;
}

}  // namespace

Mat3 rotation_from_angles(double ax, double ay, double az) {
  return rot_axis_full(0, ax) * rot_axis_full(1, ay) * rot_axis_full(2, az);
}

Grid normalized_x(int h, int w) {
  Grid g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.at(y, x) = (x + 0.5) / w;
  return g;
}

Grid normalized_y(int h, int w) {
  Grid g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.at(y, x) = (y + 0.5) / h;
  return g;
}

PointField backproject(const Grid& depth, const Intrinsics& K) {
  const int h = depth.h, w = depth.w;
  PointField P{Grid(h, w), Grid(h, w), Grid(h, w)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d = depth.at(y, x);
      const double xn = (x + 0.5) / w;
      const double yn = (y + 0.5) / h;
      P.X.at(y, x) = d * (xn - K.cx) / K.f;
      P.Y.at(y, x) = d * (yn - K.cy) / K.f;
      P.Z.at(y, x) = d;
    }
  return P;
}

PointField object_transform(const PointField& P, const std::vector<RigidMotion>& objects,
                            const std::vector<Grid>& masks) {
  require(objects.size() == masks.size(), "object_transform: motion/mask count mismatch");
  PointField out = P;
  for (size_t k = 0; k < objects.size(); ++k) {
    require(masks[k].same_shape(P.X), "object_transform: mask shape mismatch");
    const Mat3 R = objects[k].rotation();
    const Vec3 t = objects[k].t;
    const Vec3 p = objects[k].pivot;
    for (size_t i = 0; i < P.X.size(); ++i) {
      const Vec3 X{P.X.v[i], P.Y.v[i], P.Z.v[i]};
      const Vec3 moved = R.apply(X - p) + t;
      const double m = masks[k].v[i];
      out.X.v[i] += m * (moved.x - X.x);
      out.Y.v[i] += m * (moved.y - X.y);
      out.Z.v[i] += m * (moved.z - X.z);
    }
  }
  return out;
}

PointField camera_transform(const PointField& P, const RigidMotion& cam) {
  const Mat3 R = cam.rotation();
  PointField out{Grid(P.X.h, P.X.w), Grid(P.X.h, P.X.w), Grid(P.X.h, P.X.w)};
  for (size_t i = 0; i < P.X.size(); ++i) {
    const Vec3 X{P.X.v[i], P.Y.v[i], P.Z.v[i]};
    const Vec3 moved = R.apply(X - cam.pivot) + cam.t;
    out.X.v[i] = moved.x;
    out.Y.v[i] = moved.y;
    out.Z.v[i] = moved.z;
  }
  return out;
}

void project(const PointField& P, const Intrinsics& K, Grid& xn, Grid& yn) {
  xn = Grid(P.X.h, P.X.w);
  yn = Grid(P.X.h, P.X.w);
  for (size_t i = 0; i < P.X.size(); ++i) {
    const double z = std::max(P.Z.v[i], kZMin);
    xn.v[i] = K.f * P.X.v[i] / z + K.cx;
    yn.v[i] = K.f * P.Y.v[i] / z + K.cy;
  }
}

FlowField compute_flow(const Grid& depth, const Intrinsics& K, const RigidMotion& cam,
                       const std::vector<RigidMotion>& objects, const std::vector<Grid>& masks) {
  const int h = depth.h, w = depth.w;
  const PointField P0 = backproject(depth, K);
  const PointField P1 = object_transform(P0, objects, masks);
  const PointField P2 = camera_transform(P1, cam);
  Grid xn1, yn1;
  project(P2, K, xn1, yn1);
  FlowField F{Grid(h, w), Grid(h, w), Grid(h, w)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double xn0 = (x + 0.5) / w;
      const double yn0 = (y + 0.5) / h;
      F.u.at(y, x) = (xn1.at(y, x) - xn0) * w;
      F.v.at(y, x) = (yn1.at(y, x) - yn0) * h;
      F.w.at(y, x) = P2.Z.at(y, x) - P0.Z.at(y, x);
    }
  return F;
}

// ---------------------------------------------------------------------------
// Tape mirrors

VarMat3 rotation_from_sins_tape(Tape& t, Var sx, Var sy, Var sz) {
  auto cos_of = [&](Var s) { return t.sqrt(t.max_const(t.sub(t.constant_scalar(1.0), t.square(s)), 0.0)); };
  const Var cx = cos_of(sx), cy = cos_of(sy), cz = cos_of(sz);
  const Var zero = t.constant_scalar(0.0);
  // Rx * Ry expanded, then * Rz; entries follow the plain composition.
  // Rx = [1 0 0; 0 cx -sx; 0 sx cx], Ry = [cy 0 sy; 0 1 0; -sy 0 cy],
  // Rz = [cz -sz 0; sz cz 0; 0 0 1].
  // Rx*Ry = [cy 0 sy; sx*sy cx -sx*cy; -cx*sy sx cx*cy]
  const Var a00 = cy, a01 = zero, a02 = sy;
  const Var a10 = t.mul(sx, sy), a11 = cx, a12 = t.neg(t.mul(sx, cy));
  const Var a20 = t.neg(t.mul(cx, sy)), a21 = sx, a22 = t.mul(cx, cy);
  VarMat3 R;
  R.m[0] = t.mul(a00, cz);
  R.m[1] = t.neg(t.mul(a00, sz));
  R.m[2] = a02;
  R.m[3] = t.add(t.mul(a10, cz), t.mul(a11, sz));
  R.m[4] = t.sub(t.mul(a11, cz), t.mul(a10, sz));
  R.m[5] = a12;
  R.m[6] = t.add(t.mul(a20, cz), t.mul(a21, sz));
  R.m[7] = t.sub(t.mul(a21, cz), t.mul(a20, sz));
  R.m[8] = a22;
  return R;
}

VarPointField rigid_apply_tape(Tape& t, const VarMat3& R, const VarVec3& trans,
                               const VarVec3& pivot, const VarPointField& X) {
  const Var dx = t.sub(X.X, pivot.x);
  const Var dy = t.sub(X.Y, pivot.y);
  const Var dz = t.sub(X.Z, pivot.z);
  auto row = [&](int r, Var tr) {
    return t.add(t.add(t.add(t.mul(R.m[r * 3 + 0], dx), t.mul(R.m[r * 3 + 1], dy)),
                       t.mul(R.m[r * 3 + 2], dz)),
                 tr);
  };
  return {row(0, trans.x), row(1, trans.y), row(2, trans.z)};
}

VarPointField backproject_tape(Tape& t, Var depth, const Intrinsics& K) {
  const int h = t.value(depth).h, w = t.value(depth).w;
  Grid xs = normalized_x(h, w);
  Grid ys = normalized_y(h, w);
  for (double& v : xs.v) v = (v - K.cx) / K.f;
  for (double& v : ys.v) v = (v - K.cy) / K.f;
  VarPointField P;
  P.X = t.mul(depth, t.constant(xs));
  P.Y = t.mul(depth, t.constant(ys));
  P.Z = depth;
  return P;
}

VarPointField object_transform_tape(Tape& t, const VarPointField& P,
                                    const std::vector<VarMotion>& objects,
                                    const std::vector<Var>& masks) {
  require(objects.size() == masks.size(), "object_transform_tape: motion/mask count mismatch");
  VarPointField out = P;
  for (size_t k = 0; k < objects.size(); ++k) {
    const VarMat3 R =
        rotation_from_sins_tape(t, objects[k].sins[0], objects[k].sins[1], objects[k].sins[2]);
    const VarPointField moved = rigid_apply_tape(t, R, objects[k].t, objects[k].pivot, P);
    out.X = t.add(out.X, t.mul(masks[k], t.sub(moved.X, P.X)));
    out.Y = t.add(out.Y, t.mul(masks[k], t.sub(moved.Y, P.Y)));
    out.Z = t.add(out.Z, t.mul(masks[k], t.sub(moved.Z, P.Z)));
  }
  return out;
}

VarPointField camera_transform_tape(Tape& t, const VarPointField& P, const VarMotion& cam) {
  const VarMat3 R = rotation_from_sins_tape(t, cam.sins[0], cam.sins[1], cam.sins[2]);
  return rigid_apply_tape(t, R, cam.t, cam.pivot, P);
}

std::pair<Var, Var> project_tape(Tape& t, const VarPointField& P, const Intrinsics& K) {
  const Var z = t.max_const(P.Z, kZMin);
  const Var xn = t.add_const(t.mul_const(t.div(P.X, z), K.f), K.cx);
  const Var yn = t.add_const(t.mul_const(t.div(P.Y, z), K.f), K.cy);
  return {xn, yn};
}

VarFlow flow_tape(Tape& t, Var depth, const Intrinsics& K, const VarMotion& cam,
                  const std::vector<VarMotion>& objects, const std::vector<Var>& masks) {
  const int h = t.value(depth).h, w = t.value(depth).w;
  const VarPointField P0 = backproject_tape(t, depth, K);
  const VarPointField P1 = object_transform_tape(t, P0, objects, masks);
  const VarPointField P2 = camera_transform_tape(t, P1, cam);
  auto [xn1, yn1] = project_tape(t, P2, K);
  VarFlow F;
  F.u = t.mul_const(t.sub(xn1, t.constant(normalized_x(h, w))), w);
  F.v = t.mul_const(t.sub(yn1, t.constant(normalized_y(h, w))), h);
  F.w = t.sub(P2.Z, P0.Z);
  return F;
}

}  // namespace sfm::geom
