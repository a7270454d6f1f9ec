#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "sfm/array.hpp"
#include "sfm/autodiff.hpp"

namespace sfm::geom {

// Depth of a projected point is clamped below by this before the perspective
// divide.
constexpr double kZMin = 1e-3;

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  double at(int r, int c) const { return m[r * 3 + c]; }
  double& at(int r, int c) { return m[r * 3 + c]; }

  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += at(i, k) * o.at(k, j);
        r.at(i, j) = s;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.at(i, j) = at(j, i);
    return r;
  }
  double trace() const { return m[0] + m[4] + m[8]; }
};

// Right-handed rotations about the coordinate axes, parameterized by the sine
// of the angle; the cosine is taken as +sqrt(1 - s^2), restricting each angle
// to [-pi/2, pi/2].
Mat3 rot_x_sin(double s);
Mat3 rot_y_sin(double s);
Mat3 rot_z_sin(double s);

// R = Rx(a) * Ry(b) * Rz(c) from the three sines.
Mat3 rotation_from_sins(double sx, double sy, double sz);

// Same composition from angles in radians (angles may be outside
// [-pi/2, pi/2]; used by scene generation and tests).
Mat3 rotation_from_angles(double ax, double ay, double az);

// Pinhole camera. Normalized image coordinates: pixel (x, y) of an h x w
// image sits at ((x + 0.5) / w, (y + 0.5) / h). cx, cy are the principal
// point in normalized units and f is the focal length in the same units.
struct Intrinsics {
  double f = 1.0;
  double cx = 0.5;
  double cy = 0.5;
};

// Rigid transform X -> R (X - pivot) + t with R given by Euler sines.
struct RigidMotion {
  Vec3 t;
  Vec3 pivot;
  std::array<double, 3> sins{0, 0, 0};

  Mat3 rotation() const { return rotation_from_sins(sins[0], sins[1], sins[2]); }
  Vec3 apply(const Vec3& X) const { return rotation().apply(X - pivot) + t; }
};

// Rotation + translation without a pivot; X -> R X + t.
struct Pose {
  Mat3 R;
  Vec3 t;
};

// R (X - p) + t collapses to the pose (R, t - R p).
inline Pose to_pose(const RigidMotion& m) {
  Mat3 R = m.rotation();
  return {R, m.t - R.apply(m.pivot)};
}

struct PointField {
  Grid X, Y, Z;
};

struct FlowField {
  Grid u, v, w;  // u, v in pixels; w is the depth change
};

Grid normalized_x(int h, int w);
Grid normalized_y(int h, int w);

// Per-pixel camera-frame points from depth: X = d (xn - cx) / f,
// Y = d (yn - cy) / f, Z = d.
PointField backproject(const Grid& depth, const Intrinsics& K);

// X' = X + sum_k mask_k ((R_k (X - p_k) + t_k) - X). Masks are weights in
// [0, 1]; they are applied as given (no renormalization).
PointField object_transform(const PointField& P, const std::vector<RigidMotion>& objects,
                            const std::vector<Grid>& masks);

PointField camera_transform(const PointField& P, const RigidMotion& cam);

// Perspective projection to normalized coordinates with the depth clamp:
// xn = f X / max(Z, kZMin) + cx.
void project(const PointField& P, const Intrinsics& K, Grid& xn, Grid& yn);

// Full decomposition-to-flow composition. u = (xn' - xn) w, v = (yn' - yn) h,
// w = Z'' - Z.
FlowField compute_flow(const Grid& depth, const Intrinsics& K, const RigidMotion& cam,
                       const std::vector<RigidMotion>& objects, const std::vector<Grid>& masks);

// ---------------------------------------------------------------------------
// Tape-side mirrors of the above; motion parameters are scalar Vars, point
// components are grid Vars. Evaluating these reproduces the plain versions.

using ad::Tape;
using ad::Var;

struct VarVec3 {
  Var x, y, z;
};

struct VarMat3 {
  std::array<Var, 9> m;
};

struct VarMotion {
  VarVec3 t;
  VarVec3 pivot;
  std::array<Var, 3> sins;
};

struct VarPointField {
  Var X, Y, Z;
};

struct VarFlow {
  Var u, v, w;
};

VarMat3 rotation_from_sins_tape(Tape& t, Var sx, Var sy, Var sz);

// R (X - pivot) + t, broadcasting scalar motion parameters over grids.
VarPointField rigid_apply_tape(Tape& t, const VarMat3& R, const VarVec3& trans,
                               const VarVec3& pivot, const VarPointField& X);

VarPointField backproject_tape(Tape& t, Var depth, const Intrinsics& K);

VarPointField object_transform_tape(Tape& t, const VarPointField& P,
                                    const std::vector<VarMotion>& objects,
                                    const std::vector<Var>& masks);

VarPointField camera_transform_tape(Tape& t, const VarPointField& P, const VarMotion& cam);

std::pair<Var, Var> project_tape(Tape& t, const VarPointField& P, const Intrinsics& K);

VarFlow flow_tape(Tape& t, Var depth, const Intrinsics& K, const VarMotion& cam,
                  const std::vector<VarMotion>& objects, const std::vector<Var>& masks);

}  // namespace sfm::geom
