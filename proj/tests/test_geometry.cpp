#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "sfm/geometry.hpp"

using namespace sfm;
using namespace sfm::geom;

namespace {

RigidMotion random_motion(std::mt19937_64& rng, double sin_range, double t_range,
                          double pivot_range) {
  std::uniform_real_distribution<double> us(-sin_range, sin_range);
  std::uniform_real_distribution<double> ut(-t_range, t_range);
  std::uniform_real_distribution<double> up(-pivot_range, pivot_range);
  RigidMotion m;
  m.sins = {us(rng), us(rng), us(rng)};
  m.t = {ut(rng), ut(rng), ut(rng)};
  m.pivot = {up(rng), up(rng), up(rng)};
  return m;
}

Grid random_depth(int h, int w, std::mt19937_64& rng, double lo = 1.5, double hi = 4.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Grid g(h, w);
  for (double& x : g.v) x = d(rng);
  return g;
}

Grid random_mask(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Grid g(h, w);
  for (double& x : g.v) x = d(rng);
  return g;
}

}  // namespace

TEST_CASE("intrinsics defaults") {
  Intrinsics K;
  CHECK(K.f == 1.0);
  CHECK(K.cx == 0.5);
  CHECK(K.cy == 0.5);
}

TEST_CASE("normalized coordinates use pixel centers") {
  Grid xs = normalized_x(2, 4);
  Grid ys = normalized_y(2, 4);
  CHECK(xs.at(0, 0) == doctest::Approx(0.125));
  CHECK(xs.at(0, 3) == doctest::Approx(0.875));
  CHECK(ys.at(0, 0) == doctest::Approx(0.25));
  CHECK(ys.at(1, 0) == doctest::Approx(0.75));
}

TEST_CASE("backproject hand cases") {
  Intrinsics K;
  {
    Grid d(1, 1, 2.0);  // single center pixel
    PointField P = backproject(d, K);
    CHECK(P.X.v[0] == doctest::Approx(0.0));
    CHECK(P.Y.v[0] == doctest::Approx(0.0));
    CHECK(P.Z.v[0] == doctest::Approx(2.0));
  }
  {
    Grid d(1, 2, 1.0);
    PointField P = backproject(d, K);
    CHECK(P.X.at(0, 1) == doctest::Approx(0.25));  // xn = 0.75
    CHECK(P.Y.at(0, 1) == doctest::Approx(0.0));
    CHECK(P.Z.at(0, 1) == doctest::Approx(1.0));
    CHECK(P.X.at(0, 0) == doctest::Approx(-0.25));
  }
}

TEST_CASE("rotation hand case: quarter turn about x") {
  Mat3 R = rotation_from_sins(1.0, 0.0, 0.0);
  Vec3 v = R.apply({0, 1, 0});
  CHECK(v.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(v.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(v.z == doctest::Approx(1.0));
}

TEST_CASE("rotations are orthonormal with unit determinant") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> us(-0.99, 0.99);
  for (int i = 0; i < 50; ++i) {
    Mat3 R = rotation_from_sins(us(rng), us(rng), us(rng));
    Mat3 I = R.transposed() * R;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        CHECK(I.at(r, c) == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-12));
    const double det = R.at(0, 0) * (R.at(1, 1) * R.at(2, 2) - R.at(1, 2) * R.at(2, 1)) -
                       R.at(0, 1) * (R.at(1, 0) * R.at(2, 2) - R.at(1, 2) * R.at(2, 0)) +
                       R.at(0, 2) * (R.at(1, 0) * R.at(2, 1) - R.at(1, 1) * R.at(2, 0));
    CHECK(det == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("sine and angle parameterizations agree on the principal branch") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ua(-1.5, 1.5);
  for (int i = 0; i < 20; ++i) {
    const double a = ua(rng), b = ua(rng), c = ua(rng);
    Mat3 Rs = rotation_from_sins(std::sin(a), std::sin(b), std::sin(c));
    Mat3 Ra = rotation_from_angles(a, b, c);
    for (int k = 0; k < 9; ++k) CHECK(Rs.m[k] == doctest::Approx(Ra.m[k]).epsilon(1e-12));
  }
}

TEST_CASE("projection hand case") {
  Intrinsics K;
  PointField P{Grid(1, 1, 0.2), Grid(1, 1, 0.0), Grid(1, 1, 2.0)};
  Grid xn, yn;
  project(P, K, xn, yn);
  CHECK(xn.v[0] == doctest::Approx(0.6));
  CHECK(yn.v[0] == doctest::Approx(0.5));
}

TEST_CASE("projection clamps depth from below") {
  Intrinsics K;
  PointField P{Grid(1, 1, 0.5), Grid(1, 1, 0.0), Grid(1, 1, -1.0)};
  Grid xn, yn;
  project(P, K, xn, yn);
  CHECK(xn.v[0] == doctest::Approx(0.5 / kZMin + 0.5));
  CHECK(std::isfinite(xn.v[0]));
}

TEST_CASE("project inverts backproject") {
  std::mt19937_64 rng(7);
  Intrinsics K{1.2, 0.45, 0.55};
  Grid d = random_depth(40, 50, rng, 0.1, 10.0);
  PointField P = backproject(d, K);
  Grid xn, yn;
  project(P, K, xn, yn);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 50; ++x) {
      CHECK(std::fabs(xn.at(y, x) - (x + 0.5) / 50.0) < 1e-12);
      CHECK(std::fabs(yn.at(y, x) - (y + 0.5) / 40.0) < 1e-12);
    }
}

TEST_CASE("object transform blends by mask weight") {
  std::mt19937_64 rng(9);
  PointField P{Grid(2, 2, 0.3), Grid(2, 2, -0.2), Grid(2, 2, 2.5)};
  RigidMotion m = random_motion(rng, 0.5, 0.4, 0.5);
  const Vec3 X{0.3, -0.2, 2.5};
  const Vec3 moved = m.apply(X);
  for (double w : {0.0, 1.0, 0.37}) {
    std::vector<Grid> masks{Grid(2, 2, w)};
    PointField Q = object_transform(P, {m}, masks);
    CHECK(Q.X.v[0] == doctest::Approx(X.x + w * (moved.x - X.x)).epsilon(1e-14));
    CHECK(Q.Y.v[0] == doctest::Approx(X.y + w * (moved.y - X.y)).epsilon(1e-14));
    CHECK(Q.Z.v[0] == doctest::Approx(X.z + w * (moved.z - X.z)).epsilon(1e-14));
  }
}

TEST_CASE("camera transform applies pivot then translation") {
  RigidMotion cam;
  cam.sins = {0.0, 0.0, 1.0};  // quarter turn about z
  cam.pivot = {1.0, 0.0, 0.0};
  cam.t = {0.0, 0.0, 3.0};
  PointField P{Grid(1, 1, 2.0), Grid(1, 1, 0.0), Grid(1, 1, 0.0)};
  PointField Q = camera_transform(P, cam);
  // (2,0,0) - (1,0,0) = (1,0,0); Rz(90deg) -> (0,1,0); + (0,0,3)
  CHECK(Q.X.v[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(Q.Y.v[0] == doctest::Approx(1.0));
  CHECK(Q.Z.v[0] == doctest::Approx(3.0));
}

TEST_CASE("flat scene under lateral camera translation: uniform flow") {
  Intrinsics K;
  for (int w : {8, 32}) {
    const int h = w / 2;
    Grid d(h, w, 2.0);
    RigidMotion cam;
    cam.t = {0.2, 0.0, 0.0};
    FlowField F = compute_flow(d, K, cam, {}, {});
    for (size_t i = 0; i < F.u.size(); ++i) {
      CHECK(F.u.v[i] == doctest::Approx(0.1 * w).epsilon(1e-12));
      CHECK(F.v.v[i] == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(F.w.v[i] == doctest::Approx(0.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("flow is scale equivariant") {
  std::mt19937_64 rng(11);
  Intrinsics K;
  Grid d = random_depth(6, 8, rng);
  RigidMotion cam = random_motion(rng, 0.3, 0.3, 0.2);
  std::vector<RigidMotion> objs{random_motion(rng, 0.3, 0.3, 0.5),
                                random_motion(rng, 0.3, 0.3, 0.5)};
  std::vector<Grid> masks{random_mask(6, 8, rng), random_mask(6, 8, rng)};
  FlowField F1 = compute_flow(d, K, cam, objs, masks);
  for (double c : {0.5, 3.0}) {
    Grid dc = d;
    for (double& v : dc.v) v *= c;
    RigidMotion camc = cam;
    camc.t = cam.t * c;
    camc.pivot = cam.pivot * c;
    std::vector<RigidMotion> objsc = objs;
    for (auto& o : objsc) {
      o.t = o.t * c;
      o.pivot = o.pivot * c;
    }
    FlowField Fc = compute_flow(dc, K, camc, objsc, masks);
    for (size_t i = 0; i < F1.u.size(); ++i) {
      CHECK(std::fabs(Fc.u.v[i] - F1.u.v[i]) < 1e-9);
      CHECK(std::fabs(Fc.v.v[i] - F1.v.v[i]) < 1e-9);
      CHECK(std::fabs(Fc.w.v[i] - c * F1.w.v[i]) < 1e-9);
    }
  }
}

namespace {

// Binds a plain motion's nine scalars as tape leaves.
geom::VarMotion bind_motion(ad::Tape& t, const RigidMotion& m, const std::string& prefix) {
  geom::VarMotion vm;
  vm.sins = {t.leaf_scalar(m.sins[0], prefix + ".s0"), t.leaf_scalar(m.sins[1], prefix + ".s1"),
             t.leaf_scalar(m.sins[2], prefix + ".s2")};
  vm.t = {t.leaf_scalar(m.t.x, prefix + ".tx"), t.leaf_scalar(m.t.y, prefix + ".ty"),
          t.leaf_scalar(m.t.z, prefix + ".tz")};
  vm.pivot = {t.leaf_scalar(m.pivot.x, prefix + ".px"), t.leaf_scalar(m.pivot.y, prefix + ".py"),
              t.leaf_scalar(m.pivot.z, prefix + ".pz")};
  return vm;
}

}  // namespace

TEST_CASE("tape flow matches the plain composition") {
  std::mt19937_64 rng(13);
  Intrinsics K{1.1, 0.48, 0.52};
  Grid d = random_depth(5, 7, rng);
  RigidMotion cam = random_motion(rng, 0.4, 0.3, 0.2);
  std::vector<RigidMotion> objs{random_motion(rng, 0.4, 0.3, 0.5),
                                random_motion(rng, 0.4, 0.3, 0.5)};
  std::vector<Grid> masks{random_mask(5, 7, rng), random_mask(5, 7, rng)};
  FlowField F = compute_flow(d, K, cam, objs, masks);

  ad::Tape t;
  ad::Var vd = t.leaf(d, "depth");
  geom::VarMotion vcam = bind_motion(t, cam, "cam");
  std::vector<geom::VarMotion> vobjs{bind_motion(t, objs[0], "o0"), bind_motion(t, objs[1], "o1")};
  std::vector<ad::Var> vmasks{t.leaf(masks[0], "m0"), t.leaf(masks[1], "m1")};
  geom::VarFlow vf = flow_tape(t, vd, K, vcam, vobjs, vmasks);
  t.forward();
  for (size_t i = 0; i < F.u.size(); ++i) {
    CHECK(std::fabs(t.value(vf.u).v[i] - F.u.v[i]) < 1e-13);
    CHECK(std::fabs(t.value(vf.v).v[i] - F.v.v[i]) < 1e-13);
    CHECK(std::fabs(t.value(vf.w).v[i] - F.w.v[i]) < 1e-13);
  }
}

TEST_CASE("flow gradients agree with finite differences") {
  std::mt19937_64 rng(17);
  Intrinsics K;
  ad::ParamSet p;
  p.add("depth", random_depth(4, 4, rng));
  Grid sins(1, 3), trans(1, 3);
  std::uniform_real_distribution<double> us(-0.2, 0.2);
  for (double& x : sins.v) x = us(rng);
  for (double& x : trans.v) x = us(rng);
  p.add("cam_sins", sins);
  p.add("cam_t", trans);
  Grid osins(1, 3), ot(1, 3);
  for (double& x : osins.v) x = us(rng);
  for (double& x : ot.v) x = us(rng);
  p.add("obj_sins", osins);
  p.add("obj_t", ot);
  p.add("mask", random_mask(4, 4, rng));

  auto builder = [&](ad::Tape& t, const std::map<std::string, ad::Var>& leaves) {
    auto pick = [&](const std::string& n, int i) {
      // 1x3 leaf split into scalars via mask constants
      Grid sel(1, 3);
      sel.v[i] = 1.0;
      return t.sum(t.mul(leaves.at(n), t.constant(sel)));
    };
    geom::VarMotion cam;
    cam.sins = {pick("cam_sins", 0), pick("cam_sins", 1), pick("cam_sins", 2)};
    cam.t = {pick("cam_t", 0), pick("cam_t", 1), pick("cam_t", 2)};
    cam.pivot = {t.constant_scalar(0.0), t.constant_scalar(0.0), t.constant_scalar(0.0)};
    geom::VarMotion obj;
    obj.sins = {pick("obj_sins", 0), pick("obj_sins", 1), pick("obj_sins", 2)};
    // R(X - p) + t does not restore the pivot, so a motion that keeps the
    // object in place needs t near p.
    obj.t = {t.add(pick("obj_t", 0), t.constant_scalar(0.1)),
             t.add(pick("obj_t", 1), t.constant_scalar(-0.1)),
             t.add(pick("obj_t", 2), t.constant_scalar(2.0))};
    obj.pivot = {t.constant_scalar(0.1), t.constant_scalar(-0.1), t.constant_scalar(2.0)};
    geom::VarFlow f =
        flow_tape(t, leaves.at("depth"), K, cam, {obj}, {leaves.at("mask")});
    return t.mean(t.add(t.add(t.square(f.u), t.square(f.v)), t.square(f.w)));
  };
  ad::GradCheckResult r = ad::grad_check(builder, p, 1e-5, 1e-4);
  CAPTURE(r.worst_param);
  CAPTURE(r.worst_index);
  CHECK(r.max_rel_err < 1e-6);
  CHECK(r.checked == 44);
}
