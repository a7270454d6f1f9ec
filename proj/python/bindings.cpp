#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <stdexcept>

#include "sfm/geometry.hpp"
#include "sfm/losses.hpp"
#include "sfm/metrics.hpp"
#include "sfm/solver.hpp"
#include "sfm/synth.hpp"
#include "sfm/warping.hpp"

namespace py = pybind11;
using namespace sfm;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Grid grid_from(const Arr& a, const char* what) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(what) + " must be a 2d array");
  Grid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::memcpy(g.v.data(), a.data(), sizeof(double) * g.v.size());
  return g;
}

py::array_t<double> grid_to(const Grid& g) {
  py::array_t<double> a({g.h, g.w});
  std::memcpy(a.mutable_data(), g.v.data(), sizeof(double) * g.v.size());
  return a;
}

// 2d arrays are single-channel; 3d arrays are (h, w, c).
Image image_from(const Arr& a, const char* what) {
  if (a.ndim() == 2) {
    Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 1);
    std::memcpy(img.ch[0].v.data(), a.data(), sizeof(double) * img.ch[0].v.size());
    return img;
  }
  if (a.ndim() != 3) throw std::invalid_argument(std::string(what) + " must be 2d or 3d");
  int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1)),
      c = static_cast<int>(a.shape(2));
  Image img(h, w, c);
  auto r = a.unchecked<3>();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) img.ch[k].at(y, x) = r(y, x, k);
  return img;
}

py::array_t<double> image_to(const Image& img) {
  if (img.channels() == 1) return grid_to(img.ch[0]);
  py::array_t<double> a({img.height(), img.width(), img.channels()});
  auto r = a.mutable_unchecked<3>();
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int k = 0; k < img.channels(); ++k) r(y, x, k) = img.ch[k].at(y, x);
  return a;
}

// None means "all pixels valid" (the empty mask convention of the metrics).
Mask mask_from(const py::object& o, const char* what) {
  if (o.is_none()) return Mask();
  Arr a = o.cast<Arr>();
  Grid g = grid_from(a, what);
  Mask m(g.h, g.w, 0);
  for (size_t i = 0; i < g.size(); ++i) m.v[i] = g.v[i] != 0.0 ? 1 : 0;
  return m;
}

py::array_t<bool> mask_to(const Mask& m) {
  py::array_t<bool> a({m.h, m.w});
  auto r = a.mutable_unchecked<2>();
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) r(y, x) = m.at(y, x) != 0;
  return a;
}

geom::Vec3 vec3_from(const py::object& o, const char* what) {
  auto s = o.cast<std::vector<double>>();
  if (s.size() != 3) throw std::invalid_argument(std::string(what) + " must have 3 entries");
  return {s[0], s[1], s[2]};
}

geom::RigidMotion motion_from(const py::dict& d) {
  geom::RigidMotion m;
  if (d.contains("t")) m.t = vec3_from(d["t"], "t");
  if (d.contains("pivot")) m.pivot = vec3_from(d["pivot"], "pivot");
  if (d.contains("sins")) {
    auto s = d["sins"].cast<std::vector<double>>();
    if (s.size() != 3) throw std::invalid_argument("sins must have 3 entries");
    m.sins = {s[0], s[1], s[2]};
  }
  for (auto item : d) {
    std::string key = py::str(item.first);
    if (key != "t" && key != "pivot" && key != "sins")
      throw std::invalid_argument("unknown motion key \"" + key + "\"");
  }
  return m;
}

py::dict motion_to(const geom::RigidMotion& m) {
  py::dict d;
  d["t"] = std::vector<double>{m.t.x, m.t.y, m.t.z};
  d["pivot"] = std::vector<double>{m.pivot.x, m.pivot.y, m.pivot.z};
  d["sins"] = std::vector<double>{m.sins[0], m.sins[1], m.sins[2]};
  return d;
}

std::vector<geom::RigidMotion> motions_from(const py::object& o) {
  std::vector<geom::RigidMotion> out;
  if (o.is_none()) return out;
  for (auto item : o.cast<py::list>()) out.push_back(motion_from(item.cast<py::dict>()));
  return out;
}

std::vector<Grid> grids_from(const py::object& o, const char* what) {
  std::vector<Grid> out;
  if (o.is_none()) return out;
  for (auto item : o.cast<py::list>()) out.push_back(grid_from(item.cast<Arr>(), what));
  return out;
}

loss::LossWeights weights_from(const py::object& o) {
  loss::LossWeights w;
  if (o.is_none()) return w;
  for (auto item : o.cast<py::dict>()) {
    std::string key = py::str(item.first);
    double value = item.second.cast<double>();
    if (key == "color")
      w.color = value;
    else if (key == "flow_smooth")
      w.flow_smooth = value;
    else if (key == "mask_smooth")
      w.mask_smooth = value;
    else if (key == "depth_smooth")
      w.depth_smooth = value;
    else if (key == "fb")
      w.fb = value;
    else if (key == "depth_sup")
      w.depth_sup = value;
    else if (key == "pose_trans")
      w.pose_trans = value;
    else if (key == "pose_rot")
      w.pose_rot = value;
    else if (key == "flow_sup")
      w.flow_sup = value;
    else
      throw std::invalid_argument("unknown loss weight \"" + key + "\"");
  }
  return w;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Differentiable structure-and-motion toolkit";

  m.def(
      "backproject",
      [](const Arr& depth, double f, double cx, double cy) {
        geom::PointField p = geom::backproject(grid_from(depth, "depth"), {f, cx, cy});
        return py::make_tuple(grid_to(p.X), grid_to(p.Y), grid_to(p.Z));
      },
      py::arg("depth"), py::arg("f") = 1.0, py::arg("cx") = 0.5, py::arg("cy") = 0.5,
      "Per-pixel camera-frame points (X, Y, Z) from a depth map.");

  m.def(
      "compute_flow",
      [](const Arr& depth, const py::dict& camera, const py::object& objects,
         const py::object& masks, double f, double cx, double cy) {
        geom::FlowField flow =
            geom::compute_flow(grid_from(depth, "depth"), {f, cx, cy}, motion_from(camera),
                               motions_from(objects), grids_from(masks, "mask"));
        return py::make_tuple(grid_to(flow.u), grid_to(flow.v), grid_to(flow.w));
      },
      py::arg("depth"), py::arg("camera"), py::arg("objects") = py::none(),
      py::arg("masks") = py::none(), py::arg("f") = 1.0, py::arg("cx") = 0.5,
      py::arg("cy") = 0.5,
      "Dense flow (u px, v px, depth change w) from depth, masked object motions and "
      "camera motion.");

  m.def(
      "inverse_warp",
      [](const Arr& target, const Arr& u, const Arr& v) {
        Mask valid;
        Image warped = warp::inverse_warp(image_from(target, "target"), grid_from(u, "u"),
                                          grid_from(v, "v"), &valid);
        return py::make_tuple(image_to(warped), mask_to(valid));
      },
      py::arg("target"), py::arg("u"), py::arg("v"),
      "Bilinearly sample `target` at (x+u, y+v); returns (warped, valid).");

  m.def(
      "photometric_loss",
      [](const Arr& I_t, const Arr& I_tp1, const Arr& u, const Arr& v) {
        geom::FlowField flow;
        flow.u = grid_from(u, "u");
        flow.v = grid_from(v, "v");
        flow.w = Grid(flow.u.h, flow.u.w, 0.0);
        return loss::photometric_loss(image_from(I_t, "I_t"), image_from(I_tp1, "I_tp1"), flow);
      },
      py::arg("I_t"), py::arg("I_tp1"), py::arg("u"), py::arg("v"),
      "Mean absolute intensity difference between I_t and flow-warped I_tp1.");

  m.def(
      "scene_names", [] {
        std::vector<std::string> names;
        for (const auto& s : synth::standard_suite()) names.push_back(s.name);
        return names;
      },
      "Names of the synthetic scenes.");

  m.def(
      "generate_scene",
      [](const std::string& name, std::uint64_t seed) {
        synth::SceneGroundTruth gt = synth::generate_scene(synth::scene_by_name(name), seed);
        py::dict d;
        d["name"] = gt.name;
        d["K"] = py::make_tuple(gt.K.f, gt.K.cx, gt.K.cy);
        d["I_t"] = image_to(gt.I_t);
        d["I_tp1"] = image_to(gt.I_tp1);
        d["d_t"] = grid_to(gt.d_t);
        d["d_tp1"] = grid_to(gt.d_tp1);
        d["flow_u"] = grid_to(gt.flow.u);
        d["flow_v"] = grid_to(gt.flow.v);
        d["flow_w"] = grid_to(gt.flow.w);
        py::list masks;
        for (const auto& g : gt.masks) masks.append(grid_to(g));
        d["masks"] = masks;
        d["occluded"] = mask_to(gt.occluded);
        d["camera"] = motion_to(gt.camera);
        py::list objects;
        for (const auto& o : gt.objects) objects.append(motion_to(o));
        d["objects"] = objects;
        return d;
      },
      py::arg("name"), py::arg("seed") = 0,
      "Render a named synthetic scene with exact ground truth.");

  m.def(
      "optimize",
      [](const Arr& I_t, const Arr& I_tp1, int iterations, int k, std::uint64_t seed, double f,
         double cx, double cy, double step_size, bool pyramid, const py::object& weights) {
        Image A = image_from(I_t, "I_t"), B = image_from(I_tp1, "I_tp1");
        solve::SolverConfig cfg;
        cfg.iterations = iterations;
        cfg.K = k;
        cfg.seed = seed;
        cfg.step_size = step_size;
        cfg.pyramid = pyramid;
        cfg.weights = weights_from(weights);
        solve::ProblemState init = solve::init_state(A.height(), A.width(), cfg);
        solve::SolveResult res;
        {
          py::gil_scoped_release release;
          res = solve::optimize(A, B, {f, cx, cy}, init, cfg);
        }
        loss::PairStateValues phys =
            solve::physical_state(res.state, cfg.sharpen.multiplier(cfg.iterations));
        geom::FlowField flow = geom::compute_flow(phys.fwd.depth, {f, cx, cy}, phys.fwd.cam,
                                                  phys.fwd.objects, phys.fwd.masks);
        py::dict d;
        d["depth_t"] = grid_to(phys.fwd.depth);
        d["depth_tp1"] = grid_to(phys.bwd.depth);
        py::list masks;
        for (const auto& g : phys.fwd.masks) masks.append(grid_to(g));
        d["masks"] = masks;
        d["camera"] = motion_to(phys.fwd.cam);
        py::list objects;
        for (const auto& o : phys.fwd.objects) objects.append(motion_to(o));
        d["objects"] = objects;
        d["flow_u"] = grid_to(flow.u);
        d["flow_v"] = grid_to(flow.v);
        d["flow_w"] = grid_to(flow.w);
        d["trace"] = py::array_t<double>(static_cast<py::ssize_t>(res.trace.size()),
                                         res.trace.data());
        d["final_loss"] = res.final_loss;
        py::dict terms;
        for (const auto& t : res.terms) terms[py::str(t.name)] = t.value;
        d["terms"] = terms;
        return d;
      },
      py::arg("I_t"), py::arg("I_tp1"), py::arg("iterations") = 200, py::arg("k") = 3,
      py::arg("seed") = 0, py::arg("f") = 1.0, py::arg("cx") = 0.5, py::arg("cy") = 0.5,
      py::arg("step_size") = 0.02, py::arg("pyramid") = false, py::arg("weights") = py::none(),
      "Recover depth, camera motion, object motions and masks for a frame pair.");

  m.def(
      "scale_invariant_log_rmse",
      [](const Arr& d, const Arr& d_gt, const py::object& valid) {
        Grid dg = grid_from(d, "d"), gg = grid_from(d_gt, "d_gt");
        Mask m = mask_from(valid, "valid");
        if (m.size() == 0) m = Mask(dg.h, dg.w, 1);
        return metrics::scale_invariant_log_rmse(dg, gg, m);
      },
      py::arg("d"), py::arg("d_gt"), py::arg("valid") = py::none(),
      "Variance of the log depth ratio over valid pixels.");

  m.def(
      "endpoint_error",
      [](const Arr& u, const Arr& v, const Arr& u_gt, const Arr& v_gt, const py::object& valid) {
        return metrics::endpoint_error(grid_from(u, "u"), grid_from(v, "v"),
                                       grid_from(u_gt, "u_gt"), grid_from(v_gt, "v_gt"),
                                       mask_from(valid, "valid"));
      },
      py::arg("u"), py::arg("v"), py::arg("u_gt"), py::arg("v_gt"),
      py::arg("valid") = py::none(), "Mean flow endpoint error over valid pixels.");

  m.def(
      "mask_iou",
      [](const py::object& pred, const py::object& gt, double threshold) {
        return metrics::mask_iou(grids_from(pred, "pred"), grids_from(gt, "gt"), threshold);
      },
      py::arg("pred"), py::arg("gt"), py::arg("threshold") = 0.5,
      "Best IoU per ground-truth object over thresholded masks and their complements.");

  m.def(
      "relative_pose_error",
      [](const py::dict& pred, const py::dict& gt) {
        auto [trans_err, rot_err] =
            metrics::relative_pose_error(motion_from(pred), geom::to_pose(motion_from(gt)));
        return py::make_tuple(trans_err, rot_err);
      },
      py::arg("pred"), py::arg("gt"),
      "Translation norm and rotation angle between predicted and ground-truth motion.");
}
