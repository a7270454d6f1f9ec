#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "sfm/geometry.hpp"
#include "sfm/io.hpp"
#include "sfm/losses.hpp"
#include "sfm/metrics.hpp"
#include "sfm/solver.hpp"
#include "sfm/synth.hpp"

namespace sfm::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Invalid run configuration (bad flags, missing inputs, malformed config).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Worker pool.

void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(thread_budget(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// JSON <-> domain types.

json vec3_to_json(const geom::Vec3& v) { return json::array({v.x, v.y, v.z}); }

geom::Vec3 vec3_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3)
    throw ConfigError(std::string(what) + " must be an array of 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json motion_to_json(const geom::RigidMotion& m) {
  return {{"t", vec3_to_json(m.t)},
          {"pivot", vec3_to_json(m.pivot)},
          {"sins", json::array({m.sins[0], m.sins[1], m.sins[2]})}};
}

geom::RigidMotion motion_from_json(const json& j) {
  geom::RigidMotion m;
  m.t = vec3_from_json(j.at("t"), "t");
  m.pivot = vec3_from_json(j.at("pivot"), "pivot");
  json s = j.at("sins");
  if (!s.is_array() || s.size() != 3) throw ConfigError("sins must be an array of 3 numbers");
  m.sins = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
  return m;
}

json intrinsics_to_json(const geom::Intrinsics& K) {
  return {{"f", K.f}, {"cx", K.cx}, {"cy", K.cy}};
}

geom::Pose inverse_pose(const geom::Pose& p) {
  geom::Mat3 Rt = p.R.transposed();
  return {Rt, Rt.apply(p.t) * -1.0};
}

json load_json(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("no such file: " + path);
  return json::parse(io::read_text(path));
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
}

// ---------------------------------------------------------------------------
// Run configuration: JSON file overlaid by command-line flags.

const std::map<std::string, double loss::LossWeights::*>& weight_fields() {
  static const std::map<std::string, double loss::LossWeights::*> fields = {
      {"color", &loss::LossWeights::color},
      {"flow_smooth", &loss::LossWeights::flow_smooth},
      {"mask_smooth", &loss::LossWeights::mask_smooth},
      {"depth_smooth", &loss::LossWeights::depth_smooth},
      {"fb", &loss::LossWeights::fb},
      {"depth_sup", &loss::LossWeights::depth_sup},
      {"pose_trans", &loss::LossWeights::pose_trans},
      {"pose_rot", &loss::LossWeights::pose_rot},
      {"flow_sup", &loss::LossWeights::flow_sup}};
  return fields;
}

struct RunConfig {
  std::string frame0, frame1, scene;
  std::string out;
  geom::Intrinsics K;            // normalized; defaults (f, cx, cy) = (1, 0.5, 0.5)
  bool explicit_intrinsics = false;
  double focal_px = 0.0;         // converts to K.f / image width when set
  std::string gt_depth, gt_pose, gt_flow;
  double depth_scale = 1e-3;     // for 16-bit png depth inputs
  solve::SolverConfig solver;
  std::set<std::string> weights_set;  // explicitly configured weight names
};

void apply_weight(RunConfig& rc, const std::string& key, double value) {
  auto it = weight_fields().find(key);
  if (it == weight_fields().end()) throw ConfigError("unknown loss weight \"" + key + "\"");
  rc.solver.weights.*(it->second) = value;
  rc.weights_set.insert(key);
}

void parse_intrinsics(RunConfig& rc, const std::string& s) {
  double f, cx, cy;
  char c1, c2;
  std::istringstream in(s);
  if (!(in >> f >> c1 >> cx >> c2 >> cy) || c1 != ',' || c2 != ',' || !(in >> std::ws).eof())
    throw ConfigError("--intrinsics expects f,cx,cy");
  rc.K = {f, cx, cy};
  rc.explicit_intrinsics = true;
}

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  json j = load_json(path);
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  check_keys(j,
             {"frame0", "frame1", "scene", "out", "seed", "iterations", "step_size", "k",
              "pyramid", "pyramid_levels", "weights", "intrinsics", "focal_px", "gt_depth",
              "depth_scale", "gt_pose", "gt_flow", "sharpen", "symmetric", "freeze_pivots"},
             path);
  try {
    rc.frame0 = j.value("frame0", "");
    rc.frame1 = j.value("frame1", "");
    rc.scene = j.value("scene", "");
    rc.out = j.value("out", "");
    rc.solver.seed = j.value("seed", std::uint64_t{0});
    rc.solver.iterations = j.value("iterations", rc.solver.iterations);
    rc.solver.step_size = j.value("step_size", rc.solver.step_size);
    rc.solver.K = j.value("k", rc.solver.K);
    rc.solver.pyramid = j.value("pyramid", rc.solver.pyramid);
    rc.solver.pyramid_levels = j.value("pyramid_levels", rc.solver.pyramid_levels);
    rc.solver.symmetric = j.value("symmetric", rc.solver.symmetric);
    rc.solver.freeze_pivots = j.value("freeze_pivots", rc.solver.freeze_pivots);
    if (j.contains("weights")) {
      if (!j["weights"].is_object()) throw ConfigError(path + ": weights must be an object");
      for (auto it = j["weights"].begin(); it != j["weights"].end(); ++it)
        apply_weight(rc, it.key(), it.value().get<double>());
    }
    if (j.contains("intrinsics")) {
      const json& ji = j["intrinsics"];
      check_keys(ji, {"f", "cx", "cy"}, path + ": intrinsics");
      rc.K.f = ji.value("f", rc.K.f);
      rc.K.cx = ji.value("cx", rc.K.cx);
      rc.K.cy = ji.value("cy", rc.K.cy);
      rc.explicit_intrinsics = true;
    }
    rc.focal_px = j.value("focal_px", 0.0);
    rc.gt_depth = j.value("gt_depth", "");
    rc.depth_scale = j.value("depth_scale", rc.depth_scale);
    rc.gt_pose = j.value("gt_pose", "");
    rc.gt_flow = j.value("gt_flow", "");
    if (j.contains("sharpen")) {
      const json& js = j["sharpen"];
      check_keys(js, {"base", "rate", "cap"}, path + ": sharpen");
      rc.solver.sharpen.base = js.value("base", rc.solver.sharpen.base);
      rc.solver.sharpen.rate = js.value("rate", rc.solver.sharpen.rate);
      rc.solver.sharpen.cap = js.value("cap", rc.solver.sharpen.cap);
    }
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return rc;
}

// A supervised weight that was configured on but has no ground truth to
// consume is a config error rather than a silent no-op.
void check_supervision_weights(const RunConfig& rc) {
  auto configured_on = [&](const char* key, double value) {
    return rc.weights_set.count(key) && value > 0.0;
  };
  const loss::LossWeights& w = rc.solver.weights;
  if (configured_on("depth_sup", w.depth_sup) && rc.gt_depth.empty())
    throw ConfigError("weight depth_sup set but no --gt-depth given");
  if ((configured_on("pose_trans", w.pose_trans) || configured_on("pose_rot", w.pose_rot)) &&
      rc.gt_pose.empty())
    throw ConfigError("weight pose_trans/pose_rot set but no --gt-pose given");
  if (configured_on("flow_sup", w.flow_sup) && rc.gt_flow.empty())
    throw ConfigError("weight flow_sup set but no --gt-flow given");
}

// ---------------------------------------------------------------------------
// Artifact plumbing shared by solve and synth.

Image grid_to_gray(const Grid& g) {
  Image img(g.h, g.w, 1);
  img.ch[0] = g;
  return img;
}

void write_flow_artifacts(const fs::path& dir, const Grid& u, const Grid& v) {
  io::write_flo((dir / "flow.flo").string(), u, v);
  io::write_image((dir / "flow.png").string(), io::flow_to_color(u, v));
}

void write_scene_dir(const fs::path& dir, const synth::SceneGroundTruth& gt) {
  fs::create_directories(dir);
  io::write_image((dir / "frame0.png").string(), gt.I_t);
  io::write_image((dir / "frame1.png").string(), gt.I_tp1);
  io::write_pfm((dir / "depth_t.pfm").string(), gt.d_t);
  io::write_pfm((dir / "depth_tp1.pfm").string(), gt.d_tp1);
  write_flow_artifacts(dir, gt.flow.u, gt.flow.v);
  for (size_t k = 0; k < gt.masks.size(); ++k)
    io::write_image((dir / ("mask_" + std::to_string(k) + ".png")).string(),
                    grid_to_gray(gt.masks[k]));
  io::write_image((dir / "occlusion.png").string(), grid_to_gray(gt.occluded.to_grid()));
  json g = {{"name", gt.name},
            {"intrinsics", intrinsics_to_json(gt.K)},
            {"camera", motion_to_json(gt.camera)},
            {"objects", json::array()}};
  for (const auto& m : gt.objects) g["objects"].push_back(motion_to_json(m));
  io::write_text((dir / "gt.json").string(), g.dump(2) + "\n");
}

void require_exists(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " not set");
  if (!fs::exists(path)) throw ConfigError(std::string(what) + ": no such file: " + path);
}

// ---------------------------------------------------------------------------
// solve

int cmd_solve(const RunConfig& rc_in) {
  RunConfig rc = rc_in;
  if (rc.out.empty()) throw ConfigError("solve needs --out DIR");
  if (!rc.scene.empty() && (!rc.frame0.empty() || !rc.frame1.empty()))
    throw ConfigError("give either --scene or --frame0/--frame1, not both");

  Image I_t, I_tp1;
  if (!rc.scene.empty()) {
    synth::SceneGroundTruth gt = synth::generate_scene(synth::scene_by_name(rc.scene));
    I_t = gt.I_t;
    I_tp1 = gt.I_tp1;
    if (!rc.explicit_intrinsics) rc.K = gt.K;
  } else {
    require_exists(rc.frame0, "--frame0");
    require_exists(rc.frame1, "--frame1");
    I_t = io::read_image(rc.frame0);
    I_tp1 = io::read_image(rc.frame1);
  }
  int h = I_t.height(), w = I_t.width();
  if (h != I_tp1.height() || w != I_tp1.width() || I_t.channels() != I_tp1.channels())
    throw ConfigError("frame shapes differ");
  if (rc.focal_px > 0.0) rc.K.f = rc.focal_px / w;
  check_supervision_weights(rc);

  solve::Supervision sup;
  if (!rc.gt_depth.empty()) {
    require_exists(rc.gt_depth, "--gt-depth");
    Mask dmask;
    Grid d = io::read_depth(rc.gt_depth, rc.depth_scale, &dmask);
    if (d.h != h || d.w != w) throw ConfigError("--gt-depth shape differs from frames");
    sup.depth_fwd = loss::DepthSupervision{d, dmask};
  }
  if (!rc.gt_pose.empty()) {
    require_exists(rc.gt_pose, "--gt-pose");
    json j = load_json(rc.gt_pose);
    geom::Pose fwd = geom::to_pose(motion_from_json(j.at("camera")));
    sup.pose_fwd = fwd;
    sup.pose_bwd = inverse_pose(fwd);
  }
  if (!rc.gt_flow.empty()) {
    require_exists(rc.gt_flow, "--gt-flow");
    auto [u, v] = io::read_flo(rc.gt_flow);
    if (u.h != h || u.w != w) throw ConfigError("--gt-flow shape differs from frames");
    sup.flow_fwd = loss::FlowPair{std::move(u), std::move(v)};
  }

  rc.solver.validate();
  solve::ProblemState init = solve::init_state(h, w, rc.solver);
  solve::SolveResult result = solve::optimize(I_t, I_tp1, rc.K, init, rc.solver, sup);

  fs::path dir(rc.out);
  fs::create_directories(dir);
  double mult = rc.solver.sharpen.multiplier(rc.solver.iterations);
  loss::PairStateValues phys = solve::physical_state(result.state, mult);
  geom::FlowField flow =
      geom::compute_flow(phys.fwd.depth, rc.K, phys.fwd.cam, phys.fwd.objects, phys.fwd.masks);

  io::write_pfm((dir / "depth_t.pfm").string(), phys.fwd.depth);
  io::write_pfm((dir / "depth_tp1.pfm").string(), phys.bwd.depth);
  write_flow_artifacts(dir, flow.u, flow.v);
  for (size_t k = 0; k < phys.fwd.masks.size(); ++k)
    io::write_image((dir / ("mask_" + std::to_string(k) + ".png")).string(),
                    grid_to_gray(phys.fwd.masks[k]));

  json m = {{"intrinsics", intrinsics_to_json(rc.K)},
            {"camera", motion_to_json(phys.fwd.cam)},
            {"objects", json::array()},
            {"camera_bwd", motion_to_json(phys.bwd.cam)},
            {"objects_bwd", json::array()},
            {"final_loss", result.final_loss},
            {"terms", json::object()}};
  for (const auto& o : phys.fwd.objects) m["objects"].push_back(motion_to_json(o));
  for (const auto& o : phys.bwd.objects) m["objects_bwd"].push_back(motion_to_json(o));
  for (const auto& t : result.terms) m["terms"][t.name] = t.value;
  io::write_text((dir / "motion.json").string(), m.dump(2) + "\n");
  io::write_trace_csv((dir / "trace.csv").string(), result.trace);

  std::cout << "solve: " << rc.solver.iterations << " iterations, final loss "
            << result.final_loss << ", artifacts in " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const std::string& out, const std::string& scene, std::uint64_t seed) {
  if (out.empty()) throw ConfigError("synth needs --out DIR");
  std::vector<synth::SceneSpec> specs;
  if (scene.empty())
    specs = synth::standard_suite();
  else
    specs.push_back(synth::scene_by_name(scene));
  fs::create_directories(out);
  std::vector<std::string> names(specs.size());
  parallel_for(static_cast<int>(specs.size()), [&](int i) {
    synth::SceneGroundTruth gt = synth::generate_scene(specs[i], seed);
    write_scene_dir(fs::path(out) / gt.name, gt);
    names[i] = gt.name;
  });
  for (const auto& n : names) std::cout << "synth: " << (fs::path(out) / n).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

Mask grid_above(const Grid& g, double threshold) {
  Mask m(g.h, g.w, 0);
  for (size_t i = 0; i < g.size(); ++i) m.v[i] = g.v[i] > threshold ? 1 : 0;
  return m;
}

std::vector<Grid> read_mask_stack(const fs::path& dir) {
  std::vector<Grid> masks;
  for (int k = 0;; ++k) {
    fs::path p = dir / ("mask_" + std::to_string(k) + ".png");
    if (!fs::exists(p)) break;
    masks.push_back(io::read_image(p.string()).ch[0]);
  }
  return masks;
}

int cmd_eval(const std::string& pred, const std::string& gt, const std::string& out_in) {
  if (pred.empty() || gt.empty()) throw ConfigError("eval needs --pred DIR and --gt DIR");
  if (!fs::is_directory(pred)) throw ConfigError("--pred: no such directory: " + pred);
  if (!fs::is_directory(gt)) throw ConfigError("--gt: no such directory: " + gt);
  fs::path pd(pred), gd(gt);
  fs::path od(out_in.empty() ? pred : out_in);

  metrics::EvalReport rep;

  if (fs::exists(pd / "depth_t.pfm") && fs::exists(gd / "depth_t.pfm")) {
    Grid d = io::read_pfm((pd / "depth_t.pfm").string());
    Grid d_gt = io::read_pfm((gd / "depth_t.pfm").string());
    if (!d.same_shape(d_gt)) throw ConfigError("depth_t.pfm shapes differ");
    rep.set("depth_silog", metrics::scale_invariant_log_rmse(d, d_gt, grid_above(d_gt, 0.0)));
  }

  if (fs::exists(pd / "flow.flo") && fs::exists(gd / "flow.flo")) {
    auto [u, v] = io::read_flo((pd / "flow.flo").string());
    auto [u_gt, v_gt] = io::read_flo((gd / "flow.flo").string());
    if (!u.same_shape(u_gt)) throw ConfigError("flow.flo shapes differ");
    Mask valid;  // empty = all pixels
    if (fs::exists(gd / "occlusion.png")) {
      Grid occ = io::read_image((gd / "occlusion.png").string()).ch[0];
      if (!occ.same_shape(u)) throw ConfigError("occlusion.png shape differs from flow");
      valid = Mask(occ.h, occ.w, 0);
      for (size_t i = 0; i < occ.size(); ++i) valid.v[i] = occ.v[i] < 0.5 ? 1 : 0;
    }
    rep.set("flow_epe", metrics::endpoint_error(u, v, u_gt, v_gt, valid));
  }

  std::vector<Grid> pred_masks = read_mask_stack(pd);
  std::vector<Grid> gt_masks = read_mask_stack(gd);
  if (!pred_masks.empty() && !gt_masks.empty())
    rep.set("mask_iou", metrics::mask_iou(pred_masks, gt_masks, 0.5));

  auto first_motion_file = [](const fs::path& dir) -> std::string {
    for (const char* name : {"motion.json", "gt.json"})
      if (fs::exists(dir / name)) return (dir / name).string();
    return "";
  };
  std::string pred_motion = first_motion_file(pd);
  std::string gt_motion = first_motion_file(gd);
  if (!pred_motion.empty() && !gt_motion.empty()) {
    geom::RigidMotion mp = motion_from_json(load_json(pred_motion).at("camera"));
    geom::Pose gp = geom::to_pose(motion_from_json(load_json(gt_motion).at("camera")));
    auto [trans_err, rot_err] = metrics::relative_pose_error(mp, gp);
    rep.set("pose_trans_err", trans_err);
    rep.set("pose_rot_err", rot_err);
  }

  if (rep.values.empty())
    throw ConfigError("nothing to evaluate: no artifact pair found in " + pred + " and " + gt);

  fs::create_directories(od);
  io::write_text((od / "report.txt").string(), rep.to_text());
  json jr = json::object();
  for (const auto& [k, v] : rep.values) jr[k] = v;
  io::write_text((od / "report.json").string(), jr.dump(2) + "\n");
  std::cout << rep.to_text();
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(int trials, int size, int K, std::uint64_t seed) {
  if (trials < 1 || size < 4 || K < 0) throw ConfigError("gradcheck needs trials>=1, size>=4, k>=0");
  std::vector<ad::GradCheckResult> results = gradcheck_suite(trials, size, K, seed);
  double worst = 0.0;
  size_t checked = 0, skipped = 0;
  for (int i = 0; i < trials; ++i) {
    const auto& r = results[i];
    std::cout << "trial " << i << ": max_rel_err " << r.max_rel_err << " at " << r.worst_param
              << "[" << r.worst_index << "] (checked " << r.checked << ", skipped " << r.skipped
              << ")\n";
    worst = std::max(worst, r.max_rel_err);
    checked += r.checked;
    skipped += r.skipped;
  }
  bool ok = worst < 1e-3;
  std::cout << "gradcheck: " << trials << " trials, " << checked << " coordinates, worst "
            << worst << " -> " << (ok ? "ok" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

// ---------------------------------------------------------------------------

int thread_budget() {
  unsigned hw = std::thread::hardware_concurrency();
  int n = hw == 0 ? 1 : static_cast<int>(hw);
  if (const char* env = std::getenv("SFM_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<int>(std::min(v, 256L));
  }
  return std::max(1, n);
}

ad::GradCheckResult gradcheck_trial(std::uint64_t seed, int h, int w, int K) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Smooth multi-wave images so the photometric term has usable gradients.
  auto smooth_image = [&](int channels) {
    Image img(h, w, channels);
    for (int c = 0; c < channels; ++c) {
      double ax = 2.0 * 3.14159265358979323846 * (0.5 + unit(rng)) / w;
      double ay = 2.0 * 3.14159265358979323846 * (0.5 + unit(rng)) / h;
      double px = unit(rng) * 6.28, py = unit(rng) * 6.28;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          img.ch[c].at(y, x) =
              0.5 + 0.25 * std::sin(ax * x + px) + 0.2 * std::sin(ay * y + py);
    }
    return img;
  };
  auto random_grid = [&](double lo, double hi) {
    Grid g(h, w);
    for (double& x : g.v) x = lo + (hi - lo) * unit(rng);
    return g;
  };
  auto random_row3 = [&](double mag) {
    Grid g(1, 3);
    for (double& x : g.v) x = mag * (2.0 * unit(rng) - 1.0);
    return g;
  };
  auto random_motion = [&](double mag) {
    geom::RigidMotion m;
    m.t = {mag * (2.0 * unit(rng) - 1.0), mag * (2.0 * unit(rng) - 1.0),
           mag * (2.0 * unit(rng) - 1.0)};
    m.sins = {0.5 * mag * (2.0 * unit(rng) - 1.0), 0.5 * mag * (2.0 * unit(rng) - 1.0),
              0.5 * mag * (2.0 * unit(rng) - 1.0)};
    return m;
  };

  loss::Observations obs;
  obs.fwd.src = smooth_image(2);
  obs.fwd.dst = smooth_image(2);
  obs.bwd.src = obs.fwd.dst;
  obs.bwd.dst = obs.fwd.src;
  obs.symmetric = true;
  for (loss::DirectionObs* d : {&obs.fwd, &obs.bwd}) {
    d->depth_sup = loss::DepthSupervision{random_grid(1.6, 2.4), Mask(h, w, 1)};
    d->pose_gt = geom::to_pose(random_motion(0.08));
    d->flow_gt = loss::FlowPair{random_grid(-0.4, 0.4), random_grid(-0.4, 0.4)};
  }

  ad::ParamSet p;
  for (const char* d : {"fwd", "bwd"}) {
    std::string sd(d);
    p.add(sd + ".u", random_grid(0.4, 0.8));  // depth pre-activations, d ~ 1.9..2.2
    p.add(sd + ".cam.rot", random_row3(0.06));
    p.add(sd + ".cam.t", random_row3(0.08));
    for (int k = 0; k < K; ++k) {
      std::string ok = sd + ".obj" + std::to_string(k);
      p.add(ok + ".rot", random_row3(0.06));
      p.add(ok + ".t", random_row3(0.08));
      p.add(ok + ".logits", random_grid(-1.0, 1.0));
    }
  }

  loss::LossWeights weights;  // every term on
  ad::LossBuilder builder = [obs, K, weights, h, w](ad::Tape& t,
                                                    const std::map<std::string, ad::Var>& leaves) {
    auto pick = [&](const std::string& name, int i) {
      Grid sel(1, 3);
      sel.v[i] = 1.0;
      return t.sum(t.mul(leaves.at(name), t.constant(sel)));
    };
    auto zero3 = [&] {
      return geom::VarVec3{t.constant_scalar(0.0), t.constant_scalar(0.0),
                           t.constant_scalar(0.0)};
    };
    auto var_motion = [&](const std::string& base) {
      geom::VarMotion m;
      m.t = {pick(base + ".t", 0), pick(base + ".t", 1), pick(base + ".t", 2)};
      m.pivot = zero3();
      m.sins = {solve::constrain_sin_tape(t, pick(base + ".rot", 0)),
                solve::constrain_sin_tape(t, pick(base + ".rot", 1)),
                solve::constrain_sin_tape(t, pick(base + ".rot", 2))};
      return m;
    };
    ad::Var mult = t.constant_scalar(2.0);
    auto dir_state = [&](const std::string& sd, const std::string& other) {
      loss::DirectionState s;
      s.depth = solve::constrain_depth_tape(t, leaves.at(sd + ".u"));
      s.depth_other = solve::constrain_depth_tape(t, leaves.at(other + ".u"));
      s.cam = var_motion(sd + ".cam");
      for (int k = 0; k < K; ++k) {
        std::string ok = sd + ".obj" + std::to_string(k);
        s.objects.push_back(var_motion(ok));
        s.masks.push_back(solve::sharpen_mask_tape(t, leaves.at(ok + ".logits"), mult));
      }
      return s;
    };
    loss::DirectionState fwd = dir_state("fwd", "bwd");
    loss::DirectionState bwd = dir_state("bwd", "fwd");
    return loss::total_loss_tape(t, fwd, bwd, obs, weights, nullptr);
  };

  return ad::grad_check(builder, p, 1e-4);
}

std::vector<ad::GradCheckResult> gradcheck_suite(int trials, int size, int K,
                                                 std::uint64_t seed) {
  std::vector<ad::GradCheckResult> results(trials);
  parallel_for(trials, [&](int i) {
    results[i] = gradcheck_trial(seed + static_cast<std::uint64_t>(i), size, size, K);
  });
  return results;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("sfm");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Differentiable structure-and-motion toolkit"};
  app.require_subcommand(1);

  // solve
  auto* solve_cmd = app.add_subcommand("solve", "Recover depth, motion and masks for a frame pair");
  std::string s_config, s_out, s_frame0, s_frame1, s_scene, s_intr, s_pyramid;
  std::string s_gt_depth, s_gt_pose, s_gt_flow;
  std::uint64_t s_seed = 0;
  int s_iters = 0, s_k = 0;
  double s_focal_px = 0.0, s_depth_scale = 0.0;
  std::vector<std::string> s_weights;
  solve_cmd->add_option("--config", s_config, "JSON run config; flags override it");
  solve_cmd->add_option("--out", s_out, "output directory for artifacts");
  solve_cmd->add_option("--frame0", s_frame0, "image at time t (png/ppm)");
  solve_cmd->add_option("--frame1", s_frame1, "image at time t+1");
  solve_cmd->add_option("--scene", s_scene, "use a named synthetic scene as input");
  solve_cmd->add_option("--seed", s_seed, "rng seed for mask initialization");
  solve_cmd->add_option("--iters", s_iters, "optimization iterations");
  solve_cmd->add_option("--k", s_k, "number of rigid object motions");
  solve_cmd->add_option("--weights", s_weights, "loss weights as key=value")->expected(-1);
  auto* intr_opt =
      solve_cmd->add_option("--intrinsics", s_intr, "normalized intrinsics f,cx,cy");
  solve_cmd->add_option("--focal-px", s_focal_px, "focal length in pixels (converted by width)")
      ->excludes(intr_opt);
  solve_cmd->add_option("--gt-depth", s_gt_depth, "depth supervision (pfm or 16-bit png)");
  solve_cmd->add_option("--depth-scale", s_depth_scale, "scale for 16-bit png depth");
  solve_cmd->add_option("--gt-pose", s_gt_pose, "camera motion supervision (json)");
  solve_cmd->add_option("--gt-flow", s_gt_flow, "flow supervision (.flo)");
  solve_cmd->add_option("--pyramid", s_pyramid, "coarse-to-fine schedule")
      ->check(CLI::IsMember({"on", "off"}));

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Materialize the synthetic scene suite");
  std::string y_out, y_scene;
  std::uint64_t y_seed = 0;
  synth_cmd->add_option("--out", y_out, "output directory");
  synth_cmd->add_option("--scene", y_scene, "only this scene (default: whole suite)");
  synth_cmd->add_option("--seed", y_seed, "texture seed offset");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Compare predicted artifacts against ground truth");
  std::string e_pred, e_gt, e_out;
  eval_cmd->add_option("--pred", e_pred, "directory with predicted artifacts");
  eval_cmd->add_option("--gt", e_gt, "directory with ground-truth artifacts");
  eval_cmd->add_option("--out", e_out, "report directory (default: --pred)");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the objective");
  int g_trials = 5, g_size = 8, g_k = 2;
  std::uint64_t g_seed = 0;
  grad_cmd->add_option("--trials", g_trials, "number of random problems");
  grad_cmd->add_option("--size", g_size, "problem side length in pixels");
  grad_cmd->add_option("--k", g_k, "object motions per problem");
  grad_cmd->add_option("--seed", g_seed, "base rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(solve_cmd)) {
      RunConfig rc;
      if (!s_config.empty()) rc = load_run_config(s_config);
      if (solve_cmd->count("--out")) rc.out = s_out;
      if (solve_cmd->count("--frame0")) rc.frame0 = s_frame0;
      if (solve_cmd->count("--frame1")) rc.frame1 = s_frame1;
      if (solve_cmd->count("--scene")) rc.scene = s_scene;
      if (solve_cmd->count("--seed")) rc.solver.seed = s_seed;
      if (solve_cmd->count("--iters")) rc.solver.iterations = s_iters;
      if (solve_cmd->count("--k")) rc.solver.K = s_k;
      for (const auto& kv : s_weights) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--weights expects key=value, got " + kv);
        try {
          apply_weight(rc, kv.substr(0, eq), std::stod(kv.substr(eq + 1)));
        } catch (const std::logic_error&) {
          throw ConfigError("--weights: bad value in " + kv);
        }
      }
      if (solve_cmd->count("--intrinsics")) parse_intrinsics(rc, s_intr);
      if (solve_cmd->count("--focal-px")) rc.focal_px = s_focal_px;
      if (solve_cmd->count("--depth-scale")) rc.depth_scale = s_depth_scale;
      if (solve_cmd->count("--gt-depth")) rc.gt_depth = s_gt_depth;
      if (solve_cmd->count("--gt-pose")) rc.gt_pose = s_gt_pose;
      if (solve_cmd->count("--gt-flow")) rc.gt_flow = s_gt_flow;
      if (solve_cmd->count("--pyramid")) rc.solver.pyramid = s_pyramid == "on";
      return cmd_solve(rc);
    }
    if (app.got_subcommand(synth_cmd)) return cmd_synth(y_out, y_scene, y_seed);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(e_pred, e_gt, e_out);
    if (app.got_subcommand(grad_cmd)) return cmd_gradcheck(g_trials, g_size, g_k, g_seed);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const io::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sfm::cli
