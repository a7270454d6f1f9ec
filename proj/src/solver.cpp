#include "sfm/solver.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "sfm/warping.hpp"

namespace sfm::solve {

// ---------------------------------------------------------------------------
// Constraint ops

namespace {

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

double constrain_depth(double u) { return std::min(1.0 + softplus(u), 100.0); }

Grid constrain_depth_grid(const Grid& u) {
  Grid d = u;
  for (double& x : d.v) x = constrain_depth(x);
  return d;
}

Var constrain_depth_tape(Tape& t, Var u) {
  return t.min_const(t.add_const(t.softplus(u), 1.0), 100.0);
}

double constrain_sin(double v) { return std::tanh(v); }

Var constrain_sin_tape(Tape& t, Var v) { return t.tanh(v); }

Grid sharpen_mask(const Grid& logits, double multiplier) {
  Grid m = logits;
  for (double& x : m.v) {
    const double z = multiplier * x;
    x = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return m;
}

Var sharpen_mask_tape(Tape& t, Var logits, Var multiplier) {
  return t.sigmoid(t.mul(logits, multiplier));
}

// ---------------------------------------------------------------------------
// State

geom::RigidMotion to_motion(const RawMotion& raw) {
  geom::RigidMotion m;
  m.t = raw.t;
  m.pivot = raw.pivot;
  for (int i = 0; i < 3; ++i) m.sins[i] = constrain_sin(raw.rot[i]);
  return m;
}

void ProblemState::validate() const {
  require(K >= 0, "ProblemState: K must be nonnegative");
  require(u_t.same_shape(u_tp1), "ProblemState: depth grids must share one shape");
  require(static_cast<int>(logits_t.size()) == K && static_cast<int>(logits_tp1.size()) == K,
          "ProblemState: K mask logit grids per frame required");
  require(static_cast<int>(obj_fwd.size()) == K && static_cast<int>(obj_bwd.size()) == K,
          "ProblemState: K object motions per direction required");
  for (const Grid& g : logits_t) require(g.same_shape(u_t), "ProblemState: logit shape mismatch");
  for (const Grid& g : logits_tp1)
    require(g.same_shape(u_t), "ProblemState: logit shape mismatch");
}

void SolverConfig::validate() const {
  require(iterations >= 0, "SolverConfig: iterations must be nonnegative");
  require(step_size > 0.0, "SolverConfig: step size must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "SolverConfig: moment decay rates must lie in [0, 1)");
  require(K >= 0, "SolverConfig: K must be nonnegative");
  require(sharpen.base >= 1.0 && sharpen.rate >= 0.0 && sharpen.cap >= sharpen.base,
          "SolverConfig: sharpening multiplier must start at >= 1 and be nondecreasing");
  if (pyramid) require(pyramid_levels >= 1, "SolverConfig: pyramid needs at least one level");
  weights.validate();
}

ProblemState init_state(int h, int w, const SolverConfig& cfg) {
  cfg.validate();
  require(h > 0 && w > 0, "init_state: image size must be positive");
  ProblemState s;
  s.K = cfg.K;
  // softplus(u0) = 1 puts the constrained depth at exactly 2
  const double u0 = std::log(std::exp(1.0) - 1.0);
  s.u_t = Grid(h, w, u0);
  s.u_tp1 = Grid(h, w, u0);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> n(0.0, 0.01);
  for (int k = 0; k < cfg.K; ++k) {
    Grid a(h, w), b(h, w);
    for (double& x : a.v) x = n(rng);
    for (double& x : b.v) x = n(rng);
    s.logits_t.push_back(std::move(a));
    s.logits_tp1.push_back(std::move(b));
  }
  s.obj_fwd.resize(cfg.K);
  s.obj_bwd.resize(cfg.K);
  return s;
}

loss::PairStateValues physical_state(const ProblemState& s, double multiplier) {
  s.validate();
  loss::PairStateValues p;
  p.fwd.depth = constrain_depth_grid(s.u_t);
  p.bwd.depth = constrain_depth_grid(s.u_tp1);
  p.fwd.cam = to_motion(s.cam_fwd);
  p.bwd.cam = to_motion(s.cam_bwd);
  for (int k = 0; k < s.K; ++k) {
    p.fwd.objects.push_back(to_motion(s.obj_fwd[k]));
    p.bwd.objects.push_back(to_motion(s.obj_bwd[k]));
    p.fwd.masks.push_back(sharpen_mask(s.logits_t[k], multiplier));
    p.bwd.masks.push_back(sharpen_mask(s.logits_tp1[k], multiplier));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Adam on a static graph

MinimizeResult adam_minimize(const ad::LossBuilder& builder, const ad::ParamSet& init,
                             const AdamConfig& cfg, const StepHook& hook) {
  require(cfg.iterations >= 0, "adam_minimize: iterations must be nonnegative");
  require(cfg.step_size > 0.0, "adam_minimize: step size must be positive");

  Tape t;
  t.set_check_finite(true);
  std::map<std::string, Var> leaves;
  for (const auto& [name, g] : init.items()) leaves[name] = t.leaf(g, name);
  const Var loss = builder(t, leaves);
  require(t.value(loss).is_scalar(), "adam_minimize: loss must be scalar");

  MinimizeResult r;
  r.params = init;
  std::vector<double> x = r.params.to_flat();
  std::vector<double> m(x.size(), 0.0), v(x.size(), 0.0), g(x.size());
  double b1t = 1.0, b2t = 1.0;

  auto eval = [&](int step) {
    for (const auto& [name, grid] : r.params.items()) t.set_leaf(leaves.at(name), grid);
    if (hook) hook(t, step);
    try {
      t.forward();
    } catch (const ad::NonFiniteError& e) {
      throw SolveError(step, e.node_id, e.op_name,
                       "non-finite loss at iteration " + std::to_string(step) + " in " +
                           e.op_name);
    }
    return t.value_scalar(loss);
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    r.trace.push_back(eval(it));
    t.backward(loss);
    size_t off = 0;
    for (const auto& [name, grid] : r.params.items()) {
      const Grid& gg = t.grad(leaves.at(name));
      std::copy(gg.v.begin(), gg.v.end(), g.begin() + off);
      off += gg.size();
    }
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    for (size_t i = 0; i < x.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / (1.0 - b1t);
      const double vh = v[i] / (1.0 - b2t);
      x[i] -= cfg.step_size * mh / (std::sqrt(vh) + cfg.eps);
    }
    r.params.from_flat(x);
    if (!r.params.all_finite())
      throw SolveError(it, -1, "parameters",
                       "non-finite parameter after iteration " + std::to_string(it));
  }
  r.final_loss = eval(cfg.iterations);
  return r;
}

// ---------------------------------------------------------------------------
// Full problem optimization

namespace {

constexpr const char* kDirTag[2] = {"fwd", "bwd"};

std::string pname(int dir, const std::string& field) {
  return std::string(kDirTag[dir]) + "." + field;
}

// Pack the raw state into a flat parameter set. Pivots join only when they
// are free to move.
ad::ParamSet pack_state(const ProblemState& s, bool freeze_pivots) {
  ad::ParamSet p;
  auto vec_grid = [](const geom::Vec3& v) {
    Grid g(1, 3);
    g.v = {v.x, v.y, v.z};
    return g;
  };
  auto rot_grid = [](const std::array<double, 3>& r) {
    Grid g(1, 3);
    g.v = {r[0], r[1], r[2]};
    return g;
  };
  p.add(pname(0, "u"), s.u_t);
  p.add(pname(1, "u"), s.u_tp1);
  for (int dir = 0; dir < 2; ++dir) {
    const RawMotion& cam = dir == 0 ? s.cam_fwd : s.cam_bwd;
    p.add(pname(dir, "cam.rot"), rot_grid(cam.rot));
    p.add(pname(dir, "cam.t"), vec_grid(cam.t));
    if (!freeze_pivots) p.add(pname(dir, "cam.pivot"), vec_grid(cam.pivot));
    const auto& objs = dir == 0 ? s.obj_fwd : s.obj_bwd;
    const auto& logits = dir == 0 ? s.logits_t : s.logits_tp1;
    for (int k = 0; k < s.K; ++k) {
      const std::string ok = "obj" + std::to_string(k);
      p.add(pname(dir, ok + ".rot"), rot_grid(objs[k].rot));
      p.add(pname(dir, ok + ".t"), vec_grid(objs[k].t));
      if (!freeze_pivots) p.add(pname(dir, ok + ".pivot"), vec_grid(objs[k].pivot));
      p.add(pname(dir, ok + ".logits"), logits[k]);
    }
  }
  return p;
}

void unpack_state(const ad::ParamSet& p, bool freeze_pivots, ProblemState& s) {
  auto to_vec = [](const Grid& g) { return geom::Vec3{g.v[0], g.v[1], g.v[2]}; };
  auto to_rot = [](const Grid& g) { return std::array<double, 3>{g.v[0], g.v[1], g.v[2]}; };
  s.u_t = p.get(pname(0, "u"));
  s.u_tp1 = p.get(pname(1, "u"));
  for (int dir = 0; dir < 2; ++dir) {
    RawMotion& cam = dir == 0 ? s.cam_fwd : s.cam_bwd;
    cam.rot = to_rot(p.get(pname(dir, "cam.rot")));
    cam.t = to_vec(p.get(pname(dir, "cam.t")));
    if (!freeze_pivots) cam.pivot = to_vec(p.get(pname(dir, "cam.pivot")));
    auto& objs = dir == 0 ? s.obj_fwd : s.obj_bwd;
    auto& logits = dir == 0 ? s.logits_t : s.logits_tp1;
    for (int k = 0; k < s.K; ++k) {
      const std::string ok = "obj" + std::to_string(k);
      objs[k].rot = to_rot(p.get(pname(dir, ok + ".rot")));
      objs[k].t = to_vec(p.get(pname(dir, ok + ".t")));
      if (!freeze_pivots) objs[k].pivot = to_vec(p.get(pname(dir, ok + ".pivot")));
      logits[k] = p.get(pname(dir, ok + ".logits"));
    }
  }
}

// 2x2 average pooling with edge clamping for odd sizes.
Grid downsample(const Grid& g) {
  const int h2 = (g.h + 1) / 2, w2 = (g.w + 1) / 2;
  Grid out(h2, w2);
  for (int y = 0; y < h2; ++y)
    for (int x = 0; x < w2; ++x) {
      const int y0 = 2 * y, x0 = 2 * x;
      const int y1 = std::min(y0 + 1, g.h - 1), x1 = std::min(x0 + 1, g.w - 1);
      out.at(y, x) = 0.25 * (g.at(y0, x0) + g.at(y0, x1) + g.at(y1, x0) + g.at(y1, x1));
    }
  return out;
}

Image downsample(const Image& img) {
  Image out;
  for (const Grid& ch : img.ch) out.ch.push_back(downsample(ch));
  return out;
}

// Bilinear resize with clamp-to-edge sampling.
Grid resize_bilinear(const Grid& g, int h, int w) {
  Grid out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sx = (x + 0.5) * g.w / w - 0.5;
      double sy = (y + 0.5) * g.h / h - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(g.w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(g.h - 1));
      out.at(y, x) = warp::bilinear_sample(g, sx, sy);
    }
  return out;
}

Mask downsample_all(const Mask& m) {
  const int h2 = (m.h + 1) / 2, w2 = (m.w + 1) / 2;
  Mask out(h2, w2, 0);
  for (int y = 0; y < h2; ++y)
    for (int x = 0; x < w2; ++x) {
      const int y0 = 2 * y, x0 = 2 * x;
      const int y1 = std::min(y0 + 1, m.h - 1), x1 = std::min(x0 + 1, m.w - 1);
      out.at(y, x) =
          (m.at(y0, x0) && m.at(y0, x1) && m.at(y1, x0) && m.at(y1, x1)) ? 1 : 0;
    }
  return out;
}

Supervision downsample(const Supervision& sup) {
  Supervision out;
  auto down_depth = [](const loss::DepthSupervision& d) {
    return loss::DepthSupervision{downsample(d.d_gt), downsample_all(d.dmask)};
  };
  auto down_flow = [](const loss::FlowPair& f) {
    Grid u = downsample(f.u), v = downsample(f.v);
    for (double& x : u.v) x *= 0.5;  // pixel displacements shrink with the grid
    for (double& x : v.v) x *= 0.5;
    return loss::FlowPair{u, v};
  };
  if (sup.depth_fwd) out.depth_fwd = down_depth(*sup.depth_fwd);
  if (sup.depth_bwd) out.depth_bwd = down_depth(*sup.depth_bwd);
  out.pose_fwd = sup.pose_fwd;
  out.pose_bwd = sup.pose_bwd;
  if (sup.flow_fwd) out.flow_fwd = down_flow(*sup.flow_fwd);
  if (sup.flow_bwd) out.flow_bwd = down_flow(*sup.flow_bwd);
  return out;
}

void resize_state(ProblemState& s, int h, int w) {
  s.u_t = resize_bilinear(s.u_t, h, w);
  s.u_tp1 = resize_bilinear(s.u_tp1, h, w);
  for (Grid& g : s.logits_t) g = resize_bilinear(g, h, w);
  for (Grid& g : s.logits_tp1) g = resize_bilinear(g, h, w);
}

loss::Observations make_observations(const Image& I_t, const Image& I_tp1,
                                     const geom::Intrinsics& K_intr, const Supervision& sup,
                                     bool symmetric) {
  loss::Observations obs;
  obs.K = K_intr;
  obs.symmetric = symmetric;
  obs.fwd.src = I_t;
  obs.fwd.dst = I_tp1;
  obs.bwd.src = I_tp1;
  obs.bwd.dst = I_t;
  obs.fwd.depth_sup = sup.depth_fwd;
  obs.bwd.depth_sup = sup.depth_bwd;
  obs.fwd.pose_gt = sup.pose_fwd;
  obs.bwd.pose_gt = sup.pose_bwd;
  obs.fwd.flow_gt = sup.flow_fwd;
  obs.bwd.flow_gt = sup.flow_bwd;
  return obs;
}

// One optimization run at a fixed resolution; appends to the trace.
void run_level(const loss::Observations& obs, const SolverConfig& cfg, int iterations,
               ProblemState& state, std::vector<double>* trace, double* final_loss,
               std::vector<loss::TermReport>* terms) {
  ad::ParamSet params = pack_state(state, cfg.freeze_pivots);

  Var mult_leaf;
  std::vector<loss::TermReport> term_spans;
  auto builder = [&](Tape& t, const std::map<std::string, Var>& leaves) -> Var {
    mult_leaf = t.leaf_scalar(cfg.sharpen.multiplier(0), "sharpen_mult");
    auto pick = [&](Var row, int i) {
      Grid sel(1, 3);
      sel.v[i] = 1.0;
      return t.sum(t.mul(row, t.constant(sel)));
    };
    auto motion = [&](int dir, const std::string& field, const RawMotion& raw) {
      geom::VarMotion m;
      Var rot = leaves.at(pname(dir, field + ".rot"));
      Var tr = leaves.at(pname(dir, field + ".t"));
      for (int i = 0; i < 3; ++i) m.sins[i] = constrain_sin_tape(t, pick(rot, i));
      m.t = {pick(tr, 0), pick(tr, 1), pick(tr, 2)};
      if (cfg.freeze_pivots) {
        m.pivot = {t.constant_scalar(raw.pivot.x), t.constant_scalar(raw.pivot.y),
                   t.constant_scalar(raw.pivot.z)};
      } else {
        Var pv = leaves.at(pname(dir, field + ".pivot"));
        m.pivot = {pick(pv, 0), pick(pv, 1), pick(pv, 2)};
      }
      return m;
    };
    auto dir_state = [&](int dir) {
      loss::DirectionState ds;
      ds.depth = constrain_depth_tape(t, leaves.at(pname(dir, "u")));
      ds.depth_other = constrain_depth_tape(t, leaves.at(pname(1 - dir, "u")));
      ds.cam = motion(dir, "cam", dir == 0 ? state.cam_fwd : state.cam_bwd);
      const auto& objs = dir == 0 ? state.obj_fwd : state.obj_bwd;
      for (int k = 0; k < state.K; ++k) {
        const std::string ok = "obj" + std::to_string(k);
        ds.objects.push_back(motion(dir, ok, objs[k]));
        ds.masks.push_back(
            sharpen_mask_tape(t, leaves.at(pname(dir, ok + ".logits")), mult_leaf));
      }
      return ds;
    };
    loss::DirectionState fwd = dir_state(0);
    loss::DirectionState bwd = dir_state(1);
    return loss::total_loss_tape(t, fwd, bwd, obs, cfg.weights, &term_spans);
  };

  auto hook = [&](Tape& t, int step) {
    t.set_leaf_scalar(mult_leaf, cfg.sharpen.multiplier(step));
  };

  AdamConfig acfg;
  acfg.iterations = iterations;
  acfg.step_size = cfg.step_size;
  acfg.beta1 = cfg.beta1;
  acfg.beta2 = cfg.beta2;
  acfg.eps = cfg.adam_eps;

  MinimizeResult r;
  try {
    r = adam_minimize(builder, params, acfg, hook);
  } catch (SolveError& e) {
    // attribute the failing node to its objective term
    for (const auto& tr : term_spans)
      if (e.node_id >= tr.node_first && e.node_id <= tr.node_last) {
        throw SolveError(e.iteration, e.node_id, tr.name,
                         std::string(e.what()) + " (term " + tr.name + ")");
      }
    throw;
  }

  unpack_state(r.params, cfg.freeze_pivots, state);
  if (trace) trace->insert(trace->end(), r.trace.begin(), r.trace.end());
  if (final_loss) *final_loss = r.final_loss;
  if (terms) {
    // re-evaluate once at the final parameters to fill per-term values; the
    // tape adam_minimize used is gone, so rebuild (builder resets term_spans)
    ad::ParamSet fin = pack_state(state, cfg.freeze_pivots);
    Tape t;
    std::map<std::string, Var> leaves;
    for (const auto& [name, g] : fin.items()) leaves[name] = t.leaf(g, name);
    term_spans.clear();
    builder(t, leaves);
    t.set_leaf_scalar(mult_leaf, cfg.sharpen.multiplier(iterations));
    t.forward();
    *terms = term_spans;
    for (auto& tr : *terms) tr.value = t.value_scalar(tr.node);
  }
}

}  // namespace

SolveResult optimize(const Image& I_t, const Image& I_tp1, const geom::Intrinsics& K_intr,
                     const ProblemState& init, const SolverConfig& cfg, const Supervision& sup) {
  cfg.validate();
  init.validate();
  require(I_t.channels() == I_tp1.channels() && I_t.height() == I_tp1.height() &&
              I_t.width() == I_tp1.width(),
          "optimize: frame shapes must match");
  require(I_t.height() == init.u_t.h && I_t.width() == init.u_t.w,
          "optimize: state resolution must match the frames");
  require(init.K == cfg.K, "optimize: state K must match config K");

  SolveResult out;
  out.state = init;

  if (!cfg.pyramid) {
    loss::Observations obs = make_observations(I_t, I_tp1, K_intr, sup, cfg.symmetric);
    run_level(obs, cfg, cfg.iterations, out.state, &out.trace, &out.final_loss, &out.terms);
    return out;
  }

  // Coarse-to-fine: halve the images per level, split the iteration budget
  // evenly, carry the state up by bilinear resize.
  std::vector<Image> pyr_t{I_t}, pyr_tp1{I_tp1};
  std::vector<Supervision> pyr_sup{sup};
  int levels = 1;
  while (levels < cfg.pyramid_levels && pyr_t.back().height() >= 16 &&
         pyr_t.back().width() >= 16) {
    pyr_t.push_back(downsample(pyr_t.back()));
    pyr_tp1.push_back(downsample(pyr_tp1.back()));
    pyr_sup.push_back(downsample(pyr_sup.back()));
    ++levels;
  }

  const int per_level = cfg.iterations / levels;
  ProblemState state = out.state;
  resize_state(state, pyr_t.back().height(), pyr_t.back().width());
  for (int l = levels - 1; l >= 0; --l) {
    const bool finest = l == 0;
    const int iters = finest ? cfg.iterations - per_level * (levels - 1) : per_level;
    loss::Observations obs =
        make_observations(pyr_t[l], pyr_tp1[l], K_intr, pyr_sup[l], cfg.symmetric);
    run_level(obs, cfg, iters, state, &out.trace, &out.final_loss,
              finest ? &out.terms : nullptr);
    if (!finest) resize_state(state, pyr_t[l - 1].height(), pyr_t[l - 1].width());
  }
  out.state = state;
  return out;
}

}  // namespace sfm::solve
