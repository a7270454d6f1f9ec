#include "sfm/synth.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "sfm/warping.hpp"

namespace sfm::synth {

namespace {

struct Wave {
  double kx, ky, phase, amp;
};

// Per-channel sums of sinusoids over frame-t plane coordinates expressed in
// reference pixel units, so wavelengths are controlled in pixels.
struct LayerTexture {
  double scale_x = 1.0, scale_y = 1.0;  // world -> reference pixel units
  std::vector<std::vector<Wave>> waves;  // [channel][wave]

  double value(int c, const geom::Vec3& X) const {
    const double qx = X.x * scale_x, qy = X.y * scale_y;
    double v = 0.5;
    for (const Wave& w : waves[c]) v += w.amp * std::sin(w.kx * qx + w.ky * qy + w.phase);
    return v;
  }
};

struct Layer {
  geom::Vec3 n;  // frame-t plane n . X = k
  double k = 0.0;
  bool is_patch = false;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // footprint, normalized frame-t coords
  geom::RigidMotion motion;               // identity for the background
  LayerTexture tex;
};

// Composed affine Y = M X + b of object motion followed by camera motion.
struct Affine {
  geom::Mat3 M;
  geom::Vec3 b;
};

Affine compose(const geom::RigidMotion& obj, const geom::RigidMotion& cam) {
  const geom::Mat3 Rc = cam.rotation(), Ro = obj.rotation();
  Affine a;
  a.M = Rc * Ro;
  a.b = Rc.apply(obj.t - Ro.apply(obj.pivot) - cam.pivot) + cam.t;
  return a;
}

LayerTexture make_texture(int channels, int waves, double min_wl, double max_wl, double z_ref,
                          const geom::Intrinsics& K, int w, int h, std::mt19937_64& rng) {
  LayerTexture t;
  t.scale_x = K.f * w / z_ref;
  t.scale_y = K.f * h / z_ref;
  std::uniform_real_distribution<double> uwl(min_wl, max_wl), uth(0.0, 2.0 * M_PI),
      uph(0.0, 2.0 * M_PI), uamp(0.7, 1.0);
  const double base = 0.45 / waves;
  t.waves.resize(channels);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < waves; ++i) {
      const double wl = uwl(rng), th = uth(rng);
      Wave wv;
      wv.kx = 2.0 * M_PI / wl * std::cos(th);
      wv.ky = 2.0 * M_PI / wl * std::sin(th);
      wv.phase = uph(rng);
      wv.amp = base * uamp(rng);
      t.waves[c].push_back(wv);
    }
  return t;
}

struct Rendered {
  Image img;
  Grid depth;
  std::vector<int> layer_id;  // h*w, index into layers
};

// Ray-casts every pixel against the rigidly moved planes. With identity
// motions this reproduces frame t bit for bit, which makes the static scene
// exactly repeatable.
Rendered render(const SceneSpec& spec, const std::vector<Layer>& layers,
                const geom::RigidMotion& cam, bool moved) {
  const int h = spec.h, w = spec.w;
  Rendered out;
  out.img = Image(h, w, spec.channels);
  out.depth = Grid(h, w);
  out.layer_id.assign(static_cast<size_t>(h) * w, -1);

  static const geom::RigidMotion kIdentity{};
  std::vector<Affine> affines;
  std::vector<geom::Vec3> np;  // moved plane normal
  std::vector<double> kp;      // moved plane offset
  for (const Layer& l : layers) {
    const Affine a = compose(moved ? l.motion : kIdentity, moved ? cam : kIdentity);
    affines.push_back(a);
    const geom::Vec3 n2 = a.M.apply(l.n);
    np.push_back(n2);
    kp.push_back(l.k + n2.dot(a.b));
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double xn = (x + 0.5) / w, yn = (y + 0.5) / h;
      const geom::Vec3 dir{(xn - spec.K.cx) / spec.K.f, (yn - spec.K.cy) / spec.K.f, 1.0};
      double best_s = std::numeric_limits<double>::infinity();
      int best_l = -1;
      geom::Vec3 best_X;
      for (size_t li = 0; li < layers.size(); ++li) {
        const double denom = np[li].dot(dir);
        if (std::fabs(denom) < 1e-12) continue;
        const double s = kp[li] / denom;
        if (s <= geom::kZMin || s >= best_s) continue;
        const geom::Vec3 Y = dir * s;
        // back-map to the frame-t plane for membership and texture lookup
        const geom::Vec3 X = affines[li].M.transposed().apply(Y - affines[li].b);
        if (layers[li].is_patch) {
          if (X.z <= geom::kZMin) continue;
          const double mx = spec.K.f * X.x / X.z + spec.K.cx;
          const double my = spec.K.f * X.y / X.z + spec.K.cy;
          if (mx < layers[li].x0 || mx >= layers[li].x1 || my < layers[li].y0 ||
              my >= layers[li].y1)
            continue;
        }
        best_s = s;
        best_l = static_cast<int>(li);
        best_X = X;
      }
      require(best_l >= 0, "generate_scene: a ray misses every layer");
      out.depth.at(y, x) = best_s;
      out.layer_id[static_cast<size_t>(y) * w + x] = best_l;
      for (int c = 0; c < spec.channels; ++c)
        out.img.ch[c].at(y, x) = layers[best_l].tex.value(c, best_X);
    }
  return out;
}

}  // namespace

SceneGroundTruth generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  require(spec.w > 0 && spec.h > 0 && spec.channels > 0, "generate_scene: bad image size");
  require(spec.texture_waves > 0 && spec.min_wavelength_px > 2.0 &&
              spec.max_wavelength_px >= spec.min_wavelength_px,
          "generate_scene: bad texture parameters");
  require(spec.bg_normal.z > 0.0, "generate_scene: background must face the camera");
  require(spec.bg_k / spec.bg_normal.z > geom::kZMin,
          "generate_scene: background behind the depth clamp");
  for (const PatchSpec& p : spec.objects) {
    require(p.depth > geom::kZMin, "generate_scene: patch behind the depth clamp");
    require(p.x1 > p.x0 && p.y1 > p.y0, "generate_scene: empty patch footprint");
  }

  std::mt19937_64 rng(seed ^ spec.texture_seed ^ 0x9e3779b97f4a7c15ull);

  std::vector<Layer> layers;
  {
    Layer bg;
    bg.n = spec.bg_normal;
    bg.k = spec.bg_k;
    const double z_ref = spec.bg_k / spec.bg_normal.z;
    bg.tex = make_texture(spec.channels, spec.texture_waves, spec.min_wavelength_px,
                          spec.max_wavelength_px, z_ref, spec.K, spec.w, spec.h, rng);
    layers.push_back(std::move(bg));
  }
  for (const PatchSpec& p : spec.objects) {
    Layer l;
    l.n = {0, 0, 1};
    l.k = p.depth;
    l.is_patch = true;
    l.x0 = p.x0;
    l.y0 = p.y0;
    l.x1 = p.x1;
    l.y1 = p.y1;
    l.motion = p.motion;
    l.tex = make_texture(spec.channels, spec.texture_waves, spec.min_wavelength_px,
                         spec.max_wavelength_px, p.depth, spec.K, spec.w, spec.h, rng);
    layers.push_back(std::move(l));
  }

  Rendered t0 = render(spec, layers, spec.camera, false);
  Rendered t1 = render(spec, layers, spec.camera, true);

  SceneGroundTruth gt;
  gt.name = spec.name;
  gt.K = spec.K;
  gt.I_t = std::move(t0.img);
  gt.I_tp1 = std::move(t1.img);
  gt.d_t = std::move(t0.depth);
  gt.d_tp1 = std::move(t1.depth);
  gt.camera = spec.camera;
  for (const PatchSpec& p : spec.objects) gt.objects.push_back(p.motion);

  const int h = spec.h, w = spec.w;
  for (size_t k = 0; k < spec.objects.size(); ++k) {
    Grid m(h, w, 0.0);
    for (int i = 0; i < h * w; ++i)
      if (t0.layer_id[i] == static_cast<int>(k) + 1) m.v[i] = 1.0;
    gt.masks.push_back(std::move(m));
  }

  gt.flow = geom::compute_flow(gt.d_t, spec.K, gt.camera, gt.objects, gt.masks);

  // A frame-t pixel stays photometrically explainable only when every tap of
  // its bilinear footprint in frame t+1 shows the same surface.
  gt.occluded = Mask(h, w, 0);
  long in_bounds = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double qx = x + gt.flow.u.at(y, x);
      const double qy = y + gt.flow.v.at(y, x);
      if (qx < 0.0 || qx > w - 1.0 || qy < 0.0 || qy > h - 1.0) {
        gt.occluded.at(y, x) = 1;
        continue;
      }
      ++in_bounds;
      const int id = t0.layer_id[static_cast<size_t>(y) * w + x];
      const int x0 = std::min(static_cast<int>(std::floor(qx)), w - 1);
      const int y0 = std::min(static_cast<int>(std::floor(qy)), h - 1);
      const double fx = qx - x0, fy = qy - y0;
      bool same = true;
      for (int dy = 0; dy <= (fy > 0.0 ? 1 : 0) && same; ++dy)
        for (int dx = 0; dx <= (fx > 0.0 ? 1 : 0) && same; ++dx)
          same = t1.layer_id[static_cast<size_t>(y0 + dy) * w + (x0 + dx)] == id;
      if (!same) gt.occluded.at(y, x) = 1;
    }
  require(10 * in_bounds >= 9 * static_cast<long>(h) * w,
          "generate_scene: fewer than 90% of pixels stay in bounds");

  return gt;
}

std::vector<SceneSpec> standard_suite() {
  std::vector<SceneSpec> suite;

  auto base = []() {
    SceneSpec s;
    s.w = 64;
    s.h = 64;
    s.channels = 1;
    s.bg_k = 4.0;
    return s;
  };

  {
    SceneSpec s = base();
    s.name = "static";
    s.texture_seed = 11;
    PatchSpec p;
    p.depth = 2.0;
    s.objects = {p};
    suite.push_back(s);
  }
  {
    SceneSpec s = base();
    s.name = "cam-translate";
    s.texture_seed = 23;
    PatchSpec p;
    p.depth = 2.0;
    s.objects = {p};
    s.camera.t = {0.1, 0.0, 0.0};
    suite.push_back(s);
  }
  {
    SceneSpec s = base();
    s.name = "cam-rotate";
    s.texture_seed = 37;
    PatchSpec p;
    p.depth = 2.5;
    s.objects = {p};
    s.camera.sins = {0.0, 0.02, 0.0};
    suite.push_back(s);
  }
  {
    SceneSpec s = base();
    s.name = "one-object";
    s.texture_seed = 41;
    PatchSpec p;
    p.depth = 2.0;
    p.motion.t = {0.08, 0.0, 0.0};
    s.objects = {p};
    suite.push_back(s);
  }
  {
    SceneSpec s = base();
    s.name = "two-objects";
    s.texture_seed = 53;
    PatchSpec a;
    a.x0 = 0.15;
    a.x1 = 0.4;
    a.y0 = 0.2;
    a.y1 = 0.5;
    a.depth = 2.0;
    a.motion.t = {0.07, 0.0, 0.0};
    PatchSpec b;
    b.x0 = 0.55;
    b.x1 = 0.85;
    b.y0 = 0.5;
    b.y1 = 0.8;
    b.depth = 2.8;
    b.motion.t = {-0.05, 0.04, 0.0};
    s.objects = {a, b};
    suite.push_back(s);
  }
  {
    SceneSpec s = base();
    s.name = "object+camera";
    s.texture_seed = 67;
    PatchSpec p;
    p.depth = 2.0;
    p.motion.t = {0.06, 0.0, 0.0};
    s.objects = {p};
    s.camera.t = {0.0, 0.0, -0.12};
    s.camera.sins = {0.0, 0.008, 0.0};
    suite.push_back(s);
  }
  {
    SceneSpec s = base();
    s.name = "slanted";
    s.texture_seed = 79;
    s.bg_normal = {0.25, 0.0, 1.0};
    s.bg_k = 4.0;
    PatchSpec p;
    p.depth = 2.0;
    s.objects = {p};
    s.camera.t = {0.08, 0.0, 0.0};
    suite.push_back(s);
  }

  return suite;
}

SceneSpec scene_by_name(const std::string& name) {
  for (const SceneSpec& s : standard_suite())
    if (s.name == name) return s;
  throw std::invalid_argument("unknown scene '" + name + "'");
}

}  // namespace sfm::synth
