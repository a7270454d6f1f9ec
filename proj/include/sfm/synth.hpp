#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfm/array.hpp"
#include "sfm/geometry.hpp"

namespace sfm::synth {

// Rectangular textured patch on a fronto-parallel plane, defined by its
// frame-t footprint in normalized image coordinates.
struct PatchSpec {
  double x0 = 0.35, y0 = 0.35, x1 = 0.65, y1 = 0.65;
  double depth = 2.0;
  geom::RigidMotion motion;  // frame t -> t+1, camera frame of t
};

struct SceneSpec {
  std::string name = "scene";
  int w = 64, h = 64;
  int channels = 1;
  geom::Intrinsics K;
  // Background plane n . X = k in the frame-t camera; fronto-parallel when
  // n = (0,0,1), slanted otherwise. n.z must stay positive over the view.
  geom::Vec3 bg_normal{0, 0, 1};
  double bg_k = 4.0;
  std::vector<PatchSpec> objects;
  geom::RigidMotion camera;  // frame t -> t+1
  std::uint64_t texture_seed = 0;
  double min_wavelength_px = 20.0;
  double max_wavelength_px = 48.0;
  int texture_waves = 4;
};

struct SceneGroundTruth {
  std::string name;
  geom::Intrinsics K;
  Image I_t, I_tp1;
  Grid d_t, d_tp1;
  geom::FlowField flow;        // exactly compute_flow of the gt quantities
  std::vector<Grid> masks;     // binary, one per object, frame t
  Mask occluded;               // frame-t pixels whose target is covered or oob
  geom::RigidMotion camera;
  std::vector<geom::RigidMotion> objects;
};

// Deterministic analytic renderer: both frames are ray-cast against the
// textured planes, frame t+1 against the rigidly moved planes, so the pair
// is exact rather than resampled. Throws std::invalid_argument when the
// spec breaks its invariants (layer behind the depth clamp, ray missing the
// background, or fewer than 90% of pixels staying in bounds).
SceneGroundTruth generate_scene(const SceneSpec& spec, std::uint64_t seed = 0);

// Named scenes covering every motion component: static, cam-translate,
// cam-rotate, one-object, two-objects, object+camera, slanted.
std::vector<SceneSpec> standard_suite();

// Lookup in standard_suite() by name; throws on unknown names.
SceneSpec scene_by_name(const std::string& name);

}  // namespace sfm::synth
