#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchsim/geometry.hpp"
#include "patchsim/grid.hpp"
#include "patchsim/rng.hpp"

namespace patchsim::scene {

using patchsim::Grid;

// Pinhole camera. World frame: x lateral (right), y forward along the road,
// z up. Yaw 0 looks along +y; image v grows downward.
struct Camera {
  Vec3 position{0.0, 0.0, 1.6};
  double yaw = 0.0;
  double focal = 100.0;  // pixels
  int width = 96;
  int height = 96;
};

struct ProjectedPoint {
  bool behind = false;
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;  // camera-frame z
};

// Near plane at 0.1 m; closer points report behind.
ProjectedPoint project_point(const Camera& cam, const Vec3& world_point);

enum class Motif { kFlat, kBuilding, kPedestrian, kStopSign, kPole };
enum class PatchSource { kNone, kAdversarial, kDisguise };
enum class PatchRegion { kFull, kLeftHalf, kRightHalf };

struct Color {
  double r = 0.0, g = 0.0, b = 0.0;
};

struct Billboard {
  Vec3 center;
  double width = 1.0;
  double height = 1.0;
  Vec2 facing{0.0, -1.0};  // unit normal in the ground plane
  Motif motif = Motif::kFlat;
  Color base{0.5, 0.5, 0.5};
  int motif_seed = 0;
  PatchSource patch_source = PatchSource::kNone;
  PatchRegion patch_region = PatchRegion::kFull;
  std::optional<ObjectClass> label;
};

struct Road {
  double half_width = 1.0;      // roadway extends x in [-half, half]
  double pavement_width = 1.4;  // walkable band beyond the roadway edge
  double length = 120.0;
  double intersection = 16.0;  // meters along the road axis
};

struct SceneWorld {
  int town_preset = 1;
  Road road;
  std::vector<Billboard> billboards;
  int ambient = 0;  // single fixed lighting preset
};

struct SceneLabel {
  ObjectClass cls;
  Box box;         // pixel space
  double depth;    // camera distance, used for cell-assignment tie-breaks
};

// One bilinear tap from a patch texel into an image pixel.
struct TexelWeight {
  int pixel;   // y * W + x in the rendered image
  int texel;   // ty * TW + tx in the patch texture
  double weight;
};

struct PatchTextureRef {
  const Grid* adversarial = nullptr;  // {H,W,3}, the optimized texels
  const Grid* disguise = nullptr;     // {H,W,3}
};

struct RenderOutput {
  Grid image;  // {H,W,3} in [0,1]
  std::vector<SceneLabel> labels;
  std::vector<TexelWeight> texel_weights;  // exact Jacobian rows
};

// Painter's-algorithm composite of background, road and billboards sorted
// far to near. Pixels covered by adversarial-patch regions are bilinear in
// the patch texels; texel_weights records that linear map exactly.
RenderOutput render(const SceneWorld& world, const Camera& cam,
                    PatchTextureRef patch = {}, bool want_texel_weights = true);

struct Palette {
  Color sky_top, sky_horizon, ground, pavement, road;
  std::vector<Color> building_tints;
  std::vector<Color> shirt_colors;
  double sign_freq;
};

const Palette& town_palette(int preset);  // preset in 1..5

// Deterministic procedural world per (seed, preset): buildings, 0-3
// pedestrians on the pavement, 0-1 genuine stop sign near the intersection.
SceneWorld sample_town(std::uint64_t seed, int town_preset);

// Camera pose distribution used when generating dataset images.
Camera sample_dataset_camera(Rng& rng);

// Solves (left_x1 - c_x)/(left_depth - c_y) = (right_x0 - c_x)/(right_depth - c_y)
// so the right edge of the left half-patch and the left edge of the right
// half-patch share an image column. Extents are (x0, x1) pairs in meters.
// Throws std::invalid_argument on degenerate geometry.
double collusion_offset(const Camera& cam, Vec2 left_x_extent,
                        Vec2 right_x_extent, double right_depth);

// Binary PPM (P6, 8-bit) image I/O.
void write_ppm(const std::string& path, const Grid& image);
Grid read_ppm(const std::string& path);

// Label sidecar: one object per line, `class_id cx cy w h` in [0,1].
void write_labels(const std::string& path, const std::vector<SceneLabel>& labels,
                  int image_w, int image_h);
std::vector<SceneLabel> read_labels(const std::string& path, int image_w,
                                    int image_h);

}  // namespace patchsim::scene
