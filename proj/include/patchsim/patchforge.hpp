#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "patchsim/detector.hpp"
#include "patchsim/geometry.hpp"
#include "patchsim/graph.hpp"
#include "patchsim/grid.hpp"
#include "patchsim/rng.hpp"

namespace patchsim::patchforge {

using diffgrid::Graph;
using diffgrid::NodeId;
using patchsim::Grid;

constexpr int kPatchSize = 64;

// The optimized patch and the benign base image it must stay close to.
struct PatchTexture {
  Grid pixels{{kPatchSize, kPatchSize, 3}};
  Grid disguise{{kPatchSize, kPatchSize, 3}};
  double k_disguise = 0.05;

  scene::PatchTextureRef ref() const { return {&pixels, &disguise}; }
};

// Procedurally drawn red rosette: filled red disc with petal notches and a
// pale stamen center. Shipped as a generated asset.
Grid make_disguise_rosette();

struct TransformRanges {
  double scale_min = 0.15;   // fraction of image width
  double scale_max = 0.40;
  double rot_max_deg = 20.0;
  double jitter_frac = 0.05;  // corner jitter, fraction of patch side
};

struct TransformSample {
  double scale = 0.25;
  double rotation = 0.0;  // radians
  double cx = 48.0, cy = 48.0;
  std::array<Vec2, 4> corner_jitter{};  // fraction of side
};

struct EotConfig {
  int steps = 600;
  double lr = 0.03;
  int batch = 4;
  TransformRanges ranges;
  ObjectClass target = ObjectClass::kStopSign;
  double lambda_cls = 1.0, lambda_conf = 1.0, lambda_box = 1.0;
  double k_disguise = 0.05;
  std::uint64_t seed = 1;
  bool init_gray = false;    // otherwise initialize at the disguise image
  double step_clip = 0.05;   // per-step Linf cap on the pixel update
};

// Quad corners of a transform in pixel space, texture top-left first.
Quad transform_quad(const TransformSample& t, int image_w, int image_h);

// Uniform draws, rejection-resampled until the quad lies inside the image
// (<= 100 attempts, then the configuration is rejected).
TransformSample sample_transform(Rng& rng, const TransformRanges& ranges,
                                 int image_w, int image_h);

// Pixels covered by the quad and their source coordinates in the patch,
// via the inverse projective map of the (jittered) quad.
struct WarpPlan {
  std::vector<int> pixels;  // flat y*W+x ids
  Grid coords;              // {N,2} texel-center coordinates
};
WarpPlan plan_warp(const Quad& quad, int image_w, int image_h, int patch_w,
                   int patch_h);

// Destination pixels inside the quad become bilinear samples of the patch;
// the result is affine in the patch texels.
struct AppliedPatch {
  Grid image;
  Quad quad;
};
AppliedPatch apply_patch(const Grid& image, const Grid& patch_pixels,
                         const TransformSample& t);

// Graph version: composites the patch leaf over a base-image node.
NodeId apply_patch_node(Graph& g, NodeId base_image, NodeId patch,
                        const WarpPlan& plan);

struct LossWeights {
  double lambda_cls = 1.0, lambda_conf = 1.0, lambda_box = 1.0;
};

// Targets for cells whose centers fall inside the quad. Throws when the
// quad covers no cell centers.
struct AdvTargets {
  Grid mask1{{1, detector::kGridSize, detector::kGridSize}};
  Grid mask{{detector::kGridSize, detector::kGridSize}};
  Grid onehot{{detector::kNumClasses, detector::kGridSize, detector::kGridSize}};
  Grid ones1{{1, detector::kGridSize, detector::kGridSize}};
  Grid col_cells{{1, detector::kGridSize, detector::kGridSize}};
  Grid row_cells{{1, detector::kGridSize, detector::kGridSize}};
  Grid qx{{1, detector::kGridSize, detector::kGridSize}};
  Grid qy{{1, detector::kGridSize, detector::kGridSize}};
  Grid qw{{1, detector::kGridSize, detector::kGridSize}};
  Grid qh{{1, detector::kGridSize, detector::kGridSize}};
  int covered = 0;
};
AdvTargets build_adv_targets(const Quad& quad, ObjectClass target);

NodeId adversarial_loss_node(Graph& g, const detector::TrunkNodes& trunk,
                             const LossWeights& w, int covered_cells);
void bind_adv_targets(diffgrid::Bindings& b, const AdvTargets& t);

// Standalone loss on a raw prediction grid.
double adversarial_loss(const Grid& raw_hwc, const Quad& quad,
                        ObjectClass target, const LossWeights& w = {});

// L2 norm of (pixels - disguise).
double disguise_loss(const PatchTexture& patch);

double total_loss(const Grid& raw_hwc, const Quad& quad,
                  const PatchTexture& patch, const LossWeights& w = {},
                  ObjectClass target = ObjectClass::kStopSign);

struct PatchTrainResult {
  PatchTexture patch;
  std::vector<double> loss_curve;
  bool diverged = false;
};

// EoT loop: per step draw images and transforms, apply the patch, descend
// on total loss, clamp pixels to [0,1]. Deterministic per seed.
PatchTrainResult train_patch(const detector::DetectorParams& params,
                             const std::vector<Grid>& train_images,
                             const EotConfig& cfg);

// Left half = columns [0, W/2), right half = the rest. Width must be even.
std::pair<Grid, Grid> split_patch(const Grid& patch_pixels);

struct TrialOutcome {
  int image_id = 0;
  int trial = 0;
  bool success = false;
  double best_iou = 0.0;
  double best_score = 0.0;
};

struct ModelEval {
  double asr = 0.0;
  std::vector<TrialOutcome> outcomes;
};

// Success iff some stop-sign detection overlaps the patch quad's bounding
// box at IoU >= overlap_iou; off-patch detections are ignored. Setting
// overlap_filter=false counts any stop-sign detection (used to check the
// filter can only lower ASR).
ModelEval eval_model_level(const detector::DetectorParams& params,
                           const Grid& patch_pixels,
                           const std::vector<Grid>& test_images,
                           int trials_per_image, double overlap_iou,
                           std::uint64_t seed,
                           const TransformRanges& ranges = {},
                           double score_thr = 0.5, double nms_iou = 0.5,
                           bool overlap_filter = true);

void write_outcomes_csv(const std::string& path,
                        const std::vector<TrialOutcome>& outcomes);

}  // namespace patchsim::patchforge
