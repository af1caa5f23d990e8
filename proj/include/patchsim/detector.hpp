#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchsim/geometry.hpp"
#include "patchsim/graph.hpp"
#include "patchsim/grid.hpp"
#include "patchsim/scene.hpp"

namespace patchsim::detector {

using diffgrid::Graph;
using diffgrid::NodeId;
using patchsim::Grid;

constexpr int kImageSize = 96;
constexpr int kGridSize = 12;
constexpr int kCellSize = kImageSize / kGridSize;
constexpr int kNumClasses = 2;
constexpr int kRawChannels = 7;  // objectness, 2 class logits, 4 box params

// Fixed architecture: three conv+relu+pool stages and a 1x1 head.
struct DetectorParams {
  Grid w1{{16, 3, 3, 3}}, b1{{16}};
  Grid w2{{32, 16, 3, 3}}, b2{{32}};
  Grid w3{{64, 32, 3, 3}}, b3{{64}};
  Grid wh{{static_cast<std::size_t>(kRawChannels), 64, 1, 1}},
      bh{{static_cast<std::size_t>(kRawChannels)}};

  std::vector<const Grid*> tensors() const {
    return {&w1, &b1, &w2, &b2, &w3, &b3, &wh, &bh};
  }
  std::vector<Grid*> tensors() { return {&w1, &b1, &w2, &b2, &w3, &b3, &wh, &bh}; }
};

// Leaf names used for the weight tensors, in declaration order.
const std::vector<std::string>& weight_names();

std::uint64_t arch_hash();

// He-scaled random weights, zero biases, deterministic per seed.
DetectorParams init_detector(std::uint64_t seed);

struct Detection {
  ObjectClass cls;
  double score = 0.0;
  Box box;
  int cell = 0;
};

// Detector trunk appended to an existing graph on top of an {96,96,3} image
// node. Used both for plain inference and for patch optimization where the
// image itself is a differentiable composite.
struct TrunkNodes {
  NodeId raw_chw;  // {7,12,12}
  NodeId raw_hwc;  // {12,12,7}
  NodeId obj_logits;  // {1,12,12}
  NodeId cls_logits;  // {2,12,12}
  NodeId box_params;  // {4,12,12}
};
TrunkNodes append_trunk(Graph& g, NodeId image_hwc);

void bind_params(diffgrid::Bindings& b, const DetectorParams& p);

// Plain forward pass: image {96,96,3} in [0,1] -> raw grid {12,12,7}.
Grid forward(const DetectorParams& params, const Grid& image);

std::vector<Detection> decode(const Grid& raw_hwc, double score_threshold = 0.5,
                              double nms_iou = 0.5);

// Per-cell training targets derived from labels. When two object centers
// fall in one cell the nearer object wins and the collision is counted.
struct LossTargets {
  Grid obj_target{{1, kGridSize, kGridSize}};
  Grid obj_weight{{1, kGridSize, kGridSize}};
  Grid cls_onehot{{kNumClasses, kGridSize, kGridSize}};
  Grid cls_mask{{kGridSize, kGridSize}};
  Grid box_target_xy{{2, kGridSize, kGridSize}};
  Grid box_target_wh{{2, kGridSize, kGridSize}};
  Grid box_mask2{{2, kGridSize, kGridSize}};
  int cell_collisions = 0;
};
LossTargets build_targets(const std::vector<scene::SceneLabel>& labels);

// Appends the detection loss on top of trunk slices; returns the scalar node.
NodeId detection_loss_node(Graph& g, const TrunkNodes& trunk);
void bind_targets(diffgrid::Bindings& b, const LossTargets& t);

// Standalone loss of a raw prediction grid against labels.
double detection_loss(const Grid& raw_hwc,
                      const std::vector<scene::SceneLabel>& labels);

struct TrainSample {
  Grid image;
  std::vector<scene::SceneLabel> labels;
};

struct TrainResult {
  DetectorParams params;
  std::vector<double> epoch_loss;
  long long cell_collisions = 0;
  bool diverged = false;
};

// Mini-batch gradient descent, deterministic per seed. On divergence the
// last finite parameters are returned with the flag set.
TrainResult train(const DetectorParams& init,
                  const std::vector<TrainSample>& data, int epochs, double lr,
                  int batch, std::uint64_t seed);

struct ClassStats {
  int ground_truth = 0;
  int detections = 0;
  int matched = 0;
  double recall() const {
    return ground_truth > 0 ? static_cast<double>(matched) / ground_truth : 1.0;
  }
  double precision() const {
    return detections > 0 ? static_cast<double>(matched) / detections : 1.0;
  }
};
// Greedy score-ordered matching at the given IoU threshold, per class.
std::array<ClassStats, 2> evaluate(const DetectorParams& params,
                                   const std::vector<TrainSample>& samples,
                                   double iou_thr = 0.3,
                                   double score_thr = 0.5,
                                   double nms_iou = 0.5);

// Versioned binary file: magic "PSTM", format version, architecture hash,
// then little-endian 64-bit floats in declaration order.
void save_params(const DetectorParams& p, const std::string& path);
DetectorParams load_params(const std::string& path);

}  // namespace patchsim::detector
