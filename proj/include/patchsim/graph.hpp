#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "patchsim/grid.hpp"

namespace patchsim::diffgrid {

using patchsim::Grid;

// Closed primitive set: exactly what the detector forward pass and the patch
// losses need. No user-defined ops, which keeps the gradient checks
// exhaustive over op kinds.
enum class Op {
  kInput,
  kRelu,
  kSigmoid,
  kExpCap,        // min(exp(x), cap)
  kSqrt,
  kAdd,           // elementwise, same shape
  kMul,           // elementwise, same shape
  kAffine,        // a*x + b with scalar constants
  kConv2d,        // cross-correlation, zero padding
  kBiasChannels,  // {C,H,W} + {C}
  kMaxPool2,      // 2x2 window, stride 2
  kSliceChannels,
  kHwcToChw,
  kChwToHwc,
  kBilinearSample,  // texture {H,W,3}, coords {N,2} -> {N,3}
  kComposite,       // base {H,W,3} with samples {N,3} written at pixel ids
  kSum,
  kMean,
  kSquaredError,     // sum of squared differences -> [1]
  kBce,              // elementwise binary cross entropy, probs clamped
  kSoftmaxXentVec,   // logits {C}, target index -> [1]
  kSoftmaxXentMap,   // logits {C,H,W}, one-hot {C,H,W} -> {H,W}
};

struct Node {
  Op op = Op::kInput;
  std::vector<int> parents;
  std::vector<std::size_t> shape;
  double p0 = 0.0;  // affine a / expcap cap
  double p1 = 0.0;  // affine b
  int i0 = 0;       // conv stride / slice c0 / xent target
  int i1 = 0;       // conv pad / slice c1
  std::vector<int> pixels;  // composite destination pixel ids
  std::string name;         // inputs only
  bool trainable = false;   // inputs only
};

using NodeId = int;

struct EvalResult {
  std::vector<Grid> values;
  long long bilinear_clamps = 0;  // out-of-range coordinates clamped

  const Grid& value(NodeId id) const { return values.at(id); }
};

struct GradResult {
  std::map<std::string, Grid> leaf_grads;
  double scalar_value = 0.0;
  long long bilinear_clamps = 0;
};

using Bindings = std::map<std::string, Grid>;

// Topologically ordered op tape. Append nodes through the builder methods,
// then treat the graph as immutable: eval/grad are const, pure, and safe to
// call concurrently.
class Graph {
 public:
  NodeId input(const std::string& name, std::vector<std::size_t> shape,
               bool trainable = false);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId exp_cap(NodeId x, double cap);
  NodeId sqrt_of(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId affine(NodeId x, double a, double b);
  NodeId scale(NodeId x, double a) { return affine(x, a, 0.0); }
  NodeId conv2d(NodeId x, NodeId w, int stride, int pad);
  NodeId bias_channels(NodeId x, NodeId b);
  NodeId maxpool2(NodeId x);
  NodeId slice_channels(NodeId x, int c0, int c1);
  NodeId hwc_to_chw(NodeId x);
  NodeId chw_to_hwc(NodeId x);
  NodeId bilinear_sample(NodeId texture, NodeId coords);
  NodeId composite(NodeId base, NodeId samples, std::vector<int> pixels);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId squared_error(NodeId a, NodeId b);
  NodeId bce(NodeId probs, NodeId targets);
  NodeId softmax_xent(NodeId logits, int target);
  NodeId softmax_xent_map(NodeId logits, NodeId onehot);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<std::size_t>& shape_of(NodeId id) const {
    return nodes_.at(id).shape;
  }
  int size() const { return static_cast<int>(nodes_.size()); }

  EvalResult eval(const Bindings& bindings) const;

  // Reverse-mode gradient of a scalar node w.r.t. trainable leaves.
  // Leaves in wrt that do not influence the output get all-zero grids.
  GradResult grad(NodeId scalar_output, const std::set<std::string>& wrt,
                  const Bindings& bindings) const;

 private:
  NodeId push(Node n);
  const Node& parent_checked(NodeId id) const;

  std::vector<Node> nodes_;
};

// Thrown when shapes mismatch, an intermediate goes non-finite, or a
// contract precondition fails; carries the offending node id when known.
class GraphError : public std::runtime_error {
 public:
  GraphError(const std::string& msg, NodeId id = -1)
      : std::runtime_error(msg), node_id(id) {}
  NodeId node_id;
};

}  // namespace patchsim::diffgrid
