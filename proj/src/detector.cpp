#include "patchsim/detector.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "patchsim/rng.hpp"

namespace patchsim::detector {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr double kPositiveWeight = 5.0;

}  // namespace

const std::vector<std::string>& weight_names() {
  static const std::vector<std::string> names = {"w1", "b1", "w2", "b2",
                                                 "w3", "b3", "wh", "bh"};
  return names;
}

std::uint64_t arch_hash() {
  return fnv1a("in96x96x3|conv3->16k3p1|relu|pool2|conv16->32k3p1|relu|pool2|"
               "conv32->64k3p1|relu|pool2|head1x1->7|grid12x12");
}

DetectorParams init_detector(std::uint64_t seed) {
  DetectorParams p;
  Rng rng(Rng::derive(seed, 0xDE7EC7ull));
  auto he_fill = [&rng](Grid& w) {
    const double fan_in = static_cast<double>(w.shape[1] * w.shape[2] * w.shape[3]);
    const double std = std::sqrt(2.0 / fan_in);
    for (double& v : w.data) v = rng.normal() * std;
  };
  he_fill(p.w1);
  he_fill(p.w2);
  he_fill(p.w3);
  he_fill(p.wh);
  return p;  // biases stay zero
}

TrunkNodes append_trunk(Graph& g, NodeId image_hwc) {
  const auto& s = g.shape_of(image_hwc);
  if (s != std::vector<std::size_t>{kImageSize, kImageSize, 3}) {
    throw diffgrid::GraphError("detector trunk expects a {96,96,3} image node");
  }
  const NodeId w1 = g.input("w1", {16, 3, 3, 3}, true);
  const NodeId b1 = g.input("b1", {16}, true);
  const NodeId w2 = g.input("w2", {32, 16, 3, 3}, true);
  const NodeId b2 = g.input("b2", {32}, true);
  const NodeId w3 = g.input("w3", {64, 32, 3, 3}, true);
  const NodeId b3 = g.input("b3", {64}, true);
  const NodeId wh = g.input("wh", {kRawChannels, 64, 1, 1}, true);
  const NodeId bh = g.input("bh", {kRawChannels}, true);

  NodeId x = g.hwc_to_chw(g.affine(image_hwc, 1.0, -0.5));
  x = g.maxpool2(g.relu(g.bias_channels(g.conv2d(x, w1, 1, 1), b1)));
  x = g.maxpool2(g.relu(g.bias_channels(g.conv2d(x, w2, 1, 1), b2)));
  x = g.maxpool2(g.relu(g.bias_channels(g.conv2d(x, w3, 1, 1), b3)));
  const NodeId raw = g.bias_channels(g.conv2d(x, wh, 1, 0), bh);

  TrunkNodes t;
  t.raw_chw = raw;
  t.raw_hwc = g.chw_to_hwc(raw);
  t.obj_logits = g.slice_channels(raw, 0, 1);
  t.cls_logits = g.slice_channels(raw, 1, 3);
  t.box_params = g.slice_channels(raw, 3, 7);
  return t;
}

void bind_params(diffgrid::Bindings& b, const DetectorParams& p) {
  const auto tensors = p.tensors();
  const auto& names = weight_names();
  for (std::size_t i = 0; i < names.size(); ++i) b[names[i]] = *tensors[i];
}

Grid forward(const DetectorParams& params, const Grid& image) {
  if (image.shape != std::vector<std::size_t>{kImageSize, kImageSize, 3}) {
    throw std::invalid_argument("forward: image must be {96,96,3}, got " +
                                shape_str(image.shape));
  }
  Graph g;
  const NodeId img = g.input("image", {kImageSize, kImageSize, 3});
  const TrunkNodes t = append_trunk(g, img);
  diffgrid::Bindings b;
  b["image"] = image;
  bind_params(b, params);
  return g.eval(b).value(t.raw_hwc);
}

std::vector<Detection> decode(const Grid& raw_hwc, double score_threshold,
                              double nms_iou) {
  if (raw_hwc.shape !=
      std::vector<std::size_t>{kGridSize, kGridSize, kRawChannels}) {
    throw std::invalid_argument("decode: raw grid must be {12,12,7}");
  }
  std::vector<Detection> candidates;
  for (int i = 0; i < kGridSize; ++i) {
    for (int j = 0; j < kGridSize; ++j) {
      const double obj = sigmoid(raw_hwc.at(i, j, 0));
      const double l0 = raw_hwc.at(i, j, 1), l1 = raw_hwc.at(i, j, 2);
      const double m = std::max(l0, l1);
      const double z = std::exp(l0 - m) + std::exp(l1 - m);
      const double p0 = std::exp(l0 - m) / z;
      for (int c = 0; c < kNumClasses; ++c) {
        const double score = obj * (c == 0 ? p0 : 1.0 - p0);
        if (score < score_threshold) continue;
        Detection d;
        d.cls = static_cast<ObjectClass>(c);
        d.score = score;
        d.box.cx = (j + sigmoid(raw_hwc.at(i, j, 3))) * kCellSize;
        d.box.cy = (i + sigmoid(raw_hwc.at(i, j, 4))) * kCellSize;
        d.box.w = std::min(std::exp(raw_hwc.at(i, j, 5)),
                           static_cast<double>(kImageSize));
        d.box.h = std::min(std::exp(raw_hwc.at(i, j, 6)),
                           static_cast<double>(kImageSize));
        d.cell = i * kGridSize + j;
        candidates.push_back(d);
      }
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) {
                     if (a.score != b.score) return a.score > b.score;
                     return a.cell < b.cell;
                   });
  std::vector<Detection> kept;
  for (const Detection& d : candidates) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.cls == d.cls && iou(k.box, d.box) >= nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

LossTargets build_targets(const std::vector<scene::SceneLabel>& labels) {
  LossTargets t;
  for (double& v : t.obj_weight.data) v = 1.0;

  // Far objects first so that the nearer one wins a contested cell.
  std::vector<const scene::SceneLabel*> sorted;
  for (const auto& l : labels) sorted.push_back(&l);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const scene::SceneLabel* a, const scene::SceneLabel* b) {
                     return a->depth > b->depth;
                   });

  std::array<std::array<bool, kGridSize>, kGridSize> occupied{};
  for (const scene::SceneLabel* l : sorted) {
    const int j = std::clamp(static_cast<int>(l->box.cx / kCellSize), 0,
                             kGridSize - 1);
    const int i = std::clamp(static_cast<int>(l->box.cy / kCellSize), 0,
                             kGridSize - 1);
    if (occupied[i][j]) ++t.cell_collisions;
    occupied[i][j] = true;
    t.obj_target.at(0, i, j) = 1.0;
    t.obj_weight.at(0, i, j) = kPositiveWeight;
    t.cls_onehot.at(0, i, j) = 0.0;
    t.cls_onehot.at(1, i, j) = 0.0;
    t.cls_onehot.at(static_cast<int>(l->cls), i, j) = 1.0;
    t.cls_mask.at(i, j) = 1.0;
    t.box_target_xy.at(0, i, j) = l->box.cx / kCellSize - j;
    t.box_target_xy.at(1, i, j) = l->box.cy / kCellSize - i;
    t.box_target_wh.at(0, i, j) = std::log(std::max(l->box.w, 1e-3));
    t.box_target_wh.at(1, i, j) = std::log(std::max(l->box.h, 1e-3));
    t.box_mask2.at(0, i, j) = 1.0;
    t.box_mask2.at(1, i, j) = 1.0;
  }
  return t;
}

NodeId detection_loss_node(Graph& g, const TrunkNodes& trunk) {
  const NodeId obj_target = g.input("obj_target", {1, kGridSize, kGridSize});
  const NodeId obj_weight = g.input("obj_weight", {1, kGridSize, kGridSize});
  const NodeId cls_onehot =
      g.input("cls_onehot", {kNumClasses, kGridSize, kGridSize});
  const NodeId cls_mask = g.input("cls_mask", {kGridSize, kGridSize});
  const NodeId box_target_xy = g.input("box_target_xy", {2, kGridSize, kGridSize});
  const NodeId box_target_wh = g.input("box_target_wh", {2, kGridSize, kGridSize});
  const NodeId box_mask2 = g.input("box_mask2", {2, kGridSize, kGridSize});

  const NodeId obj_bce =
      g.sum(g.mul(obj_weight, g.bce(g.sigmoid(trunk.obj_logits), obj_target)));
  const NodeId cls_ce = g.scale(
      g.sum(g.mul(cls_mask, g.softmax_xent_map(trunk.cls_logits, cls_onehot))),
      kPositiveWeight);

  const NodeId box_xy = g.sigmoid(g.slice_channels(trunk.box_params, 0, 2));
  const NodeId box_wh = g.slice_channels(trunk.box_params, 2, 4);
  const NodeId dxy = g.add(box_xy, g.scale(box_target_xy, -1.0));
  const NodeId dwh = g.add(box_wh, g.scale(box_target_wh, -1.0));
  const NodeId box_se =
      g.scale(g.add(g.sum(g.mul(box_mask2, g.mul(dxy, dxy))),
                    g.sum(g.mul(box_mask2, g.mul(dwh, dwh)))),
              kPositiveWeight);

  return g.add(g.add(obj_bce, cls_ce), box_se);
}

void bind_targets(diffgrid::Bindings& b, const LossTargets& t) {
  b["obj_target"] = t.obj_target;
  b["obj_weight"] = t.obj_weight;
  b["cls_onehot"] = t.cls_onehot;
  b["cls_mask"] = t.cls_mask;
  b["box_target_xy"] = t.box_target_xy;
  b["box_target_wh"] = t.box_target_wh;
  b["box_mask2"] = t.box_mask2;
}

double detection_loss(const Grid& raw_hwc,
                      const std::vector<scene::SceneLabel>& labels) {
  Graph g;
  const NodeId raw = g.input("raw", {kGridSize, kGridSize, kRawChannels});
  TrunkNodes trunk;
  trunk.raw_hwc = raw;
  trunk.raw_chw = g.hwc_to_chw(raw);
  trunk.obj_logits = g.slice_channels(trunk.raw_chw, 0, 1);
  trunk.cls_logits = g.slice_channels(trunk.raw_chw, 1, 3);
  trunk.box_params = g.slice_channels(trunk.raw_chw, 3, 7);
  const NodeId loss = detection_loss_node(g, trunk);
  diffgrid::Bindings b;
  b["raw"] = raw_hwc;
  bind_targets(b, build_targets(labels));
  return g.eval(b).value(loss).data[0];
}

TrainResult train(const DetectorParams& init,
                  const std::vector<TrainSample>& data, int epochs, double lr,
                  int batch, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");

  TrainResult res;
  res.params = init;
  if (epochs <= 0) return res;

  Graph g;
  const NodeId img = g.input("image", {kImageSize, kImageSize, 3});
  const TrunkNodes trunk = append_trunk(g, img);
  const NodeId loss = detection_loss_node(g, trunk);

  const auto& names = weight_names();
  const std::set<std::string> wrt(names.begin(), names.end());

  Rng rng(Rng::derive(seed, 0x7121ull));
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  std::vector<LossTargets> targets;
  targets.reserve(data.size());
  for (const TrainSample& s : data) {
    targets.push_back(build_targets(s.labels));
    res.cell_collisions += targets.back().cell_collisions;
  }

  for (int epoch = 0; epoch < epochs; ++epoch) {
    // Fisher-Yates shuffle.
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<int>(i))]);
    }
    double epoch_sum = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t off = 0; off < idx.size(); off += batch) {
      const std::size_t hi = std::min(idx.size(), off + batch);
      const DetectorParams snapshot = res.params;
      std::vector<Grid> acc(names.size());
      double batch_loss = 0.0;
      bool bad = false;
      try {
        for (std::size_t k = off; k < hi; ++k) {
          diffgrid::Bindings b;
          b["image"] = data[idx[k]].image;
          bind_params(b, res.params);
          bind_targets(b, targets[idx[k]]);
          diffgrid::GradResult gr = g.grad(loss, wrt, b);
          batch_loss += gr.scalar_value;
          for (std::size_t t = 0; t < names.size(); ++t) {
            Grid& gsum = acc[t];
            Grid& gi = gr.leaf_grads[names[t]];
            if (gsum.data.empty()) {
              gsum = std::move(gi);
            } else {
              for (std::size_t q = 0; q < gsum.numel(); ++q) {
                gsum.data[q] += gi.data[q];
              }
            }
          }
        }
      } catch (const diffgrid::GraphError&) {
        bad = true;
      }
      const double count = static_cast<double>(hi - off);
      if (bad || !std::isfinite(batch_loss)) {
        res.params = snapshot;
        res.diverged = true;
        return res;
      }
      auto tensors = res.params.tensors();
      for (std::size_t t = 0; t < names.size(); ++t) {
        for (std::size_t q = 0; q < acc[t].numel(); ++q) {
          tensors[t]->data[q] -= lr * acc[t].data[q] / count;
        }
      }
      epoch_sum += batch_loss / count;
      ++epoch_batches;
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_batches));
  }
  return res;
}

std::array<ClassStats, 2> evaluate(const DetectorParams& params,
                                   const std::vector<TrainSample>& samples,
                                   double iou_thr, double score_thr,
                                   double nms_iou) {
  std::array<ClassStats, 2> stats{};
  for (const TrainSample& s : samples) {
    const std::vector<Detection> dets =
        decode(forward(params, s.image), score_thr, nms_iou);
    for (int c = 0; c < 2; ++c) {
      std::vector<const scene::SceneLabel*> gt;
      for (const auto& l : s.labels) {
        if (static_cast<int>(l.cls) == c) gt.push_back(&l);
      }
      stats[c].ground_truth += static_cast<int>(gt.size());
      std::vector<bool> used(gt.size(), false);
      for (const Detection& d : dets) {
        if (static_cast<int>(d.cls) != c) continue;
        ++stats[c].detections;
        double best = iou_thr;
        int best_i = -1;
        for (std::size_t i = 0; i < gt.size(); ++i) {
          if (used[i]) continue;
          const double v = iou(d.box, gt[i]->box);
          if (v >= best) {
            best = v;
            best_i = static_cast<int>(i);
          }
        }
        if (best_i >= 0) {
          used[best_i] = true;
          ++stats[c].matched;
        }
      }
    }
  }
  return stats;
}

void save_params(const DetectorParams& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_params: cannot open " + path);
  f.write("PSTM", 4);
  const std::uint32_t version = 1;
  const std::uint64_t hash = arch_hash();
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&hash), sizeof(hash));
  for (const Grid* t : p.tensors()) {
    f.write(reinterpret_cast<const char*>(t->data.data()),
            static_cast<std::streamsize>(t->data.size() * sizeof(double)));
  }
}

DetectorParams load_params(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_params: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "PSTM", 4) != 0) {
    throw std::runtime_error("load_params: bad magic in " + path);
  }
  std::uint32_t version = 0;
  std::uint64_t hash = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&hash), sizeof(hash));
  if (!f || version != 1) {
    throw std::runtime_error("load_params: unsupported version");
  }
  if (hash != arch_hash()) {
    throw std::runtime_error("load_params: architecture hash mismatch");
  }
  DetectorParams p;
  for (Grid* t : p.tensors()) {
    f.read(reinterpret_cast<char*>(t->data.data()),
           static_cast<std::streamsize>(t->data.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("load_params: truncated file");
  return p;
}

}  // namespace patchsim::detector
