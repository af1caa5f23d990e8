#include "patchsim/patchforge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

namespace patchsim::patchforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Homography mapping one quad onto another, via the 8x8 linear system of
// point correspondences.
struct Homography {
  double m[9];

  Vec2 map(double x, double y) const {
    const double w = m[6] * x + m[7] * y + m[8];
    return {(m[0] * x + m[1] * y + m[2]) / w,
            (m[3] * x + m[4] * y + m[5]) / w};
  }
};

bool solve_linear(int n, double* a, double* b) {
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    if (std::abs(a[piv * n + col]) < 1e-12) return false;
    if (piv != col) {
      for (int c = 0; c < n; ++c) std::swap(a[piv * n + c], a[col * n + c]);
      std::swap(b[piv], b[col]);
    }
    const double inv = 1.0 / a[col * n + col];
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col] * inv;
      if (f == 0.0) continue;
      for (int c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  for (int i = 0; i < n; ++i) b[i] /= a[i * n + i];
  return true;
}

Homography homography(const Quad& src, const Quad& dst) {
  double a[64] = {0};
  double b[8];
  for (int i = 0; i < 4; ++i) {
    const double x = src[i].x, y = src[i].y;
    const double u = dst[i].x, v = dst[i].y;
    double* r0 = a + (2 * i) * 8;
    double* r1 = a + (2 * i + 1) * 8;
    r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y;
    r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y;
    b[2 * i] = u;
    b[2 * i + 1] = v;
  }
  if (!solve_linear(8, a, b)) {
    throw std::invalid_argument("homography: degenerate quad");
  }
  Homography h;
  for (int i = 0; i < 8; ++i) h.m[i] = b[i];
  h.m[8] = 1.0;
  return h;
}

Quad patch_rect(int pw, int ph) {
  return Quad{Vec2{0.0, 0.0}, Vec2{static_cast<double>(pw), 0.0},
              Vec2{static_cast<double>(pw), static_cast<double>(ph)},
              Vec2{0.0, static_cast<double>(ph)}};
}

bool quad_inside_image(const Quad& q, int w, int h) {
  for (const Vec2& c : q) {
    if (c.x < 0.0 || c.x > w || c.y < 0.0 || c.y > h) return false;
  }
  return quad_convex(q);
}

}  // namespace

Grid make_disguise_rosette() {
  Grid g({kPatchSize, kPatchSize, 3});
  for (int y = 0; y < kPatchSize; ++y) {
    for (int x = 0; x < kPatchSize; ++x) {
      const double nx = (x + 0.5) / kPatchSize * 2.0 - 1.0;
      const double ny = (y + 0.5) / kPatchSize * 2.0 - 1.0;
      const double rr = std::sqrt(nx * nx + ny * ny);
      const double th = std::atan2(ny, nx);
      const double rim = 0.74 + 0.10 * std::cos(8.0 * th);
      double r, gg, b;
      if (rr <= 0.18) {
        r = 0.86; gg = 0.70; b = 0.24;  // stamen
      } else if (rr <= rim) {
        const double t = rr / rim;
        r = 0.82 - 0.26 * t;
        gg = 0.10 - 0.06 * t;
        b = 0.10 - 0.04 * t;
        if (std::abs(std::sin(4.0 * th)) > 0.97) {  // petal seams
          r *= 0.80; gg *= 0.80; b *= 0.80;
        }
      } else {
        r = 0.88; gg = 0.91; b = 0.86;  // pale backdrop
      }
      g.at(y, x, 0) = r;
      g.at(y, x, 1) = gg;
      g.at(y, x, 2) = b;
    }
  }
  return g;
}

Quad transform_quad(const TransformSample& t, int image_w, int /*image_h*/) {
  const double side = t.scale * image_w;
  const double a = side / 2.0;
  const double c = std::cos(t.rotation), s = std::sin(t.rotation);
  const Vec2 base[4] = {{-a, -a}, {a, -a}, {a, a}, {-a, a}};
  Quad q;
  for (int i = 0; i < 4; ++i) {
    const double rx = base[i].x * c - base[i].y * s;
    const double ry = base[i].x * s + base[i].y * c;
    q[i] = {t.cx + rx + t.corner_jitter[i].x * side,
            t.cy + ry + t.corner_jitter[i].y * side};
  }
  return q;
}

TransformSample sample_transform(Rng& rng, const TransformRanges& ranges,
                                 int image_w, int image_h) {
  if (ranges.scale_min > ranges.scale_max || ranges.scale_min <= 0.0) {
    throw std::invalid_argument("sample_transform: bad scale range");
  }
  const double rot_max = ranges.rot_max_deg * kPi / 180.0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    TransformSample t;
    t.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
    t.rotation = rng.uniform(-rot_max, rot_max);
    t.cx = rng.uniform(0.0, image_w);
    t.cy = rng.uniform(0.0, image_h);
    for (int i = 0; i < 4; ++i) {
      t.corner_jitter[i] = {rng.uniform(-ranges.jitter_frac, ranges.jitter_frac),
                            rng.uniform(-ranges.jitter_frac, ranges.jitter_frac)};
    }
    if (quad_inside_image(transform_quad(t, image_w, image_h), image_w,
                          image_h)) {
      return t;
    }
  }
  throw std::invalid_argument(
      "sample_transform: no contained quad after 100 attempts; ranges too "
      "large for the image");
}

WarpPlan plan_warp(const Quad& quad, int image_w, int image_h, int patch_w,
                   int patch_h) {
  const Homography inv = homography(quad, patch_rect(patch_w, patch_h));
  WarpPlan plan;
  const Box bb = quad_bbox(quad);
  const int x_lo = std::max(0, static_cast<int>(std::floor(bb.x0())));
  const int x_hi = std::min(image_w - 1, static_cast<int>(std::ceil(bb.x1())));
  const int y_lo = std::max(0, static_cast<int>(std::floor(bb.y0())));
  const int y_hi = std::min(image_h - 1, static_cast<int>(std::ceil(bb.y1())));
  std::vector<double> coord_data;
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const double u = x + 0.5, v = y + 0.5;
      if (!quad_contains(quad, u, v)) continue;
      const Vec2 p = inv.map(u, v);
      plan.pixels.push_back(y * image_w + x);
      coord_data.push_back(std::clamp(p.x - 0.5, 0.0, patch_w - 1.0));
      coord_data.push_back(std::clamp(p.y - 0.5, 0.0, patch_h - 1.0));
    }
  }
  plan.coords = Grid({std::max<std::size_t>(plan.pixels.size(), 1), 2});
  if (!plan.pixels.empty()) {
    plan.coords = Grid({plan.pixels.size(), 2});
    std::copy(coord_data.begin(), coord_data.end(), plan.coords.data.begin());
  }
  return plan;
}

AppliedPatch apply_patch(const Grid& image, const Grid& patch_pixels,
                         const TransformSample& t) {
  const int h = static_cast<int>(image.shape[0]);
  const int w = static_cast<int>(image.shape[1]);
  const Quad quad = transform_quad(t, w, h);
  if (!quad_inside_image(quad, w, h)) {
    throw std::invalid_argument("apply_patch: quad outside the image");
  }
  const int ph = static_cast<int>(patch_pixels.shape[0]);
  const int pw = static_cast<int>(patch_pixels.shape[1]);
  const WarpPlan plan = plan_warp(quad, w, h, pw, ph);

  AppliedPatch out;
  out.quad = quad;
  out.image = image;
  for (std::size_t i = 0; i < plan.pixels.size(); ++i) {
    const double cx = plan.coords.at(i, 0);
    const double cy = plan.coords.at(i, 1);
    const int x0 = std::min(static_cast<int>(cx), pw - 2);
    const int y0 = std::min(static_cast<int>(cy), ph - 2);
    const double fx = cx - x0, fy = cy - y0;
    const std::size_t pix = static_cast<std::size_t>(plan.pixels[i]);
    for (int c = 0; c < 3; ++c) {
      const double v =
          (1 - fy) * ((1 - fx) * patch_pixels.at(y0, x0, c) +
                      fx * patch_pixels.at(y0, x0 + 1, c)) +
          fy * ((1 - fx) * patch_pixels.at(y0 + 1, x0, c) +
                fx * patch_pixels.at(y0 + 1, x0 + 1, c));
      out.image.data[pix * 3 + c] = v;
    }
  }
  return out;
}

NodeId apply_patch_node(Graph& g, NodeId base_image, NodeId patch,
                        const WarpPlan& plan) {
  const NodeId coords = g.input("coords", plan.coords.shape);
  const NodeId samples = g.bilinear_sample(patch, coords);
  return g.composite(base_image, samples, plan.pixels);
}

AdvTargets build_adv_targets(const Quad& quad, ObjectClass target) {
  AdvTargets t;
  const Box bb = quad_bbox(quad);
  const double img = detector::kImageSize;
  for (int i = 0; i < detector::kGridSize; ++i) {
    for (int j = 0; j < detector::kGridSize; ++j) {
      t.col_cells.at(0, i, j) = j;
      t.row_cells.at(0, i, j) = i;
      t.ones1.at(0, i, j) = 1.0;
      t.onehot.at(static_cast<int>(target), i, j) = 1.0;
      t.qx.at(0, i, j) = bb.cx / img;
      t.qy.at(0, i, j) = bb.cy / img;
      t.qw.at(0, i, j) = bb.w / img;
      t.qh.at(0, i, j) = bb.h / img;
      const double cx = (j + 0.5) * detector::kCellSize;
      const double cy = (i + 0.5) * detector::kCellSize;
      if (quad_contains(quad, cx, cy)) {
        t.mask1.at(0, i, j) = 1.0;
        t.mask.at(i, j) = 1.0;
        ++t.covered;
      }
    }
  }
  if (t.covered == 0) {
    throw std::invalid_argument(
        "adversarial_loss: patch quad covers no grid cell centers");
  }
  return t;
}

NodeId adversarial_loss_node(Graph& g, const detector::TrunkNodes& trunk,
                             const LossWeights& w, int covered_cells) {
  const int gs = detector::kGridSize;
  const NodeId mask1 = g.input("adv_mask1", {1, gs, gs});
  const NodeId mask = g.input("adv_mask", {gs, gs});
  const NodeId onehot = g.input("adv_onehot", {detector::kNumClasses, gs, gs});
  const NodeId ones1 = g.input("adv_ones1", {1, gs, gs});
  const NodeId col_cells = g.input("adv_col", {1, gs, gs});
  const NodeId row_cells = g.input("adv_row", {1, gs, gs});
  const NodeId qx = g.input("adv_qx", {1, gs, gs});
  const NodeId qy = g.input("adv_qy", {1, gs, gs});
  const NodeId qw = g.input("adv_qw", {1, gs, gs});
  const NodeId qh = g.input("adv_qh", {1, gs, gs});

  const double inv_n = 1.0 / covered_cells;

  const NodeId conf = g.sum(
      g.mul(mask1, g.bce(g.sigmoid(trunk.obj_logits), ones1)));
  const NodeId cls = g.sum(
      g.mul(mask, g.softmax_xent_map(trunk.cls_logits, onehot)));

  // Decoded box in image-normalized units vs the quad bounding box.
  const NodeId tx = g.slice_channels(trunk.box_params, 0, 1);
  const NodeId ty = g.slice_channels(trunk.box_params, 1, 2);
  const NodeId tw = g.slice_channels(trunk.box_params, 2, 3);
  const NodeId th = g.slice_channels(trunk.box_params, 3, 4);
  const double gsd = gs;
  const NodeId bx = g.affine(g.add(col_cells, g.sigmoid(tx)), 1.0 / gsd, 0.0);
  const NodeId by = g.affine(g.add(row_cells, g.sigmoid(ty)), 1.0 / gsd, 0.0);
  const NodeId bw =
      g.affine(g.exp_cap(tw, detector::kImageSize), 1.0 / detector::kImageSize, 0.0);
  const NodeId bh =
      g.affine(g.exp_cap(th, detector::kImageSize), 1.0 / detector::kImageSize, 0.0);

  auto se_term = [&](NodeId pred, NodeId tgt) {
    const NodeId d = g.add(pred, g.scale(tgt, -1.0));
    return g.sum(g.mul(mask1, g.mul(d, d)));
  };
  const NodeId box = g.add(g.add(se_term(bx, qx), se_term(by, qy)),
                           g.add(se_term(bw, qw), se_term(bh, qh)));

  return g.add(g.add(g.scale(conf, w.lambda_conf * inv_n),
                     g.scale(cls, w.lambda_cls * inv_n)),
               g.scale(box, w.lambda_box * inv_n));
}

void bind_adv_targets(diffgrid::Bindings& b, const AdvTargets& t) {
  b["adv_mask1"] = t.mask1;
  b["adv_mask"] = t.mask;
  b["adv_onehot"] = t.onehot;
  b["adv_ones1"] = t.ones1;
  b["adv_col"] = t.col_cells;
  b["adv_row"] = t.row_cells;
  b["adv_qx"] = t.qx;
  b["adv_qy"] = t.qy;
  b["adv_qw"] = t.qw;
  b["adv_qh"] = t.qh;
}

namespace {

struct RawLossGraph {
  Graph g;
  NodeId raw;
  NodeId loss;
};

RawLossGraph build_raw_loss(const LossWeights& w, int covered) {
  RawLossGraph r;
  r.raw = r.g.input("raw", {detector::kGridSize, detector::kGridSize,
                            detector::kRawChannels});
  detector::TrunkNodes trunk;
  trunk.raw_hwc = r.raw;
  trunk.raw_chw = r.g.hwc_to_chw(r.raw);
  trunk.obj_logits = r.g.slice_channels(trunk.raw_chw, 0, 1);
  trunk.cls_logits = r.g.slice_channels(trunk.raw_chw, 1, 3);
  trunk.box_params = r.g.slice_channels(trunk.raw_chw, 3, 7);
  r.loss = adversarial_loss_node(r.g, trunk, w, covered);
  return r;
}

}  // namespace

double adversarial_loss(const Grid& raw_hwc, const Quad& quad,
                        ObjectClass target, const LossWeights& w) {
  const AdvTargets t = build_adv_targets(quad, target);
  RawLossGraph r = build_raw_loss(w, t.covered);
  diffgrid::Bindings b;
  b["raw"] = raw_hwc;
  bind_adv_targets(b, t);
  return r.g.eval(b).value(r.loss).data[0];
}

double disguise_loss(const PatchTexture& patch) {
  double acc = 0.0;
  for (std::size_t i = 0; i < patch.pixels.numel(); ++i) {
    const double d = patch.pixels.data[i] - patch.disguise.data[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

double total_loss(const Grid& raw_hwc, const Quad& quad,
                  const PatchTexture& patch, const LossWeights& w,
                  ObjectClass target) {
  return adversarial_loss(raw_hwc, quad, target, w) +
         patch.k_disguise * disguise_loss(patch);
}

PatchTrainResult train_patch(const detector::DetectorParams& params,
                             const std::vector<Grid>& train_images,
                             const EotConfig& cfg) {
  if (train_images.empty()) {
    throw std::invalid_argument("train_patch: no training images");
  }
  PatchTrainResult res;
  res.patch.disguise = make_disguise_rosette();
  res.patch.k_disguise = cfg.k_disguise;
  res.patch.pixels = cfg.init_gray
                         ? Grid({kPatchSize, kPatchSize, 3}, 0.5)
                         : res.patch.disguise;
  if (cfg.steps <= 0) return res;

  const LossWeights weights{cfg.lambda_cls, cfg.lambda_conf, cfg.lambda_box};
  Rng rng(Rng::derive(cfg.seed, 0xEA7ull));
  const int img = detector::kImageSize;

  for (int step = 0; step < cfg.steps; ++step) {
    Grid grad_sum({kPatchSize, kPatchSize, 3});
    double loss_sum = 0.0;
    bool bad = false;
    for (int bi = 0; bi < cfg.batch && !bad; ++bi) {
      const int image_idx = rng.uniform_int(static_cast<int>(train_images.size()));
      TransformSample t;
      try {
        t = sample_transform(rng, cfg.ranges, img, img);
      } catch (const std::invalid_argument&) {
        throw;  // bad config, not divergence
      }
      const Quad quad = transform_quad(t, img, img);
      const WarpPlan plan = plan_warp(quad, img, img, kPatchSize, kPatchSize);
      AdvTargets targets;
      targets = build_adv_targets(quad, cfg.target);

      Graph g;
      const NodeId patch_in = g.input("patch", {kPatchSize, kPatchSize, 3}, true);
      const NodeId base = g.input("base", {img, img, 3});
      const NodeId disguise_in = g.input("disguise", {kPatchSize, kPatchSize, 3});
      const NodeId patched = apply_patch_node(g, base, patch_in, plan);
      const detector::TrunkNodes trunk = detector::append_trunk(g, patched);
      const NodeId adv = adversarial_loss_node(g, trunk, weights, targets.covered);
      const NodeId disg = g.sqrt_of(g.squared_error(patch_in, disguise_in));
      const NodeId total = g.add(adv, g.scale(disg, cfg.k_disguise));

      diffgrid::Bindings b;
      b["patch"] = res.patch.pixels;
      b["base"] = train_images[image_idx];
      b["disguise"] = res.patch.disguise;
      b["coords"] = plan.coords;
      detector::bind_params(b, params);
      bind_adv_targets(b, targets);

      try {
        diffgrid::GradResult gr = g.grad(total, {"patch"}, b);
        loss_sum += gr.scalar_value;
        const Grid& pg = gr.leaf_grads["patch"];
        for (std::size_t i = 0; i < grad_sum.numel(); ++i) {
          grad_sum.data[i] += pg.data[i];
        }
      } catch (const diffgrid::GraphError&) {
        bad = true;
      }
    }
    if (bad || !std::isfinite(loss_sum)) {
      res.diverged = true;
      break;
    }
    const double inv_batch = 1.0 / cfg.batch;
    for (std::size_t i = 0; i < grad_sum.numel(); ++i) {
      double upd = cfg.lr * grad_sum.data[i] * inv_batch;
      upd = std::clamp(upd, -cfg.step_clip, cfg.step_clip);
      res.patch.pixels.data[i] =
          std::clamp(res.patch.pixels.data[i] - upd, 0.0, 1.0);
    }
    res.loss_curve.push_back(loss_sum * inv_batch);
  }
  return res;
}

std::pair<Grid, Grid> split_patch(const Grid& patch_pixels) {
  if (patch_pixels.rank() != 3 || patch_pixels.shape[2] != 3) {
    throw std::invalid_argument("split_patch: expects {H,W,3}");
  }
  const std::size_t h = patch_pixels.shape[0];
  const std::size_t w = patch_pixels.shape[1];
  if (w % 2 != 0) {
    throw std::invalid_argument("split_patch: width must be even");
  }
  Grid left({h, w / 2, 3});
  Grid right({h, w / 2, 3});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w / 2; ++x) {
      for (int c = 0; c < 3; ++c) {
        left.data[(y * (w / 2) + x) * 3 + c] = patch_pixels.at(y, x, c);
        right.data[(y * (w / 2) + x) * 3 + c] = patch_pixels.at(y, x + w / 2, c);
      }
    }
  }
  return {left, right};
}

ModelEval eval_model_level(const detector::DetectorParams& params,
                           const Grid& patch_pixels,
                           const std::vector<Grid>& test_images,
                           int trials_per_image, double overlap_iou,
                           std::uint64_t seed, const TransformRanges& ranges,
                           double score_thr, double nms_iou,
                           bool overlap_filter) {
  if (test_images.empty()) {
    throw std::invalid_argument("eval_model_level: empty test set");
  }
  ModelEval out;
  int successes = 0;
  const int img = detector::kImageSize;
  for (int ii = 0; ii < static_cast<int>(test_images.size()); ++ii) {
    for (int trial = 0; trial < trials_per_image; ++trial) {
      const std::uint64_t trial_index =
          static_cast<std::uint64_t>(ii) * trials_per_image + trial;
      Rng rng(Rng::derive(seed, trial_index));
      const TransformSample t = sample_transform(rng, ranges, img, img);
      const AppliedPatch applied = apply_patch(test_images[ii], patch_pixels, t);
      const Box patch_box = quad_bbox(applied.quad);
      const auto dets =
          detector::decode(detector::forward(params, applied.image), score_thr,
                           nms_iou);
      TrialOutcome o;
      o.image_id = ii;
      o.trial = trial;
      for (const auto& d : dets) {
        if (d.cls != ObjectClass::kStopSign) continue;
        const double v = iou(d.box, patch_box);
        if (v > o.best_iou || (v == o.best_iou && d.score > o.best_score)) {
          o.best_iou = v;
          o.best_score = d.score;
        }
        if (overlap_filter ? v >= overlap_iou : true) o.success = true;
      }
      if (o.success) ++successes;
      out.outcomes.push_back(o);
    }
  }
  out.asr = static_cast<double>(successes) /
            static_cast<double>(out.outcomes.size());
  return out;
}

void write_outcomes_csv(const std::string& path,
                        const std::vector<TrialOutcome>& outcomes) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_outcomes_csv: cannot open " + path);
  f << "image_id,trial,success,best_iou,best_score\n";
  char line[160];
  for (const TrialOutcome& o : outcomes) {
    std::snprintf(line, sizeof(line), "%d,%d,%d,%.17g,%.17g\n", o.image_id,
                  o.trial, o.success ? 1 : 0, o.best_iou, o.best_score);
    f << line;
  }
}

}  // namespace patchsim::patchforge
