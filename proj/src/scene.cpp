#include "patchsim/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace patchsim::scene {

namespace {

constexpr double kNearPlane = 0.1;
constexpr int kMinLabelPixels = 16;

struct Frame {
  Vec3 eye;
  Vec3 fwd, right, up;
  double focal;
  int w, h;
};

Frame make_frame(const Camera& cam) {
  Frame f;
  f.eye = cam.position;
  const double c = std::cos(cam.yaw), s = std::sin(cam.yaw);
  f.fwd = {s, c, 0.0};
  f.right = {c, -s, 0.0};
  f.up = {0.0, 0.0, 1.0};
  f.focal = cam.focal;
  f.w = cam.width;
  f.h = cam.height;
  return f;
}

// Ray through the center of pixel (px, py); forward component is 1 so the
// ray parameter equals camera depth.
Vec3 pixel_ray(const Frame& f, double u, double v) {
  const double rc = (u - f.w / 2.0) / f.focal;
  const double uc = (f.h / 2.0 - v) / f.focal;
  return {f.right.x * rc + f.up.x * uc + f.fwd.x,
          f.right.y * rc + f.up.y * uc + f.fwd.y,
          f.right.z * rc + f.up.z * uc + f.fwd.z};
}

double dot(const Vec3& a, const Vec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

Color lerp(const Color& a, const Color& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

const std::vector<Palette>& palettes() {
  static const std::vector<Palette> p = {
      // Town 1: temperate suburb
      {{0.44, 0.66, 0.92}, {0.82, 0.88, 0.94}, {0.42, 0.52, 0.33},
       {0.62, 0.60, 0.58}, {0.30, 0.30, 0.32},
       {{0.73, 0.68, 0.58}, {0.58, 0.54, 0.50}, {0.66, 0.61, 0.48}},
       {{0.25, 0.41, 0.63}, {0.28, 0.52, 0.36}, {0.62, 0.60, 0.28}, {0.45, 0.45, 0.48}},
       0.55},
      // Town 2: cool overcast
      {{0.55, 0.62, 0.72}, {0.80, 0.82, 0.85}, {0.40, 0.45, 0.38},
       {0.58, 0.58, 0.57}, {0.27, 0.27, 0.29},
       {{0.52, 0.56, 0.60}, {0.47, 0.50, 0.55}, {0.60, 0.62, 0.63}},
       {{0.20, 0.45, 0.50}, {0.35, 0.38, 0.30}, {0.16, 0.22, 0.40}, {0.80, 0.80, 0.78}},
       0.45},
      // Town 3: warm afternoon
      {{0.52, 0.68, 0.85}, {0.93, 0.88, 0.78}, {0.50, 0.48, 0.30},
       {0.64, 0.61, 0.56}, {0.33, 0.32, 0.31},
       {{0.76, 0.66, 0.52}, {0.69, 0.58, 0.44}, {0.61, 0.57, 0.53}},
       {{0.30, 0.35, 0.55}, {0.25, 0.50, 0.45}, {0.70, 0.65, 0.35}, {0.35, 0.35, 0.35}},
       0.60},
      // Town 4: bright coastal
      {{0.35, 0.62, 0.90}, {0.78, 0.90, 0.96}, {0.55, 0.58, 0.42},
       {0.68, 0.67, 0.64}, {0.31, 0.31, 0.34},
       {{0.85, 0.83, 0.78}, {0.70, 0.73, 0.74}, {0.62, 0.66, 0.70}},
       {{0.22, 0.55, 0.60}, {0.30, 0.30, 0.45}, {0.55, 0.58, 0.25}, {0.85, 0.85, 0.82}},
       0.50},
      // Town 5: dry inland
      {{0.58, 0.70, 0.82}, {0.88, 0.85, 0.72}, {0.52, 0.44, 0.28},
       {0.61, 0.58, 0.52}, {0.29, 0.28, 0.27},
       {{0.72, 0.62, 0.46}, {0.57, 0.50, 0.40}, {0.65, 0.60, 0.42}},
       {{0.40, 0.42, 0.25}, {0.22, 0.38, 0.52}, {0.60, 0.55, 0.40}, {0.30, 0.42, 0.32}},
       0.65},
  };
  return p;
}

struct TapSet {
  int count = 0;
  TexelWeight taps[4];
};

// Maps (s, r) in the billboard rectangle to a texel-center coordinate in the
// referenced region of the patch texture and samples it bilinearly.
bool sample_patch_region(const Billboard& bb, PatchTextureRef patch, double s,
                         double r, Color& out, TapSet* taps) {
  const Grid* tex = bb.patch_source == PatchSource::kAdversarial
                        ? patch.adversarial
                        : patch.disguise;
  if (tex == nullptr) return false;
  const int th = static_cast<int>(tex->shape[0]);
  const int tw = static_cast<int>(tex->shape[1]);
  double x0 = 0.0, x1 = tw - 1.0;
  if (bb.patch_region == PatchRegion::kLeftHalf) {
    x1 = tw / 2 - 1.0;
  } else if (bb.patch_region == PatchRegion::kRightHalf) {
    x0 = tw / 2;
  }
  const double tx = x0 + s * (x1 - x0);
  const double ty = (1.0 - r) * (th - 1.0);
  const int ix0 = std::min(static_cast<int>(tx), tw - 2);
  const int iy0 = std::min(static_cast<int>(ty), th - 2);
  const double fx = tx - ix0, fy = ty - iy0;
  const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy);
  const double w10 = (1 - fx) * fy, w11 = fx * fy;
  const double* d = tex->data.data();
  auto texel = [&](int y, int x) { return (y * tw + x) * 3; };
  const int i00 = texel(iy0, ix0), i01 = texel(iy0, ix0 + 1);
  const int i10 = texel(iy0 + 1, ix0), i11 = texel(iy0 + 1, ix0 + 1);
  out.r = w00 * d[i00] + w01 * d[i01] + w10 * d[i10] + w11 * d[i11];
  out.g = w00 * d[i00 + 1] + w01 * d[i01 + 1] + w10 * d[i10 + 1] + w11 * d[i11 + 1];
  out.b = w00 * d[i00 + 2] + w01 * d[i01 + 2] + w10 * d[i10 + 2] + w11 * d[i11 + 2];
  if (taps != nullptr && bb.patch_source == PatchSource::kAdversarial) {
    taps->count = 4;
    taps->taps[0] = {0, iy0 * tw + ix0, w00};
    taps->taps[1] = {0, iy0 * tw + ix0 + 1, w01};
    taps->taps[2] = {0, (iy0 + 1) * tw + ix0, w10};
    taps->taps[3] = {0, (iy0 + 1) * tw + ix0 + 1, w11};
  }
  return true;
}

// Procedural surface color at billboard-local (s, r), both in [0,1].
// Returns false for transparent texels (e.g. outside the sign octagon).
bool shade(const Billboard& bb, PatchTextureRef patch, double s, double r,
           Color& out, TapSet* taps) {
  switch (bb.motif) {
    case Motif::kFlat:
      out = bb.base;
      return true;
    case Motif::kPole:
      out = {0.42, 0.43, 0.44};
      return true;
    case Motif::kBuilding: {
      out = bb.base;
      const int fx = 3 + (bb.motif_seed % 3);
      const int fy = 3 + ((bb.motif_seed / 3) % 4);
      const double us = s * fx, vs = r * fy;
      const double fu = us - std::floor(us), fv = vs - std::floor(vs);
      if (r < 0.10) {
        out = {bb.base.r * 0.55, bb.base.g * 0.55, bb.base.b * 0.55};
      } else if (fu > 0.25 && fu < 0.75 && fv > 0.30 && fv < 0.75) {
        const bool lit = ((static_cast<int>(us) * 7 + static_cast<int>(vs) * 13 +
                           bb.motif_seed) % 5) == 0;
        out = lit ? Color{0.55, 0.52, 0.38} : Color{0.14, 0.18, 0.24};
      }
      return true;
    }
    case Motif::kStopSign: {
      const double ds = s - 0.5, dr = r - 0.5;
      if (std::abs(ds) + std::abs(dr) > 0.7071) return false;  // octagon cut
      if (std::abs(ds) + std::abs(dr) > 0.62 || std::abs(ds) > 0.46 ||
          std::abs(dr) > 0.46) {
        out = {0.92, 0.92, 0.92};
      } else if (std::abs(dr) < 0.10 && std::abs(ds) < 0.32) {
        out = {0.95, 0.94, 0.93};
      } else {
        out = {0.72, 0.05, 0.07};
      }
      return true;
    }
    case Motif::kPedestrian: {
      if (bb.patch_source != PatchSource::kNone && s >= 0.05 && s <= 0.95 &&
          r >= 0.50 && r <= 0.75) {
        Color c;
        if (sample_patch_region(bb, patch, (s - 0.05) / 0.90,
                                (r - 0.50) / 0.25, c, taps)) {
          out = c;
          return true;
        }
      }
      if (r > 0.80) {  // head
        if (std::abs(s - 0.5) > 0.13 || r > 0.98) return false;
        out = r > 0.94 ? Color{0.22, 0.16, 0.12} : Color{0.82, 0.64, 0.50};
        return true;
      }
      if (r >= 0.42) {  // torso and arms
        if (std::abs(s - 0.5) > 0.45) return false;
        out = bb.base;
        return true;
      }
      // legs
      if (std::abs(s - 0.31) <= 0.105 || std::abs(s - 0.69) <= 0.105) {
        out = r < 0.05 ? Color{0.12, 0.10, 0.10} : Color{0.21, 0.21, 0.26};
        return true;
      }
      return false;
    }
  }
  return false;
}

Color background_color(const SceneWorld& world, const Frame& f, double u,
                       double v) {
  const Palette& pal = town_palette(world.town_preset);
  const Vec3 dir = pixel_ray(f, u, v);
  if (dir.z < -1e-9 && f.eye.z > 0.0) {
    const double t = -f.eye.z / dir.z;
    const double hx = f.eye.x + dir.x * t;
    const double hy = f.eye.y + dir.y * t;
    const Road& rd = world.road;
    const bool cross = hy >= rd.intersection && hy <= rd.intersection + 2.6 &&
                       std::abs(hx) <= rd.half_width + 2.0 * rd.pavement_width + 9.0;
    if (std::abs(hx) <= rd.half_width || cross) {
      if (!cross && std::abs(hx) < 0.05 &&
          (static_cast<long long>(std::floor(hy / 2.0)) % 2) == 0) {
        return {0.85, 0.85, 0.82};
      }
      return pal.road;
    }
    if (std::abs(hx) <= rd.half_width + rd.pavement_width) return pal.pavement;
    return pal.ground;
  }
  const double k = std::clamp((f.h / 2.0 - v) / (f.h / 2.0), 0.0, 1.0);
  return lerp(pal.sky_horizon, pal.sky_top, k);
}

struct BillboardGeom {
  Vec3 corner0;  // bottom, s = 0 side
  Vec3 tangent;  // unit, s direction (image-left to image-right when facing)
  Vec3 normal;
  bool valid;
};

BillboardGeom billboard_geom(const Billboard& bb) {
  BillboardGeom g;
  g.normal = {bb.facing.x, bb.facing.y, 0.0};
  const double n = std::hypot(bb.facing.x, bb.facing.y);
  g.valid = n > 1e-9;
  if (!g.valid) return g;
  g.normal.x /= n;
  g.normal.y /= n;
  g.tangent = {-g.normal.y, g.normal.x, 0.0};
  g.corner0 = {bb.center.x - g.tangent.x * bb.width / 2.0,
               bb.center.y - g.tangent.y * bb.width / 2.0,
               bb.center.z - bb.height / 2.0};
  return g;
}

}  // namespace

ProjectedPoint project_point(const Camera& cam, const Vec3& p) {
  const Frame f = make_frame(cam);
  const Vec3 rel{p.x - f.eye.x, p.y - f.eye.y, p.z - f.eye.z};
  ProjectedPoint out;
  out.depth = dot(rel, f.fwd);
  if (out.depth <= kNearPlane) {
    out.behind = true;
    return out;
  }
  const double xc = dot(rel, f.right);
  const double yc = dot(rel, f.up);
  out.u = f.focal * xc / out.depth + f.w / 2.0;
  out.v = f.focal * (-yc) / out.depth + f.h / 2.0;
  return out;
}

const Palette& town_palette(int preset) {
  if (preset < 1 || preset > 5) {
    throw std::invalid_argument("town preset must be in 1..5");
  }
  return palettes()[static_cast<std::size_t>(preset - 1)];
}

RenderOutput render(const SceneWorld& world, const Camera& cam,
                    PatchTextureRef patch, bool want_texel_weights) {
  const Frame f = make_frame(cam);
  const int W = f.w, H = f.h;
  RenderOutput out;
  out.image = Grid({static_cast<std::size_t>(H), static_cast<std::size_t>(W), 3});

  for (int py = 0; py < H; ++py) {
    for (int px = 0; px < W; ++px) {
      const Color c = background_color(world, f, px + 0.5, py + 0.5);
      double* p = &out.image.data[(py * W + px) * 3];
      p[0] = c.r;
      p[1] = c.g;
      p[2] = c.b;
    }
  }

  const int nb = static_cast<int>(world.billboards.size());
  std::vector<int> order(nb);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const Vec3 da{world.billboards[a].center.x - f.eye.x,
                  world.billboards[a].center.y - f.eye.y,
                  world.billboards[a].center.z - f.eye.z};
    const Vec3 db{world.billboards[b].center.x - f.eye.x,
                  world.billboards[b].center.y - f.eye.y,
                  world.billboards[b].center.z - f.eye.z};
    return norm(da) > norm(db);
  });

  std::vector<int> owner(static_cast<std::size_t>(W) * H, -1);
  std::vector<TapSet> taps;
  if (want_texel_weights) taps.resize(static_cast<std::size_t>(W) * H);

  struct Coverage {
    int count = 0;
    int min_x = 0, max_x = 0, min_y = 0, max_y = 0;
    double depth = 0.0;
  };
  std::vector<Coverage> coverage(nb);

  for (int oi = 0; oi < nb; ++oi) {
    const int bi = order[oi];
    const Billboard& bb = world.billboards[bi];
    const BillboardGeom g = billboard_geom(bb);
    if (!g.valid) continue;

    // Pixel bounds from projected corners; conservative when any corner is
    // near or behind the camera.
    int x_lo = 0, x_hi = W - 1, y_lo = 0, y_hi = H - 1;
    bool any_front = false, all_front = true;
    double umin = 1e18, umax = -1e18, vmin = 1e18, vmax = -1e18;
    for (int k = 0; k < 4; ++k) {
      const double su = (k == 1 || k == 2) ? 1.0 : 0.0;
      const double rv = (k >= 2) ? 1.0 : 0.0;
      const Vec3 corner{g.corner0.x + g.tangent.x * bb.width * su,
                        g.corner0.y + g.tangent.y * bb.width * su,
                        g.corner0.z + bb.height * rv};
      const ProjectedPoint pp = project_point(cam, corner);
      if (pp.behind) {
        all_front = false;
        continue;
      }
      any_front = true;
      umin = std::min(umin, pp.u);
      umax = std::max(umax, pp.u);
      vmin = std::min(vmin, pp.v);
      vmax = std::max(vmax, pp.v);
    }
    if (!any_front) continue;
    if (all_front) {
      x_lo = std::max(0, static_cast<int>(std::floor(umin)) - 1);
      x_hi = std::min(W - 1, static_cast<int>(std::ceil(umax)) + 1);
      y_lo = std::max(0, static_cast<int>(std::floor(vmin)) - 1);
      y_hi = std::min(H - 1, static_cast<int>(std::ceil(vmax)) + 1);
    }
    if (x_lo > x_hi || y_lo > y_hi) continue;

    Coverage& cov = coverage[bi];
    const Vec3 rel{bb.center.x - f.eye.x, bb.center.y - f.eye.y,
                   bb.center.z - f.eye.z};
    cov.depth = norm(rel);

    for (int py = y_lo; py <= y_hi; ++py) {
      for (int px = x_lo; px <= x_hi; ++px) {
        const Vec3 dir = pixel_ray(f, px + 0.5, py + 0.5);
        const double denom = dot(g.normal, dir);
        if (std::abs(denom) < 1e-12) continue;
        const Vec3 toC{bb.center.x - f.eye.x, bb.center.y - f.eye.y,
                       bb.center.z - f.eye.z};
        const double t = dot(g.normal, toC) / denom;
        if (t < kNearPlane) continue;
        const Vec3 hit{f.eye.x + dir.x * t, f.eye.y + dir.y * t,
                       f.eye.z + dir.z * t};
        const Vec3 d0{hit.x - g.corner0.x, hit.y - g.corner0.y,
                      hit.z - g.corner0.z};
        const double s = dot(d0, g.tangent) / bb.width;
        const double r = d0.z / bb.height;
        if (s < 0.0 || s > 1.0 || r < 0.0 || r > 1.0) continue;

        if (cov.count == 0) {
          cov.min_x = cov.max_x = px;
          cov.min_y = cov.max_y = py;
        } else {
          cov.min_x = std::min(cov.min_x, px);
          cov.max_x = std::max(cov.max_x, px);
          cov.min_y = std::min(cov.min_y, py);
          cov.max_y = std::max(cov.max_y, py);
        }
        ++cov.count;

        Color c;
        TapSet local;
        TapSet* sink = want_texel_weights ? &local : nullptr;
        if (!shade(bb, patch, s, r, c, sink)) continue;
        const std::size_t pix = static_cast<std::size_t>(py) * W + px;
        out.image.data[pix * 3 + 0] = c.r;
        out.image.data[pix * 3 + 1] = c.g;
        out.image.data[pix * 3 + 2] = c.b;
        owner[pix] = bi;
        if (want_texel_weights) {
          taps[pix] = local;
          for (int k = 0; k < taps[pix].count; ++k) {
            taps[pix].taps[k].pixel = static_cast<int>(pix);
          }
        }
      }
    }
  }

  // Visibility for labels: un-occluded opaque pixels.
  std::vector<int> owned(nb, 0);
  for (int v : owner) {
    if (v >= 0) ++owned[v];
  }
  for (int bi = 0; bi < nb; ++bi) {
    const Billboard& bb = world.billboards[bi];
    if (!bb.label || owned[bi] < kMinLabelPixels) continue;
    const Coverage& cov = coverage[bi];
    if (cov.count == 0) continue;
    SceneLabel lab;
    lab.cls = *bb.label;
    lab.box = Box::from_corners(cov.min_x, cov.min_y, cov.max_x + 1.0,
                                cov.max_y + 1.0);
    lab.depth = cov.depth;
    out.labels.push_back(lab);
  }

  if (want_texel_weights) {
    for (const TapSet& t : taps) {
      for (int k = 0; k < t.count; ++k) {
        if (t.taps[k].weight != 0.0) out.texel_weights.push_back(t.taps[k]);
      }
    }
  }
  return out;
}

SceneWorld sample_town(std::uint64_t seed, int town_preset) {
  const Palette& pal = town_palette(town_preset);
  Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(town_preset) * 0x9e3779b9ull));
  SceneWorld w;
  w.town_preset = town_preset;
  w.road.half_width = 1.0;
  w.road.pavement_width = 1.4;
  w.road.length = 120.0;
  w.road.intersection = rng.uniform(12.0, 20.0);

  // Stage-flat buildings along both sides.
  const int nb = 5 + rng.uniform_int(4);
  for (int i = 0; i < nb; ++i) {
    Billboard b;
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    b.width = rng.uniform(4.0, 8.0);
    b.height = rng.uniform(3.5, 8.0);
    b.center = {side * rng.uniform(5.0, 11.0), rng.uniform(6.0, 60.0),
                b.height / 2.0};
    b.facing = {0.0, -1.0};
    b.motif = Motif::kBuilding;
    b.base = pal.building_tints[rng.uniform_int(
        static_cast<int>(pal.building_tints.size()))];
    b.motif_seed = static_cast<int>(rng.next_u64() % 1000);
    w.billboards.push_back(b);
  }

  // Pedestrians on the pavement, plain shirts.
  const double pu = rng.uniform();
  const int nped = pu < 0.15 ? 0 : pu < 0.50 ? 1 : pu < 0.80 ? 2 : 3;
  for (int i = 0; i < nped; ++i) {
    Billboard p;
    const double side = rng.uniform() < 0.72 ? 1.0 : -1.0;
    p.width = 0.5;
    p.height = 1.8;
    p.center = {side * rng.uniform(1.2, 2.2), rng.uniform(4.0, 30.0), 0.9};
    p.facing = {0.0, -1.0};
    p.motif = Motif::kPedestrian;
    p.base =
        pal.shirt_colors[rng.uniform_int(static_cast<int>(pal.shirt_colors.size()))];
    p.label = ObjectClass::kPedestrian;
    w.billboards.push_back(p);
  }

  // Genuine stop sign near the intersection, preset-specific frequency.
  if (rng.uniform() < pal.sign_freq) {
    const double side = rng.uniform() < 0.85 ? 1.0 : -1.0;
    const double sx = side * rng.uniform(1.05, 1.55);
    const double sy = w.road.intersection + rng.uniform(-1.5, 0.5);
    Billboard pole;
    pole.width = 0.07;
    pole.height = 1.2;
    pole.center = {sx, sy, 0.6};
    pole.facing = {0.0, -1.0};
    pole.motif = Motif::kPole;
    w.billboards.push_back(pole);
    Billboard sign;
    sign.width = 0.6;
    sign.height = 0.6;
    sign.center = {sx, sy, 1.5};
    sign.facing = {0.0, -1.0};
    sign.motif = Motif::kStopSign;
    sign.label = ObjectClass::kStopSign;
    w.billboards.push_back(sign);
  }
  return w;
}

Camera sample_dataset_camera(Rng& rng) {
  Camera cam;
  cam.position = {rng.uniform(-0.8, 0.4), rng.uniform(0.0, 6.0), 1.6};
  cam.yaw = rng.uniform(-0.07, 0.07);
  cam.focal = 100.0;
  return cam;
}

double collusion_offset(const Camera& cam, Vec2 left_x_extent,
                        Vec2 right_x_extent, double right_depth) {
  const double cx = cam.position.x;
  const double cy = cam.position.y;
  const double denom = right_x_extent.x - cx;
  if (std::abs(denom) < 1e-9) {
    throw std::invalid_argument(
        "collusion_offset: right patch edge is on the camera axis");
  }
  const double left_depth =
      cy + (left_x_extent.y - cx) * (right_depth - cy) / denom;
  if (left_depth - cy <= kNearPlane) {
    throw std::invalid_argument(
        "collusion_offset: solved depth is at or behind the near plane");
  }
  return left_depth;
}

void write_ppm(const std::string& path, const Grid& image) {
  if (image.rank() != 3 || image.shape[2] != 3) {
    throw std::invalid_argument("write_ppm: image must be {H,W,3}");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  const int h = static_cast<int>(image.shape[0]);
  const int w = static_cast<int>(image.shape[1]);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
        row[x * 3 + c] = static_cast<unsigned char>(v * 255.0 + 0.5);
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size()));
  }
}

Grid read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: not a P6 file");
  int w = 0, h = 0, maxv = 0;
  f >> w >> h >> maxv;
  if (w <= 0 || h <= 0 || maxv != 255) {
    throw std::runtime_error("read_ppm: unsupported header");
  }
  f.get();  // single whitespace after header
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("read_ppm: truncated data");
  Grid img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
  for (std::size_t i = 0; i < buf.size(); ++i) {
    img.data[i] = buf[i] / 255.0;
  }
  return img;
}

void write_labels(const std::string& path,
                  const std::vector<SceneLabel>& labels, int image_w,
                  int image_h) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_labels: cannot open " + path);
  char line[160];
  for (const SceneLabel& l : labels) {
    std::snprintf(line, sizeof(line), "%d %.9f %.9f %.9f %.9f\n",
                  static_cast<int>(l.cls), l.box.cx / image_w,
                  l.box.cy / image_h, l.box.w / image_w, l.box.h / image_h);
    f << line;
  }
}

std::vector<SceneLabel> read_labels(const std::string& path, int image_w,
                                    int image_h) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_labels: cannot open " + path);
  std::vector<SceneLabel> out;
  int cls;
  double cx, cy, w, h;
  while (f >> cls >> cx >> cy >> w >> h) {
    SceneLabel l;
    l.cls = cls == 0 ? ObjectClass::kPedestrian : ObjectClass::kStopSign;
    l.box = {cx * image_w, cy * image_h, w * image_w, h * image_h};
    l.depth = 100.0 * 1.8 / std::max(1.0, l.box.h);  // height proxy
    out.push_back(l);
  }
  return out;
}

}  // namespace patchsim::scene
