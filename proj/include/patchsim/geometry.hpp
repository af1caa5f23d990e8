#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace patchsim {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

inline double norm(const Vec3& v) {
  return std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
}

enum class ObjectClass { kPedestrian = 0, kStopSign = 1 };

inline const char* class_name(ObjectClass c) {
  return c == ObjectClass::kPedestrian ? "pedestrian" : "stop-sign";
}

// Axis-aligned box in pixel space, center + size.
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  double x0() const { return cx - w / 2.0; }
  double x1() const { return cx + w / 2.0; }
  double y0() const { return cy - h / 2.0; }
  double y1() const { return cy + h / 2.0; }
  double area() const { return w * h; }

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return Box{(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0};
  }
};

inline double iou(const Box& a, const Box& b) {
  const double ix0 = std::max(a.x0(), b.x0());
  const double iy0 = std::max(a.y0(), b.y0());
  const double ix1 = std::min(a.x1(), b.x1());
  const double iy1 = std::min(a.y1(), b.y1());
  const double iw = std::max(0.0, ix1 - ix0);
  const double ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Convex quadrilateral in pixel space, corners in order.
using Quad = std::array<Vec2, 4>;

inline Box quad_bbox(const Quad& q) {
  double x0 = q[0].x, x1 = q[0].x, y0 = q[0].y, y1 = q[0].y;
  for (const Vec2& c : q) {
    x0 = std::min(x0, c.x);
    x1 = std::max(x1, c.x);
    y0 = std::min(y0, c.y);
    y1 = std::max(y1, c.y);
  }
  return Box::from_corners(x0, y0, x1, y1);
}

// Point-in-convex-polygon: the point must lie on the same side of all edges.
inline bool quad_contains(const Quad& q, double px, double py) {
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& a = q[i];
    const Vec2& b = q[(i + 1) % 4];
    const double cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
    if (cross == 0.0) continue;
    const int s = cross > 0.0 ? 1 : -1;
    if (sign == 0) {
      sign = s;
    } else if (s != sign) {
      return false;
    }
  }
  return true;
}

inline bool quad_convex(const Quad& q) {
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& a = q[i];
    const Vec2& b = q[(i + 1) % 4];
    const Vec2& c = q[(i + 2) % 4];
    const double cross =
        (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
    if (cross == 0.0) continue;
    const int s = cross > 0.0 ? 1 : -1;
    if (sign == 0) {
      sign = s;
    } else if (s != sign) {
      return false;
    }
  }
  return true;
}

}  // namespace patchsim
