#pragma once

#include <cmath>

#include "flowdet/errors.hpp"

namespace flowdet {

inline double wrap_angle(double a) {
  // normalize into (-pi, pi]
  const double two_pi = 2.0 * M_PI;
  a = std::fmod(a, two_pi);
  if (a <= -M_PI) a += two_pi;
  if (a > M_PI) a -= two_pi;
  return a;
}

// 7-parameter oriented 3D box plus class id and score.
struct Box {
  double x = 0, y = 0, z = 0;  // center, meters
  double w = 0, l = 0, h = 0;  // width, length, height, meters
  double yaw = 0;              // radians in (-pi, pi]
  int class_id = 0;
  double score = 1.0;

  Box() = default;
  Box(double x_, double y_, double z_, double w_, double l_, double h_, double yaw_,
      int cls = 0, double score_ = 1.0)
      : x(x_), y(y_), z(z_), w(w_), l(l_), h(h_), yaw(wrap_angle(yaw_)), class_id(cls),
        score(score_) {
    if (w <= 0 || l <= 0 || h <= 0) throw ShapeError("Box: non-positive dimensions");
  }
};

}  // namespace flowdet
