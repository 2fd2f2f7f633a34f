#pragma once

#include <array>

#include "ttpk/tensor.hpp"

namespace ttpk {

// Rotate by `angle` (radians, counter-clockwise in (y down, x right)
// coords) and scale by `scale` about the image center, bilinear sampling
// with edge clamp. Plain image-space preprocessing; never on a tape.
inline Tensor warp_rotate_scale(const Tensor& img, double angle, double scale) {
  if (img.rank() != 3) throw DimensionError("warp_rotate_scale: (c,h,w) expected");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double inv = 1.0 / scale;
  Tensor out({c, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // inverse map: destination -> source
      const double dy = (y - cy) * inv, dx = (x - cx) * inv;
      const double sy = ca * dy + sa * dx + cy;
      const double sx = -sa * dy + ca * dx + cx;
      const double fy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const double fx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      const int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double wy = fy - y0, wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double v00 = img.at3(ch, y0, x0), v01 = img.at3(ch, y0, x1);
        const double v10 = img.at3(ch, y1, x0), v11 = img.at3(ch, y1, x1);
        out.at3(ch, y, x) = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                            wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

// Forward map of a point under the same rotation/scale.
inline std::array<double, 2> warp_point(double y, double x, double angle, double scale, int h,
                                        int w) {
  const double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double dy = y - cy, dx = x - cx;
  return {scale * (ca * dy - sa * dx) + cy, scale * (sa * dy + ca * dx) + cx};
}

}  // namespace ttpk
