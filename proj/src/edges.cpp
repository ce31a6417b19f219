#include <algorithm>
#include <cmath>

#include "gsstyle/editor_protocol.hpp"
#include "gsstyle/error.hpp"

namespace gsstyle {

ImageBuffer compute_edges(const ImageBuffer& image, double low_threshold) {
  if (image.channels != 3) throw ShapeError("compute_edges expects a 3-channel image");
  const int W = image.width, H = image.height;
  ImageBuffer lum(W, H, 1);
  for (std::size_t p = 0; p < lum.pixel_count(); ++p) {
    const double* px = image.data.data() + p * 3;
    lum.data[p] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  }
  auto L = [&](int x, int y) {
    return lum.at(std::clamp(x, 0, W - 1), std::clamp(y, 0, H - 1));
  };
  const double norm = 4.0 * std::sqrt(2.0);
  ImageBuffer out(W, H, 1);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double gx = (L(x + 1, y - 1) + 2.0 * L(x + 1, y) + L(x + 1, y + 1)) -
                        (L(x - 1, y - 1) + 2.0 * L(x - 1, y) + L(x - 1, y + 1));
      const double gy = (L(x - 1, y + 1) + 2.0 * L(x, y + 1) + L(x + 1, y + 1)) -
                        (L(x - 1, y - 1) + 2.0 * L(x, y - 1) + L(x + 1, y - 1));
      const double m = std::min(1.0, std::sqrt(gx * gx + gy * gy) / norm);
      out.at(x, y) = m < low_threshold ? 0.0 : m;
    }
  }
  return out;
}

}  // namespace gsstyle
