#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gsstyle/types.hpp"

namespace gsstyle {

enum class TrainableSet { sh_only, sh_and_opacity };

struct RenderOptions {
  int tile_size = 16;
  double near_clip = 0.01;
  double alpha_max = 0.999;
  double alpha_min = 1.0 / 255.0;
  // Compositing stops once transmittance falls below this; 0 disables it.
  double transmittance_stop = 1e-4;
  double cov_dilation = 0.3;
  // The projection Jacobian is evaluated with x/z and y/z clamped to this
  // multiple of the image half-extent, so splats far outside the frustum do
  // not blow up into screen-filling ellipses.
  double frustum_guard = 1.3;
  TrainableSet trainable = TrainableSet::sh_only;
};

struct ProjectedGaussian {
  Eigen::Vector2d mean2d;
  Eigen::Matrix2d cov2d;
  Eigen::Matrix2d conic;  // cov2d inverse
  double depth = 0.0;
  double opacity = 0.0;
  Eigen::Vector3d color;
  std::array<bool, 3> color_clamped{};
  Eigen::Vector3d view_dir;
  std::uint32_t source_index = 0;
  // Inclusive pixel bounds of the 3-sigma ellipse, clipped to the image.
  int x_min = 0, x_max = -1, y_min = 0, y_max = -1;

  // True when the center of pixel (x, y) lies inside the 3-sigma support.
  // Writes the Gaussian falloff exp(-d^T conic d / 2) to falloff.
  bool covers(int x, int y, double& falloff) const {
    if (x < x_min || x > x_max || y < y_min || y > y_max) return false;
    const double dx = x + 0.5 - mean2d.x();
    const double dy = y + 0.5 - mean2d.y();
    const double m = conic(0, 0) * dx * dx + 2.0 * conic(0, 1) * dx * dy + conic(1, 1) * dy * dy;
    if (!(m <= 9.0)) return false;
    falloff = std::exp(-0.5 * m);
    return true;
  }
};

struct RenderOutput {
  ImageBuffer color;  // 3 channels, composited over the scene background
  ImageBuffer alpha;  // 1 channel, 1 - final transmittance
  ImageBuffer depth;  // 1 channel, alpha-normalized expected camera z
  std::vector<int> contrib_count;
};

// Gradients with respect to appearance parameters. sh is laid out as
// [primitive][row][channel] with sh_rows(scene.sh_degree) rows per primitive.
struct AppearanceGradients {
  int rows = 1;
  std::vector<double> sh;
  std::vector<double> opacity_logit;  // empty unless opacity is trainable

  double& sh_at(std::size_t p, int row, int c) { return sh[(p * rows + row) * 3 + c]; }
  double sh_at(std::size_t p, int row, int c) const { return sh[(p * rows + row) * 3 + c]; }
};

// Projects every primitive into the view, culling those behind near_clip or
// whose 3-sigma extent misses the image. Output is sorted front to back by
// depth with ties broken by source index.
std::vector<ProjectedGaussian> project(const GaussianScene& scene, const CameraView& view,
                                       const RenderOptions& opts = {});

RenderOutput render(const GaussianScene& scene, const CameraView& view,
                    const RenderOptions& opts = {});

AppearanceGradients render_backward(const GaussianScene& scene, const CameraView& view,
                                    const ImageBuffer& grad_color, const RenderOptions& opts = {});

std::vector<RenderOutput> render_batch(const GaussianScene& scene,
                                       std::span<const CameraView> views,
                                       const RenderOptions& opts = {});

}  // namespace gsstyle
