#include "gsstyle/rasterizer.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <optional>

#include "gsstyle/error.hpp"
#include "gsstyle/parallel.hpp"
#include "gsstyle/sh.hpp"

namespace gsstyle {
namespace {

struct TileGrid {
  int tile_size = 16;
  int tiles_x = 0;
  int tiles_y = 0;
  // Per tile, indices into the projected list in front-to-back order.
  std::vector<std::vector<std::uint32_t>> bins;
};

TileGrid bin_tiles(const std::vector<ProjectedGaussian>& projected, const CameraView& view,
                   int tile_size) {
  if (tile_size <= 0) throw InvalidArgument("tile_size must be positive");
  TileGrid grid;
  grid.tile_size = tile_size;
  grid.tiles_x = (view.width + tile_size - 1) / tile_size;
  grid.tiles_y = (view.height + tile_size - 1) / tile_size;
  grid.bins.resize(static_cast<std::size_t>(grid.tiles_x) * grid.tiles_y);
  for (std::uint32_t i = 0; i < projected.size(); ++i) {
    const auto& g = projected[i];
    for (int ty = g.y_min / tile_size; ty <= g.y_max / tile_size; ++ty) {
      for (int tx = g.x_min / tile_size; tx <= g.x_max / tile_size; ++tx) {
        grid.bins[static_cast<std::size_t>(ty) * grid.tiles_x + tx].push_back(i);
      }
    }
  }
  return grid;
}

struct Contribution {
  std::uint32_t slot;  // position in the tile bin
  double alpha;
  double falloff;
  double transmittance;  // before this contribution
  bool alpha_clamped;
};

// Front-to-back compositing of one pixel over a bin. Calls on_contribution for
// every accepted contribution and returns the final transmittance.
template <typename OnContribution>
double composite_pixel(const std::vector<ProjectedGaussian>& projected,
                       const std::vector<std::uint32_t>& bin, int x, int y,
                       const RenderOptions& opts, OnContribution&& on_contribution) {
  double T = 1.0;
  for (std::uint32_t slot = 0; slot < bin.size(); ++slot) {
    const ProjectedGaussian& g = projected[bin[slot]];
    double falloff = 0.0;
    if (!g.covers(x, y, falloff)) continue;
    const double raw = g.opacity * falloff;
    const bool clamped = raw > opts.alpha_max;
    const double alpha = clamped ? opts.alpha_max : raw;
    if (alpha < opts.alpha_min) continue;
    on_contribution(Contribution{slot, alpha, falloff, T, clamped}, g);
    T *= 1.0 - alpha;
    if (T < opts.transmittance_stop) break;
  }
  return T;
}

}  // namespace

std::vector<ProjectedGaussian> project(const GaussianScene& scene, const CameraView& view,
                                       const RenderOptions& opts) {
  const Eigen::Matrix3d R = view.rotation();
  const Eigen::Vector3d t = view.translation();
  const Eigen::Vector3d center = view.camera_center();
  const int rows = scene.coeff_rows();
  if (!(opts.frustum_guard > 0.0)) throw InvalidArgument("frustum_guard must be positive");

  std::vector<std::optional<ProjectedGaussian>> slots(scene.size());
  parallel_for(scene.size(), [&](std::size_t i) {
    const GaussianPrimitive& prim = scene.primitives[i];
    const Eigen::Vector3d mean = prim.mean();
    const Eigen::Vector3d pc = R * mean + t;
    const double z = pc.z();
    if (!(z > opts.near_clip)) return;

    const double guard = opts.frustum_guard;
    const double tx = std::clamp(pc.x() / z, -guard * view.cx / view.fx, guard * (view.width - view.cx) / view.fx);
    const double ty = std::clamp(pc.y() / z, -guard * view.cy / view.fy, guard * (view.height - view.cy) / view.fy);
    Eigen::Matrix<double, 2, 3> J;
    J << view.fx / z, 0.0, -view.fx * tx / z,  //
        0.0, view.fy / z, -view.fy * ty / z;
    const Eigen::Matrix3d cov_cam = R * prim.covariance() * R.transpose();
    Eigen::Matrix2d cov2d = J * cov_cam * J.transpose();
    cov2d(0, 0) += opts.cov_dilation;
    cov2d(1, 1) += opts.cov_dilation;
    cov2d(0, 1) = cov2d(1, 0) = 0.5 * (cov2d(0, 1) + cov2d(1, 0));
    const double det = cov2d.determinant();
    if (!(det > 0.0)) return;

    ProjectedGaussian g;
    g.mean2d = {view.fx * pc.x() / z + view.cx, view.fy * pc.y() / z + view.cy};
    g.cov2d = cov2d;
    g.conic << cov2d(1, 1) / det, -cov2d(0, 1) / det, -cov2d(1, 0) / det, cov2d(0, 0) / det;
    const double rx = 3.0 * std::sqrt(cov2d(0, 0));
    const double ry = 3.0 * std::sqrt(cov2d(1, 1));
    // Pixel x has its center at x + 0.5.
    const double x_lo = std::ceil(g.mean2d.x() - rx - 0.5);
    const double x_hi = std::floor(g.mean2d.x() + rx - 0.5);
    const double y_lo = std::ceil(g.mean2d.y() - ry - 0.5);
    const double y_hi = std::floor(g.mean2d.y() + ry - 0.5);
    if (!std::isfinite(x_lo + x_hi + y_lo + y_hi)) return;
    if (x_hi < 0.0 || y_hi < 0.0 || x_lo > view.width - 1 || y_lo > view.height - 1) return;
    g.x_min = static_cast<int>(std::max(0.0, x_lo));
    g.x_max = static_cast<int>(std::min<double>(view.width - 1, x_hi));
    g.y_min = static_cast<int>(std::max(0.0, y_lo));
    g.y_max = static_cast<int>(std::min<double>(view.height - 1, y_hi));
    if (g.x_min > g.x_max || g.y_min > g.y_max) return;

    g.depth = z;
    g.opacity = prim.opacity();
    g.source_index = static_cast<std::uint32_t>(i);
    const Eigen::Vector3d d = mean - center;
    const double dn = d.norm();
    g.view_dir = dn > 0.0 ? Eigen::Vector3d(d / dn) : Eigen::Vector3d(0.0, 0.0, 1.0);
    const auto basis = sh_basis(scene.sh_degree, g.view_dir);
    for (int c = 0; c < 3; ++c) {
      double v = 0.5;
      for (int b = 0; b < rows; ++b) v += basis[b] * prim.sh_coeffs[b][c];
      g.color_clamped[c] = v < 0.0;
      g.color[c] = g.color_clamped[c] ? 0.0 : v;
    }
    slots[i] = g;
  });

  std::vector<ProjectedGaussian> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.source_index < b.source_index;
  });
  return out;
}

RenderOutput render(const GaussianScene& scene, const CameraView& view,
                    const RenderOptions& opts) {
  view.validate();
  const auto projected = project(scene, view, opts);
  const TileGrid grid = bin_tiles(projected, view, opts.tile_size);
  const auto& bg = scene.background_color;

  RenderOutput out;
  out.color = ImageBuffer(view.width, view.height, 3);
  out.alpha = ImageBuffer(view.width, view.height, 1);
  out.depth = ImageBuffer(view.width, view.height, 1);
  out.contrib_count.assign(out.color.pixel_count(), 0);

  parallel_for(grid.bins.size(), [&](std::size_t tile) {
    const auto& bin = grid.bins[tile];
    const int tx = static_cast<int>(tile % grid.tiles_x);
    const int ty = static_cast<int>(tile / grid.tiles_x);
    const int x_end = std::min(view.width, (tx + 1) * grid.tile_size);
    const int y_end = std::min(view.height, (ty + 1) * grid.tile_size);
    for (int y = ty * grid.tile_size; y < y_end; ++y) {
      for (int x = tx * grid.tile_size; x < x_end; ++x) {
        double rgb[3] = {0.0, 0.0, 0.0};
        double depth = 0.0;
        int count = 0;
        const double T = composite_pixel(
            projected, bin, x, y, opts, [&](const Contribution& c, const ProjectedGaussian& g) {
              const double w = c.alpha * c.transmittance;
              for (int k = 0; k < 3; ++k) rgb[k] += g.color[k] * w;
              depth += g.depth * w;
              ++count;
            });
        for (int k = 0; k < 3; ++k) out.color.at(x, y, k) = rgb[k] + T * bg[k];
        const double a = 1.0 - T;
        out.alpha.at(x, y) = a;
        out.depth.at(x, y) = depth / (a + 1e-8);
        out.contrib_count[static_cast<std::size_t>(y) * view.width + x] = count;
      }
    }
  });
  return out;
}

AppearanceGradients render_backward(const GaussianScene& scene, const CameraView& view,
                                    const ImageBuffer& grad_color, const RenderOptions& opts) {
  view.validate();
  if (grad_color.width != view.width || grad_color.height != view.height ||
      grad_color.channels != 3) {
    throw ShapeError("render_backward: gradient image is " + std::to_string(grad_color.width) +
                     "x" + std::to_string(grad_color.height) + "x" +
                     std::to_string(grad_color.channels) + ", expected " +
                     std::to_string(view.width) + "x" + std::to_string(view.height) + "x3");
  }
  const bool train_opacity = opts.trainable == TrainableSet::sh_and_opacity;
  const auto projected = project(scene, view, opts);
  const TileGrid grid = bin_tiles(projected, view, opts.tile_size);
  const auto& bg = scene.background_color;

  // Per tile, per bin slot: dL/dcolor (3) and dL/dopacity (1).
  std::vector<std::vector<double>> tile_grads(grid.bins.size());

  parallel_for(grid.bins.size(), [&](std::size_t tile) {
    const auto& bin = grid.bins[tile];
    auto& local = tile_grads[tile];
    local.assign(bin.size() * 4, 0.0);
    if (bin.empty()) return;
    const int tx = static_cast<int>(tile % grid.tiles_x);
    const int ty = static_cast<int>(tile / grid.tiles_x);
    const int x_end = std::min(view.width, (tx + 1) * grid.tile_size);
    const int y_end = std::min(view.height, (ty + 1) * grid.tile_size);
    std::vector<Contribution> trace;
    for (int y = ty * grid.tile_size; y < y_end; ++y) {
      for (int x = tx * grid.tile_size; x < x_end; ++x) {
        const double gpix[3] = {grad_color.at(x, y, 0), grad_color.at(x, y, 1),
                                grad_color.at(x, y, 2)};
        if (gpix[0] == 0.0 && gpix[1] == 0.0 && gpix[2] == 0.0) continue;
        trace.clear();
        composite_pixel(projected, bin, x, y, opts,
                        [&](const Contribution& c, const ProjectedGaussian&) { trace.push_back(c); });
        // behind[k]: color seen through the current contribution, normalized
        // by the transmittance after it. Starts as the background.
        double behind[3] = {bg[0], bg[1], bg[2]};
        for (auto it = trace.rbegin(); it != trace.rend(); ++it) {
          const ProjectedGaussian& g = projected[bin[it->slot]];
          const double w = it->alpha * it->transmittance;
          double dalpha = 0.0;
          for (int k = 0; k < 3; ++k) {
            local[it->slot * 4 + k] += gpix[k] * w;
            dalpha += gpix[k] * (g.color[k] - behind[k]);
          }
          dalpha *= it->transmittance;
          if (!it->alpha_clamped) local[it->slot * 4 + 3] += dalpha * it->falloff;
          for (int k = 0; k < 3; ++k) {
            behind[k] = g.color[k] * it->alpha + (1.0 - it->alpha) * behind[k];
          }
        }
      }
    }
  });

  // Fixed-order reduction keeps results independent of the worker count.
  std::vector<double> dcolor(projected.size() * 3, 0.0);
  std::vector<double> dopacity(projected.size(), 0.0);
  for (std::size_t tile = 0; tile < grid.bins.size(); ++tile) {
    const auto& bin = grid.bins[tile];
    const auto& local = tile_grads[tile];
    for (std::size_t s = 0; s < bin.size(); ++s) {
      for (int k = 0; k < 3; ++k) dcolor[bin[s] * 3 + k] += local[s * 4 + k];
      dopacity[bin[s]] += local[s * 4 + 3];
    }
  }

  AppearanceGradients grads;
  grads.rows = scene.coeff_rows();
  grads.sh.assign(scene.size() * grads.rows * 3, 0.0);
  if (train_opacity) grads.opacity_logit.assign(scene.size(), 0.0);
  for (std::size_t i = 0; i < projected.size(); ++i) {
    const ProjectedGaussian& g = projected[i];
    const auto basis = sh_basis(scene.sh_degree, g.view_dir);
    for (int k = 0; k < 3; ++k) {
      if (g.color_clamped[k]) continue;
      for (int b = 0; b < grads.rows; ++b) {
        grads.sh_at(g.source_index, b, k) += basis[b] * dcolor[i * 3 + k];
      }
    }
    if (train_opacity) {
      grads.opacity_logit[g.source_index] += dopacity[i] * g.opacity * (1.0 - g.opacity);
    }
  }
  return grads;
}

std::vector<RenderOutput> render_batch(const GaussianScene& scene,
                                       std::span<const CameraView> views,
                                       const RenderOptions& opts) {
  std::vector<RenderOutput> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(render(scene, v, opts));
  return out;
}

}  // namespace gsstyle
