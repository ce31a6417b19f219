#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gsstyle {

inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr int kMaxShRows = 16;

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Number of SH coefficient rows for a given degree: 1, 4, 9 or 16.
constexpr int sh_rows(int degree) { return (degree + 1) * (degree + 1); }

// H x W x C raster, row-major with interleaved channels. Values are nominally
// in [0,1] for images; gradient images reuse the type without that range.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, double fill = 0.0);

  bool empty() const { return data.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
  bool same_shape(const ImageBuffer& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  // Throws ShapeError when the buffer violates its invariants.
  void validate() const;
};

struct GaussianPrimitive {
  std::array<float, 3> position{};
  std::array<float, 3> log_scale{};
  // (w, x, y, z); stored as read, normalized where used.
  std::array<float, 4> rotation{1.0F, 0.0F, 0.0F, 0.0F};
  float opacity_logit = 0.0F;
  // Row b holds the RGB coefficient of SH basis function b. Rows at or past
  // sh_rows(scene.sh_degree) are unused and kept at zero.
  std::array<std::array<float, 3>, kMaxShRows> sh_coeffs{};

  double opacity() const { return logistic(opacity_logit); }
  Eigen::Vector3d mean() const { return {position[0], position[1], position[2]}; }
  Eigen::Vector3d scale() const;
  Eigen::Matrix3d rotation_matrix() const;
  // Sigma = R S S^T R^T
  Eigen::Matrix3d covariance() const;
};

struct GaussianScene {
  std::vector<GaussianPrimitive> primitives;
  int sh_degree = 0;
  std::array<double, 3> background_color{0.0, 0.0, 0.0};

  std::size_t size() const { return primitives.size(); }
  bool empty() const { return primitives.empty(); }
  int coeff_rows() const { return sh_rows(sh_degree); }
};

// Pinhole camera. world_to_camera is a rigid transform in a right-handed
// frame where the camera looks down +z, x points right and y points down.
struct CameraView {
  std::string id;
  int width = 0;
  int height = 0;
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  Eigen::Matrix4d world_to_camera = Eigen::Matrix4d::Identity();
  std::optional<std::string> image_path;

  Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }
  Eigen::Vector3d camera_center() const { return -rotation().transpose() * translation(); }
  Eigen::Matrix4d camera_to_world() const;

  void validate() const;
};

}  // namespace gsstyle
