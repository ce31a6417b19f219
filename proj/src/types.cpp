#include "gsstyle/types.hpp"

#include <Eigen/Geometry>
#include <sstream>

#include "gsstyle/error.hpp"

namespace gsstyle {

ImageBuffer::ImageBuffer(int w, int h, int c, double fill)
    : width(w), height(h), channels(c),
      data(static_cast<std::size_t>(w) * h * c, fill) {}

void ImageBuffer::validate() const {
  if (width < 0 || height < 0) throw ShapeError("image has negative dimensions");
  if (channels != 1 && channels != 3) {
    throw ShapeError("image must have 1 or 3 channels, got " + std::to_string(channels));
  }
  if (data.size() != static_cast<std::size_t>(width) * height * channels) {
    throw ShapeError("image data length does not match width*height*channels");
  }
}

Eigen::Vector3d GaussianPrimitive::scale() const {
  return {std::exp(double(log_scale[0])), std::exp(double(log_scale[1])),
          std::exp(double(log_scale[2]))};
}

Eigen::Matrix3d GaussianPrimitive::rotation_matrix() const {
  Eigen::Quaterniond q(rotation[0], rotation[1], rotation[2], rotation[3]);
  if (q.norm() == 0.0) return Eigen::Matrix3d::Identity();
  q.normalize();
  return q.toRotationMatrix();
}

Eigen::Matrix3d GaussianPrimitive::covariance() const {
  const Eigen::Matrix3d m = rotation_matrix() * scale().asDiagonal();
  return m * m.transpose();
}

Eigen::Matrix4d CameraView::camera_to_world() const {
  Eigen::Matrix4d inv = Eigen::Matrix4d::Identity();
  const Eigen::Matrix3d rt = rotation().transpose();
  inv.topLeftCorner<3, 3>() = rt;
  inv.topRightCorner<3, 1>() = -rt * translation();
  return inv;
}

void CameraView::validate() const {
  std::ostringstream why;
  if (width <= 0 || height <= 0) why << "non-positive image size; ";
  if (!(fx > 0.0) || !(fy > 0.0)) why << "focal lengths must be positive; ";
  if (!(cx > 0.0 && cx < width) || !(cy > 0.0 && cy < height)) {
    why << "principal point outside the image; ";
  }
  const Eigen::Matrix3d r = rotation();
  if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-5) {
    why << "rotation block is not orthonormal; ";
  }
  if (r.determinant() < 0.0) why << "rotation block is a reflection; ";
  const std::string msg = why.str();
  if (!msg.empty()) throw InvalidArgument("camera '" + id + "': " + msg.substr(0, msg.size() - 2));
}

}  // namespace gsstyle
