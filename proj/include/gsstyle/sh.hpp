#pragma once

#include <Eigen/Core>
#include <array>

namespace gsstyle {

// Real SH basis values (standard 3DGS sign convention) for a unit direction.
// Entries past sh_rows(degree) are zero.
std::array<double, 16> sh_basis(int degree, const Eigen::Vector3d& dir);

}  // namespace gsstyle
