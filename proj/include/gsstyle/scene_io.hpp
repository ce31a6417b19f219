#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gsstyle/types.hpp"

namespace gsstyle {

// Binary little-endian PLY in the standard 3D Gaussian Splatting layout:
//   x y z nx ny nz f_dc_0..2 f_rest_0..(3(B-1)-1) opacity scale_0..2 rot_0..3
// all as 32-bit floats. f_rest is channel-major: f_rest[c*(B-1) + (b-1)] is
// row b, channel c. Normals are discarded on load and written as zero.
GaussianScene load_ply(const std::filesystem::path& path);
void save_ply(const GaussianScene& scene, const std::filesystem::path& path);

// Reads `transforms.json` from a dataset directory. Matrices in the file are
// camera-to-world; the returned views carry their inverse. Intrinsics come
// from top-level fx/fy/cx/cy/w/h (or fl_x/fl_y) with per-frame overrides.
// A top-level "camera_convention": "opengl" flips the camera y and z axes
// for manifests written in the -z-forward convention.
std::vector<CameraView> load_dataset(const std::filesystem::path& dir);

// Writes a manifest that load_dataset reads back to the same views.
void save_dataset(const std::vector<CameraView>& views, const std::filesystem::path& dir);

}  // namespace gsstyle
