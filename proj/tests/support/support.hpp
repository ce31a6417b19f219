#pragma once

// Fixtures and independent reference implementations shared by the unit and
// acceptance tests. Nothing here calls into the code under test except to
// build inputs.

#include <Eigen/Core>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gsstyle/encoder.hpp"
#include "gsstyle/rasterizer.hpp"
#include "gsstyle/types.hpp"

namespace gsstyle::test {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "gsstyle");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Pinhole camera at eye looking at target; +z forward, +y down. world_up is
// the direction that appears up in the image.
CameraView look_at(const std::string& id, int width, int height, double focal,
                   const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                   const Eigen::Vector3d& world_up = {0.0, -1.0, 0.0});

// Identity pose, principal point at the image center.
CameraView identity_camera(int width, int height, double focal, const std::string& id = "cam");

// Row-0 SH coefficient giving base color rgb.
std::array<float, 3> dc_for_color(const std::array<double, 3>& rgb);

GaussianPrimitive make_gaussian(const Eigen::Vector3d& pos, const Eigen::Vector3d& scale,
                                double opacity, const std::array<double, 3>& rgb);

struct RandomSceneOptions {
  int sh_degree = 0;
  double z_min = 2.0;
  double z_max = 6.0;
  double spread = 0.5;  // |x|, |y| <= spread * z
  double scale_min = 0.03;
  double scale_max = 0.3;
  double logit_min = -2.0;
  double logit_max = 3.0;
  double sh_rest_amplitude = 0.15;
};

// Random scene in front of an identity camera.
GaussianScene random_scene(std::mt19937_64& rng, int count, const RandomSceneOptions& opts = {});

ImageBuffer random_image(std::mt19937_64& rng, int w, int h, int c, double lo = 0.0,
                         double hi = 1.0);

// Global depth sort, per-pixel loop over every primitive, 3-sigma ellipse
// support, no tiles. Transmittance stop follows opts (tests pass 0 to get
// the plain sum of the compositing equation).
RenderOutput naive_render(const GaussianScene& scene, const CameraView& view,
                          const RenderOptions& opts);

// Direct nested-loop evaluation of an encoder.
FeatureMaps naive_encoder_forward(const Encoder& encoder, const ImageBuffer& image,
                                  const std::set<std::string>& capture);

// O(N*M) cosine nearest neighbours, ties to the lowest index.
std::vector<std::uint32_t> exhaustive_nn(const FeatureMap& query, const FeatureMap& reference);

FeatureMap random_feature_map(std::mt19937_64& rng, int h, int w, int c);

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
double relative_error(const std::vector<double>& a, const std::vector<double>& b);

// Central difference of f at x with the step actually taken, for a float
// parameter: (f(x+h) - f(x-h)) / (x+h - (x-h)) in the float grid.
double central_difference_float(float& param, double h, const std::function<double()>& f);
double central_difference(double& param, double h, const std::function<double()>& f);

std::vector<std::uint8_t> read_bytes(const fs::path& path);

// Synthetic scene used by the end-to-end checks: a textured back wall and
// floor that fill every view plus free-floating blobs, seen by an arc of
// cameras.
struct SceneFixture {
  GaussianScene scene;
  std::vector<CameraView> views;
};
SceneFixture e2e_fixture(int gaussians = 500, int views = 20, int size = 64,
                         std::uint64_t seed = 11);

// Fronto-parallel, opaque, very thin textured plane seen by cameras that
// differ by whole-pixel translations, so warps between them are exact.
SceneFixture plane_fixture(int views = 6, int size = 48, int shift_px = 2);

// Writes transforms.json (and PNG renders as the original images) for the
// fixture views into dir.
void write_dataset(const SceneFixture& fx, const fs::path& dir);

// Colorful style image with statistics far from the fixtures' palettes.
ImageBuffer make_style_image(int w, int h);

}  // namespace gsstyle::test
