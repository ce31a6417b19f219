#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "gsstyle/encoder.hpp"
#include "gsstyle/losses.hpp"
#include "gsstyle/rasterizer.hpp"
#include "gsstyle/types.hpp"

namespace gsstyle {

// Per-pixel displacement in pixels from a source view to a target view.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> dx;
  std::vector<double> dy;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h);
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t valid_count() const;
};

struct FlowOptions {
  double tau_depth = 0.01;  // relative occlusion tolerance
  double tau_alpha = 0.5;   // minimum source alpha
};

// Unprojects every foreground pixel center of view a with its rendered depth,
// moves it into view b and projects it. A pixel is masked when its alpha is
// below tau_alpha, it lands off-screen or behind the camera, or the depth
// rendered in b at the landing pixel disagrees with the moved point by more
// than tau_depth * z. alpha_b, when given, also masks landings on background.
FlowField geometric_flow(const ImageBuffer& depth_a, const ImageBuffer& alpha_a,
                         const CameraView& view_a, const CameraView& view_b,
                         const ImageBuffer& depth_b, const ImageBuffer* alpha_b = nullptr,
                         const FlowOptions& opts = {});

struct SplatResult {
  ImageBuffer image;           // holes are left at zero
  std::vector<double> weight;  // accumulated splat weight per target pixel
  std::vector<std::uint8_t> filled;
};

// Forward warp with softmax splatting. Each valid source pixel is sent to the
// four target pixels around its landing point with bilinear coefficients
// times exp(importance). Importances are normalized per target by their
// maximum, so only differences matter. Targets with weight <= 1e-8 are holes.
SplatResult softmax_splat(const ImageBuffer& image, const FlowField& flow,
                          const std::vector<double>& importance);

// -depth / (rel_sigma * median foreground depth), favoring near surfaces.
std::vector<double> depth_importance(const ImageBuffer& depth, const FlowField& flow,
                                     double rel_sigma = 0.01);

// RMSE over every channel of the masked pixels. Throws on an empty mask.
double masked_rmse(const ImageBuffer& a, const ImageBuffer& b,
                   const std::vector<std::uint8_t>& mask);

// Perceptual distance with masked-out pixels zeroed in both images.
double perceptual_score(const Encoder& encoder, const ImageBuffer& a, const ImageBuffer& b,
                        const std::vector<std::uint8_t>& mask,
                        const FeatureLossConfig& config = {});

enum class PairRange { short_range, long_range };
const char* to_string(PairRange r);

struct ConsistencyOptions {
  int short_stride = 1;
  int long_stride = 7;
  FlowOptions flow;
  double importance_sigma = 0.01;
  bool perceptual = true;  // needs an encoder
  FeatureLossConfig features;
  RenderOptions render;
};

struct PairScore {
  std::string view_a;  // warped source
  std::string view_b;  // target
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  PairRange range = PairRange::short_range;
  double rmse = 0.0;
  std::optional<double> perceptual;
  double valid_fraction = 0.0;  // 0 marks a pair with nothing to compare
};

struct RangeAggregate {
  std::size_t pairs = 0;  // pairs with a non-empty mask
  double rmse = 0.0;
  std::optional<double> perceptual;
};

struct ConsistencyReport {
  std::vector<PairScore> pairs;  // short pairs then long, each by source index
  RangeAggregate short_range;
  RangeAggregate long_range;
  ConsistencyOptions options;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Scores images[i] warped onto view i + stride against images[i + stride],
// using flow from the rendered geometry. Works for stylized renders and for
// independently edited 2D images alike.
ConsistencyReport evaluate_images(const std::vector<ImageBuffer>& images,
                                  const std::vector<RenderOutput>& geometry,
                                  const std::vector<CameraView>& views,
                                  const ConsistencyOptions& opts = {},
                                  const Encoder* encoder = nullptr);

// Renders every view once and scores the renders.
ConsistencyReport evaluate(const GaussianScene& scene, const std::vector<CameraView>& views,
                           const ConsistencyOptions& opts = {}, const Encoder* encoder = nullptr);

// Middlebury .flo: "PIEH", int32 width, int32 height, then float32 (u, v)
// pairs, little-endian. Values above 1e9 mark unknown flow.
FlowField read_flo(const std::filesystem::path& path);
void write_flo(const FlowField& flow, const std::filesystem::path& path);

}  // namespace gsstyle
