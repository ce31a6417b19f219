#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gsstyle/encoder.hpp"
#include "gsstyle/types.hpp"

namespace gsstyle {

struct LossWeights {
  double l1 = 1.0;
  double perceptual = 0.2;
  double nnfm = 0.5;

  // Non-negative, finite, at least one positive.
  void validate() const;
};

struct LossValue {
  double value = 0.0;
  ImageBuffer grad;  // d value / d render
};

struct LossReport {
  double total = 0.0;
  double l1 = 0.0;
  double perceptual = 0.0;
  double nnfm = 0.0;
  ImageBuffer grad_image;
};

// Which encoder layers feed the feature losses. Channel weights missing for a
// layer default to 1.
struct FeatureLossConfig {
  std::vector<std::string> perceptual_layers = {"relu1_2", "relu2_2", "relu3_3"};
  std::map<std::string, std::vector<double>> perceptual_channel_weights;
  std::string nnfm_layer = "relu3_1";
};

// Mean absolute error over every pixel-channel; sign(0) = 0 in the gradient.
LossValue l1_loss(const ImageBuffer& render, const ImageBuffer& target);

// Per layer: unit-normalize each feature vector, squared difference weighted
// per channel, mean over positions; summed over layers. The gradient is with
// respect to `render`.
LossValue perceptual_loss(const Encoder& encoder, const ImageBuffer& render,
                          const ImageBuffer& target, const FeatureLossConfig& config = {});

// Feature-space piece of the perceptual distance for one layer. Adds
// d loss / d a into grad_a when it is non-null.
double perceptual_feature_distance(const FeatureMap& a, const FeatureMap& b,
                                   std::span<const double> channel_weights, FeatureMap* grad_a);

// 1 - u.v / (|u||v| + 1e-8)
double cosine_distance(const double* u, const double* v, int channels);

struct NearestNeighbors {
  std::vector<std::uint32_t> index;  // per query pixel, best reference pixel
  std::vector<double> distance;
};

// For every query feature vector, the reference vector with the smallest
// cosine distance; ties go to the lowest linear index. Blocked and parallel,
// but evaluates exactly the same arithmetic as the pairwise definition.
NearestNeighbors nearest_neighbors(const FeatureMap& query, const FeatureMap& reference);

// Mean matched cosine distance for a fixed assignment. Writes d loss / d
// rendered into grad (resized) when non-null; the assignment is held fixed.
double nnfm_feature_loss(const FeatureMap& rendered, const FeatureMap& style,
                         const NearestNeighbors& matches, FeatureMap* grad);

LossValue nnfm_loss(const Encoder& encoder, const ImageBuffer& render,
                    const ImageBuffer& style_image, const std::string& layer = "relu3_1");
// Same, with the style features already extracted at `layer`.
LossValue nnfm_loss(const Encoder& encoder, const ImageBuffer& render,
                    const FeatureMap& style_features, const std::string& layer);

// Features of a fixed image, reusable across many total_loss calls.
struct CachedFeatures {
  FeatureMaps target;   // perceptual layers of the photometric target
  FeatureMap style;     // nnfm layer of the style image
  bool has_target = false;
  bool has_style = false;
};

// total = w.l1 * L1 + w.perceptual * perceptual + w.nnfm * NNFM(render, style).
// Terms with zero weight are not evaluated. One encoder forward/backward is
// shared by the two feature terms.
LossReport total_loss(const Encoder& encoder, const ImageBuffer& render,
                      const ImageBuffer& edited_target, const ImageBuffer& style_image,
                      const LossWeights& weights, const FeatureLossConfig& config = {},
                      const CachedFeatures* cache = nullptr);

// Per-channel linear weights for the perceptual distance, stored like encoder
// weights: a JSON manifest {"blob", "sha256", "layers": [{name, channels,
// offset}]} next to a float32 blob.
std::map<std::string, std::vector<double>> load_perceptual_weights(
    const std::filesystem::path& manifest_path);
void save_perceptual_weights(const std::map<std::string, std::vector<double>>& weights,
                             const std::filesystem::path& manifest_path);

}  // namespace gsstyle
