#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gsstyle/types.hpp"

namespace gsstyle {

enum class LayerKind { conv3x3, relu, maxpool2 };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  int in_channels = 0;
  int out_channels = 0;
};

struct EncoderSpec {
  std::vector<LayerSpec> layers;
  std::array<double, 3> input_mean{0.0, 0.0, 0.0};
  std::array<double, 3> input_std{1.0, 1.0, 1.0};

  // Channel chaining, unique names, relu/pool preserving channel count.
  void validate() const;
};

// H x W x C activations, row-major with interleaved channels.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  double* pixel(std::size_t p) { return data.data() + p * channels; }
  const double* pixel(std::size_t p) const { return data.data() + p * channels; }
  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const FeatureMap& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

using FeatureMaps = std::map<std::string, FeatureMap>;

// Conv weights: kernel is [out][in][3][3], bias is [out].
struct ConvWeights {
  std::vector<float> kernel;
  std::vector<float> bias;
};

// VGG-style conv/relu/maxpool stack. Convolutions are stride 1, zero padded
// by one pixel; pooling is 2x2 stride 2 (odd trailing rows/columns dropped)
// with ties resolved to the first element in row-major window order.
class Encoder {
 public:
  Encoder() = default;
  // weights has one entry per layer; non-conv entries are ignored.
  Encoder(EncoderSpec spec, std::vector<ConvWeights> weights);

  const EncoderSpec& spec() const { return spec_; }
  const std::vector<ConvWeights>& weights() const { return weights_; }
  bool has_layer(const std::string& name) const;
  std::size_t layer_index(const std::string& name) const;

  FeatureMaps forward(const ImageBuffer& image, const std::set<std::string>& capture) const;

  // dLoss/dPixel given dLoss/dFeature for some captured layers. The forward
  // pass is recomputed from image; every grad map must match the shape that
  // forward produces for its layer.
  ImageBuffer backward(const ImageBuffer& image, const FeatureMaps& grad_maps) const;

 private:
  FeatureMap normalize_input(const ImageBuffer& image) const;
  std::vector<FeatureMap> run(const ImageBuffer& image, std::size_t last_layer) const;

  EncoderSpec spec_;
  std::vector<ConvWeights> weights_;
};

// Manifest JSON (see README) plus a raw little-endian float32 blob whose
// sha256 is recorded in the manifest.
Encoder load_encoder(const std::filesystem::path& manifest_path);
void save_encoder(const Encoder& encoder, const std::filesystem::path& manifest_path);

// He-initialized weights from a seeded generator; biases are small.
Encoder make_random_encoder(const EncoderSpec& spec, std::uint64_t seed);

// Layer table of VGG-16 up to relu3_3 (16 layers). widths = channels of the
// three blocks; the published network uses {64, 128, 256} with ImageNet
// input normalization.
EncoderSpec vgg16_prefix_spec(std::array<int, 3> widths = {64, 128, 256});

// Small VGG-16-shaped encoder (same layer names, narrow channels) used as the
// default when no weight asset is supplied.
Encoder make_default_encoder(std::uint64_t seed = 1234);

}  // namespace gsstyle
