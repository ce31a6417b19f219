#include "gsstyle/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <random>

#include "gsstyle/checksum.hpp"
#include "gsstyle/error.hpp"
#include "gsstyle/parallel.hpp"

namespace gsstyle {
namespace {

using nlohmann::json;

FeatureMap conv_forward(const FeatureMap& in, const ConvWeights& w, int out_channels) {
  const int H = in.height, W = in.width, C = in.channels;
  FeatureMap out(H, W, out_channels);
  parallel_for(static_cast<std::size_t>(H), [&](std::size_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < W; ++x) {
      double* o = out.pixel(static_cast<std::size_t>(y) * W + x);
      for (int oc = 0; oc < out_channels; ++oc) o[oc] = w.bias[oc];
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= W) continue;
          const double* src = in.pixel(static_cast<std::size_t>(sy) * W + sx);
          for (int oc = 0; oc < out_channels; ++oc) {
            const float* k = w.kernel.data() + (static_cast<std::size_t>(oc) * C) * 9 + ky * 3 + kx;
            double acc = 0.0;
            for (int ic = 0; ic < C; ++ic) acc += k[ic * 9] * src[ic];
            o[oc] += acc;
          }
        }
      }
    }
  });
  return out;
}

FeatureMap conv_backward(const FeatureMap& grad_out, const ConvWeights& w, int in_channels) {
  const int H = grad_out.height, W = grad_out.width, O = grad_out.channels;
  FeatureMap grad_in(H, W, in_channels);
  // Gather form: each input pixel sums over the outputs that read it, so rows
  // can be processed independently.
  parallel_for(static_cast<std::size_t>(H), [&](std::size_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < W; ++x) {
      double* gi = grad_in.pixel(static_cast<std::size_t>(y) * W + x);
      for (int ky = 0; ky < 3; ++ky) {
        const int oy = y - ky + 1;
        if (oy < 0 || oy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ox = x - kx + 1;
          if (ox < 0 || ox >= W) continue;
          const double* go = grad_out.pixel(static_cast<std::size_t>(oy) * W + ox);
          for (int ic = 0; ic < in_channels; ++ic) {
            double acc = 0.0;
            for (int oc = 0; oc < O; ++oc) {
              acc += w.kernel[(static_cast<std::size_t>(oc) * in_channels + ic) * 9 + ky * 3 + kx] *
                     go[oc];
            }
            gi[ic] += acc;
          }
        }
      }
    }
  });
  return grad_in;
}

FeatureMap relu_forward(const FeatureMap& in) {
  FeatureMap out = in;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

FeatureMap relu_backward(const FeatureMap& grad_out, const FeatureMap& in) {
  FeatureMap g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (!(in.data[i] > 0.0)) g.data[i] = 0.0;
  }
  return g;
}

// Window order: (0,0), (0,1), (1,0), (1,1); strict comparison keeps the first.
int pool_argmax(const FeatureMap& in, int oy, int ox, int c) {
  int best = 0;
  double best_v = in.at(2 * oy, 2 * ox, c);
  for (int k = 1; k < 4; ++k) {
    const double v = in.at(2 * oy + k / 2, 2 * ox + k % 2, c);
    if (v > best_v) {
      best_v = v;
      best = k;
    }
  }
  return best;
}

FeatureMap pool_forward(const FeatureMap& in) {
  FeatureMap out(in.height / 2, in.width / 2, in.channels);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        const int k = pool_argmax(in, y, x, c);
        out.at(y, x, c) = in.at(2 * y + k / 2, 2 * x + k % 2, c);
      }
    }
  }
  return out;
}

FeatureMap pool_backward(const FeatureMap& grad_out, const FeatureMap& in) {
  FeatureMap g(in.height, in.width, in.channels);
  for (int y = 0; y < grad_out.height; ++y) {
    for (int x = 0; x < grad_out.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        const int k = pool_argmax(in, y, x, c);
        g.at(2 * y + k / 2, 2 * x + k % 2, c) += grad_out.at(y, x, c);
      }
    }
  }
  return g;
}

std::string shape_str(const FeatureMap& m) {
  return std::to_string(m.height) + "x" + std::to_string(m.width) + "x" +
         std::to_string(m.channels);
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv3x3:
      return "conv3x3";
    case LayerKind::relu:
      return "relu";
    case LayerKind::maxpool2:
      return "maxpool2";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv3x3") return LayerKind::conv3x3;
  if (s == "relu") return LayerKind::relu;
  if (s == "maxpool2") return LayerKind::maxpool2;
  throw FormatError("unknown layer kind '" + s + "'");
}

void EncoderSpec::validate() const {
  int channels = 3;
  std::set<std::string> names;
  for (const auto& l : layers) {
    if (!names.insert(l.name).second) throw ShapeError("duplicate layer name '" + l.name + "'");
    if (l.in_channels != channels) {
      throw ShapeError("layer '" + l.name + "' expects " + std::to_string(l.in_channels) +
                       " input channels but receives " + std::to_string(channels));
    }
    if (l.kind != LayerKind::conv3x3 && l.out_channels != l.in_channels) {
      throw ShapeError("layer '" + l.name + "' must preserve its channel count");
    }
    if (l.out_channels <= 0) throw ShapeError("layer '" + l.name + "' has no output channels");
    channels = l.out_channels;
  }
  for (double s : input_std) {
    if (!(s > 0.0)) throw ShapeError("input_std entries must be positive");
  }
}

Encoder::Encoder(EncoderSpec spec, std::vector<ConvWeights> weights)
    : spec_(std::move(spec)), weights_(std::move(weights)) {
  spec_.validate();
  if (weights_.size() != spec_.layers.size()) {
    throw ShapeError("encoder needs one weight entry per layer");
  }
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    if (l.kind != LayerKind::conv3x3) continue;
    const std::size_t k = static_cast<std::size_t>(l.out_channels) * l.in_channels * 9;
    if (weights_[i].kernel.size() != k || weights_[i].bias.size() != std::size_t(l.out_channels)) {
      throw ShapeError("layer '" + l.name + "' weight blob has the wrong shape");
    }
  }
}

bool Encoder::has_layer(const std::string& name) const {
  for (const auto& l : spec_.layers) {
    if (l.name == name) return true;
  }
  return false;
}

std::size_t Encoder::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (spec_.layers[i].name == name) return i;
  }
  throw InvalidArgument("encoder has no layer named '" + name + "'");
}

FeatureMap Encoder::normalize_input(const ImageBuffer& image) const {
  if (image.channels != 3) throw ShapeError("encoder input must have 3 channels");
  FeatureMap m(image.height, image.width, 3);
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) {
      m.data[p * 3 + c] = (image.data[p * 3 + c] - spec_.input_mean[c]) / spec_.input_std[c];
    }
  }
  return m;
}

// acts[0] is the normalized input, acts[i + 1] the output of layer i.
std::vector<FeatureMap> Encoder::run(const ImageBuffer& image, std::size_t last_layer) const {
  std::vector<FeatureMap> acts;
  acts.reserve(last_layer + 2);
  acts.push_back(normalize_input(image));
  for (std::size_t i = 0; i <= last_layer; ++i) {
    const auto& l = spec_.layers[i];
    switch (l.kind) {
      case LayerKind::conv3x3:
        acts.push_back(conv_forward(acts.back(), weights_[i], l.out_channels));
        break;
      case LayerKind::relu:
        acts.push_back(relu_forward(acts.back()));
        break;
      case LayerKind::maxpool2:
        acts.push_back(pool_forward(acts.back()));
        break;
    }
  }
  return acts;
}

FeatureMaps Encoder::forward(const ImageBuffer& image, const std::set<std::string>& capture) const {
  FeatureMaps out;
  if (capture.empty()) return out;
  std::size_t deepest = 0;
  for (const auto& name : capture) deepest = std::max(deepest, layer_index(name));
  auto acts = run(image, deepest);
  for (const auto& name : capture) out[name] = acts[layer_index(name) + 1];
  return out;
}

ImageBuffer Encoder::backward(const ImageBuffer& image, const FeatureMaps& grad_maps) const {
  ImageBuffer grad_image(image.width, image.height, 3);
  if (grad_maps.empty()) return grad_image;
  std::size_t deepest = 0;
  for (const auto& [name, g] : grad_maps) deepest = std::max(deepest, layer_index(name));
  const auto acts = run(image, deepest);
  for (const auto& [name, g] : grad_maps) {
    const FeatureMap& a = acts[layer_index(name) + 1];
    if (!g.same_shape(a) || g.data.size() != a.data.size()) {
      throw ShapeError("gradient for layer '" + name + "' is " + shape_str(g) +
                       " but the layer produces " + shape_str(a) + " for this image");
    }
  }

  FeatureMap grad = acts[deepest + 1];
  std::fill(grad.data.begin(), grad.data.end(), 0.0);
  for (std::size_t i = deepest + 1; i-- > 0;) {
    const auto& l = spec_.layers[i];
    if (auto it = grad_maps.find(l.name); it != grad_maps.end()) {
      for (std::size_t k = 0; k < grad.data.size(); ++k) grad.data[k] += it->second.data[k];
    }
    switch (l.kind) {
      case LayerKind::conv3x3:
        grad = conv_backward(grad, weights_[i], l.in_channels);
        break;
      case LayerKind::relu:
        grad = relu_backward(grad, acts[i]);
        break;
      case LayerKind::maxpool2:
        grad = pool_backward(grad, acts[i]);
        break;
    }
  }
  for (std::size_t p = 0; p < grad_image.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) grad_image.data[p * 3 + c] = grad.data[p * 3 + c] / spec_.input_std[c];
  }
  return grad_image;
}

Encoder load_encoder(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open encoder manifest " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  for (const char* key : {"blob", "sha256", "layers"}) {
    if (!m.contains(key)) {
      throw FormatError(manifest_path.string() + ": missing field '" + std::string(key) + "'");
    }
  }
  const auto blob_path = manifest_path.parent_path() / m["blob"].get<std::string>();
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw IoError("cannot open weight blob " + blob_path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(bin)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() % sizeof(float) != 0) {
    throw ShapeError(blob_path.string() + ": size is not a whole number of float32 values");
  }
  const std::size_t n_floats = bytes.size() / sizeof(float);
  auto read_floats = [&](std::size_t offset, std::size_t count) {
    std::vector<float> v(count);
    std::memcpy(v.data(), bytes.data() + offset * sizeof(float), count * sizeof(float));
    return v;
  };

  EncoderSpec spec;
  if (m.contains("input_mean")) spec.input_mean = m["input_mean"].get<std::array<double, 3>>();
  if (m.contains("input_std")) spec.input_std = m["input_std"].get<std::array<double, 3>>();
  std::vector<ConvWeights> weights;
  for (const auto& jl : m["layers"]) {
    LayerSpec l;
    l.name = jl.at("name").get<std::string>();
    l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
    l.in_channels = jl.at("in_channels").get<int>();
    l.out_channels = jl.at("out_channels").get<int>();
    ConvWeights w;
    if (l.kind == LayerKind::conv3x3) {
      const std::size_t k = static_cast<std::size_t>(l.out_channels) * l.in_channels * 9;
      const std::size_t wo = jl.at("weight_offset").get<std::size_t>();
      const std::size_t bo = jl.at("bias_offset").get<std::size_t>();
      if (wo + k > n_floats || bo + l.out_channels > n_floats) {
        throw ShapeError("layer '" + l.name + "' needs " + std::to_string(k) + " weights + " +
                         std::to_string(l.out_channels) + " biases but the blob holds only " +
                         std::to_string(n_floats) + " floats");
      }
      w.kernel = read_floats(wo, k);
      w.bias = read_floats(bo, l.out_channels);
    }
    spec.layers.push_back(std::move(l));
    weights.push_back(std::move(w));
  }
  const std::string expected = m["sha256"].get<std::string>();
  const std::string actual = sha256_hex(bytes);
  if (expected != actual) {
    throw ChecksumError(blob_path.string() + ": sha256 " + actual + " does not match manifest " +
                        expected);
  }
  return Encoder(std::move(spec), std::move(weights));
}

void save_encoder(const Encoder& encoder, const std::filesystem::path& manifest_path) {
  const auto& spec = encoder.spec();
  const std::string blob_name = manifest_path.stem().string() + ".bin";
  std::vector<float> blob;
  json layers = json::array();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    json jl = {{"name", l.name},
               {"kind", to_string(l.kind)},
               {"in_channels", l.in_channels},
               {"out_channels", l.out_channels}};
    if (l.kind == LayerKind::conv3x3) {
      const auto& w = encoder.weights()[i];
      jl["weight_offset"] = blob.size();
      blob.insert(blob.end(), w.kernel.begin(), w.kernel.end());
      jl["bias_offset"] = blob.size();
      blob.insert(blob.end(), w.bias.begin(), w.bias.end());
    }
    layers.push_back(std::move(jl));
  }
  std::vector<std::uint8_t> bytes(blob.size() * sizeof(float));
  std::memcpy(bytes.data(), blob.data(), bytes.size());

  const json m = {{"format", "gsstyle-encoder"},
                  {"version", 1},
                  {"blob", blob_name},
                  {"sha256", sha256_hex(bytes)},
                  {"input_mean", spec.input_mean},
                  {"input_std", spec.input_std},
                  {"layers", layers}};
  const auto blob_path = manifest_path.parent_path() / blob_name;
  std::ofstream bout(blob_path, std::ios::binary | std::ios::trunc);
  if (!bout) throw IoError("cannot write " + blob_path.string());
  bout.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  std::ofstream mout(manifest_path);
  if (!mout) throw IoError("cannot write " + manifest_path.string());
  mout << m.dump(2) << "\n";
}

Encoder make_random_encoder(const EncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<ConvWeights> weights(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind != LayerKind::conv3x3) continue;
    std::normal_distribution<double> he(0.0, std::sqrt(2.0 / (9.0 * l.in_channels)));
    std::uniform_real_distribution<double> bias(-0.05, 0.05);
    auto& w = weights[i];
    w.kernel.resize(static_cast<std::size_t>(l.out_channels) * l.in_channels * 9);
    for (auto& k : w.kernel) k = static_cast<float>(he(rng));
    w.bias.resize(l.out_channels);
    for (auto& b : w.bias) b = static_cast<float>(bias(rng));
  }
  return Encoder(spec, std::move(weights));
}

EncoderSpec vgg16_prefix_spec(std::array<int, 3> widths) {
  EncoderSpec spec;
  int channels = 3;
  const int convs_per_block[3] = {2, 2, 3};
  for (int block = 0; block < 3; ++block) {
    for (int c = 1; c <= convs_per_block[block]; ++c) {
      const std::string suffix = std::to_string(block + 1) + "_" + std::to_string(c);
      spec.layers.push_back({"conv" + suffix, LayerKind::conv3x3, channels, widths[block]});
      channels = widths[block];
      spec.layers.push_back({"relu" + suffix, LayerKind::relu, channels, channels});
    }
    if (block < 2) {
      spec.layers.push_back(
          {"pool" + std::to_string(block + 1), LayerKind::maxpool2, channels, channels});
    }
  }
  spec.input_mean = {0.485, 0.456, 0.406};
  spec.input_std = {0.229, 0.224, 0.225};
  return spec;
}

Encoder make_default_encoder(std::uint64_t seed) {
  return make_random_encoder(vgg16_prefix_spec({8, 12, 16}), seed);
}

}  // namespace gsstyle
