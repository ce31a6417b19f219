#include "gsstyle/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "gsstyle/checksum.hpp"
#include "gsstyle/error.hpp"
#include "gsstyle/parallel.hpp"

namespace gsstyle {
namespace {

using nlohmann::json;

constexpr double kNormEps = 1e-10;
constexpr double kCosineEps = 1e-8;
constexpr std::size_t kReferenceBlock = 256;

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": images differ in shape");
}

double vec_norm(const double* u, int c) {
  double s = 0.0;
  for (int k = 0; k < c; ++k) s += u[k] * u[k];
  return std::sqrt(s);
}

std::vector<double> layer_weights(const FeatureLossConfig& config, const std::string& layer,
                                  int channels) {
  auto it = config.perceptual_channel_weights.find(layer);
  if (it == config.perceptual_channel_weights.end()) return std::vector<double>(channels, 1.0);
  if (static_cast<int>(it->second.size()) != channels) {
    throw ShapeError("perceptual weights for '" + layer + "' have " +
                     std::to_string(it->second.size()) + " entries, layer has " +
                     std::to_string(channels) + " channels");
  }
  return it->second;
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {l1, perceptual, nnfm}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("loss weights must be finite and >= 0");
  }
  if (!(l1 > 0.0 || perceptual > 0.0 || nnfm > 0.0)) {
    throw InvalidArgument("at least one loss weight must be positive");
  }
}

LossValue l1_loss(const ImageBuffer& render, const ImageBuffer& target) {
  require_same_shape(render, target, "l1_loss");
  LossValue out;
  out.grad = ImageBuffer(render.width, render.height, render.channels);
  const std::size_t n = render.data.size();
  if (n == 0) return out;
  const double inv = 1.0 / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = render.data[i] - target.data[i];
    sum += std::abs(d);
    out.grad.data[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  out.value = sum * inv;
  return out;
}

double perceptual_feature_distance(const FeatureMap& a, const FeatureMap& b,
                                   std::span<const double> w, FeatureMap* grad_a) {
  if (!a.same_shape(b)) throw ShapeError("perceptual distance: feature maps differ in shape");
  const int C = a.channels;
  if (static_cast<int>(w.size()) != C) throw ShapeError("perceptual distance: weight count mismatch");
  const std::size_t P = a.pixel_count();
  if (P == 0) return 0.0;
  const double inv_p = 1.0 / static_cast<double>(P);
  double total = 0.0;
  std::vector<double> ah(C), bh(C), g(C);
  for (std::size_t p = 0; p < P; ++p) {
    const double* av = a.pixel(p);
    const double* bv = b.pixel(p);
    const double na = vec_norm(av, C);
    const double nb = vec_norm(bv, C);
    double d = 0.0;
    for (int c = 0; c < C; ++c) {
      ah[c] = av[c] / (na + kNormEps);
      bh[c] = bv[c] / (nb + kNormEps);
      const double diff = ah[c] - bh[c];
      d += w[c] * diff * diff;
      g[c] = 2.0 * w[c] * diff * inv_p;
    }
    total += d;
    if (grad_a) {
      double* ga = grad_a->pixel(p);
      const double denom = na + kNormEps;
      double ga_dot = 0.0;
      for (int c = 0; c < C; ++c) ga_dot += g[c] * av[c];
      const double radial = na > 0.0 ? ga_dot / (na * denom * denom) : 0.0;
      for (int c = 0; c < C; ++c) ga[c] += g[c] / denom - av[c] * radial;
    }
  }
  return total * inv_p;
}

LossValue perceptual_loss(const Encoder& encoder, const ImageBuffer& render,
                          const ImageBuffer& target, const FeatureLossConfig& config) {
  require_same_shape(render, target, "perceptual_loss");
  const std::set<std::string> layers(config.perceptual_layers.begin(),
                                     config.perceptual_layers.end());
  const auto fr = encoder.forward(render, layers);
  const auto ft = encoder.forward(target, layers);
  LossValue out;
  FeatureMaps grads;
  for (const auto& name : layers) {
    const FeatureMap& a = fr.at(name);
    FeatureMap g(a.height, a.width, a.channels);
    const auto w = layer_weights(config, name, a.channels);
    out.value += perceptual_feature_distance(a, ft.at(name), w, &g);
    grads[name] = std::move(g);
  }
  out.grad = encoder.backward(render, grads);
  return out;
}

double cosine_distance(const double* u, const double* v, int channels) {
  double dot = 0.0;
  for (int c = 0; c < channels; ++c) dot += u[c] * v[c];
  return 1.0 - dot / (vec_norm(u, channels) * vec_norm(v, channels) + kCosineEps);
}

NearestNeighbors nearest_neighbors(const FeatureMap& query, const FeatureMap& reference) {
  if (query.channels != reference.channels) {
    throw ShapeError("nearest_neighbors: channel counts differ");
  }
  const int C = query.channels;
  const std::size_t N = query.pixel_count();
  const std::size_t M = reference.pixel_count();
  if (M == 0) throw ShapeError("nearest_neighbors: empty reference map");

  // Channel-major copy of the reference so the inner loop runs over
  // contiguous reference pixels. Per pair the dot product still accumulates
  // channels in order 0..C-1, matching cosine_distance bit for bit.
  std::vector<double> ref_t(static_cast<std::size_t>(C) * M);
  std::vector<double> ref_norm(M);
  for (std::size_t j = 0; j < M; ++j) {
    const double* v = reference.pixel(j);
    for (int c = 0; c < C; ++c) ref_t[static_cast<std::size_t>(c) * M + j] = v[c];
    ref_norm[j] = vec_norm(v, C);
  }

  NearestNeighbors nn;
  nn.index.resize(N);
  nn.distance.resize(N);
  parallel_for(N, [&](std::size_t i) {
    const double* u = query.pixel(i);
    const double nu = vec_norm(u, C);
    double dots[kReferenceBlock];
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j0 = 0; j0 < M; j0 += kReferenceBlock) {
      const std::size_t len = std::min(kReferenceBlock, M - j0);
      std::fill(dots, dots + len, 0.0);
      for (int c = 0; c < C; ++c) {
        const double uc = u[c];
        const double* col = ref_t.data() + static_cast<std::size_t>(c) * M + j0;
        for (std::size_t k = 0; k < len; ++k) dots[k] += uc * col[k];
      }
      for (std::size_t k = 0; k < len; ++k) {
        const double d = 1.0 - dots[k] / (nu * ref_norm[j0 + k] + kCosineEps);
        if (d < best) {
          best = d;
          best_j = static_cast<std::uint32_t>(j0 + k);
        }
      }
    }
    nn.index[i] = best_j;
    nn.distance[i] = best;
  });
  return nn;
}

double nnfm_feature_loss(const FeatureMap& rendered, const FeatureMap& style,
                         const NearestNeighbors& matches, FeatureMap* grad) {
  const int C = rendered.channels;
  const std::size_t N = rendered.pixel_count();
  if (matches.index.size() != N) throw ShapeError("nnfm: assignment does not cover the map");
  if (style.channels != C) throw ShapeError("nnfm: channel counts differ");
  if (N == 0) return 0.0;
  if (grad) *grad = FeatureMap(rendered.height, rendered.width, C);
  const double inv_n = 1.0 / static_cast<double>(N);
  double sum = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double* r = rendered.pixel(i);
    const double* s = style.pixel(matches.index[i]);
    sum += cosine_distance(r, s, C);
    if (!grad) continue;
    double dot = 0.0;
    for (int c = 0; c < C; ++c) dot += r[c] * s[c];
    const double nr = vec_norm(r, C);
    const double ns = vec_norm(s, C);
    const double q = nr * ns + kCosineEps;
    const double radial = nr > 0.0 ? dot * ns / (nr * q * q) : 0.0;
    double* g = grad->pixel(i);
    for (int c = 0; c < C; ++c) g[c] = -(s[c] / q - r[c] * radial) * inv_n;
  }
  return sum * inv_n;
}

LossValue nnfm_loss(const Encoder& encoder, const ImageBuffer& render,
                    const FeatureMap& style_features, const std::string& layer) {
  const auto fr = encoder.forward(render, {layer});
  const FeatureMap& r = fr.at(layer);
  const auto matches = nearest_neighbors(r, style_features);
  FeatureMap g;
  LossValue out;
  out.value = nnfm_feature_loss(r, style_features, matches, &g);
  FeatureMaps grads;
  grads[layer] = std::move(g);
  out.grad = encoder.backward(render, grads);
  return out;
}

LossValue nnfm_loss(const Encoder& encoder, const ImageBuffer& render,
                    const ImageBuffer& style_image, const std::string& layer) {
  const auto fs = encoder.forward(style_image, {layer});
  return nnfm_loss(encoder, render, fs.at(layer), layer);
}

LossReport total_loss(const Encoder& encoder, const ImageBuffer& render,
                      const ImageBuffer& edited_target, const ImageBuffer& style_image,
                      const LossWeights& weights, const FeatureLossConfig& config,
                      const CachedFeatures* cache) {
  weights.validate();
  LossReport report;
  report.grad_image = ImageBuffer(render.width, render.height, render.channels);
  auto accumulate = [&](const ImageBuffer& g, double w) {
    for (std::size_t i = 0; i < g.data.size(); ++i) report.grad_image.data[i] += w * g.data[i];
  };

  if (weights.l1 > 0.0) {
    const auto l1 = l1_loss(render, edited_target);
    report.l1 = l1.value;
    accumulate(l1.grad, weights.l1);
  }

  std::set<std::string> capture;
  if (weights.perceptual > 0.0) {
    require_same_shape(render, edited_target, "total_loss");
    capture.insert(config.perceptual_layers.begin(), config.perceptual_layers.end());
  }
  if (weights.nnfm > 0.0) capture.insert(config.nnfm_layer);

  if (!capture.empty()) {
    const auto fr = encoder.forward(render, capture);
    FeatureMaps grads;
    auto grad_for = [&](const std::string& name) -> FeatureMap& {
      auto it = grads.find(name);
      if (it == grads.end()) {
        const FeatureMap& a = fr.at(name);
        it = grads.emplace(name, FeatureMap(a.height, a.width, a.channels)).first;
      }
      return it->second;
    };

    if (weights.perceptual > 0.0) {
      FeatureMaps target_local;
      const FeatureMaps* ft = nullptr;
      if (cache && cache->has_target) {
        ft = &cache->target;
      } else {
        const std::set<std::string> layers(config.perceptual_layers.begin(),
                                           config.perceptual_layers.end());
        target_local = encoder.forward(edited_target, layers);
        ft = &target_local;
      }
      for (const auto& name : std::set<std::string>(config.perceptual_layers.begin(),
                                                    config.perceptual_layers.end())) {
        const FeatureMap& a = fr.at(name);
        FeatureMap g(a.height, a.width, a.channels);
        const auto w = layer_weights(config, name, a.channels);
        report.perceptual += perceptual_feature_distance(a, ft->at(name), w, &g);
        FeatureMap& dst = grad_for(name);
        for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += weights.perceptual * g.data[i];
      }
    }

    if (weights.nnfm > 0.0) {
      FeatureMap style_local;
      const FeatureMap* fs = nullptr;
      if (cache && cache->has_style) {
        fs = &cache->style;
      } else {
        style_local = encoder.forward(style_image, {config.nnfm_layer}).at(config.nnfm_layer);
        fs = &style_local;
      }
      const FeatureMap& r = fr.at(config.nnfm_layer);
      const auto matches = nearest_neighbors(r, *fs);
      FeatureMap g;
      report.nnfm = nnfm_feature_loss(r, *fs, matches, &g);
      FeatureMap& dst = grad_for(config.nnfm_layer);
      for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += weights.nnfm * g.data[i];
    }

    accumulate(encoder.backward(render, grads), 1.0);
  }

  report.total = weights.l1 * report.l1 + weights.perceptual * report.perceptual +
                 weights.nnfm * report.nnfm;
  return report;
}

std::map<std::string, std::vector<double>> load_perceptual_weights(
    const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open perceptual weight manifest " + manifest_path.string());
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
  const std::size_t n_floats = bytes.size() / sizeof(float);
  std::map<std::string, std::vector<double>> out;
  for (const auto& jl : m["layers"]) {
    const auto name = jl.at("name").get<std::string>();
    const auto channels = jl.at("channels").get<std::size_t>();
    const auto offset = jl.at("offset").get<std::size_t>();
    if (offset + channels > n_floats) {
      throw ShapeError("perceptual weights for '" + name + "' exceed the blob");
    }
    std::vector<float> f(channels);
    std::memcpy(f.data(), bytes.data() + offset * sizeof(float), channels * sizeof(float));
    out[name] = std::vector<double>(f.begin(), f.end());
  }
  if (m["sha256"].get<std::string>() != sha256_hex(bytes)) {
    throw ChecksumError(blob_path.string() + ": sha256 does not match manifest");
  }
  return out;
}

void save_perceptual_weights(const std::map<std::string, std::vector<double>>& weights,
                             const std::filesystem::path& manifest_path) {
  std::vector<float> blob;
  json layers = json::array();
  for (const auto& [name, w] : weights) {
    layers.push_back({{"name", name}, {"channels", w.size()}, {"offset", blob.size()}});
    for (double v : w) blob.push_back(static_cast<float>(v));
  }
  std::vector<std::uint8_t> bytes(blob.size() * sizeof(float));
  std::memcpy(bytes.data(), blob.data(), bytes.size());
  const std::string blob_name = manifest_path.stem().string() + ".bin";
  std::ofstream bout(manifest_path.parent_path() / blob_name, std::ios::binary | std::ios::trunc);
  if (!bout) throw IoError("cannot write perceptual weight blob");
  bout.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const json m = {{"format", "gsstyle-perceptual-weights"},
                  {"version", 1},
                  {"blob", blob_name},
                  {"sha256", sha256_hex(bytes)},
                  {"layers", layers}};
  std::ofstream mout(manifest_path);
  if (!mout) throw IoError("cannot write " + manifest_path.string());
  mout << m.dump(2) << "\n";
}

}  // namespace gsstyle
