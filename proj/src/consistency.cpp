#include "gsstyle/consistency.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "gsstyle/error.hpp"
#include "gsstyle/parallel.hpp"

namespace gsstyle {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_plane(const ImageBuffer& img, int w, int h, const char* what) {
  if (img.width != w || img.height != h || img.channels != 1) {
    throw ShapeError(std::string(what) + " must be a " + std::to_string(w) + "x" +
                     std::to_string(h) + " single-channel image");
  }
}

struct Tap {
  std::size_t target;
  double weight;
};

// Bilinear neighbours of the landing point of source pixel (x, y).
int bilinear_taps(const FlowField& flow, int x, int y, Tap out[4]) {
  const std::size_t i = flow.index(x, y);
  const double qx = x + flow.dx[i];  // pixel-center offsets cancel
  const double qy = y + flow.dy[i];
  const double x0 = std::floor(qx);
  const double y0 = std::floor(qy);
  const double fx = qx - x0;
  const double fy = qy - y0;
  int n = 0;
  for (int j = 0; j < 2; ++j) {
    for (int k = 0; k < 2; ++k) {
      const double w = (k ? fx : 1.0 - fx) * (j ? fy : 1.0 - fy);
      const double tx = x0 + k;
      const double ty = y0 + j;
      if (w <= 0.0 || tx < 0 || ty < 0 || tx >= flow.width || ty >= flow.height) continue;
      out[n++] = {flow.index(static_cast<int>(tx), static_cast<int>(ty)), w};
    }
  }
  return n;
}

// Bilinear lookup between pixel centers at continuous position (u, v),
// clamped at the borders.
double sample_bilinear(const ImageBuffer& plane, double u, double v) {
  const double x = std::clamp(u - 0.5, 0.0, plane.width - 1.0);
  const double y = std::clamp(v - 0.5, 0.0, plane.height - 1.0);
  const int x0 = static_cast<int>(x);
  const int y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, plane.width - 1);
  const int y1 = std::min(y0 + 1, plane.height - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  return (1.0 - fy) * ((1.0 - fx) * plane.at(x0, y0) + fx * plane.at(x1, y0)) +
         fy * ((1.0 - fx) * plane.at(x0, y1) + fx * plane.at(x1, y1));
}

}  // namespace

FlowField::FlowField(int w, int h)
    : width(w),
      height(h),
      dx(static_cast<std::size_t>(w) * h, 0.0),
      dy(static_cast<std::size_t>(w) * h, 0.0),
      valid(static_cast<std::size_t>(w) * h, 0) {}

std::size_t FlowField::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

FlowField geometric_flow(const ImageBuffer& depth_a, const ImageBuffer& alpha_a,
                         const CameraView& view_a, const CameraView& view_b,
                         const ImageBuffer& depth_b, const ImageBuffer* alpha_b,
                         const FlowOptions& opts) {
  require_plane(depth_a, view_a.width, view_a.height, "depth_a");
  require_plane(alpha_a, view_a.width, view_a.height, "alpha_a");
  require_plane(depth_b, view_b.width, view_b.height, "depth_b");
  if (alpha_b) require_plane(*alpha_b, view_b.width, view_b.height, "alpha_b");
  if (view_a.width != view_b.width || view_a.height != view_b.height) {
    throw ShapeError("geometric_flow: views must share the image size");
  }

  FlowField flow(view_a.width, view_a.height);
  const Eigen::Matrix4d a_to_b = view_b.world_to_camera * view_a.camera_to_world();
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      const std::size_t i = flow.index(x, y);
      const double z = depth_a.data[i];
      if (!(alpha_a.data[i] >= opts.tau_alpha) || !(z > 0.0) || !std::isfinite(z)) continue;
      const double u = x + 0.5;
      const double v = y + 0.5;
      const Eigen::Vector4d pa((u - view_a.cx) / view_a.fx * z, (v - view_a.cy) / view_a.fy * z, z,
                               1.0);
      const Eigen::Vector4d pb = a_to_b * pa;
      if (!(pb.z() > 0.0)) continue;
      const double ub = view_b.fx * pb.x() / pb.z() + view_b.cx;
      const double vb = view_b.fy * pb.y() / pb.z() + view_b.cy;
      if (!(ub >= 0.0 && vb >= 0.0 && ub < view_b.width && vb < view_b.height)) continue;
      const std::size_t t = static_cast<std::size_t>(std::floor(vb)) * view_b.width +
                            static_cast<std::size_t>(std::floor(ub));
      if (alpha_b && !(alpha_b->data[t] >= opts.tau_alpha)) continue;
      if (!(std::abs(sample_bilinear(depth_b, ub, vb) - pb.z()) <= opts.tau_depth * pb.z())) continue;
      flow.dx[i] = ub - u;
      flow.dy[i] = vb - v;
      flow.valid[i] = 1;
    }
  }
  return flow;
}

std::vector<double> depth_importance(const ImageBuffer& depth, const FlowField& flow,
                                     double rel_sigma) {
  require_plane(depth, flow.width, flow.height, "depth");
  if (!(rel_sigma > 0.0)) throw InvalidArgument("importance sigma must be positive");
  std::vector<double> fg;
  for (std::size_t i = 0; i < flow.valid.size(); ++i) {
    if (flow.valid[i]) fg.push_back(depth.data[i]);
  }
  std::vector<double> out(flow.valid.size(), 0.0);
  if (fg.empty()) return out;
  auto mid = fg.begin() + static_cast<std::ptrdiff_t>(fg.size() / 2);
  std::nth_element(fg.begin(), mid, fg.end());
  const double sigma = rel_sigma * std::max(*mid, 1e-12);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (flow.valid[i]) out[i] = -depth.data[i] / sigma;
  }
  return out;
}

SplatResult softmax_splat(const ImageBuffer& image, const FlowField& flow,
                          const std::vector<double>& importance) {
  image.validate();
  if (image.width != flow.width || image.height != flow.height) {
    throw ShapeError("softmax_splat: image and flow sizes differ");
  }
  const std::size_t n = flow.valid.size();
  if (importance.size() != n) throw ShapeError("softmax_splat: importance size differs");

  // Pass 1: per-target maximum importance keeps exp() in range.
  std::vector<double> peak(n, -std::numeric_limits<double>::infinity());
  Tap taps[4];
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      const std::size_t i = flow.index(x, y);
      if (!flow.valid[i]) continue;
      const int k = bilinear_taps(flow, x, y, taps);
      for (int t = 0; t < k; ++t) peak[taps[t].target] = std::max(peak[taps[t].target], importance[i]);
    }
  }

  const int C = image.channels;
  SplatResult out;
  out.image = ImageBuffer(image.width, image.height, C);
  out.weight.assign(n, 0.0);
  out.filled.assign(n, 0);
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      const std::size_t i = flow.index(x, y);
      if (!flow.valid[i]) continue;
      const int k = bilinear_taps(flow, x, y, taps);
      for (int t = 0; t < k; ++t) {
        const std::size_t j = taps[t].target;
        const double w = taps[t].weight * std::exp(importance[i] - peak[j]);
        out.weight[j] += w;
        for (int c = 0; c < C; ++c) out.image.data[j * C + c] += w * image.data[i * C + c];
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (out.weight[j] > 1e-8) {
      out.filled[j] = 1;
      for (int c = 0; c < C; ++c) out.image.data[j * C + c] /= out.weight[j];
    } else {
      for (int c = 0; c < C; ++c) out.image.data[j * C + c] = 0.0;
    }
  }
  return out;
}

double masked_rmse(const ImageBuffer& a, const ImageBuffer& b,
                   const std::vector<std::uint8_t>& mask) {
  if (!a.same_shape(b)) throw ShapeError("masked_rmse: image shapes differ");
  if (mask.size() != a.pixel_count()) throw ShapeError("masked_rmse: mask size differs");
  double sum = 0.0;
  std::size_t count = 0;
  const int C = a.channels;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    for (int c = 0; c < C; ++c) {
      const double d = a.data[p * C + c] - b.data[p * C + c];
      sum += d * d;
    }
    count += C;
  }
  if (count == 0) throw InvalidArgument("masked_rmse: mask is empty");
  return std::sqrt(sum / static_cast<double>(count));
}

double perceptual_score(const Encoder& encoder, const ImageBuffer& a, const ImageBuffer& b,
                        const std::vector<std::uint8_t>& mask, const FeatureLossConfig& config) {
  if (!a.same_shape(b)) throw ShapeError("perceptual_score: image shapes differ");
  if (mask.size() != a.pixel_count()) throw ShapeError("perceptual_score: mask size differs");
  if (std::find(mask.begin(), mask.end(), std::uint8_t{1}) == mask.end()) {
    throw InvalidArgument("perceptual_score: mask is empty");
  }
  ImageBuffer ma = a;
  ImageBuffer mb = b;
  const int C = a.channels;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p]) continue;
    for (int c = 0; c < C; ++c) ma.data[p * C + c] = mb.data[p * C + c] = 0.0;
  }
  return perceptual_loss(encoder, ma, mb, config).value;
}

const char* to_string(PairRange r) {
  return r == PairRange::short_range ? "short" : "long";
}

ConsistencyReport evaluate_images(const std::vector<ImageBuffer>& images,
                                  const std::vector<RenderOutput>& geometry,
                                  const std::vector<CameraView>& views,
                                  const ConsistencyOptions& opts, const Encoder* encoder) {
  if (images.size() != views.size() || geometry.size() != views.size()) {
    throw ShapeError("evaluate: images, geometry and views must have equal counts");
  }
  if (opts.short_stride < 1 || opts.long_stride < 1) {
    throw InvalidArgument("evaluate: strides must be >= 1");
  }
  const bool perceptual = opts.perceptual && encoder != nullptr;

  ConsistencyReport report;
  report.options = opts;
  for (PairRange range : {PairRange::short_range, PairRange::long_range}) {
    const std::size_t s =
        static_cast<std::size_t>(range == PairRange::short_range ? opts.short_stride : opts.long_stride);
    for (std::size_t i = 0; i + s < views.size(); ++i) {
      PairScore p;
      p.index_a = i;
      p.index_b = i + s;
      p.view_a = views[i].id;
      p.view_b = views[i + s].id;
      p.range = range;
      report.pairs.push_back(std::move(p));
    }
  }

  parallel_for(report.pairs.size(), [&](std::size_t k) {
    PairScore& p = report.pairs[k];
    const RenderOutput& ga = geometry[p.index_a];
    const RenderOutput& gb = geometry[p.index_b];
    const FlowField flow = geometric_flow(ga.depth, ga.alpha, views[p.index_a], views[p.index_b],
                                          gb.depth, &gb.alpha, opts.flow);
    const auto importance = depth_importance(ga.depth, flow, opts.importance_sigma);
    const SplatResult warped = softmax_splat(images[p.index_a], flow, importance);
    const std::size_t filled =
        static_cast<std::size_t>(std::count(warped.filled.begin(), warped.filled.end(), 1));
    p.valid_fraction = static_cast<double>(filled) / static_cast<double>(warped.filled.size());
    if (filled == 0) return;
    p.rmse = masked_rmse(warped.image, images[p.index_b], warped.filled);
    if (perceptual) {
      p.perceptual = perceptual_score(*encoder, warped.image, images[p.index_b], warped.filled,
                                      opts.features);
    }
  });

  for (PairRange range : {PairRange::short_range, PairRange::long_range}) {
    RangeAggregate& agg = range == PairRange::short_range ? report.short_range : report.long_range;
    double rmse = 0.0;
    double perc = 0.0;
    for (const auto& p : report.pairs) {
      if (p.range != range || p.valid_fraction == 0.0) continue;
      ++agg.pairs;
      rmse += p.rmse;
      if (p.perceptual) perc += *p.perceptual;
    }
    if (agg.pairs > 0) {
      agg.rmse = rmse / static_cast<double>(agg.pairs);
      if (perceptual) agg.perceptual = perc / static_cast<double>(agg.pairs);
    }
  }
  return report;
}

ConsistencyReport evaluate(const GaussianScene& scene, const std::vector<CameraView>& views,
                           const ConsistencyOptions& opts, const Encoder* encoder) {
  std::vector<RenderOutput> renders;
  renders.reserve(views.size());
  for (const auto& v : views) renders.push_back(render(scene, v, opts.render));
  std::vector<ImageBuffer> images;
  images.reserve(renders.size());
  for (const auto& r : renders) images.push_back(r.color);
  return evaluate_images(images, renders, views, opts, encoder);
}

json ConsistencyReport::to_json() const {
  auto optional_number = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json pj = json::array();
  for (const auto& p : pairs) {
    pj.push_back({{"view_a", p.view_a},
                  {"view_b", p.view_b},
                  {"range", to_string(p.range)},
                  {"rmse", p.valid_fraction > 0.0 ? json(p.rmse) : json(nullptr)},
                  {"perceptual", optional_number(p.perceptual)},
                  {"valid_fraction", p.valid_fraction}});
  }
  auto agg = [&](const RangeAggregate& a) {
    return json{{"pairs", a.pairs},
                {"rmse", a.pairs ? json(a.rmse) : json(nullptr)},
                {"perceptual", optional_number(a.perceptual)}};
  };
  return {{"schema_version", 1},
          {"options",
           {{"short_stride", options.short_stride},
            {"long_stride", options.long_stride},
            {"stride_note", "short/long strides are conventions, not measured distances"},
            {"tau_depth", options.flow.tau_depth},
            {"tau_alpha", options.flow.tau_alpha},
            {"importance_sigma", options.importance_sigma},
            {"flow", "geometric (rendered depth)"}}},
          {"pairs", pj},
          {"aggregate", {{"short", agg(short_range)}, {"long", agg(long_range)}}}};
}

std::string ConsistencyReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "view_a,view_b,range,rmse,perceptual,valid_fraction\n";
  for (const auto& p : pairs) {
    out << p.view_a << ',' << p.view_b << ',' << to_string(p.range) << ',';
    if (p.valid_fraction > 0.0) out << p.rmse;
    out << ',';
    if (p.perceptual) out << *p.perceptual;
    out << ',' << p.valid_fraction << '\n';
  }
  return out.str();
}

namespace {
constexpr float kUnknownFlow = 1e10f;
}

FlowField read_flo(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  std::int32_t w = 0;
  std::int32_t h = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in || std::memcmp(magic, "PIEH", 4) != 0) throw FormatError(path.string() + ": not a .flo file");
  if (w <= 0 || h <= 0 || w > (1 << 15) || h > (1 << 15)) {
    throw FormatError(path.string() + ": implausible flow size");
  }
  FlowField flow(w, h);
  std::vector<float> raw(static_cast<std::size_t>(w) * h * 2);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!in) throw FormatError(path.string() + ": truncated flow data");
  for (std::size_t i = 0; i < flow.valid.size(); ++i) {
    const float u = raw[2 * i];
    const float v = raw[2 * i + 1];
    if (std::isfinite(u) && std::isfinite(v) && std::abs(u) < 1e9f && std::abs(v) < 1e9f) {
      flow.dx[i] = u;
      flow.dy[i] = v;
      flow.valid[i] = 1;
    }
  }
  return flow;
}

void write_flo(const FlowField& flow, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::int32_t w = flow.width;
  const std::int32_t h = flow.height;
  out.write("PIEH", 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  std::vector<float> raw(flow.valid.size() * 2);
  for (std::size_t i = 0; i < flow.valid.size(); ++i) {
    raw[2 * i] = flow.valid[i] ? static_cast<float>(flow.dx[i]) : kUnknownFlow;
    raw[2 * i + 1] = flow.valid[i] ? static_cast<float>(flow.dy[i]) : kUnknownFlow;
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace gsstyle
