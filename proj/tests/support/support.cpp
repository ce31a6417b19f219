#include "support.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "gsstyle/image_io.hpp"
#include "gsstyle/scene_io.hpp"

namespace gsstyle::test {

TempDir::TempDir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  const fs::path base = fs::temp_directory_path();
  for (;;) {
    fs::path p = base / (tag + "-" + std::to_string(rng() % 1000000000ULL));
    if (fs::create_directory(p)) {
      path_ = p;
      return;
    }
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

CameraView look_at(const std::string& id, int width, int height, double focal,
                   const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                   const Eigen::Vector3d& world_up) {
  const Eigen::Vector3d f = (target - eye).normalized();
  const Eigen::Vector3d r = (-world_up).cross(f).normalized();
  const Eigen::Vector3d d = f.cross(r);
  Eigen::Matrix3d R;
  R.row(0) = r;
  R.row(1) = d;
  R.row(2) = f;
  CameraView v;
  v.id = id;
  v.width = width;
  v.height = height;
  v.fx = v.fy = focal;
  v.cx = width / 2.0;
  v.cy = height / 2.0;
  v.world_to_camera.setIdentity();
  v.world_to_camera.topLeftCorner<3, 3>() = R;
  v.world_to_camera.topRightCorner<3, 1>() = -R * eye;
  return v;
}

CameraView identity_camera(int width, int height, double focal, const std::string& id) {
  CameraView v;
  v.id = id;
  v.width = width;
  v.height = height;
  v.fx = v.fy = focal;
  v.cx = width / 2.0;
  v.cy = height / 2.0;
  v.world_to_camera.setIdentity();
  return v;
}

std::array<float, 3> dc_for_color(const std::array<double, 3>& rgb) {
  std::array<float, 3> out{};
  for (int c = 0; c < 3; ++c) out[c] = static_cast<float>((rgb[c] - 0.5) / 0.28209479177387814);
  return out;
}

GaussianPrimitive make_gaussian(const Eigen::Vector3d& pos, const Eigen::Vector3d& scale,
                                double opacity, const std::array<double, 3>& rgb) {
  GaussianPrimitive g;
  for (int k = 0; k < 3; ++k) {
    g.position[k] = static_cast<float>(pos[k]);
    g.log_scale[k] = static_cast<float>(std::log(scale[k]));
  }
  g.opacity_logit = static_cast<float>(std::log(opacity / (1.0 - opacity)));
  g.sh_coeffs[0] = dc_for_color(rgb);
  return g;
}

GaussianScene random_scene(std::mt19937_64& rng, int count, const RandomSceneOptions& o) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  GaussianScene scene;
  scene.sh_degree = o.sh_degree;
  scene.background_color = {uni(0, 1), uni(0, 1), uni(0, 1)};
  const int rows = sh_rows(o.sh_degree);
  for (int i = 0; i < count; ++i) {
    GaussianPrimitive g;
    const double z = uni(o.z_min, o.z_max);
    g.position = {static_cast<float>(uni(-o.spread, o.spread) * z),
                  static_cast<float>(uni(-o.spread, o.spread) * z), static_cast<float>(z)};
    for (auto& s : g.log_scale) s = static_cast<float>(std::log(uni(o.scale_min, o.scale_max)));
    for (auto& q : g.rotation) q = static_cast<float>(uni(-1.0, 1.0));
    g.opacity_logit = static_cast<float>(uni(o.logit_min, o.logit_max));
    g.sh_coeffs[0] = dc_for_color({uni(0.1, 0.9), uni(0.1, 0.9), uni(0.1, 0.9)});
    for (int b = 1; b < rows; ++b) {
      for (auto& c : g.sh_coeffs[b]) c = static_cast<float>(uni(-o.sh_rest_amplitude, o.sh_rest_amplitude));
    }
    scene.primitives.push_back(g);
  }
  return scene;
}

ImageBuffer random_image(std::mt19937_64& rng, int w, int h, int c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  ImageBuffer img(w, h, c);
  for (auto& v : img.data) v = u(rng);
  return img;
}

namespace {

// Real SH basis as used by 3DGS interchange files, written out term by term.
std::vector<double> oracle_sh(int degree, const Eigen::Vector3d& d) {
  const double x = d.x(), y = d.y(), z = d.z();
  std::vector<double> b;
  b.reserve(16);
  b.push_back(0.28209479177387814);
  if (degree >= 1) {
    const double c1 = 0.4886025119029199;
    b.insert(b.end(), {-c1 * y, c1 * z, -c1 * x});
  }
  if (degree >= 2) {
    b.insert(b.end(), {1.0925484305920792 * x * y, -1.0925484305920792 * y * z,
                       0.31539156525252005 * (2 * z * z - x * x - y * y),
                       -1.0925484305920792 * x * z, 0.5462742152960396 * (x * x - y * y)});
  }
  if (degree >= 3) {
    b.insert(b.end(), {-0.5900435899266435 * y * (3 * x * x - y * y),
                       2.890611442640554 * x * y * z,
                       -0.4570457994644658 * y * (4 * z * z - x * x - y * y),
                       0.3731763325901154 * z * (2 * z * z - 3 * x * x - 3 * y * y),
                       -0.4570457994644658 * x * (4 * z * z - x * x - y * y),
                       1.445305721320277 * z * (x * x - y * y),
                       -0.5900435899266435 * x * (x * x - 3 * y * y)});
  }
  return b;
}

struct OracleSplat {
  double depth;
  std::size_t index;
  Eigen::Vector2d mean;
  Eigen::Matrix2d inv_cov;
  double opacity;
  Eigen::Vector3d color;
};

}  // namespace

RenderOutput naive_render(const GaussianScene& scene, const CameraView& view,
                          const RenderOptions& opts) {
  const Eigen::Matrix3d W = view.world_to_camera.topLeftCorner<3, 3>();
  const Eigen::Vector3d t = view.world_to_camera.topRightCorner<3, 1>();
  const Eigen::Vector3d eye = -W.transpose() * t;
  std::vector<OracleSplat> splats;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const auto& p = scene.primitives[i];
    const Eigen::Vector3d mu(p.position[0], p.position[1], p.position[2]);
    const Eigen::Vector3d pc = W * mu + t;
    if (pc.z() <= opts.near_clip) continue;
    Eigen::Quaterniond q(p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]);
    const Eigen::Matrix3d R = q.norm() > 0 ? q.normalized().toRotationMatrix() : Eigen::Matrix3d::Identity();
    const Eigen::Vector3d s(std::exp(double(p.log_scale[0])), std::exp(double(p.log_scale[1])),
                            std::exp(double(p.log_scale[2])));
    const Eigen::Matrix3d sigma = R * s.cwiseAbs2().asDiagonal() * R.transpose();
    const double z = pc.z();
    Eigen::Matrix<double, 2, 3> J;
    // Jacobian taken at the view direction pulled back inside the guard band
    const double gx_lo = -opts.frustum_guard * view.cx / view.fx;
    const double gx_hi = opts.frustum_guard * (view.width - view.cx) / view.fx;
    const double gy_lo = -opts.frustum_guard * view.cy / view.fy;
    const double gy_hi = opts.frustum_guard * (view.height - view.cy) / view.fy;
    const double ux = std::min(std::max(pc.x() / z, gx_lo), gx_hi);
    const double uy = std::min(std::max(pc.y() / z, gy_lo), gy_hi);
    J << view.fx / z, 0, -view.fx * ux / z, 0, view.fy / z, -view.fy * uy / z;
    Eigen::Matrix2d cov = J * W * sigma * W.transpose() * J.transpose();
    cov += opts.cov_dilation * Eigen::Matrix2d::Identity();
    OracleSplat o;
    o.depth = z;
    o.index = i;
    o.mean = {view.fx * pc.x() / z + view.cx, view.fy * pc.y() / z + view.cy};
    o.inv_cov = cov.inverse();
    o.opacity = 1.0 / (1.0 + std::exp(-double(p.opacity_logit)));
    const auto basis = oracle_sh(scene.sh_degree, (mu - eye).normalized());
    for (int c = 0; c < 3; ++c) {
      double v = 0.5;
      for (std::size_t b = 0; b < basis.size(); ++b) v += basis[b] * p.sh_coeffs[b][c];
      o.color[c] = std::max(0.0, v);
    }
    splats.push_back(o);
  }
  std::sort(splats.begin(), splats.end(), [](const auto& a, const auto& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });

  RenderOutput out;
  out.color = ImageBuffer(view.width, view.height, 3);
  out.alpha = ImageBuffer(view.width, view.height, 1);
  out.depth = ImageBuffer(view.width, view.height, 1);
  out.contrib_count.assign(static_cast<std::size_t>(view.width) * view.height, 0);
  for (int y = 0; y < view.height; ++y) {
    for (int x = 0; x < view.width; ++x) {
      double T = 1.0;
      Eigen::Vector3d C = Eigen::Vector3d::Zero();
      double D = 0.0;
      int n = 0;
      for (const auto& o : splats) {
        const Eigen::Vector2d d(x + 0.5 - o.mean.x(), y + 0.5 - o.mean.y());
        const double m = d.dot(o.inv_cov * d);
        if (m > 9.0) continue;
        const double a = std::min(opts.alpha_max, o.opacity * std::exp(-0.5 * m));
        if (a < opts.alpha_min) continue;
        C += o.color * a * T;
        D += o.depth * a * T;
        T *= 1.0 - a;
        ++n;
        if (T < opts.transmittance_stop) break;
      }
      const std::size_t i = static_cast<std::size_t>(y) * view.width + x;
      for (int c = 0; c < 3; ++c) out.color.data[i * 3 + c] = C[c] + T * scene.background_color[c];
      out.alpha.data[i] = 1.0 - T;
      out.depth.data[i] = D / (1.0 - T + 1e-8);
      out.contrib_count[i] = n;
    }
  }
  return out;
}

FeatureMaps naive_encoder_forward(const Encoder& encoder, const ImageBuffer& image,
                                  const std::set<std::string>& capture) {
  const auto& spec = encoder.spec();
  // Work in [c][y][x] to stay independent of the library's layout.
  int C = 3, H = image.height, W = image.width;
  std::vector<double> cur(static_cast<std::size_t>(C) * H * W);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        cur[(c * H + y) * W + x] = (image.at(x, y, c) - spec.input_mean[c]) / spec.input_std[c];

  FeatureMaps out;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& L = spec.layers[l];
    std::vector<double> next;
    int C2 = C, H2 = H, W2 = W;
    if (L.kind == LayerKind::conv3x3) {
      const auto& w = encoder.weights()[l];
      C2 = L.out_channels;
      next.assign(static_cast<std::size_t>(C2) * H * W, 0.0);
      for (int o = 0; o < C2; ++o)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double acc = w.bias[o];
            for (int i = 0; i < C; ++i)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int yy = y + ky - 1, xx = x + kx - 1;
                  if (yy < 0 || xx < 0 || yy >= H || xx >= W) continue;
                  acc += double(w.kernel[((o * C + i) * 3 + ky) * 3 + kx]) * cur[(i * H + yy) * W + xx];
                }
            next[(o * H + y) * W + x] = acc;
          }
    } else if (L.kind == LayerKind::relu) {
      next = cur;
      for (auto& v : next) v = std::max(0.0, v);
    } else {
      H2 = H / 2;
      W2 = W / 2;
      next.assign(static_cast<std::size_t>(C) * H2 * W2, 0.0);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H2; ++y)
          for (int x = 0; x < W2; ++x) {
            double m = -std::numeric_limits<double>::infinity();
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) m = std::max(m, cur[(c * H + 2 * y + dy) * W + 2 * x + dx]);
            next[(c * H2 + y) * W2 + x] = m;
          }
    }
    cur = std::move(next);
    C = C2;
    H = H2;
    W = W2;
    if (capture.count(L.name)) {
      FeatureMap f(H, W, C);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) f.at(y, x, c) = cur[(c * H + y) * W + x];
      out[L.name] = std::move(f);
    }
  }
  return out;
}

std::vector<std::uint32_t> exhaustive_nn(const FeatureMap& query, const FeatureMap& reference) {
  const int C = query.channels;
  std::vector<std::uint32_t> out(query.pixel_count());
  for (std::size_t i = 0; i < query.pixel_count(); ++i) {
    const double* u = query.pixel(i);
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t j = 0; j < reference.pixel_count(); ++j) {
      const double* v = reference.pixel(j);
      double dot = 0.0, uu = 0.0, vv = 0.0;
      for (int c = 0; c < C; ++c) dot += u[c] * v[c];
      for (int c = 0; c < C; ++c) uu += u[c] * u[c];
      for (int c = 0; c < C; ++c) vv += v[c] * v[c];
      const double d = 1.0 - dot / (std::sqrt(uu) * std::sqrt(vv) + 1e-8);
      if (d < best) {
        best = d;
        arg = static_cast<std::uint32_t>(j);
      }
    }
    out[i] = arg;
  }
  return out;
}

FeatureMap random_feature_map(std::mt19937_64& rng, int h, int w, int c) {
  std::normal_distribution<double> n(0.0, 1.0);
  FeatureMap f(h, w, c);
  for (auto& v : f.data) v = std::max(0.0, n(rng));  // relu-like, with exact zeros
  return f;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

double central_difference_float(float& param, double h, const std::function<double()>& f) {
  const float x0 = param;
  const float xp = static_cast<float>(x0 + h);
  const float xm = static_cast<float>(x0 - h);
  param = xp;
  const double fp = f();
  param = xm;
  const double fm = f();
  param = x0;
  return (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
}

double central_difference(double& param, double h, const std::function<double()>& f) {
  const double x0 = param;
  param = x0 + h;
  const double fp = f();
  param = x0 - h;
  const double fm = f();
  param = x0;
  return (fp - fm) / (2.0 * h);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SceneFixture e2e_fixture(int gaussians, int views, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  SceneFixture fx;
  fx.scene.sh_degree = 1;
  fx.scene.background_color = {0.0, 0.0, 0.0};
  auto add = [&](const Eigen::Vector3d& p, const Eigen::Vector3d& s, double opacity,
                 const std::array<double, 3>& rgb) {
    fx.scene.primitives.push_back(make_gaussian(p, s, opacity, rgb));
  };

  // Back wall in the plane z = 2.5, checkered.
  const int wall_x = 18, wall_y = 10;
  for (int j = 0; j < wall_y; ++j) {
    for (int i = 0; i < wall_x; ++i) {
      const double x = -5.5 + 11.0 * (i + 0.5) / wall_x;
      const double y = -4.0 + 5.2 * (j + 0.5) / wall_y;
      const bool dark = (i + j) % 2 == 0;
      const double n = uni(-0.08, 0.08);
      const std::array<double, 3> rgb = dark ? std::array<double, 3>{0.25 + n, 0.35 + n, 0.55 + n}
                                             : std::array<double, 3>{0.75 + n, 0.7 + n, 0.45 + n};
      add({x, y, 2.5}, {0.38, 0.33, 0.02}, 0.97, rgb);
    }
  }
  // Floor in the plane y = 1.2 with a gradient.
  const int floor_x = 18, floor_z = 8;
  for (int k = 0; k < floor_z; ++k) {
    for (int i = 0; i < floor_x; ++i) {
      const double x = -5.5 + 11.0 * (i + 0.5) / floor_x;
      const double z = -3.0 + 5.5 * (k + 0.5) / floor_z;
      const double g = double(k) / floor_z;
      add({x, 1.2, z}, {0.38, 0.02, 0.4}, 0.97,
          {0.3 + 0.4 * g + uni(-0.05, 0.05), 0.5 - 0.2 * g, 0.25 + uni(-0.05, 0.05)});
    }
  }
  while (static_cast<int>(fx.scene.primitives.size()) < gaussians) {
    add({uni(-1.5, 1.5), uni(-1.0, 1.0), uni(-1.0, 1.5)},
        {uni(0.06, 0.2), uni(0.06, 0.2), uni(0.06, 0.2)}, uni(0.85, 0.99),
        {uni(0.1, 0.9), uni(0.1, 0.9), uni(0.1, 0.9)});
    auto& g = fx.scene.primitives.back();
    for (auto& q : g.rotation) q = static_cast<float>(uni(-1.0, 1.0));
    for (int b = 1; b < 4; ++b)
      for (auto& c : g.sh_coeffs[b]) c = static_cast<float>(uni(-0.1, 0.1));
  }
  fx.scene.primitives.resize(static_cast<std::size_t>(gaussians));

  const double pi = std::acos(-1.0);
  for (int v = 0; v < views; ++v) {
    const double theta = (-25.0 + 50.0 * v / std::max(1, views - 1)) * pi / 180.0;
    const Eigen::Vector3d eye(4.0 * std::sin(theta), -0.8, -4.0 * std::cos(theta));
    char id[16];
    std::snprintf(id, sizeof id, "v%03d", v);
    fx.views.push_back(look_at(id, size, size, 0.9 * size, eye, {0.0, 0.2, 0.0}));
  }
  return fx;
}

SceneFixture plane_fixture(int views, int size, int shift_px) {
  SceneFixture fx;
  fx.scene.sh_degree = 0;
  fx.scene.background_color = {0.0, 0.0, 0.0};
  const double depth = 4.0;
  const double focal = size;
  const double px = depth / focal;  // world units per pixel on the plane
  const double shift = shift_px * px;
  const double half = 0.5 * size * px;
  const double spacing = 0.15;
  const double x_lo = -half - 0.5;
  const double x_hi = half + shift * (views - 1) + 0.5;
  for (double y = -half - 0.5; y <= half + 0.5; y += spacing) {
    for (double x = x_lo; x <= x_hi; x += spacing) {
      const std::array<double, 3> rgb = {0.5 + 0.35 * std::sin(2.1 * x + 0.3 * y),
                                         0.5 + 0.35 * std::cos(1.7 * y - 0.5 * x),
                                         0.5 + 0.3 * std::sin(1.3 * (x + y))};
      fx.scene.primitives.push_back(make_gaussian({x, y, depth}, {0.12, 0.12, 1e-4}, 0.99, rgb));
    }
  }
  for (int v = 0; v < views; ++v) {
    CameraView cam = identity_camera(size, size, focal, "p" + std::to_string(v));
    cam.world_to_camera(0, 3) = -shift * v;
    fx.views.push_back(cam);
  }
  return fx;
}

void write_dataset(const SceneFixture& fx, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::vector<CameraView> views = fx.views;
  for (auto& v : views) {
    const fs::path p = dir / "images" / (v.id + ".png");
    write_image(render(fx.scene, v).color, p);
    v.image_path = p.string();
  }
  save_dataset(views, dir);
}

ImageBuffer make_style_image(int w, int h) {
  ImageBuffer img(w, h, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w;
      const double v = (y + 0.5) / h;
      img.at(x, y, 0) = 0.85 - 0.25 * v;
      img.at(x, y, 1) = 0.35 + 0.3 * u * v;
      img.at(x, y, 2) = 0.15 + 0.1 * std::sin(12.0 * u);
    }
  }
  return img;
}

}  // namespace gsstyle::test
