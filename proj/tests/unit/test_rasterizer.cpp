#include <doctest.h>

#include "gsstyle/error.hpp"
#include "gsstyle/losses.hpp"
#include "gsstyle/parallel.hpp"
#include "gsstyle/rasterizer.hpp"
#include "support.hpp"

using namespace gsstyle;
using namespace gsstyle::test;

namespace {

// Nearly point-like Gaussian whose center sits exactly on the center of
// pixel (px, py) of an identity camera.
GaussianPrimitive centered(const CameraView& cam, int px, int py, double z, double opacity,
                           const std::array<double, 3>& rgb) {
  const double x = (px + 0.5 - cam.cx) / cam.fx * z;
  const double y = (py + 0.5 - cam.cy) / cam.fy * z;
  return make_gaussian({x, y, z}, {1e-3, 1e-3, 1e-3}, opacity, rgb);
}

RenderOptions plain() {
  RenderOptions o;
  o.transmittance_stop = 0.0;
  return o;
}

double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("empty scene renders the background") {
  GaussianScene s;
  s.background_color = {0.1, 0.2, 0.3};
  const auto out = render(s, identity_camera(8, 8, 8.0));
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(out.color.at(x, y, 0) == 0.1);
      CHECK(out.color.at(x, y, 2) == 0.3);
      CHECK(out.alpha.at(x, y) == 0.0);
    }
}

TEST_CASE("one Gaussian on a pixel center") {
  const CameraView cam = identity_camera(9, 9, 10.0);
  GaussianScene s;
  s.primitives.push_back(centered(cam, 4, 4, 3.0, 0.8, {1.0, 0.0, 0.0}));
  const auto out = render(s, cam);
  CHECK(out.color.at(4, 4, 0) == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(std::abs(out.color.at(4, 4, 0) - 0.8) < 1e-6);
  CHECK(std::abs(out.color.at(4, 4, 1)) < 1e-6);
  CHECK(std::abs(out.alpha.at(4, 4) - 0.8) < 1e-6);
  CHECK(std::abs(out.depth.at(4, 4) - 3.0) < 1e-4);
}

TEST_CASE("two coincident Gaussians compose front to back") {
  const CameraView cam = identity_camera(9, 9, 10.0);
  GaussianScene s;
  // listed back first so the depth sort has to reorder them
  s.primitives.push_back(centered(cam, 4, 4, 2.0, 0.5, {0.0, 1.0, 0.0}));
  s.primitives.push_back(centered(cam, 4, 4, 1.0, 0.5, {1.0, 0.0, 0.0}));
  const auto out = render(s, cam);
  CHECK(std::abs(out.color.at(4, 4, 0) - 0.5) < 1e-6);
  CHECK(std::abs(out.color.at(4, 4, 1) - 0.25) < 1e-6);
  CHECK(std::abs(out.color.at(4, 4, 2)) < 1e-6);
  CHECK(std::abs(out.alpha.at(4, 4) - 0.75) < 1e-6);
  CHECK(std::abs(out.depth.at(4, 4) - (1.0 * 0.5 + 2.0 * 0.25) / 0.75) < 1e-6);
}

TEST_CASE("projection: culling, covariance and base color") {
  const CameraView cam = identity_camera(32, 32, 40.0);
  GaussianScene s;
  s.primitives.push_back(make_gaussian({0, 0, 0}, {0.1, 0.1, 0.1}, 0.5, {0.5, 0.5, 0.5}));
  CHECK(project(s, cam).empty());

  const double sc = 0.05, z = 4.0;
  s.primitives[0] = make_gaussian({0, 0, z}, {sc, sc, sc}, 0.5, {0.5, 0.5, 0.5});
  const float k = 0.7f;
  s.primitives[0].sh_coeffs[0] = {k, k, k};
  const auto p = project(s, cam);
  REQUIRE(p.size() == 1);
  const double expect = std::pow(40.0 * sc / z, 2) + 0.3;
  CHECK(p[0].cov2d(0, 0) == doctest::Approx(expect).epsilon(1e-6));
  CHECK(p[0].cov2d(1, 1) == doctest::Approx(expect).epsilon(1e-6));
  CHECK(std::abs(p[0].cov2d(0, 1)) < 1e-12);
  for (int c = 0; c < 3; ++c) CHECK(p[0].color[c] == doctest::Approx(0.5 + kShC0 * k).epsilon(1e-7));

  // behind the camera
  s.primitives[0].position[2] = -1.0f;
  CHECK(project(s, cam).empty());
  // fully off-screen
  s.primitives[0].position = {50.0f, 0.0f, 4.0f};
  CHECK(project(s, cam).empty());
}

TEST_CASE("projection Jacobian is taken inside the guard band") {
  const CameraView cam = identity_camera(32, 32, 40.0);  // half extent 0.4 in x/z
  GaussianScene s;
  const double sc = 0.5, z = 2.0;
  s.primitives.push_back(make_gaussian({z, 0, z}, {sc, sc, sc}, 0.5, {0.5, 0.5, 0.5}));  // x/z = 1
  const auto p = project(s, cam);
  REQUIRE(p.size() == 1);
  CHECK(p[0].mean2d.x() == doctest::Approx(16.0 + 40.0).epsilon(1e-9));  // the mean is not clamped
  const double base = std::pow(40.0 * sc / z, 2);
  const double tx = 1.3 * 0.4;
  CHECK(p[0].cov2d(0, 0) == doctest::Approx(base * (1.0 + tx * tx) + 0.3).epsilon(1e-6));
  CHECK(p[0].cov2d(1, 1) == doctest::Approx(base + 0.3).epsilon(1e-6));

  RenderOptions wide;
  wide.frustum_guard = 10.0;
  CHECK(project(s, cam, wide)[0].cov2d(0, 0) == doctest::Approx(base * 2.0 + 0.3).epsilon(1e-6));
  wide.frustum_guard = 0.0;
  CHECK_THROWS_AS(project(s, cam, wide), InvalidArgument);
}

TEST_CASE("tiled render matches the naive reference") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 6; ++trial) {
    RandomSceneOptions o;
    o.sh_degree = trial % 4;
    const GaussianScene s = random_scene(rng, 50, o);
    const CameraView cam = identity_camera(32, 32, 30.0);
    for (int tile : {16, 8, 5}) {
      RenderOptions opts = plain();
      opts.tile_size = tile;
      const auto a = render(s, cam, opts);
      const auto b = naive_render(s, cam, opts);
      CHECK(max_abs_diff(a.color, b.color) <= 1e-5);
      CHECK(max_abs_diff(a.alpha, b.alpha) <= 1e-5);
    }
  }
}

TEST_CASE("early transmittance stop changes pixels by at most the threshold") {
  std::mt19937_64 rng(5);
  RandomSceneOptions o;
  o.logit_min = 2.0;
  o.logit_max = 6.0;
  o.scale_max = 0.6;
  const GaussianScene s = random_scene(rng, 150, o);
  const CameraView cam = identity_camera(32, 32, 30.0);
  const auto fast = render(s, cam);
  const auto full = naive_render(s, cam, plain());
  // the tail after the stop is bounded by T_stop * max(color, background)
  double bound = 0.0;
  for (const auto& p : project(s, cam)) bound = std::max({bound, p.color.maxCoeff()});
  for (double b : s.background_color) bound = std::max(bound, b);
  CHECK(max_abs_diff(fast.color, full.color) <= 1e-4 * bound + 1e-12);
}

TEST_CASE("render is bit identical across worker counts") {
  std::mt19937_64 rng(9);
  RandomSceneOptions o;
  o.sh_degree = 2;
  const GaussianScene s = random_scene(rng, 120, o);
  const CameraView cam = identity_camera(40, 28, 30.0);
  set_thread_count(1);
  const auto a = render(s, cam);
  ImageBuffer g = a.color;
  for (auto& v : g.data) v = 0.3;
  const auto ga = render_backward(s, cam, g);
  set_thread_count(4);
  const auto b = render(s, cam);
  const auto gb = render_backward(s, cam, g);
  set_thread_count(0);
  CHECK(a.color.data == b.color.data);
  CHECK(a.depth.data == b.depth.data);
  CHECK(ga.sh == gb.sh);
}

TEST_CASE("alpha never decreases when one opacity increases") {
  std::mt19937_64 rng(31);
  GaussianScene s = random_scene(rng, 40);
  const CameraView cam = identity_camera(24, 24, 20.0);
  auto prev = render(s, cam, plain()).alpha;
  for (int step = 0; step < 6; ++step) {
    s.primitives[7].opacity_logit += 0.7f;
    const auto cur = render(s, cam, plain()).alpha;
    for (std::size_t i = 0; i < cur.data.size(); ++i) {
      CHECK(cur.data[i] >= prev.data[i] - 1e-15);
      CHECK(cur.data[i] <= 1.0);
    }
    prev = cur;
  }
}

TEST_CASE("single Gaussian gradient equals alpha times C0") {
  const CameraView cam = identity_camera(9, 9, 10.0);
  GaussianScene s;
  s.background_color = {0.0, 0.0, 0.0};
  s.primitives.push_back(centered(cam, 4, 4, 3.0, 0.8, {1.0, 0.0, 0.0}));
  ImageBuffer g(9, 9, 3);
  g.at(4, 4, 0) = 1.0;
  const auto grad = render_backward(s, cam, g);
  CHECK(grad.sh_at(0, 0, 0) == doctest::Approx(0.8 * kShC0).epsilon(1e-6));
  CHECK(grad.sh_at(0, 0, 1) == 0.0);
  CHECK(grad.opacity_logit.empty());

  // zero upstream gradient gives exactly zero
  const auto zero = render_backward(s, cam, ImageBuffer(9, 9, 3));
  for (double v : zero.sh) CHECK(v == 0.0);

  CHECK_THROWS_AS(render_backward(s, cam, ImageBuffer(8, 9, 3)), ShapeError);
}

TEST_CASE("render_backward agrees with finite differences under L1") {
  std::mt19937_64 rng(77);
  RandomSceneOptions o;
  o.sh_degree = 2;
  o.logit_min = -1.0;
  o.logit_max = 1.5;
  o.scale_min = 0.15;
  o.scale_max = 0.5;
  GaussianScene s = random_scene(rng, 10, o);
  const CameraView cam = identity_camera(16, 16, 14.0);
  RenderOptions opts = plain();
  opts.alpha_min = 0.0;
  opts.trainable = TrainableSet::sh_and_opacity;
  const auto base = render(s, cam, opts);
  ImageBuffer target = base.color;
  std::bernoulli_distribution coin(0.5);
  for (auto& v : target.data) v += coin(rng) ? 0.1 : -0.1;
  auto loss = [&] { return l1_loss(render(s, cam, opts).color, target).value; };
  const auto analytic = render_backward(s, cam, l1_loss(base.color, target).grad, opts);

  std::vector<double> a, n;
  for (std::size_t p = 0; p < s.size(); ++p) {
    for (int b = 0; b < s.coeff_rows(); ++b)
      for (int c = 0; c < 3; ++c) {
        a.push_back(analytic.sh_at(p, b, c));
        n.push_back(central_difference_float(s.primitives[p].sh_coeffs[b][c], 1e-3, loss));
      }
  }
  CHECK(relative_error(a, n) < 1e-3);

  std::vector<double> ao, no;
  for (std::size_t p = 0; p < s.size(); ++p) {
    ao.push_back(analytic.opacity_logit[p]);
    no.push_back(central_difference_float(s.primitives[p].opacity_logit, 1e-3, loss));
  }
  CHECK(relative_error(ao, no) < 1e-3);
}

TEST_CASE("render_batch equals sequential renders") {
  std::mt19937_64 rng(3);
  const GaussianScene s = random_scene(rng, 30);
  std::vector<CameraView> views = {identity_camera(16, 16, 14.0, "a"),
                                   look_at("b", 16, 16, 14.0, {0.5, 0, -0.5}, {0, 0, 4}),
                                   identity_camera(16, 16, 14.0, "a")};
  const auto batch = render_batch(s, views);
  REQUIRE(batch.size() == 3);
  for (std::size_t i = 0; i < views.size(); ++i) CHECK(batch[i].color.data == render(s, views[i]).color.data);
  CHECK(batch[0].color.data == batch[2].color.data);
  CHECK(render_batch(s, {}).empty());
}
