// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "gsstyle/consistency.hpp"
#include "gsstyle/image_io.hpp"
#include "gsstyle/losses.hpp"
#include "gsstyle/pipeline.hpp"
#include "gsstyle/rasterizer.hpp"
#include "gsstyle/scene_io.hpp"
#include "support.hpp"

using namespace gsstyle;
using namespace gsstyle::test;

namespace {

int failures = 0;

struct Outcome {
  bool ok = false;
  std::string detail;
};

void report(const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = limit_s <= 0.0 || s < limit_s;
  const bool ok = o.ok && in_time;
  if (!ok) ++failures;
  char timing[96];
  if (limit_s > 0.0) {
    std::snprintf(timing, sizeof timing, "%.2f s, limit %.0f s", s, limit_s);
  } else {
    std::snprintf(timing, sizeof timing, "%.2f s", s);
  }
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << timing << "]"
            << (in_time ? "" : " (over time limit)") << std::endl;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

EncoderSpec small_spec() {
  EncoderSpec spec;
  spec.layers = {{"conv1", LayerKind::conv3x3, 3, 6},
                 {"relu1", LayerKind::relu, 6, 6},
                 {"pool1", LayerKind::maxpool2, 6, 6},
                 {"conv2", LayerKind::conv3x3, 6, 8},
                 {"relu2", LayerKind::relu, 8, 8}};
  spec.input_mean = {0.45, 0.45, 0.45};
  spec.input_std = {0.25, 0.25, 0.25};
  return spec;
}

GaussianPrimitive centered(const CameraView& cam, int px, int py, double z, double opacity,
                           const std::array<double, 3>& rgb) {
  const double x = (px + 0.5 - cam.cx) / cam.fx * z;
  const double y = (py + 0.5 - cam.cy) / cam.fy * z;
  return make_gaussian({x, y, z}, {1e-3, 1e-3, 1e-3}, opacity, rgb);
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(101);
  RenderOptions opts;
  opts.transmittance_stop = 0.0;  // the reference composites every contribution
  const CameraView cam = identity_camera(32, 32, 30.0);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    RandomSceneOptions o;
    o.sh_degree = i % 4;
    const GaussianScene s = random_scene(rng, 50 + 150 * i / 19, o);
    const auto a = render(s, cam, opts);
    const auto b = naive_render(s, cam, opts);
    worst = std::max({worst, max_abs_diff(a.color, b.color), max_abs_diff(a.alpha, b.alpha)});
  }
  return {worst <= 1e-5, "20 scenes, 50-200 Gaussians, max |diff| " + fmt("%.3g", worst) + " (tol 1e-5)"};
}

Outcome gradient_suite() {
  std::mt19937_64 rng(202);
  double worst_render = 0.0, worst_perc = 0.0, worst_nnfm = 0.0;
  const int instances = 5;
  for (int k = 0; k < instances; ++k) {
    // render_backward, SH and opacity, under L1
    RandomSceneOptions o;
    o.sh_degree = 1 + k % 3;
    o.logit_min = -1.0;
    o.logit_max = 1.5;
    o.scale_min = 0.15;
    o.scale_max = 0.5;
    GaussianScene s = random_scene(rng, 10, o);
    const CameraView cam = identity_camera(16, 16, 14.0);
    RenderOptions ro;
    ro.transmittance_stop = 0.0;
    ro.alpha_min = 0.0;
    ro.trainable = TrainableSet::sh_and_opacity;
    const auto base = render(s, cam, ro);
    ImageBuffer target = base.color;
    std::bernoulli_distribution coin(0.5);
    for (auto& v : target.data) v += coin(rng) ? 0.1 : -0.1;
    auto loss = [&] { return l1_loss(render(s, cam, ro).color, target).value; };
    const auto g = render_backward(s, cam, l1_loss(base.color, target).grad, ro);
    std::vector<double> a, n, ao, no;
    for (std::size_t p = 0; p < s.size(); ++p) {
      for (int b = 0; b < s.coeff_rows(); ++b)
        for (int c = 0; c < 3; ++c) {
          a.push_back(g.sh_at(p, b, c));
          n.push_back(central_difference_float(s.primitives[p].sh_coeffs[b][c], 1e-3, loss));
        }
      ao.push_back(g.opacity_logit[p]);
      no.push_back(central_difference_float(s.primitives[p].opacity_logit, 1e-3, loss));
    }
    worst_render = std::max({worst_render, relative_error(a, n), relative_error(ao, no)});

    // perceptual
    const Encoder e = make_random_encoder(small_spec(), 300 + k);
    FeatureLossConfig cfg;
    cfg.perceptual_layers = {"relu1", "relu2"};
    cfg.nnfm_layer = "relu2";
    ImageBuffer x = random_image(rng, 10, 10, 3);
    const ImageBuffer y = random_image(rng, 10, 10, 3);
    const auto pa = perceptual_loss(e, x, y, cfg);
    std::vector<double> pn;
    for (auto& v : x.data) pn.push_back(central_difference(v, 1e-6, [&] { return perceptual_loss(e, x, y, cfg).value; }));
    worst_perc = std::max(worst_perc, relative_error(pa.grad.data, pn));

    // nnfm, nearest-neighbour assignment held at its value for x
    const FeatureMap fs = e.forward(y, {"relu2"}).at("relu2");
    const auto matches = nearest_neighbors(e.forward(x, {"relu2"}).at("relu2"), fs);
    const auto na = nnfm_loss(e, x, fs, "relu2");
    std::vector<double> nn;
    for (auto& v : x.data) {
      nn.push_back(central_difference(v, 1e-6, [&] {
        return nnfm_feature_loss(e.forward(x, {"relu2"}).at("relu2"), fs, matches, nullptr);
      }));
    }
    worst_nnfm = std::max(worst_nnfm, relative_error(na.grad.data, nn));
  }
  const bool ok = worst_render < 1e-3 && worst_perc < 1e-3 && worst_nnfm < 1e-3;
  return {ok, std::to_string(instances) + " instances each; max rel err render " + fmt("%.2e", worst_render) +
                  ", perceptual " + fmt("%.2e", worst_perc) + ", nnfm " + fmt("%.2e", worst_nnfm) +
                  " (tol 1e-3)"};
}

Outcome nn_oracle() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> side(1, 64), chans(1, 64);
  int mismatched = 0;
  for (int i = 0; i < 50; ++i) {
    const int c = chans(rng);
    const FeatureMap q = random_feature_map(rng, side(rng), side(rng), c);
    const FeatureMap r = random_feature_map(rng, side(rng), side(rng), c);
    if (nearest_neighbors(q, r).index != exhaustive_nn(q, r)) ++mismatched;
  }
  return {mismatched == 0, "50 pairs up to 64x64, " + std::to_string(mismatched) + " mismatched"};
}

Outcome hand_cases() {
  const CameraView cam = identity_camera(9, 9, 10.0);
  GaussianScene one;
  one.primitives.push_back(centered(cam, 4, 4, 3.0, 0.8, {1.0, 0.0, 0.0}));
  const auto r1 = render(one, cam);
  double err = std::max({std::abs(r1.color.at(4, 4, 0) - 0.8), std::abs(r1.color.at(4, 4, 1)),
                         std::abs(r1.color.at(4, 4, 2)), std::abs(r1.alpha.at(4, 4) - 0.8)});
  GaussianScene two;
  two.primitives.push_back(centered(cam, 4, 4, 1.0, 0.5, {1.0, 0.0, 0.0}));
  two.primitives.push_back(centered(cam, 4, 4, 2.0, 0.5, {0.0, 1.0, 0.0}));
  const auto r2 = render(two, cam);
  err = std::max({err, std::abs(r2.color.at(4, 4, 0) - 0.5), std::abs(r2.color.at(4, 4, 1) - 0.25),
                  std::abs(r2.color.at(4, 4, 2)), std::abs(r2.alpha.at(4, 4) - 0.75)});
  return {err <= 1e-6, "max |err| " + fmt("%.2e", err) + " (tol 1e-6)"};
}

struct E2E {
  SceneFixture fx;
  TempDir dir{"gsstyle-e2e"};
  fs::path dataset;
  fs::path style;
  StylizeConfig config;
  std::optional<StylizeResult> first;
  std::optional<StylizeResult> second;
  double first_seconds = 0.0;
};

StylizeResult run_e2e(E2E& e, const std::string& tag) {
  StylizeConfig c = e.config;
  c.output_dir = e.dir / tag;
  return stylize(e.fx.scene, e.dataset, e.style, "", c, make_default_encoder());
}

bool same_geometry(const GaussianScene& a, const GaussianScene& b) {
  if (a.size() != b.size() || a.sh_degree != b.sh_degree) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& p = a.primitives[i];
    const auto& q = b.primitives[i];
    if (std::memcmp(p.position.data(), q.position.data(), sizeof p.position) != 0 ||
        std::memcmp(p.log_scale.data(), q.log_scale.data(), sizeof p.log_scale) != 0 ||
        std::memcmp(p.rotation.data(), q.rotation.data(), sizeof p.rotation) != 0 ||
        std::memcmp(&p.opacity_logit, &q.opacity_logit, sizeof p.opacity_logit) != 0) {
      return false;
    }
  }
  return true;
}

Outcome end_to_end(E2E& e) {
  e.fx = e2e_fixture(500, 20, 64, 11);
  e.dataset = e.dir / "data";
  e.style = e.dir / "style.png";
  write_dataset(e.fx, e.dataset);
  write_image(make_style_image(64, 64), e.style);
  e.config.max_iterations = 500;
  e.config.views_per_round = 20;
  e.config.seed = 7;

  const auto t0 = std::chrono::steady_clock::now();
  e.first = run_e2e(e, "run_a");
  e.first_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  e.second = run_e2e(e, "run_b");

  const RunReport& r = e.first->report;
  const bool ran = r.status == RunStatus::completed || r.status == RunStatus::converged;
  const bool geometry = same_geometry(e.fx.scene, e.first->scene);
  const double ratio = r.edited_l1_after / r.edited_l1_before;
  save_ply(e.first->scene, e.dir / "a.ply");
  save_ply(e.second->scene, e.dir / "b.ply");
  const bool reproducible = read_bytes(e.dir / "a.ply") == read_bytes(e.dir / "b.ply");
  const bool in_time = e.first_seconds < 300.0;
  std::string d = std::string("status ") + to_string(r.status) + ", " + std::to_string(r.iterations) +
                  " iterations; (a) geometry " + (geometry ? "bit-identical" : "CHANGED") +
                  "; (b) edited L1 " + fmt("%.4f", r.edited_l1_before) + " -> " +
                  fmt("%.4f", r.edited_l1_after) + " (" + fmt("%.1f", 100.0 * ratio) +
                  "%, limit 50%); (c) " + (reproducible ? "byte-reproducible" : "NOT reproducible") +
                  "; single run " + fmt("%.1f", e.first_seconds) + " s (limit 300 s)";
  return {ran && geometry && ratio <= 0.5 && reproducible && in_time, d};
}

Outcome consistency_ordering(const E2E& e) {
  if (!e.first) return {false, "end-to-end run unavailable"};
  const auto& views = e.fx.views;
  ConsistencyOptions o;
  o.perceptual = false;
  const ConsistencyReport stylized = evaluate(e.first->scene, views, o);

  // every view was edited independently by the mock editor in round 0
  const fs::path response = e.dir / "run_a" / "jobs" / e.first->report.rounds.at(0).job_id / "response";
  std::vector<ImageBuffer> edited;
  std::vector<RenderOutput> geometry;
  for (const auto& v : views) {
    edited.push_back(read_image(response / ("view_" + v.id + ".png")));
    geometry.push_back(render(e.fx.scene, v));
  }
  const ConsistencyReport per_frame = evaluate_images(edited, geometry, views, o);
  const double a = stylized.short_range.rmse, b = per_frame.short_range.rmse;
  return {stylized.short_range.pairs > 0 && stylized.short_range.pairs == per_frame.short_range.pairs && a <= b,
          "short-range masked RMSE over " + std::to_string(stylized.short_range.pairs) + " pairs: 3D " +
              fmt("%.5f", a) + " vs per-frame 2D " + fmt("%.5f", b)};
}

Outcome self_consistency() {
  const SceneFixture fx = plane_fixture(8, 64, 2);
  ConsistencyOptions o;
  o.perceptual = false;
  const auto rep = evaluate(fx.scene, fx.views, o);
  double worst = 0.0;
  std::size_t pairs = 0;
  for (const auto& p : rep.pairs) {
    if (p.range != PairRange::short_range) continue;
    if (p.valid_fraction == 0.0) return {false, "pair " + p.view_a + "->" + p.view_b + " has an empty mask"};
    worst = std::max(worst, p.rmse);
    ++pairs;
  }
  return {pairs > 0 && worst <= 1e-4,
          std::to_string(pairs) + " short-range pairs, max masked RMSE " + fmt("%.3g", worst) + " (tol 1e-4)"};
}

Outcome ply_round_trip() {
  std::mt19937_64 rng(808);
  TempDir dir;
  int bad = 0;
  for (int i = 0; i < 20; ++i) {
    RandomSceneOptions o;
    o.sh_degree = i % 4;
    GaussianScene s = random_scene(rng, 1 + 13 * i, o);
    // unnormalized rotations must survive as stored
    for (auto& p : s.primitives) p.rotation = {0.9f, 0.1f, -0.3f, 0.2f};
    const fs::path p1 = dir / ("a" + std::to_string(i) + ".ply");
    const fs::path p2 = dir / ("b" + std::to_string(i) + ".ply");
    save_ply(s, p1);
    const GaussianScene back = load_ply(p1);
    save_ply(back, p2);
    bool same = back.size() == s.size() && back.sh_degree == s.sh_degree && read_bytes(p1) == read_bytes(p2);
    for (std::size_t k = 0; same && k < s.size(); ++k) {
      same = std::memcmp(&s.primitives[k], &back.primitives[k], sizeof(GaussianPrimitive)) == 0;
    }
    bad += same ? 0 : 1;
  }
  return {bad == 0, "20 scenes, SH degrees 0-3, " + std::to_string(bad) + " differed"};
}

}  // namespace

int main() {
  report("rasterizer oracle equivalence", 10.0, oracle_equivalence);
  report("gradient suite", 60.0, gradient_suite);
  report("nearest-neighbour oracle", 30.0, nn_oracle);
  report("compositing hand cases", 0.0, hand_cases);
  E2E e2e;
  report("end-to-end mock stylization", 0.0, [&] { return end_to_end(e2e); });
  report("consistency ordering", 0.0, [&] { return consistency_ordering(e2e); });
  report("evaluator self-consistency", 0.0, self_consistency);
  report("PLY round trip", 0.0, ply_round_trip);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
