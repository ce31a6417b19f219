#include "gsstyle/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <set>

#include "gsstyle/error.hpp"
#include "gsstyle/image_io.hpp"
#include "gsstyle/mock_editor.hpp"
#include "gsstyle/scene_io.hpp"

namespace gsstyle {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class SeedStream : std::uint64_t { selection = 1, noise = 2, sampling = 3 };

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream, std::uint64_t round = 0) {
  return splitmix64(splitmix64(seed ^ (static_cast<std::uint64_t>(stream) << 56)) + round);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::size_t trainable_count(const GaussianScene& scene, TrainableSet set) {
  std::size_t n = scene.size() * scene.coeff_rows() * 3;
  if (set == TrainableSet::sh_and_opacity) n += scene.size();
  return n;
}

const char* to_string(TrainableSet t) {
  return t == TrainableSet::sh_only ? "sh_only" : "sh_and_opacity";
}

TrainableSet trainable_from_string(const std::string& s) {
  if (s == "sh_only") return TrainableSet::sh_only;
  if (s == "sh_and_opacity") return TrainableSet::sh_and_opacity;
  throw InvalidArgument("unknown trainable set '" + s + "'");
}

template <typename T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw InvalidArgument(std::string("unknown key '") + it.key() + "' in " + where);
  }
}

}  // namespace

std::vector<CameraView> TrainingDataset::original_views() const {
  std::vector<CameraView> out;
  for (const auto& e : entries) {
    if (e.origin == EntryOrigin::original) out.push_back(e.view);
  }
  return out;
}

std::size_t TrainingDataset::count(EntryOrigin origin) const {
  return static_cast<std::size_t>(std::count_if(
      entries.begin(), entries.end(), [origin](const auto& e) { return e.origin == origin; }));
}

int TrainingDataset::max_generation() const {
  int g = 0;
  for (const auto& e : entries) g = std::max(g, e.generation);
  return g;
}

TrainingDataset make_training_dataset(const std::vector<CameraView>& views,
                                      double original_weight) {
  if (!(original_weight >= 0.0) || !std::isfinite(original_weight)) {
    throw InvalidArgument("original photometric weight must be finite and >= 0");
  }
  TrainingDataset ds;
  for (const auto& v : views) {
    DatasetEntry e;
    e.view = v;
    e.origin = EntryOrigin::original;
    e.photometric_weight = original_weight;
    if (original_weight > 0.0) {
      if (!v.image_path) throw InvalidArgument("view '" + v.id + "' has no image");
      e.image = read_image(*v.image_path);
      if (e.image.width != v.width || e.image.height != v.height || e.image.channels != 3) {
        throw ShapeError("image of view '" + v.id + "' does not match the camera size");
      }
    }
    ds.entries.push_back(std::move(e));
  }
  return ds;
}

void StylizeConfig::validate() const {
  if (max_iterations < 0) throw InvalidArgument("max_iterations must be >= 0");
  if (views_per_round < 1) throw InvalidArgument("views_per_round must be >= 1");
  if (edit_rounds < 1) throw InvalidArgument("edit_rounds must be >= 1");
  if (convergence_window < 1) throw InvalidArgument("convergence_window must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  if (!(edited_weight >= 0.0) || !(original_weight >= 0.0)) {
    throw InvalidArgument("photometric weights must be >= 0");
  }
  loss_weights.validate();
}

json to_json(const StylizeConfig& c) {
  return {{"max_iterations", c.max_iterations},
          {"views_per_round", c.views_per_round},
          {"seed", c.seed},
          {"loss_weights",
           {{"l1", c.loss_weights.l1},
            {"perceptual", c.loss_weights.perceptual},
            {"nnfm", c.loss_weights.nnfm}}},
          {"features",
           {{"perceptual_layers", c.features.perceptual_layers},
            {"nnfm_layer", c.features.nnfm_layer}}},
          {"learning_rate", c.learning_rate},
          {"opacity_learning_rate", c.opacity_learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"convergence_window", c.convergence_window},
          {"convergence_tolerance", c.convergence_tolerance},
          {"trainable", to_string(c.trainable)},
          {"editor",
           {{"kind", c.editor.kind == EditorKind::mock ? "mock" : "external"},
            {"job_root", c.editor.job_root.string()},
            {"timeout_s", c.editor.timeout_s},
            {"poll_interval_s", c.editor.poll_interval_s},
            {"params", json::parse(c.editor.params_json)}}},
          {"snapshot_every", c.snapshot_every},
          {"edit_rounds", c.edit_rounds},
          {"original_weight", c.original_weight},
          {"edited_weight", c.edited_weight},
          {"edge_threshold", c.edge_threshold},
          {"output_dir", c.output_dir.string()},
          {"render",
           {{"tile_size", c.render.tile_size},
            {"near_clip", c.render.near_clip},
            {"alpha_max", c.render.alpha_max},
            {"alpha_min", c.render.alpha_min},
            {"transmittance_stop", c.render.transmittance_stop},
            {"cov_dilation", c.render.cov_dilation},
            {"frustum_guard", c.render.frustum_guard}}}};
}

void apply_json(const json& j, StylizeConfig& c) {
  try {
    reject_unknown(j,
                   {"max_iterations", "views_per_round", "seed", "loss_weights", "features",
                    "learning_rate", "opacity_learning_rate", "beta1", "beta2", "adam_epsilon",
                    "convergence_window", "convergence_tolerance", "trainable", "editor",
                    "snapshot_every", "edit_rounds", "original_weight", "edited_weight",
                    "edge_threshold", "output_dir", "render"},
                   "stylize config");
    take(j, "max_iterations", c.max_iterations);
    take(j, "views_per_round", c.views_per_round);
    take(j, "seed", c.seed);
    if (j.contains("loss_weights")) {
      const auto& w = j["loss_weights"];
      reject_unknown(w, {"l1", "perceptual", "nnfm"}, "loss_weights");
      take(w, "l1", c.loss_weights.l1);
      take(w, "perceptual", c.loss_weights.perceptual);
      take(w, "nnfm", c.loss_weights.nnfm);
    }
    if (j.contains("features")) {
      const auto& f = j["features"];
      reject_unknown(f, {"perceptual_layers", "nnfm_layer"}, "features");
      take(f, "perceptual_layers", c.features.perceptual_layers);
      take(f, "nnfm_layer", c.features.nnfm_layer);
    }
    take(j, "learning_rate", c.learning_rate);
    take(j, "opacity_learning_rate", c.opacity_learning_rate);
    take(j, "beta1", c.beta1);
    take(j, "beta2", c.beta2);
    take(j, "adam_epsilon", c.adam_epsilon);
    take(j, "convergence_window", c.convergence_window);
    take(j, "convergence_tolerance", c.convergence_tolerance);
    if (j.contains("trainable")) c.trainable = trainable_from_string(j["trainable"].get<std::string>());
    if (j.contains("editor")) {
      const auto& e = j["editor"];
      reject_unknown(e, {"kind", "job_root", "timeout_s", "poll_interval_s", "params"}, "editor");
      if (e.contains("kind")) {
        const auto k = e["kind"].get<std::string>();
        if (k != "mock" && k != "external") throw InvalidArgument("editor kind must be mock or external");
        c.editor.kind = k == "mock" ? EditorKind::mock : EditorKind::external;
      }
      if (e.contains("job_root")) c.editor.job_root = e["job_root"].get<std::string>();
      take(e, "timeout_s", c.editor.timeout_s);
      take(e, "poll_interval_s", c.editor.poll_interval_s);
      if (e.contains("params")) c.editor.params_json = e["params"].dump();
    }
    take(j, "snapshot_every", c.snapshot_every);
    take(j, "edit_rounds", c.edit_rounds);
    take(j, "original_weight", c.original_weight);
    take(j, "edited_weight", c.edited_weight);
    take(j, "edge_threshold", c.edge_threshold);
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("render")) {
      const auto& r = j["render"];
      reject_unknown(r,
                     {"tile_size", "near_clip", "alpha_max", "alpha_min", "transmittance_stop",
                      "cov_dilation", "frustum_guard"},
                     "render");
      take(r, "tile_size", c.render.tile_size);
      take(r, "near_clip", c.render.near_clip);
      take(r, "alpha_max", c.render.alpha_max);
      take(r, "alpha_min", c.render.alpha_min);
      take(r, "transmittance_stop", c.render.transmittance_stop);
      take(r, "cov_dilation", c.render.cov_dilation);
      take(r, "frustum_guard", c.render.frustum_guard);
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad stylize config: ") + e.what());
  }
}

OptimizerState OptimizerState::create(const GaussianScene& scene, const StylizeConfig& config) {
  OptimizerState s;
  const std::size_t n = trainable_count(scene, config.trainable);
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.learning_rate = config.learning_rate;
  s.opacity_learning_rate = config.opacity_learning_rate;
  s.beta1 = config.beta1;
  s.beta2 = config.beta2;
  s.epsilon = config.adam_epsilon;
  s.rng.seed(derive_seed(config.seed, SeedStream::sampling));
  return s;
}

void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, long step, double lr, double beta1, double beta2,
                 double epsilon) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw ShapeError("adam_update: parameter, gradient and moment sizes differ");
  }
  if (step < 1) throw InvalidArgument("adam_update: step counts from 1");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
  }
}

std::vector<CameraView> select_views(const TrainingDataset& dataset, std::size_t k,
                                     std::uint64_t seed) {
  auto views = dataset.original_views();
  if (k < 1) throw InvalidArgument("select_views: k must be >= 1");
  if (k > views.size()) {
    throw InvalidArgument("select_views: k = " + std::to_string(k) + " exceeds the " +
                          std::to_string(views.size()) + " available views");
  }
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first k slots become a uniform sample.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, views.size() - 1);
    std::swap(views[i], views[pick(rng)]);
  }
  views.resize(k);
  std::sort(views.begin(), views.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return views;
}

EditJob build_edit_job(const GaussianScene& scene, const std::vector<CameraView>& views,
                       const fs::path& style_path, const std::string& prompt, std::uint64_t seed,
                       const fs::path& staging_dir, const std::string& job_id,
                       double edge_threshold, const RenderOptions& render_opts) {
  if (!fs::is_regular_file(style_path)) {
    throw IoError("style image does not exist: " + style_path.string());
  }
  fs::create_directories(staging_dir);
  EditJob job;
  job.job_id = job_id;
  job.style_path = style_path;
  job.prompt = prompt;
  job.noise_seed = seed;
  for (const auto& v : views) {
    const RenderOutput out = render(scene, v, render_opts);
    EditRequest r;
    r.view_id = v.id;
    r.width = v.width;
    r.height = v.height;
    r.render_path = staging_dir / ("view_" + v.id + ".png");
    r.edge_path = staging_dir / ("edge_" + v.id + ".png");
    write_image(out.color, r.render_path);
    // Edges are taken from the image the editor actually receives.
    write_image(compute_edges(read_image(r.render_path), edge_threshold), r.edge_path);
    job.requests.push_back(std::move(r));
  }
  return job;
}

TrainingDataset ingest_edits(const TrainingDataset& dataset, const EditResult& result,
                             double edited_weight) {
  if (result.status == EditStatus::failed) {
    throw InvalidArgument("cannot ingest failed edit job '" + result.job_id + "'");
  }
  std::map<std::string, const CameraView*> by_id;
  for (const auto& e : dataset.entries) {
    if (e.origin == EntryOrigin::original) by_id.emplace(e.view.id, &e.view);
  }
  TrainingDataset out = dataset;
  const int generation = dataset.max_generation() + 1;
  for (const auto& v : result.views) {
    if (!v.image_path) continue;
    auto it = by_id.find(v.view_id);
    if (it == by_id.end()) {
      throw InvalidArgument("edited view '" + v.view_id + "' is not in the dataset");
    }
    DatasetEntry e;
    e.view = *it->second;
    e.image = read_image(*v.image_path);
    e.origin = EntryOrigin::edited;
    e.photometric_weight = edited_weight;
    e.generation = generation;
    out.entries.push_back(std::move(e));
  }
  return out;
}

LossReport optimize_step(GaussianScene& scene, const TrainingDataset& dataset,
                         const Encoder& encoder, const ImageBuffer& style,
                         const StylizeConfig& config, OptimizerState& state, LossCache* cache,
                         StepRecord* record) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.entries.size(); ++i) {
    const auto& e = dataset.entries[i];
    if (e.photometric_weight > 0.0 && !e.image.empty()) eligible.push_back(i);
  }
  if (eligible.empty() && config.loss_weights.nnfm > 0.0) {
    eligible.resize(dataset.entries.size());
    std::iota(eligible.begin(), eligible.end(), std::size_t{0});
  }
  if (eligible.empty()) {
    throw InvalidArgument("optimize_step: no entry carries photometric weight and NNFM is off");
  }
  if (state.order.size() != eligible.size() || state.cursor >= state.order.size() ||
      !std::equal(eligible.begin(), eligible.end(),
                  [&] {
                    auto sorted = state.order;
                    std::sort(sorted.begin(), sorted.end());
                    return sorted;
                  }()
                      .begin())) {
    state.order = eligible;
    std::shuffle(state.order.begin(), state.order.end(), state.rng);
    state.cursor = 0;
  }
  const std::size_t index = state.order[state.cursor++];
  const DatasetEntry& entry = dataset.entries[index];

  LossWeights w = config.loss_weights;
  w.l1 *= entry.photometric_weight;
  w.perceptual *= entry.photometric_weight;
  if (entry.image.empty()) w.l1 = w.perceptual = 0.0;

  RenderOptions opts = config.render;
  opts.trainable = config.trainable;
  const RenderOutput out = render(scene, entry.view, opts);

  CachedFeatures local;
  CachedFeatures* features = &local;
  if (cache) {
    features = &cache->per_entry[index];
    if (!cache->has_style && w.nnfm > 0.0) {
      cache->style = encoder.forward(style, {config.features.nnfm_layer}).at(config.features.nnfm_layer);
      cache->has_style = true;
    }
    features->style = cache->style;
    features->has_style = cache->has_style;
  }
  if (w.perceptual > 0.0 && !features->has_target) {
    const std::set<std::string> layers(config.features.perceptual_layers.begin(),
                                       config.features.perceptual_layers.end());
    features->target = encoder.forward(entry.image, layers);
    features->has_target = true;
  }

  const ImageBuffer& target = entry.image.empty() ? out.color : entry.image;
  LossReport report = total_loss(encoder, out.color, target, style, w, config.features, features);
  if (cache) {
    features->style = FeatureMap();  // the shared copy lives in cache->style
    features->has_style = false;
  }
  const long step = state.step + 1;
  if (!std::isfinite(report.total)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(step), step);
  }

  const AppearanceGradients grads = render_backward(scene, entry.view, report.grad_image, opts);
  const int rows = scene.coeff_rows();
  const std::size_t n_sh = scene.size() * rows * 3;
  std::vector<double> params(state.m.size());
  std::vector<double> g(state.m.size(), 0.0);
  for (std::size_t p = 0; p < scene.size(); ++p) {
    for (int b = 0; b < rows; ++b) {
      for (int c = 0; c < 3; ++c) {
        const std::size_t k = (p * rows + b) * 3 + c;
        params[k] = scene.primitives[p].sh_coeffs[b][c];
        g[k] = grads.sh[k];
      }
    }
  }
  const bool opacity = config.trainable == TrainableSet::sh_and_opacity;
  if (opacity) {
    for (std::size_t p = 0; p < scene.size(); ++p) {
      params[n_sh + p] = scene.primitives[p].opacity_logit;
      g[n_sh + p] = grads.opacity_logit[p];
    }
  }
  for (double gv : g) {
    if (!std::isfinite(gv)) throw DivergenceError("non-finite gradient at step " + std::to_string(step), step);
  }

  state.step = step;
  std::span<double> all(params);
  adam_update(all.first(n_sh), std::span<const double>(g).first(n_sh),
              std::span<double>(state.m).first(n_sh), std::span<double>(state.v).first(n_sh), step,
              state.learning_rate, state.beta1, state.beta2, state.epsilon);
  if (opacity) {
    adam_update(all.subspan(n_sh), std::span<const double>(g).subspan(n_sh),
                std::span<double>(state.m).subspan(n_sh), std::span<double>(state.v).subspan(n_sh),
                step, state.opacity_learning_rate, state.beta1, state.beta2, state.epsilon);
  }
  // the scene is only touched once the whole update is representable
  for (double pv : params) {
    if (!std::isfinite(static_cast<float>(pv))) {
      throw DivergenceError("non-finite parameter at step " + std::to_string(step), step);
    }
  }
  for (std::size_t p = 0; p < scene.size(); ++p) {
    for (int b = 0; b < rows; ++b) {
      for (int c = 0; c < 3; ++c) {
        scene.primitives[p].sh_coeffs[b][c] = static_cast<float>(params[(p * rows + b) * 3 + c]);
      }
    }
    if (opacity) scene.primitives[p].opacity_logit = static_cast<float>(params[n_sh + p]);
  }

  if (record) {
    record->step = step;
    record->entry = index;
    record->view_id = entry.view.id;
    record->total = report.total;
    record->l1 = report.l1;
    record->perceptual = report.perceptual;
    record->nnfm = report.nnfm;
  }
  return report;
}

double mean_edited_l1(const GaussianScene& scene, const TrainingDataset& dataset,
                      const RenderOptions& opts) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& e : dataset.entries) {
    if (e.origin != EntryOrigin::edited) continue;
    sum += l1_loss(render(scene, e.view, opts).color, e.image).value;
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed:
      return "completed";
    case RunStatus::converged:
      return "converged";
    case RunStatus::editor_timeout:
      return "editor_timeout";
    case RunStatus::editor_failed:
      return "editor_failed";
    case RunStatus::diverged:
      return "diverged";
  }
  return "?";
}

json RunReport::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["status"] = to_string(status);
  j["message"] = message;
  j["iterations"] = iterations;
  j["failed_step"] = failed_step ? json(*failed_step) : json(nullptr);
  j["edited_l1_before"] = edited_l1_before;
  j["edited_l1_after"] = edited_l1_after;
  j["config"] = config;
  j["inputs"] = inputs;
  j["timings_s"] = timings_s;
  json rj = json::array();
  for (const auto& r : rounds) {
    rj.push_back({{"round", r.round},
                  {"job_id", r.job_id},
                  {"selected_views", r.selected_views},
                  {"status", r.status},
                  {"editor", r.editor},
                  {"edited_views", r.edited_views}});
  }
  j["edit_rounds"] = rj;
  json sj = json::array();
  for (const auto& s : steps) {
    sj.push_back({{"step", s.step},
                  {"entry", s.entry},
                  {"view", s.view_id},
                  {"total", s.total},
                  {"l1", s.l1},
                  {"perceptual", s.perceptual},
                  {"nnfm", s.nnfm}});
  }
  j["steps"] = sj;
  return j;
}

StylizeResult stylize(const GaussianScene& scene, const fs::path& dataset_dir,
                      const fs::path& style_path, const std::string& prompt,
                      const StylizeConfig& config, const Encoder& encoder) {
  config.validate();
  if (scene.empty()) throw InvalidArgument("stylize: scene is empty");
  Stopwatch total_clock;
  StylizeResult result;
  result.scene = scene;
  RunReport& report = result.report;
  report.config = to_json(config);

  Stopwatch load_clock;
  const auto views = load_dataset(dataset_dir);
  if (views.empty()) throw InvalidArgument("dataset has no views");
  result.dataset = make_training_dataset(views, config.original_weight);
  const ImageBuffer style = read_image(style_path);
  if (style.channels != 3) throw ShapeError("style image must be RGB");
  report.timings_s["load"] = load_clock.seconds();

  const fs::path out_dir = config.output_dir.empty() ? fs::path(".") : config.output_dir;
  fs::create_directories(out_dir);
  const fs::path job_root = config.editor.job_root.empty() ? out_dir / "jobs" : config.editor.job_root;

  RenderOptions opts = config.render;
  opts.trainable = config.trainable;
  OptimizerState state = OptimizerState::create(result.scene, config);
  LossCache cache;
  double edit_seconds = 0.0;
  double optimize_seconds = 0.0;
  long done_iterations = 0;
  bool converged = false;

  for (int round = 0; round < config.edit_rounds && !converged; ++round) {
    Stopwatch edit_clock;
    EditRoundRecord rec;
    rec.round = round;
    const std::size_t k = std::min<std::size_t>(config.views_per_round, views.size());
    const auto selected = select_views(result.dataset, k, derive_seed(config.seed, SeedStream::selection, round));
    for (const auto& v : selected) rec.selected_views.push_back(v.id);

    std::string job_id = "idu-r" + std::to_string(round) + "-s" + std::to_string(config.seed);
    for (int suffix = 1; fs::exists(job_root / job_id); ++suffix) {
      job_id = "idu-r" + std::to_string(round) + "-s" + std::to_string(config.seed) + "-" +
               std::to_string(suffix);
    }
    rec.job_id = job_id;
    EditJob job = build_edit_job(result.scene, selected, style_path, prompt,
                                 derive_seed(config.seed, SeedStream::noise, round),
                                 out_dir / "staging" / job_id, job_id, config.edge_threshold, opts);
    job.editor_params_json = config.editor.params_json;
    submit_job(job_root, job);
    if (config.editor.kind == EditorKind::mock) serve_job(job_root / job_id);

    EditResult edit;
    try {
      edit = await_result(job_root, job_id, config.editor.timeout_s, config.editor.poll_interval_s);
    } catch (const TimeoutError& e) {
      rec.status = "timeout";
      report.rounds.push_back(rec);
      report.status = RunStatus::editor_timeout;
      report.message = e.what();
      report.timings_s["edit"] = edit_seconds + edit_clock.seconds();
      report.timings_s["total"] = total_clock.seconds();
      return result;
    }
    rec.status = to_string(edit.status);
    rec.editor = edit.editor_name;
    if (edit.status == EditStatus::failed) {
      report.rounds.push_back(rec);
      report.status = RunStatus::editor_failed;
      report.message = "editor failed job '" + job_id + "'" +
                       (edit.error.empty() ? std::string() : ": " + edit.error);
      report.timings_s["edit"] = edit_seconds + edit_clock.seconds();
      report.timings_s["total"] = total_clock.seconds();
      return result;
    }
    const std::size_t before = result.dataset.count(EntryOrigin::edited);
    result.dataset = ingest_edits(result.dataset, edit, config.edited_weight);
    rec.edited_views = result.dataset.count(EntryOrigin::edited) - before;
    report.rounds.push_back(rec);
    if (round == 0) report.edited_l1_before = mean_edited_l1(result.scene, result.dataset, opts);
    edit_seconds += edit_clock.seconds();

    Stopwatch opt_clock;
    const long budget = config.max_iterations / config.edit_rounds +
                        (round == config.edit_rounds - 1 ? config.max_iterations % config.edit_rounds : 0);
    std::deque<double> window;     // last W totals
    std::vector<double> averages;  // moving average after each full window
    double window_sum = 0.0;
    const auto W = static_cast<std::size_t>(config.convergence_window);
    for (long it = 0; it < budget; ++it) {
      StepRecord step;
      try {
        optimize_step(result.scene, result.dataset, encoder, style, config, state, &cache, &step);
      } catch (const DivergenceError& e) {
        report.status = RunStatus::diverged;
        report.failed_step = e.step();
        report.message = e.what();
        report.iterations = done_iterations;
        report.timings_s["edit"] = edit_seconds;
        report.timings_s["optimize"] = optimize_seconds + opt_clock.seconds();
        report.timings_s["total"] = total_clock.seconds();
        return result;
      }
      ++done_iterations;
      report.steps.push_back(step);
      window.push_back(step.total);
      window_sum += step.total;
      if (window.size() > W) {
        window_sum -= window.front();
        window.pop_front();
      }
      if (window.size() == W) {
        averages.push_back(window_sum / static_cast<double>(W));
        if (averages.size() > W) {
          const double prev = averages[averages.size() - 1 - W];
          const double cur = averages.back();
          if (std::abs(cur - prev) <= config.convergence_tolerance * std::abs(prev)) {
            converged = true;
          }
        }
      }
      if (config.snapshot_every > 0 && done_iterations % config.snapshot_every == 0) {
        fs::create_directories(out_dir / "snapshots");
        char name[32];
        std::snprintf(name, sizeof name, "step_%06ld.ply", done_iterations);
        save_ply(result.scene, out_dir / "snapshots" / name);
      }
      if (converged) break;
    }
    optimize_seconds += opt_clock.seconds();
  }

  report.status = converged ? RunStatus::converged : RunStatus::completed;
  report.iterations = done_iterations;
  report.edited_l1_after = mean_edited_l1(result.scene, result.dataset, opts);
  report.timings_s["edit"] = edit_seconds;
  report.timings_s["optimize"] = optimize_seconds;
  report.timings_s["total"] = total_clock.seconds();
  return result;
}

}  // namespace gsstyle
