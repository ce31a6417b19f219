#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gsstyle/editor_protocol.hpp"
#include "gsstyle/encoder.hpp"
#include "gsstyle/losses.hpp"
#include "gsstyle/rasterizer.hpp"
#include "gsstyle/types.hpp"

namespace gsstyle {

enum class EntryOrigin { original, edited };

struct DatasetEntry {
  CameraView view;
  ImageBuffer image;  // may be empty for originals that carry no weight
  EntryOrigin origin = EntryOrigin::original;
  double photometric_weight = 0.0;
  int generation = 0;
};

// Original views plus edited images appended by each edit round. Originals
// are never modified or removed.
struct TrainingDataset {
  std::vector<DatasetEntry> entries;

  std::vector<CameraView> original_views() const;
  std::size_t count(EntryOrigin origin) const;
  int max_generation() const;
};

// Builds the original entries from a loaded dataset. Images are read when
// original_weight > 0 (required) and otherwise left empty.
TrainingDataset make_training_dataset(const std::vector<CameraView>& views,
                                      double original_weight);

enum class EditorKind { mock, external };

struct EditorChoice {
  EditorKind kind = EditorKind::mock;
  // Job root. For the mock editor an empty root means <output_dir>/jobs.
  std::filesystem::path job_root;
  double timeout_s = 3600.0;
  double poll_interval_s = 0.5;
  std::string params_json = "{}";
};

struct StylizeConfig {
  long max_iterations = 1000;
  int views_per_round = 30;  // capped at the dataset size
  std::uint64_t seed = 0;    // view selection, editor noise and entry order derive from it
  LossWeights loss_weights;
  FeatureLossConfig features;
  double learning_rate = 0.0025;          // SH coefficients
  double opacity_learning_rate = 0.025;   // opacity logits, when trainable
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int convergence_window = 50;
  double convergence_tolerance = 1e-3;
  TrainableSet trainable = TrainableSet::sh_only;
  EditorChoice editor;
  long snapshot_every = 0;  // 0 disables snapshots
  int edit_rounds = 1;
  double original_weight = 0.0;
  double edited_weight = 1.0;
  double edge_threshold = 0.05;
  std::filesystem::path output_dir;
  RenderOptions render;

  void validate() const;
};

nlohmann::json to_json(const StylizeConfig& config);
// Overlays the keys present in j onto config; unknown keys are an error.
void apply_json(const nlohmann::json& j, StylizeConfig& config);

// Adam moments over the flattened trainable parameters: all SH coefficients
// ([primitive][row][channel]) followed, when trainable, by opacity logits.
struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double learning_rate = 0.0025;
  double opacity_learning_rate = 0.025;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Entry sampler: shuffled round-robin over eligible entries.
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::mt19937_64 rng{0};

  static OptimizerState create(const GaussianScene& scene, const StylizeConfig& config);
};

// Bias-corrected Adam on one parameter vector.
void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                 std::span<double> v, long step, double lr, double beta1, double beta2,
                 double epsilon);

// Uniform sample of k views without replacement, returned sorted by id.
std::vector<CameraView> select_views(const TrainingDataset& dataset, std::size_t k,
                                     std::uint64_t seed);

// Renders every view, writes render and edge PNGs into staging_dir and
// returns the job describing them.
EditJob build_edit_job(const GaussianScene& scene, const std::vector<CameraView>& views,
                       const std::filesystem::path& style_path, const std::string& prompt,
                       std::uint64_t seed, const std::filesystem::path& staging_dir,
                       const std::string& job_id, double edge_threshold = 0.05,
                       const RenderOptions& render_opts = {});

// Appends one edited entry per usable view of the result.
TrainingDataset ingest_edits(const TrainingDataset& dataset, const EditResult& result,
                             double edited_weight = 1.0);

struct StepRecord {
  long step = 0;
  std::size_t entry = 0;
  std::string view_id;
  double total = 0.0;
  double l1 = 0.0;
  double perceptual = 0.0;
  double nnfm = 0.0;
};

// Feature caches reused across optimize_step calls.
struct LossCache {
  std::map<std::size_t, CachedFeatures> per_entry;
  FeatureMap style;
  bool has_style = false;
};

// One optimization step: picks the next entry, renders it, evaluates the
// weighted loss (photometric terms against the entry image scaled by its
// photometric weight, NNFM against the style image), backpropagates and
// applies Adam to the trainable parameters.
LossReport optimize_step(GaussianScene& scene, const TrainingDataset& dataset,
                         const Encoder& encoder, const ImageBuffer& style,
                         const StylizeConfig& config, OptimizerState& state,
                         LossCache* cache = nullptr, StepRecord* record = nullptr);

// Mean L1 between renders and images of the edited entries.
double mean_edited_l1(const GaussianScene& scene, const TrainingDataset& dataset,
                      const RenderOptions& opts = {});

enum class RunStatus { completed, converged, editor_timeout, editor_failed, diverged };
const char* to_string(RunStatus s);

struct EditRoundRecord {
  int round = 0;
  std::string job_id;
  std::vector<std::string> selected_views;
  std::string status;
  std::string editor;
  std::size_t edited_views = 0;
};

struct RunReport {
  RunStatus status = RunStatus::completed;
  std::string message;
  long iterations = 0;
  std::optional<long> failed_step;
  std::vector<EditRoundRecord> rounds;
  std::vector<StepRecord> steps;
  double edited_l1_before = 0.0;
  double edited_l1_after = 0.0;
  std::map<std::string, double> timings_s;
  std::map<std::string, std::string> inputs;  // name -> sha256
  nlohmann::json config;

  nlohmann::json to_json() const;
};

struct StylizeResult {
  GaussianScene scene;
  RunReport report;
  TrainingDataset dataset;
};

// Edit rounds (select, render + edges, dispatch, await, ingest) followed by
// appearance optimization with moving-average plateau stopping. Editor
// timeouts and non-finite losses end the run early with the status set; the
// returned scene is the last finite state.
StylizeResult stylize(const GaussianScene& scene, const std::filesystem::path& dataset_dir,
                      const std::filesystem::path& style_path, const std::string& prompt,
                      const StylizeConfig& config, const Encoder& encoder);

}  // namespace gsstyle
