#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <set>

#include "gsstyle/checksum.hpp"
#include "gsstyle/consistency.hpp"
#include "gsstyle/editor_protocol.hpp"
#include "gsstyle/encoder.hpp"
#include "gsstyle/error.hpp"
#include "gsstyle/image_io.hpp"
#include "gsstyle/mock_editor.hpp"
#include "gsstyle/parallel.hpp"
#include "gsstyle/pipeline.hpp"
#include "gsstyle/scene_io.hpp"

#ifndef GSSTYLE_VERSION
#define GSSTYLE_VERSION "unknown"
#endif

namespace gsstyle::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Everything a command can be configured with. Config-file values are loaded
// first; flags given on the command line then replace them.
struct RunConfig {
  std::string scene;
  std::string dataset;
  std::string style;
  std::string prompt;
  std::string encoder;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;  // top-level seed given; it wins over stylize.seed
  int threads = -1;  // -1: not set by the config file
  StylizeConfig stylize;
  ConsistencyOptions eval;
  double depth_scale = 1000.0;
  double edge_threshold = 0.05;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void apply_config_file(const json& j, RunConfig& rc) {
  static const std::set<std::string> known = {"scene",   "dataset", "style",       "prompt",
                                              "encoder", "out",     "seed",        "threads",
                                              "stylize", "eval",    "depth_scale", "edge_threshold"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw InvalidArgument("unknown config key '" + it.key() + "'");
  }
  try {
    if (j.contains("scene")) rc.scene = j["scene"].get<std::string>();
    if (j.contains("dataset")) rc.dataset = j["dataset"].get<std::string>();
    if (j.contains("style")) rc.style = j["style"].get<std::string>();
    if (j.contains("prompt")) rc.prompt = j["prompt"].get<std::string>();
    if (j.contains("encoder")) rc.encoder = j["encoder"].get<std::string>();
    if (j.contains("out")) rc.out = j["out"].get<std::string>();
    if (j.contains("seed")) {
      rc.seed = j["seed"].get<std::uint64_t>();
      rc.seed_set = true;
    }
    if (j.contains("threads")) rc.threads = j["threads"].get<int>();
    if (j.contains("depth_scale")) rc.depth_scale = j["depth_scale"].get<double>();
    if (j.contains("edge_threshold")) rc.edge_threshold = j["edge_threshold"].get<double>();
    if (j.contains("stylize")) apply_json(j["stylize"], rc.stylize);
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      for (auto it = e.begin(); it != e.end(); ++it) {
        static const std::set<std::string> eval_keys = {
            "short_stride", "long_stride", "tau_depth", "tau_alpha", "importance_sigma", "perceptual"};
        if (!eval_keys.count(it.key())) throw InvalidArgument("unknown eval key '" + it.key() + "'");
      }
      rc.eval.short_stride = e.value("short_stride", rc.eval.short_stride);
      rc.eval.long_stride = e.value("long_stride", rc.eval.long_stride);
      rc.eval.flow.tau_depth = e.value("tau_depth", rc.eval.flow.tau_depth);
      rc.eval.flow.tau_alpha = e.value("tau_alpha", rc.eval.flow.tau_alpha);
      rc.eval.importance_sigma = e.value("importance_sigma", rc.eval.importance_sigma);
      rc.eval.perceptual = e.value("perceptual", rc.eval.perceptual);
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad config: ") + e.what());
  }
}

json echo(const RunConfig& rc) {
  return {{"scene", rc.scene},
          {"dataset", rc.dataset},
          {"style", rc.style},
          {"prompt", rc.prompt},
          {"encoder", rc.encoder},
          {"out", rc.out},
          {"seed", rc.seed},
          {"threads", rc.threads},
          {"depth_scale", rc.depth_scale},
          {"edge_threshold", rc.edge_threshold},
          {"stylize", to_json(rc.stylize)},
          {"eval",
           {{"short_stride", rc.eval.short_stride},
            {"long_stride", rc.eval.long_stride},
            {"tau_depth", rc.eval.flow.tau_depth},
            {"tau_alpha", rc.eval.flow.tau_alpha},
            {"importance_sigma", rc.eval.importance_sigma},
            {"perceptual", rc.eval.perceptual}}},
          {"version", GSSTYLE_VERSION}};
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw InvalidArgument(std::string("missing ") + what);
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " not found: " + path);
}

void require_dataset(const std::string& dir) {
  if (dir.empty()) throw InvalidArgument("missing dataset directory");
  if (!fs::is_regular_file(fs::path(dir) / "transforms.json")) {
    throw IoError("dataset has no transforms.json: " + dir);
  }
}

fs::path require_out(const RunConfig& rc) {
  if (rc.out.empty()) throw InvalidArgument("missing --out directory");
  fs::create_directories(rc.out);
  return rc.out;
}

Encoder load_or_default_encoder(const RunConfig& rc) {
  return rc.encoder.empty() ? make_default_encoder() : load_encoder(rc.encoder);
}

std::vector<CameraView> pick_views(const std::vector<CameraView>& all,
                                   const std::vector<std::string>& ids) {
  if (ids.empty()) return all;
  std::vector<CameraView> out;
  for (const auto& id : ids) {
    auto it = std::find_if(all.begin(), all.end(), [&](const auto& v) { return v.id == id; });
    if (it == all.end()) throw InvalidArgument("unknown view id '" + id + "'");
    out.push_back(*it);
  }
  return out;
}

// Options common to every command.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* out_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON config file; flags override its values")
        ->check(CLI::ExistingFile);
    seed_opt = app->add_option("--seed", seed, "Random seed");
    threads_opt = app->add_option("--threads", threads, "Worker threads (0 = all cores)");
    out_opt = app->add_option("--out", out, "Output directory");
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config.empty()) apply_config_file(read_json_file(config), rc);
    if (seed_opt->count()) {
      rc.seed = seed;
      rc.seed_set = true;
    }
    if (threads_opt->count()) {
      rc.threads = threads;
    } else if (rc.threads < 0) {
      const char* env = std::getenv("GSSTYLE_THREADS");
      rc.threads = env ? std::atoi(env) : 0;
    }
    if (out_opt->count()) rc.out = out;
    set_thread_count(rc.threads);
    return rc;
  }
};

template <typename T>
void override_if(CLI::Option* opt, T& dst, const T& value) {
  if (opt->count()) dst = value;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Appearance-only style transfer for Gaussian splatting scenes"};
  app.set_version_flag("--version", GSSTYLE_VERSION);
  app.require_subcommand(1);

  // stylize
  Common stylize_common;
  CLI::App* stylize_cmd = app.add_subcommand("stylize", "Edit dataset views and re-optimize colors");
  stylize_common.attach(stylize_cmd);
  std::string s_scene, s_dataset, s_style, s_prompt, s_encoder, s_editor, s_job_root, s_trainable;
  long s_iters = 0, s_snapshot = 0;
  int s_views = 0, s_rounds = 0;
  double s_timeout = 0, s_original_weight = 0, s_lr = 0;
  auto* o_scene = stylize_cmd->add_option("--scene", s_scene, "Input PLY");
  auto* o_dataset = stylize_cmd->add_option("--dataset", s_dataset, "Dataset directory (transforms.json)");
  auto* o_style = stylize_cmd->add_option("--style", s_style, "Style image (PNG)");
  auto* o_prompt = stylize_cmd->add_option("--prompt", s_prompt, "Text prompt passed to the editor");
  auto* o_encoder = stylize_cmd->add_option("--encoder", s_encoder, "Encoder manifest JSON");
  auto* o_iters = stylize_cmd->add_option("--max-iterations", s_iters, "Optimization step budget");
  auto* o_views = stylize_cmd->add_option("--views-per-round", s_views, "Views edited per round");
  auto* o_rounds = stylize_cmd->add_option("--edit-rounds", s_rounds, "Number of edit rounds");
  auto* o_editor = stylize_cmd->add_option("--editor", s_editor, "mock or external")
                       ->check(CLI::IsMember({"mock", "external"}));
  auto* o_job_root = stylize_cmd->add_option("--job-root", s_job_root, "Editor job directory");
  auto* o_timeout = stylize_cmd->add_option("--editor-timeout", s_timeout, "Seconds to wait for the editor");
  auto* o_ow = stylize_cmd->add_option("--original-weight", s_original_weight,
                                       "Photometric weight of the unedited views");
  auto* o_lr = stylize_cmd->add_option("--lr", s_lr, "SH learning rate");
  auto* o_trainable = stylize_cmd->add_option("--trainable", s_trainable, "sh_only or sh_and_opacity")
                          ->check(CLI::IsMember({"sh_only", "sh_and_opacity"}));
  auto* o_snapshot = stylize_cmd->add_option("--snapshot-every", s_snapshot, "Write a PLY every N steps");

  // render
  Common render_common;
  CLI::App* render_cmd = app.add_subcommand("render", "Render dataset views to PNG");
  render_common.attach(render_cmd);
  std::string r_scene, r_dataset;
  std::vector<std::string> r_views;
  bool r_depth = false;
  double r_depth_scale = 0;
  auto* o_r_scene = render_cmd->add_option("--scene", r_scene, "Input PLY");
  auto* o_r_dataset = render_cmd->add_option("--dataset", r_dataset, "Dataset directory");
  render_cmd->add_option("--views", r_views, "View ids to render (default: all)")->delimiter(',');
  render_cmd->add_flag("--depth", r_depth, "Also write 16-bit depth PNGs");
  auto* o_r_scale = render_cmd->add_option("--depth-scale", r_depth_scale, "Depth units per world unit");

  // edges
  Common edges_common;
  CLI::App* edges_cmd = app.add_subcommand("edges", "Edge map of an image");
  edges_common.attach(edges_cmd);
  std::vector<std::string> e_inputs;
  double e_threshold = 0;
  edges_cmd->add_option("inputs", e_inputs, "Input PNGs")->required()->check(CLI::ExistingFile);
  auto* o_e_threshold = edges_cmd->add_option("--threshold", e_threshold, "Low-magnitude cutoff");

  // mock-edit
  Common mock_common;
  CLI::App* mock_cmd = app.add_subcommand("mock-edit", "Color-transfer images toward a style image");
  mock_common.attach(mock_cmd);
  std::vector<std::string> m_inputs;
  std::string m_style;
  mock_cmd->add_option("inputs", m_inputs, "Input PNGs")->required()->check(CLI::ExistingFile);
  auto* o_m_style = mock_cmd->add_option("--style", m_style, "Style image");

  // serve-mock
  Common serve_common;
  CLI::App* serve_cmd = app.add_subcommand("serve-mock", "Serve editor jobs with the mock editor");
  serve_common.attach(serve_cmd);
  std::string v_root;
  double v_seconds = 0.0, v_poll = 0.05;
  serve_cmd->add_option("--job-root", v_root, "Job directory to watch")->required();
  serve_cmd->add_option("--max-seconds", v_seconds, "Keep polling this long (0 = one pass)");
  serve_cmd->add_option("--poll", v_poll, "Poll interval in seconds");

  // eval
  Common eval_common;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Multi-view consistency scores");
  eval_common.attach(eval_cmd);
  std::string x_scene, x_dataset, x_encoder, x_images;
  int x_short = 0, x_long = 0;
  bool x_no_perceptual = false;
  auto* o_x_scene = eval_cmd->add_option("--scene", x_scene, "Scene PLY (geometry, and colors unless --images)");
  auto* o_x_dataset = eval_cmd->add_option("--dataset", x_dataset, "Dataset directory (view order)");
  auto* o_x_encoder = eval_cmd->add_option("--encoder", x_encoder, "Encoder manifest JSON");
  eval_cmd->add_option("--images", x_images, "Score view_<id>.png images from this directory instead");
  auto* o_x_short = eval_cmd->add_option("--short-stride", x_short, "Short-range view stride");
  auto* o_x_long = eval_cmd->add_option("--long-stride", x_long, "Long-range view stride");
  eval_cmd->add_flag("--no-perceptual", x_no_perceptual, "Skip the perceptual score");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (stylize_cmd->parsed()) {
      RunConfig rc = stylize_common.resolve();
      override_if(o_scene, rc.scene, s_scene);
      override_if(o_dataset, rc.dataset, s_dataset);
      override_if(o_style, rc.style, s_style);
      override_if(o_prompt, rc.prompt, s_prompt);
      override_if(o_encoder, rc.encoder, s_encoder);
      StylizeConfig& sc = rc.stylize;
      if (rc.seed_set) sc.seed = rc.seed;
      rc.seed = sc.seed;
      override_if(o_iters, sc.max_iterations, s_iters);
      override_if(o_views, sc.views_per_round, s_views);
      override_if(o_rounds, sc.edit_rounds, s_rounds);
      if (o_editor->count()) sc.editor.kind = s_editor == "mock" ? EditorKind::mock : EditorKind::external;
      if (o_job_root->count()) sc.editor.job_root = s_job_root;
      override_if(o_timeout, sc.editor.timeout_s, s_timeout);
      override_if(o_ow, sc.original_weight, s_original_weight);
      override_if(o_lr, sc.learning_rate, s_lr);
      if (o_trainable->count()) {
        sc.trainable = s_trainable == "sh_only" ? TrainableSet::sh_only : TrainableSet::sh_and_opacity;
      }
      override_if(o_snapshot, sc.snapshot_every, s_snapshot);

      require_file(rc.scene, "scene PLY");
      require_dataset(rc.dataset);
      require_file(rc.style, "style image");
      if (!rc.encoder.empty()) require_file(rc.encoder, "encoder manifest");
      if (sc.editor.kind == EditorKind::external && sc.editor.job_root.empty()) {
        throw InvalidArgument("an external editor needs --job-root");
      }
      const fs::path out_dir = require_out(rc);
      sc.output_dir = out_dir;
      sc.validate();
      write_json_file(echo(rc), out_dir / "config.json");

      const GaussianScene scene = load_ply(rc.scene);
      const Encoder encoder = load_or_default_encoder(rc);
      StylizeResult result = stylize(scene, rc.dataset, rc.style, rc.prompt, sc, encoder);
      result.report.inputs["scene"] = sha256_file(rc.scene);
      result.report.inputs["style"] = sha256_file(rc.style);
      result.report.inputs["transforms.json"] = sha256_file(fs::path(rc.dataset) / "transforms.json");
      if (!rc.encoder.empty()) result.report.inputs["encoder"] = sha256_file(rc.encoder);
      save_ply(result.scene, out_dir / "stylized.ply");
      json report = result.report.to_json();
      report["version"] = GSSTYLE_VERSION;
      report["seed"] = rc.seed;
      write_json_file(report, out_dir / "run_report.json");

      out << "status: " << to_string(result.report.status) << ", iterations: "
          << result.report.iterations << ", edited L1 " << result.report.edited_l1_before << " -> "
          << result.report.edited_l1_after << "\n";
      switch (result.report.status) {
        case RunStatus::completed:
        case RunStatus::converged:
          return kExitOk;
        case RunStatus::editor_timeout:
          err << "error: " << result.report.message << "\n";
          return kExitEditorTimeout;
        case RunStatus::diverged:
          err << "error: " << result.report.message << "\n";
          return kExitDiverged;
        case RunStatus::editor_failed:
          err << "error: " << result.report.message << "\n";
          return kExitError;
      }
      return kExitError;
    }

    if (render_cmd->parsed()) {
      RunConfig rc = render_common.resolve();
      override_if(o_r_scene, rc.scene, r_scene);
      override_if(o_r_dataset, rc.dataset, r_dataset);
      override_if(o_r_scale, rc.depth_scale, r_depth_scale);
      require_file(rc.scene, "scene PLY");
      require_dataset(rc.dataset);
      if (!(rc.depth_scale > 0.0)) throw InvalidArgument("depth scale must be positive");
      const fs::path out_dir = require_out(rc);
      const GaussianScene scene = load_ply(rc.scene);
      const auto views = pick_views(load_dataset(rc.dataset), r_views);
      json meta = {{"depth_scale", r_depth ? json(rc.depth_scale) : json(nullptr)},
                   {"depth_units", "camera z times depth_scale, 0 where alpha is 0"},
                   {"views", json::array()}};
      for (const auto& v : views) {
        const RenderOutput r = render(scene, v, rc.stylize.render);
        write_image(r.color, out_dir / ("render_" + v.id + ".png"));
        json entry = {{"id", v.id}, {"color", "render_" + v.id + ".png"}};
        if (r_depth) {
          write_image16(r.depth, rc.depth_scale, out_dir / ("depth_" + v.id + ".png"));
          entry["depth"] = "depth_" + v.id + ".png";
        }
        meta["views"].push_back(entry);
      }
      write_json_file(meta, out_dir / "render_meta.json");
      out << "rendered " << views.size() << " views\n";
      return kExitOk;
    }

    if (edges_cmd->parsed()) {
      RunConfig rc = edges_common.resolve();
      override_if(o_e_threshold, rc.edge_threshold, e_threshold);
      const fs::path out_dir = require_out(rc);
      for (const auto& in : e_inputs) {
        const fs::path p(in);
        write_image(compute_edges(read_image(p), rc.edge_threshold),
                    out_dir / ("edge_" + p.stem().string() + ".png"));
      }
      return kExitOk;
    }

    if (mock_cmd->parsed()) {
      RunConfig rc = mock_common.resolve();
      override_if(o_m_style, rc.style, m_style);
      require_file(rc.style, "style image");
      const fs::path out_dir = require_out(rc);
      const ColorStats stats = compute_color_stats(read_image(rc.style));
      for (const auto& in : m_inputs) {
        const fs::path p(in);
        if (fs::weakly_canonical(p.parent_path()) == fs::weakly_canonical(out_dir)) {
          throw InvalidArgument("refusing to overwrite input " + in);
        }
        write_image(color_transfer(read_image(p), stats), out_dir / p.filename());
      }
      return kExitOk;
    }

    if (serve_cmd->parsed()) {
      serve_common.resolve();
      std::size_t served = 0;
      if (v_seconds <= 0.0) {
        served = serve_jobs(v_root);
      } else {
        const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(v_seconds);
        served = serve_jobs(v_root, [until] { return std::chrono::steady_clock::now() >= until; }, v_poll);
      }
      out << "served " << served << " jobs\n";
      return kExitOk;
    }

    if (eval_cmd->parsed()) {
      RunConfig rc = eval_common.resolve();
      override_if(o_x_scene, rc.scene, x_scene);
      override_if(o_x_dataset, rc.dataset, x_dataset);
      override_if(o_x_encoder, rc.encoder, x_encoder);
      override_if(o_x_short, rc.eval.short_stride, x_short);
      override_if(o_x_long, rc.eval.long_stride, x_long);
      if (x_no_perceptual) rc.eval.perceptual = false;
      require_file(rc.scene, "scene PLY");
      require_dataset(rc.dataset);
      if (!rc.encoder.empty()) require_file(rc.encoder, "encoder manifest");
      const fs::path out_dir = require_out(rc);
      const GaussianScene scene = load_ply(rc.scene);
      const auto views = load_dataset(rc.dataset);
      std::optional<Encoder> encoder;
      if (rc.eval.perceptual) encoder = load_or_default_encoder(rc);
      rc.eval.render = rc.stylize.render;
      ConsistencyReport report;
      if (x_images.empty()) {
        report = evaluate(scene, views, rc.eval, encoder ? &*encoder : nullptr);
      } else {
        std::vector<RenderOutput> geometry;
        std::vector<ImageBuffer> images;
        for (const auto& v : views) {
          geometry.push_back(render(scene, v, rc.eval.render));
          images.push_back(read_image(fs::path(x_images) / ("view_" + v.id + ".png")));
        }
        report = evaluate_images(images, geometry, views, rc.eval, encoder ? &*encoder : nullptr);
      }
      write_json_file(report.to_json(), out_dir / "consistency.json");
      std::ofstream csv(out_dir / "consistency.csv", std::ios::trunc);
      csv << report.to_csv();
      out << "short-range RMSE " << report.short_range.rmse << " over " << report.short_range.pairs
          << " pairs, long-range RMSE " << report.long_range.rmse << " over "
          << report.long_range.pairs << " pairs\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

}  // namespace gsstyle::cli
