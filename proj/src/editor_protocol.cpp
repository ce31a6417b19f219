#include "gsstyle/editor_protocol.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <json.hpp>
#include <set>
#include <thread>

#include "gsstyle/error.hpp"
#include "gsstyle/image_io.hpp"

namespace gsstyle {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void copy_checked(const fs::path& from, const fs::path& to) {
  if (!fs::is_regular_file(from)) throw IoError("job input does not exist: " + from.string());
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

}  // namespace

const char* to_string(EditStatus s) {
  switch (s) {
    case EditStatus::complete:
      return "complete";
    case EditStatus::partial:
      return "partial";
    case EditStatus::failed:
      return "failed";
  }
  return "?";
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

JobHandle submit_job(const fs::path& root, const EditJob& job) {
  if (job.job_id.empty() || job.job_id.find('/') != std::string::npos) {
    throw InvalidArgument("invalid job id '" + job.job_id + "'");
  }
  if (job.requests.empty()) throw InvalidArgument("edit job '" + job.job_id + "' has no views");
  std::set<std::string> ids;
  for (const auto& r : job.requests) {
    if (!ids.insert(r.view_id).second) {
      throw InvalidArgument("edit job '" + job.job_id + "' repeats view id '" + r.view_id + "'");
    }
  }
  json params;
  try {
    params = json::parse(job.editor_params_json);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("editor_params is not valid JSON: ") + e.what());
  }

  fs::create_directories(root);
  const fs::path dir = root / job.job_id;
  if (fs::exists(dir)) throw InvalidArgument("job '" + job.job_id + "' already exists in " + root.string());
  const fs::path request = dir / "request";
  fs::create_directories(request);

  json views = json::array();
  for (const auto& r : job.requests) {
    const std::string view_file = "view_" + r.view_id + ".png";
    const std::string edge_file = "edge_" + r.view_id + ".png";
    copy_checked(r.render_path, request / view_file);
    copy_checked(r.edge_path, request / edge_file);
    views.push_back({{"view_id", r.view_id},
                     {"render", view_file},
                     {"edge", edge_file},
                     {"width", r.width},
                     {"height", r.height}});
  }
  copy_checked(job.style_path, request / "style.png");
  write_text(request / "prompt.txt", job.prompt);

  const json meta = {{"schema_version", kJobSchemaVersion},
                     {"job_id", job.job_id},
                     {"created_at", job.created_at.empty() ? utc_timestamp() : job.created_at},
                     {"noise_seed", job.noise_seed},
                     {"style", "style.png"},
                     {"prompt_file", "prompt.txt"},
                     {"views", views},
                     {"editor_params", params}};
  // Editors pick jobs up by meta.json, so it must appear atomically and last.
  write_text(request / "meta.json.tmp", meta.dump(2) + "\n");
  fs::rename(request / "meta.json.tmp", request / "meta.json");
  return JobHandle{root, job.job_id};
}

EditJob read_job(const fs::path& job_dir) {
  const fs::path request = job_dir / "request";
  json meta;
  try {
    meta = json::parse(read_text(request / "meta.json"));
  } catch (const json::exception& e) {
    throw FormatError((request / "meta.json").string() + ": " + e.what());
  }
  if (meta.value("schema_version", 0) != kJobSchemaVersion) {
    throw FormatError((request / "meta.json").string() + ": unsupported schema_version");
  }
  EditJob job;
  try {
    job.job_id = meta.at("job_id").get<std::string>();
    job.created_at = meta.value("created_at", "");
    job.noise_seed = meta.at("noise_seed").get<std::uint64_t>();
    job.style_path = request / meta.value("style", "style.png");
    job.prompt = read_text(request / meta.value("prompt_file", "prompt.txt"));
    job.editor_params_json = meta.value("editor_params", json::object()).dump();
    for (const auto& v : meta.at("views")) {
      EditRequest r;
      r.view_id = v.at("view_id").get<std::string>();
      r.render_path = request / v.at("render").get<std::string>();
      r.edge_path = request / v.at("edge").get<std::string>();
      r.width = v.at("width").get<int>();
      r.height = v.at("height").get<int>();
      job.requests.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError((request / "meta.json").string() + ": " + e.what());
  }
  return job;
}

EditResult await_result(const fs::path& root, const std::string& job_id, double timeout_s,
                        double poll_interval_s) {
  const fs::path dir = root / job_id;
  const fs::path response = dir / "response";
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  while (!fs::exists(response / "done")) {
    if (elapsed() >= timeout_s) {
      throw TimeoutError("editor did not finish job '" + job_id + "' within " +
                             std::to_string(timeout_s) + " s",
                         elapsed());
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(std::max(0.001, poll_interval_s)));
  }

  const EditJob job = read_job(dir);
  EditResult result;
  result.job_id = job_id;
  result.editor_name = "unknown";
  if (fs::exists(response / "meta.json")) {
    try {
      result.editor_name = json::parse(read_text(response / "meta.json")).value("editor", "unknown");
    } catch (const json::exception&) {
    }
  }
  if (fs::exists(response / "error.txt")) result.error = read_text(response / "error.txt");

  std::size_t usable = 0;
  for (const auto& r : job.requests) {
    EditedView v;
    v.view_id = r.view_id;
    const fs::path p = response / ("view_" + r.view_id + ".png");
    if (!fs::exists(p)) {
      v.detail = "missing";
    } else {
      try {
        const ImageBuffer img = read_image(p);
        if (img.width != r.width || img.height != r.height || img.channels != 3) {
          v.detail = "dimension mismatch: got " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + "x" + std::to_string(img.channels);
        } else {
          v.image_path = p;
          ++usable;
        }
      } catch (const Error& e) {
        v.detail = std::string("unreadable: ") + e.what();
      }
    }
    result.views.push_back(std::move(v));
  }
  if (usable == job.requests.size() && result.error.empty()) {
    result.status = EditStatus::complete;
  } else if (usable > 0) {
    result.status = EditStatus::partial;
  } else {
    result.status = EditStatus::failed;
  }
  return result;
}

}  // namespace gsstyle
