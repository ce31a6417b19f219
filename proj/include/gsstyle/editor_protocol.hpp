#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gsstyle/types.hpp"

namespace gsstyle {

inline constexpr int kJobSchemaVersion = 1;

// Job directory layout under a root:
//   <root>/<job_id>/request/view_<id>.png   rendered image to edit
//   <root>/<job_id>/request/edge_<id>.png   edge map of that render
//   <root>/<job_id>/request/style.png       style reference
//   <root>/<job_id>/request/prompt.txt      UTF-8 text prompt
//   <root>/<job_id>/request/meta.json       written last; marks the job ready
//   <root>/<job_id>/response/view_<id>.png  edited images
//   <root>/<job_id>/response/meta.json      optional {"editor": name, ...}
//   <root>/<job_id>/response/error.txt      present when the editor failed
//   <root>/<job_id>/response/done           written last by the editor
struct EditRequest {
  std::string view_id;
  std::filesystem::path render_path;
  std::filesystem::path edge_path;
  int width = 0;
  int height = 0;
};

struct EditJob {
  std::string job_id;
  std::vector<EditRequest> requests;
  std::filesystem::path style_path;
  std::string prompt;
  std::uint64_t noise_seed = 0;
  std::string created_at;               // ISO 8601 UTC; filled by submit_job when empty
  std::string editor_params_json = "{}";  // opaque, passed through to editors
};

enum class EditStatus { complete, partial, failed };
const char* to_string(EditStatus s);

struct EditedView {
  std::string view_id;
  std::optional<std::filesystem::path> image_path;  // set only when usable
  std::string detail;                               // why the view is unusable
};

struct EditResult {
  std::string job_id;
  std::vector<EditedView> views;
  EditStatus status = EditStatus::failed;
  std::string editor_name;
  std::string error;
};

struct JobHandle {
  std::filesystem::path root;
  std::string job_id;
  std::filesystem::path dir() const { return root / job_id; }
};

// Copies the referenced images into the request layout and writes meta.json
// last. Returns a handle whose job refers to the copies.
JobHandle submit_job(const std::filesystem::path& root, const EditJob& job);

// Parses <job_dir>/request/meta.json back into an EditJob.
EditJob read_job(const std::filesystem::path& job_dir);

// Polls for response/done, then validates each edited view against the
// requested dimensions. Throws TimeoutError if done does not appear in time.
EditResult await_result(const std::filesystem::path& root, const std::string& job_id,
                        double timeout_s, double poll_interval_s = 0.05);

// Sobel gradient magnitude of the luminance, normalized by 4*sqrt(2) so the
// result lies in [0, 1]; values below low_threshold are zeroed. Borders use
// replicate padding.
ImageBuffer compute_edges(const ImageBuffer& image, double low_threshold = 0.0);

std::string utc_timestamp();

}  // namespace gsstyle
