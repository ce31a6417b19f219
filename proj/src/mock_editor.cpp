#include "gsstyle/mock_editor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <thread>
#include <vector>

#include "gsstyle/editor_protocol.hpp"
#include "gsstyle/error.hpp"
#include "gsstyle/image_io.hpp"

namespace gsstyle {
namespace fs = std::filesystem;

ColorStats compute_color_stats(const ImageBuffer& image) {
  if (image.channels != 3) throw ShapeError("color statistics need a 3-channel image");
  ColorStats s;
  const std::size_t n = image.pixel_count();
  if (n == 0) throw ShapeError("color statistics of an empty image");
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) s.mean[c] += image.data[p * 3 + c];
  }
  for (int c = 0; c < 3; ++c) s.mean[c] /= static_cast<double>(n);
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double d = image.data[p * 3 + c] - s.mean[c];
      s.std[c] += d * d;
    }
  }
  for (int c = 0; c < 3; ++c) s.std[c] = std::sqrt(s.std[c] / static_cast<double>(n));
  return s;
}

ImageBuffer color_transfer_unclamped(const ImageBuffer& image, const ColorStats& style) {
  const ColorStats own = compute_color_stats(image);
  ImageBuffer out = image;
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) {
      double& v = out.data[p * 3 + c];
      v = (v - own.mean[c]) / (own.std[c] + 1e-6) * style.std[c] + style.mean[c];
    }
  }
  return out;
}

ImageBuffer color_transfer(const ImageBuffer& image, const ColorStats& style) {
  ImageBuffer out = color_transfer_unclamped(image, style);
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

bool serve_job(const fs::path& job_dir) {
  const fs::path response = job_dir / "response";
  if (fs::exists(response / "done")) return false;
  fs::create_directories(response);
  try {
    const EditJob job = read_job(job_dir);
    const ColorStats style = compute_color_stats(read_image(job.style_path));
    for (const auto& r : job.requests) {
      write_image(color_transfer(read_image(r.render_path), style),
                  response / ("view_" + r.view_id + ".png"));
    }
    std::ofstream meta(response / "meta.json");
    meta << nlohmann::json{{"editor", kMockEditorName}, {"schema_version", kJobSchemaVersion}}.dump(2)
         << "\n";
  } catch (const std::exception& e) {
    std::ofstream err(response / "error.txt");
    err << e.what() << "\n";
  }
  std::ofstream(response / "done").flush();
  return true;
}

std::size_t serve_jobs(const fs::path& root, const std::function<bool()>& stop,
                       double poll_interval_s) {
  if (!fs::is_directory(root)) throw IoError("job root does not exist: " + root.string());
  std::size_t processed = 0;
  while (true) {
    std::vector<fs::path> pending;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (!entry.is_directory()) continue;
      if (fs::exists(entry.path() / "request" / "meta.json") &&
          !fs::exists(entry.path() / "response" / "done")) {
        pending.push_back(entry.path());
      }
    }
    std::sort(pending.begin(), pending.end());
    for (const auto& dir : pending) processed += serve_job(dir) ? 1 : 0;
    if (!stop || stop()) break;
    std::this_thread::sleep_for(std::chrono::duration<double>(std::max(0.001, poll_interval_s)));
  }
  return processed;
}

}  // namespace gsstyle
