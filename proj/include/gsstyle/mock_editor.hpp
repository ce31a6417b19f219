#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>

#include "gsstyle/types.hpp"

namespace gsstyle {

inline constexpr const char* kMockEditorName = "mock-color-transfer";

// Per-channel RGB mean and population standard deviation over all pixels.
struct ColorStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

ColorStats compute_color_stats(const ImageBuffer& image);

// out = (in - mean_img) / (std_img + 1e-6) * std_style + mean_style, per
// channel, then clamped to [0, 1].
ImageBuffer color_transfer(const ImageBuffer& image, const ColorStats& style_stats);

// Same map without the final clamp; exposed for moment checks.
ImageBuffer color_transfer_unclamped(const ImageBuffer& image, const ColorStats& style_stats);

// Serves every pending job under root (a job is pending when
// request/meta.json exists and response/done does not). With no stop
// predicate a single pass is made; otherwise the root is polled until
// stop() returns true. Returns the number of jobs processed.
std::size_t serve_jobs(const std::filesystem::path& root,
                       const std::function<bool()>& stop = {}, double poll_interval_s = 0.05);

// Processes one job directory; failures are reported through
// response/error.txt. Returns false if the job was already done.
bool serve_job(const std::filesystem::path& job_dir);

}  // namespace gsstyle
