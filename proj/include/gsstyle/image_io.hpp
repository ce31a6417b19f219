#pragma once

#include <cstdint>
#include <filesystem>

#include "gsstyle/types.hpp"

namespace gsstyle {

// 8-bit PNG decode: byte b maps to b/255. Gray decodes to one channel;
// RGB, RGBA and palette images decode to three (alpha is dropped).
ImageBuffer read_image(const std::filesystem::path& path);

// 8-bit PNG encode with v -> round_half_up(clamp(v, 0, 1) * 255).
void write_image(const ImageBuffer& image, const std::filesystem::path& path);

// Single-channel 16-bit PNG; each value is stored as round(v * scale) clamped
// to [0, 65535].
void write_image16(const ImageBuffer& image, double scale, const std::filesystem::path& path);
ImageBuffer read_image16(const std::filesystem::path& path, double scale);

std::uint8_t quantize_u8(double v);

}  // namespace gsstyle
