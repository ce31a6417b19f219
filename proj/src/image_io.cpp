#include "gsstyle/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include "gsstyle/error.hpp"

namespace gsstyle {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<png_byte> bytes;
};

void on_png_error(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}
void on_png_warning(png_structp, png_const_charp) {}

// Decodes to gray/RGB with the file's bit depth (8 or 16). Alpha is stripped
// and palettes are expanded.
Decoded decode(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + ": not a PNG file");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  Decoded out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": " + (err.empty() ? "PNG decode error" : err));
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
  } else if (depth != 8 && depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": unsupported PNG bit depth " + std::to_string(depth));
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  out.bytes.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (out.channels != 1 && out.channels != 3) {
    // gray+alpha is stripped to gray above; anything else is unexpected
    throw FormatError(path.string() + ": unsupported channel layout");
  }
  return out;
}

void encode(const std::filesystem::path& path, int width, int height, int channels, int bit_depth,
            const std::vector<png_byte>& bytes) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write image " + path.string());
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string() + ": " + (err.empty() ? "PNG encode error" : err));
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, bit_depth,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  for (int y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(bytes.data() + y * rowbytes);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(fp.get()) != 0) throw IoError("write failed for " + path.string());
}

}  // namespace

std::uint8_t quantize_u8(double v) {
  const double c = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::floor(c + 0.5));
}

ImageBuffer read_image(const std::filesystem::path& path) {
  Decoded d = decode(path);
  if (d.bit_depth != 8) {
    throw FormatError(path.string() + ": unsupported PNG bit depth " +
                      std::to_string(d.bit_depth) + " (expected 8)");
  }
  ImageBuffer img(d.width, d.height, d.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = d.bytes[i] / 255.0;
  return img;
}

void write_image(const ImageBuffer& image, const std::filesystem::path& path) {
  image.validate();
  if (image.empty()) throw InvalidArgument("cannot write an empty image to " + path.string());
  std::vector<png_byte> bytes(image.data.size());
  std::transform(image.data.begin(), image.data.end(), bytes.begin(), quantize_u8);
  encode(path, image.width, image.height, image.channels, 8, bytes);
}

void write_image16(const ImageBuffer& image, double scale, const std::filesystem::path& path) {
  image.validate();
  if (image.channels != 1) throw InvalidArgument("16-bit export expects a 1-channel image");
  std::vector<png_byte> bytes(image.data.size() * 2);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const double q = std::clamp(std::floor(image.data[i] * scale + 0.5), 0.0, 65535.0);
    const auto u = static_cast<std::uint16_t>(q);
    bytes[2 * i] = static_cast<png_byte>(u >> 8);
    bytes[2 * i + 1] = static_cast<png_byte>(u & 0xFF);
  }
  encode(path, image.width, image.height, 1, 16, bytes);
}

ImageBuffer read_image16(const std::filesystem::path& path, double scale) {
  Decoded d = decode(path);
  if (d.bit_depth != 16 || d.channels != 1) {
    throw FormatError(path.string() + ": expected a 16-bit single-channel PNG");
  }
  ImageBuffer img(d.width, d.height, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const int u = (d.bytes[2 * i] << 8) | d.bytes[2 * i + 1];
    img.data[i] = u / scale;
  }
  return img;
}

}  // namespace gsstyle
