#include "anerf/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace anerf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) {
      std::fclose(f);
    }
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const Image& image, const std::filesystem::path& path, int bit_depth,
               double scale) {
  require(image.channels == 1 || image.channels == 3, "PNG export supports 1 or 3 channels");
  require(image.width > 0 && image.height > 0, "cannot write an empty image");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) {
    throw IoError("cannot open for writing: " + path.string());
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  const int bytes = bit_depth / 8;
  std::vector<png_byte> row(static_cast<size_t>(image.width) * image.channels * bytes);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width, image.height, bit_depth,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width * image.channels; ++c) {
      double v = image.pixels[static_cast<size_t>(r) * image.width * image.channels + c] / scale;
      v = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
      const auto q = static_cast<unsigned>(v * max_value + 0.5);
      if (bytes == 1) {
        row[c] = static_cast<png_byte>(q);
      } else {
        row[2 * c] = static_cast<png_byte>(q >> 8);
        row[2 * c + 1] = static_cast<png_byte>(q & 0xff);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png8(const Image& image, const std::filesystem::path& path) {
  write_png(image, path, 8, 1.0);
}

void write_png16(const Image& image, const std::filesystem::path& path, double scale) {
  require(scale > 0.0, "PNG scale must be positive");
  write_png(image, path, 16, scale);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) {
    throw IoError("cannot open image: " + path.string());
  }
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  Image image;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
  }
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if ((color_type & PNG_COLOR_MASK_ALPHA) != 0) {
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  const int depth = png_get_bit_depth(png, info);
  image = Image(width, height, channels);
  row.resize(png_get_rowbytes(png, info));
  const double max_value = depth == 16 ? 65535.0 : 255.0;
  for (int r = 0; r < height; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int c = 0; c < width * channels; ++c) {
      const unsigned q = depth == 16 ? (static_cast<unsigned>(row[2 * c]) << 8) | row[2 * c + 1]
                                     : row[c];
      image.pixels[static_cast<size_t>(r) * width * channels + c] =
          static_cast<float>(static_cast<double>(q) / max_value);
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

}  // namespace anerf
