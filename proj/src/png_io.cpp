#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "segreg/dataset.hpp"

namespace segreg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_gray(const std::filesystem::path& path, int rows, int cols, int depth, const std::vector<png_byte>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ContractViolation("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, cols, rows, depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(cols) * (depth / 8);
  for (int r = 0; r < rows; ++r) png_write_row(png, const_cast<png_bytep>(bytes.data() + r * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png16(const std::filesystem::path& path, const Image& img) {
  require_image(img, "write_png16");
  std::vector<png_byte> bytes(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(img.values()[i], 0.0f, 1.0f) * 65535.0));
    bytes[2 * i] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<png_byte>(v & 0xff);
  }
  write_gray(path, img.rows(), img.cols(), 16, bytes);
}

void write_mask_png(const std::filesystem::path& path, const Image& mask) {
  require_image(mask, "write_mask_png");
  std::vector<png_byte> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.values()[i] > 0.5f ? 255 : 0;
  write_gray(path, mask.rows(), mask.cols(), 8, bytes);
}

void write_png8(const std::filesystem::path& path, const Grid<std::uint8_t>& img) {
  std::vector<png_byte> bytes(img.values().begin(), img.values().end());
  write_gray(path, img.rows(), img.cols(), 8, bytes);
}

Grid<std::uint16_t> read_png_raw(const std::filesystem::path& path, int* bit_depth) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ContractViolation("libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int cols = png_get_image_width(png, info), rows = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const int out_depth = depth == 16 ? 16 : 8;
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  Grid<std::uint16_t> out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int c = 0; c < cols; ++c)
      out(r, c) = out_depth == 16 ? static_cast<std::uint16_t>((row[2 * c] << 8) | row[2 * c + 1]) : row[c];
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (bit_depth) *bit_depth = out_depth;
  return out;
}

Image read_png(const std::filesystem::path& path) {
  int depth = 8;
  const auto raw = read_png_raw(path, &depth);
  const float scale = depth == 16 ? 65535.0f : 255.0f;
  Image out(raw.rows(), raw.cols());
  for (std::size_t i = 0; i < raw.size(); ++i) out.values()[i] = raw.values()[i] / scale;
  return out;
}

}  // namespace segreg
