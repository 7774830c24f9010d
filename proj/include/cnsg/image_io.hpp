#pragma once

// 8-bit PNG read/write through libpng, plus the raw little-endian flow format.

#include <cnsg/core.hpp>

#include <png.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace cnsg::io {

struct IoError : Error {
  IoError(const std::filesystem::path& path, const std::string& what) : Error(path.string() + ": " + what) {}
};

struct Image8 {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;  // 1 or 3
  std::vector<uint8_t> pixels;  // interleaved, row-major
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError(path, std::string("cannot open (") + std::strerror(errno) + ")");
  return f;
}

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* where = static_cast<std::string*>(png_get_error_ptr(png));
  if (where) *where = msg;
  png_longjmp(png, 1);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError(path, "only 1- or 3-channel images are supported");
  auto file = detail::open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_fail, nullptr);
  if (!png) throw IoError(path, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path, "png write failed: " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y * img.width * img.channels));
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image8 read_png(const std::filesystem::path& path) {
  auto file = detail::open_file(path, "rb");
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_fail, nullptr);
  if (!png) throw IoError(path, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path, "png read failed: " + error);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path, "expected 8-bit RGB or greyscale PNG");
  }
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  img.pixels.resize(static_cast<size_t>(img.width * img.height * img.channels));
  rows.resize(static_cast<size_t>(img.height));
  for (int64_t y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] = img.pixels.data() + static_cast<size_t>(y * img.width * img.channels);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// [3, H, W] float in [0, 1] -> RGB8 with round-to-nearest.
inline Image8 frame_to_image(const torch::Tensor& frame) {
  auto q = (frame.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
  q = q.permute({1, 2, 0}).contiguous();
  Image8 img{frame.size(2), frame.size(1), 3, {}};
  img.pixels.assign(q.data_ptr<uint8_t>(), q.data_ptr<uint8_t>() + q.numel());
  return img;
}

inline torch::Tensor image_to_frame(const Image8& img) {
  auto t = torch::from_blob(const_cast<uint8_t*>(img.pixels.data()), {img.height, img.width, img.channels},
                            torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

inline Image8 label_to_image(const torch::Tensor& label) {
  auto q = label.to(torch::kUInt8).contiguous();
  Image8 img{label.size(1), label.size(0), 1, {}};
  img.pixels.assign(q.data_ptr<uint8_t>(), q.data_ptr<uint8_t>() + q.numel());
  return img;
}

inline torch::Tensor image_to_label(const Image8& img) {
  auto t = torch::from_blob(const_cast<uint8_t*>(img.pixels.data()), {img.height, img.width}, torch::kUInt8);
  return t.to(torch::kLong).clone();
}

inline constexpr char kFlowMagic[8] = {'C', 'N', 'S', 'G', 'F', 'L', 'O', '1'};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace detail

/// Layout: "CNSGFLO1", uint32 H, uint32 W, then 2*H*W float32 (dx plane, dy plane), little-endian.
inline void write_flow(const std::filesystem::path& path, const torch::Tensor& flow) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path, "cannot open for writing");
  auto f = flow.detach().to(torch::kFloat).contiguous();
  os.write(kFlowMagic, sizeof(kFlowMagic));
  detail::put_le<uint32_t>(os, static_cast<uint32_t>(f.size(1)));
  detail::put_le<uint32_t>(os, static_cast<uint32_t>(f.size(2)));
  os.write(reinterpret_cast<const char*>(f.data_ptr<float>()), static_cast<std::streamsize>(f.numel() * 4));
  if (!os) throw IoError(path, "write failed");
}

inline torch::Tensor read_flow(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open for reading");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kFlowMagic, sizeof(magic)) != 0) throw IoError(path, "bad flow magic");
  const auto h = detail::get_le<uint32_t>(is);
  const auto w = detail::get_le<uint32_t>(is);
  auto flow = torch::empty({2, static_cast<int64_t>(h), static_cast<int64_t>(w)}, torch::kFloat);
  is.read(reinterpret_cast<char*>(flow.data_ptr<float>()), static_cast<std::streamsize>(flow.numel() * 4));
  if (!is) throw IoError(path, "truncated flow payload");
  if (is.peek() != std::char_traits<char>::eof()) throw IoError(path, "trailing bytes after flow payload");
  return flow;
}

}  // namespace cnsg::io
