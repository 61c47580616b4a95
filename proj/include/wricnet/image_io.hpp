#pragma once

// 8-bit PNG read/write through libpng's simplified API. Requires linking
// against libpng.

#include "wricnet/datapipe.hpp"

#include <png.h>

#include <cstring>
#include <filesystem>

namespace wricnet {

class ImageIOError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Reads a PNG as planar 8-bit with the requested channel count (1 or 3);
/// libpng converts colour spaces as needed.
inline Image<std::uint8_t> read_png(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ImageIOError("cannot read " + path.string() + ": " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageIOError("cannot decode " + path.string() + ": " + img.message);
  }
  Image<std::uint8_t> out(channels, img.height, img.width);
  const std::size_t P = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t c = 0; c < channels; ++c) out.data[c * P + i] = buf[i * channels + c];
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image<std::uint8_t>& im) {
  if (im.channels != 1 && im.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t P = im.height * im.width;
  std::vector<std::uint8_t> buf(P * im.channels);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t c = 0; c < im.channels; ++c) buf[i * im.channels + c] = im.data[c * P + i];
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw ImageIOError("cannot write " + path.string() + ": " + img.message);
}

/// Label files store change as any non-zero value (conventionally 255).
inline Mask read_label_png(const std::filesystem::path& path) {
  Mask m = read_png(path, 1);
  for (auto& v : m.data) v = v ? 1 : 0;
  return m;
}

inline void write_label_png(const std::filesystem::path& path, const Mask& m) {
  Image<std::uint8_t> out = m;
  for (auto& v : out.data) v = v ? 255 : 0;
  write_png(path, out);
}

} // namespace wricnet
