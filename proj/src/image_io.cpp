#include "vsla/image_io.hpp"

#include "vsla/errors.hpp"

#include <png.h>

#include <cstring>

namespace vsla {

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot decode image '" + path.string() + "': " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode image '" + path.string() + "': " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.rgb.data(), 0, nullptr))
    throw IoError("cannot write image '" + path.string() + "': " + img.message);
}

}  // namespace vsla
