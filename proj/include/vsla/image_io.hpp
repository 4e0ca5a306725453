#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace vsla {

/// 8-bit interleaved RGB image, row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t& at(int y, int x, int c) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

/// Reads an 8-bit PNG as RGB (gray and palette inputs are expanded, alpha dropped).
/// Throws IoError naming the file on failure.
Image read_png(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace vsla
