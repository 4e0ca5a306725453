#pragma once

#include "vsla/model.hpp"
#include "vsla/params.hpp"
#include "vsla/rng.hpp"
#include "vsla/sampling.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

namespace fx {

inline vsla::Clip random_clip(const vsla::VisionConfig& cfg, int frames, vsla::PlatformTag platform,
                              std::uint64_t seed) {
  vsla::Clip c;
  c.frames = frames;
  c.height = cfg.vit.image_height;
  c.width = cfg.vit.image_width;
  c.platform = platform;
  c.pixels.resize(static_cast<std::size_t>(frames) * c.height * c.width * 3);
  auto rng = vsla::make_rng({seed, 0xc11f});
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& p : c.pixels) p = static_cast<float>(n(rng));
  return c;
}

/// Overwrites every parameter matching `prefix` with N(0, sd^2) draws.
inline void randomize(vsla::ParamStore& s, const std::string& prefix, double sd, std::uint64_t seed) {
  auto rng = vsla::make_rng({seed, 0x7a11});
  for (auto& p : s.params())
    if (p.spec.name.rfind(prefix, 0) == 0) p.value = vsla::gaussian(p.value.rows(), p.value.cols(), sd, rng);
}

/// Fresh scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path = std::filesystem::temp_directory_path() /
           ("vsla_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(stamp));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace fx
