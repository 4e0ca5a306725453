#pragma once

#include "vsla/datamodel.hpp"
#include "vsla/image_io.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace vsla {

struct SamplerConfig {
  int clip_len = 8;
  int ids_per_batch = 8;
  int clips_per_id = 4;
  bool shuffle_frames = true;

  int batch_size() const { return ids_per_batch * clips_per_id; }
  /// Throws ConfigError on T < 1, P < 1 or K < 2.
  void validate() const;
};

/// Random erasing; defaults are the usual settings of the technique.
struct RandomErasingConfig {
  bool enabled = true;
  double probability = 0.5;
  double area_min = 0.02;
  double area_max = 0.4;
  double aspect_min = 0.3;  // aspect range is [aspect_min, 1/aspect_min]
};

struct AugmentationConfig {
  int pad = 10;
  int crop_height = 256;
  int crop_width = 128;
  double hflip_prob = 0.5;
  RandomErasingConfig erase;
  std::array<double, 3> mean = {0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> std = {0.26862954, 0.26130258, 0.27577711};

  void validate() const;
};

/// A set of T frames, resized and normalized: pixels are T x H x W x 3 (HWC per frame).
struct Clip {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  std::string source;
  PlatformTag platform = PlatformTag::kGround;
  int identity = -1;  // raw identity label
  int label = -1;     // remapped train label, -1 outside the train split

  float& at(int t, int y, int x, int c) {
    return pixels[((static_cast<std::size_t>(t) * height + y) * width + x) * 3 + c];
  }
  float at(int t, int y, int x, int c) const {
    return pixels[((static_cast<std::size_t>(t) * height + y) * width + x) * 3 + c];
  }
};

/// Divides [0, len) into T equal segments and draws one index per segment.
/// Shorter tracklets repeat indices cyclically; the result is ascending.
std::vector<int> sparse_temporal_sample(int tracklet_len, int clip_len, std::mt19937_64& rng);

/// Uniform random permutation (Fisher-Yates).
std::vector<int> shuffle_clip_frames(std::vector<int> indices, std::mt19937_64& rng);

/// One clip to materialize: which tracklet, which frames, and its augmentation seed.
struct ClipRef {
  const Tracklet* tracklet = nullptr;
  int label = -1;
  std::vector<int> frame_indices;
  std::uint64_t aug_seed = 0;
};

struct Batch {
  int epoch = 0;
  int index = 0;
  std::vector<ClipRef> clips;  // P identities x K clips, identity-major
};

/// PK batches for one epoch. Identities are shuffled per epoch; a trailing
/// partial group is completed with identities from earlier groups so every
/// train identity is visited at least once. Tracklets are reused with fresh
/// temporal samples when an identity has fewer than K of them. All randomness
/// derives from (seed, epoch, batch, slot).
std::vector<Batch> pk_batches(const DatasetManifest& manifest, const LabelMap& labels,
                              const SamplerConfig& cfg, std::uint64_t seed, int epoch);

int batches_per_epoch(const LabelMap& labels, const SamplerConfig& cfg);

/// Bilinear resize (align-corners off, half-pixel centres).
Image resize_bilinear(const Image& src, int height, int width);

/// Training path: resize, pad, random crop, per-clip horizontal flip,
/// normalize, per-frame random erasing. Eval path: resize, normalize.
std::vector<float> augment(std::span<const Image> frames, const AugmentationConfig& cfg,
                           std::mt19937_64& rng, bool training);

/// Thread-safe cache of decoded frames keyed by path.
class FrameCache {
 public:
  const Image& get(const std::filesystem::path& path);

 private:
  std::mutex mu_;
  std::map<std::string, Image> images_;
};

/// Decodes and augments the frames of `ref` into a clip.
Clip materialize_clip(const DatasetManifest& manifest, const ClipRef& ref,
                      const AugmentationConfig& cfg, bool training, FrameCache* cache = nullptr);

}  // namespace vsla
