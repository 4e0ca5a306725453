#include "vsla/sampling.hpp"

#include "vsla/errors.hpp"
#include "vsla/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vsla {

void SamplerConfig::validate() const {
  if (clip_len < 1) throw ConfigError("sampler: clip_len must be >= 1");
  if (ids_per_batch < 1) throw ConfigError("sampler: ids_per_batch must be >= 1");
  if (clips_per_id < 2) throw ConfigError("sampler: clips_per_id must be >= 2 for triplet mining");
}

void AugmentationConfig::validate() const {
  if (pad < 0) throw ConfigError("augmentation: pad must be >= 0");
  if (crop_height < 1 || crop_width < 1) throw ConfigError("augmentation: crop size must be positive");
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augmentation: ") + what + " must lie in [0,1]");
  };
  prob(hflip_prob, "hflip_prob");
  prob(erase.probability, "erase.probability");
  if (!(erase.area_min > 0 && erase.area_min <= erase.area_max && erase.area_max <= 1.0))
    throw ConfigError("augmentation: erase area range must satisfy 0 < min <= max <= 1");
  if (!(erase.aspect_min > 0 && erase.aspect_min <= 1.0))
    throw ConfigError("augmentation: erase.aspect_min must lie in (0,1]");
  for (double s : std)
    if (!(s > 0)) throw ConfigError("augmentation: normalization std must be positive");
}

std::vector<int> sparse_temporal_sample(int tracklet_len, int clip_len, std::mt19937_64& rng) {
  if (clip_len < 1) throw ConfigError("sparse_temporal_sample: clip length must be >= 1");
  if (tracklet_len < 1) throw ValidationError("sparse_temporal_sample: empty tracklet");
  std::vector<int> out(static_cast<std::size_t>(clip_len));
  if (tracklet_len < clip_len) {
    for (int i = 0; i < clip_len; ++i) out[i] = i % tracklet_len;
    std::sort(out.begin(), out.end());
    return out;
  }
  for (int i = 0; i < clip_len; ++i) {
    const auto lo = static_cast<std::int64_t>(i) * tracklet_len / clip_len;
    const auto hi = static_cast<std::int64_t>(i + 1) * tracklet_len / clip_len;
    out[i] = static_cast<int>(uniform_int(rng, lo, hi - 1));
  }
  return out;
}

std::vector<int> shuffle_clip_frames(std::vector<int> indices, std::mt19937_64& rng) {
  for (std::size_t i = indices.size(); i > 1; --i)
    std::swap(indices[i - 1], indices[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1))]);
  return indices;
}

int batches_per_epoch(const LabelMap& labels, const SamplerConfig& cfg) {
  return (labels.size() + cfg.ids_per_batch - 1) / cfg.ids_per_batch;
}

std::vector<Batch> pk_batches(const DatasetManifest& manifest, const LabelMap& labels,
                              const SamplerConfig& cfg, std::uint64_t seed, int epoch) {
  cfg.validate();
  if (labels.size() < cfg.ids_per_batch)
    throw ConfigError("pk_batches: train split has " + std::to_string(labels.size()) +
                      " identities, fewer than ids_per_batch=" + std::to_string(cfg.ids_per_batch));
  std::map<int, std::vector<const Tracklet*>> by_label;
  for (const auto* t : manifest.train_tracklets()) by_label[labels.index_of(t->identity)].push_back(t);

  const auto ep = static_cast<std::uint64_t>(epoch);
  auto order_rng = make_rng({seed, ep, 0x6f72646572});
  std::vector<int> order(static_cast<std::size_t>(labels.size()));
  std::iota(order.begin(), order.end(), 0);
  order = shuffle_clip_frames(std::move(order), order_rng);

  const int n_batches = batches_per_epoch(labels, cfg);
  std::vector<Batch> batches;
  batches.reserve(static_cast<std::size_t>(n_batches));
  for (int b = 0; b < n_batches; ++b) {
    std::vector<int> ids;
    for (int i = b * cfg.ids_per_batch; i < std::min<int>((b + 1) * cfg.ids_per_batch, labels.size()); ++i)
      ids.push_back(order[i]);
    // Complete a short last group with distinct identities from earlier groups.
    for (int i = 0; static_cast<int>(ids.size()) < cfg.ids_per_batch; ++i)
      if (std::find(ids.begin(), ids.end(), order[i]) == ids.end()) ids.push_back(order[i]);

    Batch batch;
    batch.epoch = epoch;
    batch.index = b;
    int slot = 0;
    for (int label : ids) {
      auto pool = by_label.at(label);
      auto pick_rng = make_rng({seed, ep, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(label), 0x7069636b});
      std::vector<int> perm(pool.size());
      std::iota(perm.begin(), perm.end(), 0);
      perm = shuffle_clip_frames(std::move(perm), pick_rng);
      for (int k = 0; k < cfg.clips_per_id; ++k, ++slot) {
        ClipRef ref;
        ref.tracklet = pool[perm[static_cast<std::size_t>(k) % perm.size()]];
        ref.label = label;
        auto rng = make_rng({seed, ep, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(slot)});
        ref.frame_indices = sparse_temporal_sample(static_cast<int>(ref.tracklet->frames.size()), cfg.clip_len, rng);
        if (cfg.shuffle_frames) ref.frame_indices = shuffle_clip_frames(std::move(ref.frame_indices), rng);
        ref.aug_seed = derive_seed({seed, ep, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(slot), 0x617567});
        batch.clips.push_back(std::move(ref));
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

Image resize_bilinear(const Image& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  Image out(height, width);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), src.height - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), src.width - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                         wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

std::vector<float> augment(std::span<const Image> frames, const AugmentationConfig& cfg,
                           std::mt19937_64& rng, bool training) {
  const int h = cfg.crop_height, w = cfg.crop_width;
  const int t_count = static_cast<int>(frames.size());
  std::vector<float> out(static_cast<std::size_t>(t_count) * h * w * 3);
  auto px = [&](int t, int y, int x, int c) -> float& {
    return out[((static_cast<std::size_t>(t) * h + y) * w + x) * 3 + c];
  };

  int off_y = cfg.pad, off_x = cfg.pad;
  bool flip = false;
  if (training) {
    off_y = static_cast<int>(uniform_int(rng, 0, 2 * cfg.pad));
    off_x = static_cast<int>(uniform_int(rng, 0, 2 * cfg.pad));
    flip = uniform01(rng) < cfg.hflip_prob;
  }
  for (int t = 0; t < t_count; ++t) {
    const Image img = resize_bilinear(frames[t], h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // Padding is black; the flip acts on the cropped image.
        const int sy = y + off_y - cfg.pad;
        const int sx = (flip ? w - 1 - x : x) + off_x - cfg.pad;
        for (int c = 0; c < 3; ++c) {
          const double raw = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img.at(sy, sx, c) / 255.0 : 0.0;
          px(t, y, x, c) = static_cast<float>((raw - cfg.mean[c]) / cfg.std[c]);
        }
      }
    }
    if (training && cfg.erase.enabled && uniform01(rng) < cfg.erase.probability) {
      std::normal_distribution<double> fill(0.0, 1.0);
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double area = h * w * (cfg.erase.area_min + (cfg.erase.area_max - cfg.erase.area_min) * uniform01(rng));
        const double log_lo = std::log(cfg.erase.aspect_min), log_hi = -log_lo;
        const double aspect = std::exp(log_lo + (log_hi - log_lo) * uniform01(rng));
        const int eh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        const int ew = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        if (eh < 1 || ew < 1 || eh >= h || ew >= w) continue;
        const int y0 = static_cast<int>(uniform_int(rng, 0, h - eh));
        const int x0 = static_cast<int>(uniform_int(rng, 0, w - ew));
        for (int y = y0; y < y0 + eh; ++y)
          for (int x = x0; x < x0 + ew; ++x)
            for (int c = 0; c < 3; ++c) px(t, y, x, c) = static_cast<float>(fill(rng));
        break;
      }
    }
  }
  return out;
}

const Image& FrameCache::get(const std::filesystem::path& path) {
  std::lock_guard<std::mutex> lock(mu_);
  auto key = path.string();
  auto it = images_.find(key);
  if (it != images_.end()) return it->second;
  return images_.emplace(key, read_png(path)).first->second;
}

Clip materialize_clip(const DatasetManifest& manifest, const ClipRef& ref,
                      const AugmentationConfig& cfg, bool training, FrameCache* cache) {
  std::vector<Image> frames;
  frames.reserve(ref.frame_indices.size());
  for (int idx : ref.frame_indices) {
    const auto path = manifest.frame_path(*ref.tracklet, static_cast<std::size_t>(idx));
    frames.push_back(cache ? cache->get(path) : read_png(path));
  }
  std::mt19937_64 rng(ref.aug_seed);
  Clip clip;
  clip.frames = static_cast<int>(frames.size());
  clip.height = cfg.crop_height;
  clip.width = cfg.crop_width;
  clip.pixels = augment(frames, cfg, rng, training);
  clip.source = ref.tracklet->tracklet_id;
  clip.platform = ref.tracklet->platform;
  clip.identity = ref.tracklet->identity;
  clip.label = ref.label;
  return clip;
}

}  // namespace vsla
