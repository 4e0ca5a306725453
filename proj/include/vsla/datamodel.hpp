#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vsla {

enum class PlatformTag { kGround = 0, kAerial = 1 };

std::string_view to_string(PlatformTag p);
std::optional<PlatformTag> parse_platform(std::string_view s);

/// All images of one person from one camera, in capture order.
struct Tracklet {
  std::string tracklet_id;
  int identity = 0;
  int camera_id = 0;
  PlatformTag platform = PlatformTag::kGround;
  std::vector<std::string> frames;  // relative to the manifest directory

  bool operator==(const Tracklet&) const = default;
};

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> test;

  bool operator==(const DatasetSplit&) const = default;
};

struct DatasetManifest {
  std::string name;
  int identities = 0;
  int image_height = 0;
  int image_width = 0;
  DatasetSplit split;
  std::vector<Tracklet> tracklets;
  std::filesystem::path root;  // directory frame paths resolve against; not serialized

  std::filesystem::path frame_path(const Tracklet& t, std::size_t i) const {
    return root / t.frames.at(i);
  }
  std::vector<const Tracklet*> tracklets_of(const std::vector<int>& ids) const;
  std::vector<const Tracklet*> train_tracklets() const { return tracklets_of(split.train); }
  std::vector<const Tracklet*> test_tracklets() const { return tracklets_of(split.test); }

  /// Equality of everything that is serialized (root excluded).
  bool operator==(const DatasetManifest& o) const {
    return name == o.name && identities == o.identities && image_height == o.image_height &&
           image_width == o.image_width && split == o.split && tracklets == o.tracklets;
  }
};

/// Checks the structural invariants: non-empty frames, disjoint splits, split
/// ids present in tracklets, unique tracklet ids. Throws ValidationError.
void validate_manifest(const DatasetManifest& m);

/// Throws ValidationError unless every test identity has at least one GROUND
/// and one AERIAL tracklet.
void require_cross_platform(const DatasetManifest& m);

/// Parses and validates a manifest; `check_frames` also verifies that every
/// frame file exists (pixels are decoded lazily).
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_frames = true);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(std::string_view text);

struct ToyDatasetOptions {
  int n_ids = 16;
  int frames_per_tracklet = 12;
  int image_height = 64;
  int image_width = 32;
  std::uint64_t seed = 1;
  /// Fraction of identities placed in the train split (rest are test).
  double train_fraction = 0.5;
};

/// Writes a procedurally generated dataset (PNG frames + manifest.json) under
/// `out_dir`. Every identity gets one GROUND and one AERIAL tracklet; the
/// identity is encoded by an upper/lower clothing colour pair and a torso
/// pattern, the platform by a global tint.
DatasetManifest gen_toy_dataset(const ToyDatasetOptions& opts, const std::filesystem::path& out_dir);

/// Sorted-order bijection from raw train identity labels to 0..N_train-1.
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(std::vector<int> raw_labels);

  int size() const { return static_cast<int>(raw_.size()); }
  int index_of(int raw) const;
  bool contains(int raw) const { return to_index_.count(raw) != 0; }
  int raw_of(int index) const { return raw_.at(static_cast<std::size_t>(index)); }
  const std::map<int, int>& mapping() const { return to_index_; }

 private:
  std::vector<int> raw_;
  std::map<int, int> to_index_;
};

LabelMap remap_train_labels(const DatasetManifest& m);

}  // namespace vsla
