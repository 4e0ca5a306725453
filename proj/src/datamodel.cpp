#include "vsla/datamodel.hpp"

#include "vsla/errors.hpp"
#include "vsla/image_io.hpp"
#include "vsla/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace vsla {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(PlatformTag p) {
  return p == PlatformTag::kGround ? "GROUND" : "AERIAL";
}

std::optional<PlatformTag> parse_platform(std::string_view s) {
  if (s == "GROUND") return PlatformTag::kGround;
  if (s == "AERIAL") return PlatformTag::kAerial;
  return std::nullopt;
}

std::vector<const Tracklet*> DatasetManifest::tracklets_of(const std::vector<int>& ids) const {
  const std::set<int> wanted(ids.begin(), ids.end());
  std::vector<const Tracklet*> out;
  for (const auto& t : tracklets)
    if (wanted.count(t.identity)) out.push_back(&t);
  return out;
}

void validate_manifest(const DatasetManifest& m) {
  if (m.image_height <= 0 || m.image_width <= 0)
    throw ValidationError("manifest '" + m.name + "': image_size must be positive");
  std::set<std::string> ids_seen;
  std::set<int> labels;
  for (const auto& t : m.tracklets) {
    if (t.frames.empty())
      throw ValidationError("tracklet '" + t.tracklet_id + "' has no frames");
    if (!ids_seen.insert(t.tracklet_id).second)
      throw ValidationError("duplicate tracklet_id '" + t.tracklet_id + "'");
    if (t.identity < 0) throw ValidationError("tracklet '" + t.tracklet_id + "' has negative identity");
    labels.insert(t.identity);
  }
  const std::set<int> train(m.split.train.begin(), m.split.train.end());
  const std::set<int> test(m.split.test.begin(), m.split.test.end());
  if (train.size() != m.split.train.size() || test.size() != m.split.test.size())
    throw ValidationError("split lists contain duplicate identities");
  for (int id : train) {
    if (test.count(id))
      throw ValidationError("identity " + std::to_string(id) + " appears in both train and test splits");
    if (!labels.count(id))
      throw ValidationError("train identity " + std::to_string(id) + " has no tracklets");
  }
  for (int id : test)
    if (!labels.count(id))
      throw ValidationError("test identity " + std::to_string(id) + " has no tracklets");
  if (m.identities < static_cast<int>(labels.size()))
    throw ValidationError("manifest declares " + std::to_string(m.identities) +
                          " identities but tracklets reference " + std::to_string(labels.size()));
}

void require_cross_platform(const DatasetManifest& m) {
  std::map<int, std::array<bool, 2>> seen;
  for (const auto* t : m.test_tracklets()) seen[t->identity][static_cast<int>(t->platform)] = true;
  for (int id : m.split.test) {
    const auto& s = seen[id];
    if (!s[0] || !s[1])
      throw ValidationError("test identity " + std::to_string(id) +
                            " lacks a " + (s[0] ? "AERIAL" : "GROUND") +
                            " tracklet required by the cross-platform protocol");
  }
}

namespace {

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw ValidationError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": field '" + key + "' has the wrong type (" + e.what() + ")");
  }
}

}  // namespace

DatasetManifest manifest_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.name = field<std::string>(j, "name", "manifest");
  m.identities = field<int>(j, "identities", "manifest");
  const auto size = field<std::vector<int>>(j, "image_size", "manifest");
  if (size.size() != 2) throw ValidationError("manifest: image_size must be [H, W]");
  m.image_height = size[0];
  m.image_width = size[1];
  const json splits = field<json>(j, "splits", "manifest");
  m.split.train = field<std::vector<int>>(splits, "train", "manifest.splits");
  m.split.test = field<std::vector<int>>(splits, "test", "manifest.splits");
  const json tracklets = field<json>(j, "tracklets", "manifest");
  if (!tracklets.is_array()) throw ValidationError("manifest: 'tracklets' must be an array");
  for (std::size_t i = 0; i < tracklets.size(); ++i) {
    const json& r = tracklets[i];
    std::string where = "tracklets[" + std::to_string(i) + "]";
    Tracklet t;
    t.tracklet_id = field<std::string>(r, "tracklet_id", where);
    where += " ('" + t.tracklet_id + "')";
    t.identity = field<int>(r, "identity", where);
    t.camera_id = field<int>(r, "camera_id", where);
    const auto platform = field<std::string>(r, "platform", where);
    auto p = parse_platform(platform);
    if (!p) throw ValidationError(where + ": platform must be \"GROUND\" or \"AERIAL\", got \"" + platform + "\"");
    t.platform = *p;
    t.frames = field<std::vector<std::string>>(r, "frames", where);
    m.tracklets.push_back(std::move(t));
  }
  validate_manifest(m);
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["name"] = m.name;
  j["image_size"] = {m.image_height, m.image_width};
  j["identities"] = m.identities;
  j["splits"] = {{"train", m.split.train}, {"test", m.split.test}};
  json arr = json::array();
  for (const auto& t : m.tracklets) {
    arr.push_back({{"tracklet_id", t.tracklet_id},
                   {"identity", t.identity},
                   {"camera_id", t.camera_id},
                   {"platform", std::string(to_string(t.platform))},
                   {"frames", t.frames}});
  }
  j["tracklets"] = std::move(arr);
  return j.dump(2) + "\n";
}

DatasetManifest load_manifest(const fs::path& path, bool check_frames) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  DatasetManifest m = manifest_from_json(buf.str());
  m.root = path.parent_path();
  if (check_frames) {
    for (const auto& t : m.tracklets)
      for (std::size_t i = 0; i < t.frames.size(); ++i)
        if (!fs::exists(m.frame_path(t, i)))
          throw ValidationError("tracklet '" + t.tracklet_id + "': frame '" + t.frames[i] +
                                "' does not exist");
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << manifest_to_json(m);
  if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Signature {
  Rgb upper, lower;
  int pattern;  // 0 plain, 1 horizontal band, 2 vertical band, 3 checker
};

std::uint8_t clamp8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

Image render_frame(const Signature& sig, PlatformTag platform, int h, int w,
                   std::mt19937_64& rng) {
  Image img(h, w);
  const int dx = static_cast<int>(uniform_int(rng, -w / 16, w / 16));
  const int dy = static_cast<int>(uniform_int(rng, -h / 32, h / 32));
  // Aerial views are foreshortened: the figure is shorter.
  const double vscale = platform == PlatformTag::kAerial ? 0.85 : 1.0;
  const double top = 0.06 * h + dy;
  const double head_end = top + 0.14 * h * vscale;
  const double upper_end = head_end + 0.34 * h * vscale;
  const double lower_end = upper_end + 0.38 * h * vscale;
  const double left = 0.22 * w + dx, right = 0.78 * w + dx;
  const double cx = 0.5 * w + dx, head_r = 0.16 * w;
  const Rgb skin{0.80, 0.63, 0.51};
  const std::array<double, 3> tint = platform == PlatformTag::kAerial
                                         ? std::array<double, 3>{0.92, 0.96, 1.05}
                                         : std::array<double, 3>{1.0, 1.0, 1.0};
  const double lift = platform == PlatformTag::kAerial ? 6.0 : 0.0;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Rgb c{0.43 + 0.08 * y / h, 0.43 + 0.08 * y / h, 0.42 + 0.08 * y / h};
      const double hy = (top + head_end) / 2.0;
      const bool in_body = x >= left && x < right;
      if ((x - cx) * (x - cx) + (y - hy) * (y - hy) <= head_r * head_r) {
        c = skin;
      } else if (in_body && y >= head_end && y < upper_end) {
        c = sig.upper;
        const double u = (y - head_end) / (upper_end - head_end);
        const double v = (x - left) / (right - left);
        bool mark = false;
        if (sig.pattern == 1) mark = u > 0.4 && u < 0.65;
        if (sig.pattern == 2) mark = v > 0.4 && v < 0.6;
        if (sig.pattern == 3) mark = (static_cast<int>(u * 4) + static_cast<int>(v * 4)) % 2 == 0;
        if (mark) c = {1.0 - 0.7 * c.r, 1.0 - 0.7 * c.g, 1.0 - 0.7 * c.b};
      } else if (x >= left + 0.05 * w && x < right - 0.05 * w && y >= upper_end && y < lower_end) {
        c = sig.lower;
      }
      const double noise = static_cast<double>(uniform_int(rng, -6, 6));
      img.at(y, x, 0) = clamp8(255.0 * c.r * tint[0] + noise);
      img.at(y, x, 1) = clamp8(255.0 * c.g * tint[1] + noise);
      img.at(y, x, 2) = clamp8(255.0 * c.b * tint[2] + noise + lift);
    }
  }
  return img;
}

std::vector<int> seeded_permutation(int n, std::mt19937_64& rng) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_int(rng, 0, i)]);
  return p;
}

}  // namespace

DatasetManifest gen_toy_dataset(const ToyDatasetOptions& opts, const fs::path& out_dir) {
  if (opts.n_ids < 2)
    throw ConfigError("gen_toy_dataset: at least 2 identities are required for triplet mining");
  if (opts.frames_per_tracklet < 1)
    throw ConfigError("gen_toy_dataset: frames_per_tracklet must be >= 1");
  if (opts.image_height < 8 || opts.image_width < 8)
    throw ConfigError("gen_toy_dataset: image_size must be at least 8x8");
  if (opts.train_fraction <= 0.0 || opts.train_fraction >= 1.0)
    throw ConfigError("gen_toy_dataset: train_fraction must lie in (0, 1)");

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create '" + (out_dir / "images").string() + "': " + ec.message());

  auto palette_rng = make_rng({opts.seed, 0x70616c});
  const auto upper_perm = seeded_permutation(opts.n_ids, palette_rng);
  const auto lower_perm = seeded_permutation(opts.n_ids, palette_rng);
  const auto pattern_perm = seeded_permutation(opts.n_ids, palette_rng);
  const double lower_offset = uniform01(palette_rng);

  DatasetManifest m;
  m.name = "toy-s" + std::to_string(opts.seed);
  m.identities = opts.n_ids;
  m.image_height = opts.image_height;
  m.image_width = opts.image_width;
  m.root = out_dir;
  const int n_train = std::clamp(static_cast<int>(std::lround(opts.n_ids * opts.train_fraction)), 1,
                                 opts.n_ids - 1);
  for (int id = 0; id < opts.n_ids; ++id) (id < n_train ? m.split.train : m.split.test).push_back(id);

  for (int id = 0; id < opts.n_ids; ++id) {
    Signature sig;
    sig.upper = hsv((upper_perm[id] + 0.5) / opts.n_ids, 0.8, 0.9);
    sig.lower = hsv(lower_offset + (lower_perm[id] + 0.5) / opts.n_ids, 0.65, 0.55 + 0.3 * ((id % 3) / 2.0));
    sig.pattern = pattern_perm[id] % 4;
    for (PlatformTag p : {PlatformTag::kGround, PlatformTag::kAerial}) {
      Tracklet t;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "id%04d_%c", id, p == PlatformTag::kGround ? 'G' : 'A');
      t.tracklet_id = buf;
      t.identity = id;
      t.camera_id = static_cast<int>(p);
      t.platform = p;
      const fs::path dir = out_dir / "images" / t.tracklet_id;
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
      for (int f = 0; f < opts.frames_per_tracklet; ++f) {
        auto rng = make_rng({opts.seed, static_cast<std::uint64_t>(id),
                             static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(f)});
        const Image img = render_frame(sig, p, opts.image_height, opts.image_width, rng);
        std::snprintf(buf, sizeof(buf), "%04d.png", f);
        const std::string rel = "images/" + t.tracklet_id + "/" + buf;
        write_png(out_dir / rel, img);
        t.frames.push_back(rel);
      }
      m.tracklets.push_back(std::move(t));
    }
  }
  validate_manifest(m);
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

LabelMap::LabelMap(std::vector<int> raw_labels) : raw_(std::move(raw_labels)) {
  std::sort(raw_.begin(), raw_.end());
  raw_.erase(std::unique(raw_.begin(), raw_.end()), raw_.end());
  for (std::size_t i = 0; i < raw_.size(); ++i) to_index_[raw_[i]] = static_cast<int>(i);
}

int LabelMap::index_of(int raw) const {
  auto it = to_index_.find(raw);
  if (it == to_index_.end())
    throw std::out_of_range("identity " + std::to_string(raw) + " is not a train label");
  return it->second;
}

LabelMap remap_train_labels(const DatasetManifest& m) {
  if (m.split.train.empty()) throw ConfigError("remap_train_labels: train split is empty");
  return LabelMap(m.split.train);
}

}  // namespace vsla
