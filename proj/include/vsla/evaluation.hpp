#pragma once

#include "vsla/datamodel.hpp"
#include "vsla/model.hpp"
#include "vsla/sampling.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vsla {

enum class Protocol { kCrossPlatform, kCrossCamera };
std::string_view to_string(Protocol p);
std::optional<Protocol> parse_protocol(std::string_view s);

/// Which platform supplies the queries under the cross-platform protocol.
enum class Direction { kGroundToAerial, kAerialToGround };
std::string_view to_string(Direction d);
std::optional<Direction> parse_direction(std::string_view s);

/// Frame indices of each test-time chunk: consecutive runs of T frames, the
/// last one padded by repeating its final frame.
std::vector<std::vector<int>> chunk_tracklet(int tracklet_len, int clip_len);

/// Mean of the chunk embeddings of a tracklet, L2-normalized.
RowVector extract_tracklet_feature(const DatasetManifest& manifest, const Tracklet& tracklet,
                                   const ParamStore& store, const VisionConfig& cfg, EncoderMode mode,
                                   const AugmentationConfig& aug, int clip_len, FrameCache* cache = nullptr);

struct FeatureRow {
  std::string tracklet_id;
  int identity = 0;
  int camera_id = 0;
  PlatformTag platform = PlatformTag::kGround;
};

/// One row per test tracklet, in manifest order.
struct FeatureBank {
  std::vector<FeatureRow> rows;
  Matrix embeddings;  // rows.size() x projection_dim, unit rows
};

FeatureBank extract_features(const DatasetManifest& manifest, const ParamStore& store, const VisionConfig& cfg,
                             EncoderMode mode, const AugmentationConfig& aug, int clip_len);

/// Query and gallery as indices into the bank rows.
struct ProtocolLists {
  Protocol protocol = Protocol::kCrossPlatform;
  std::vector<int> query;
  std::vector<int> gallery;
  /// Gallery entries with the query's identity and camera are ignored per query.
  bool exclude_same_camera = false;
};

/// Throws ValidationError when the test split cannot support the protocol.
ProtocolLists build_protocol(const DatasetManifest& manifest, Protocol protocol,
                             Direction direction = Direction::kGroundToAerial);

struct QueryResult {
  std::string query_id;
  double ap = 0.0;
  int first_match_rank = 0;  // 1-based
};

struct Metrics {
  Protocol protocol = Protocol::kCrossPlatform;
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[r-1] = fraction of queries matched within the top r
  std::vector<QueryResult> per_query;
  int n_query = 0;
  int n_gallery = 0;
  int excluded_queries = 0;  // queries without any valid gallery match
};

/// Ranking metrics from a query x gallery distance matrix. Gallery items are
/// sorted by ascending distance; ties keep gallery order.
Metrics evaluate_rankings(const Matrix& distance, const std::vector<int>& query_ids,
                          const std::vector<int>& gallery_ids, const std::vector<int>& query_cams,
                          const std::vector<int>& gallery_cams, bool exclude_same_camera, int max_rank,
                          const std::vector<std::string>& query_names = {});

/// Cosine distance (1 - cos) between bank rows, then evaluate_rankings.
Metrics compute_metrics(const FeatureBank& bank, const ProtocolLists& lists, int max_rank = 20);

nlohmann::ordered_json metrics_to_json(const Metrics& m, const std::string& checkpoint_id);

/// Writes metrics.json, per_query.csv and cmc.png under `out_dir`.
void emit_report(const Metrics& m, const std::string& checkpoint_id, const std::filesystem::path& out_dir);

}  // namespace vsla
