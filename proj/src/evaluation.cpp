#include "vsla/evaluation.hpp"

#include "vsla/errors.hpp"
#include "vsla/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace vsla {

std::string_view to_string(Protocol p) { return p == Protocol::kCrossPlatform ? "cross_platform" : "cross_camera"; }

std::optional<Protocol> parse_protocol(std::string_view s) {
  if (s == "cross_platform") return Protocol::kCrossPlatform;
  if (s == "cross_camera") return Protocol::kCrossCamera;
  return std::nullopt;
}

std::string_view to_string(Direction d) {
  return d == Direction::kGroundToAerial ? "ground_to_aerial" : "aerial_to_ground";
}

std::optional<Direction> parse_direction(std::string_view s) {
  if (s == "ground_to_aerial") return Direction::kGroundToAerial;
  if (s == "aerial_to_ground") return Direction::kAerialToGround;
  return std::nullopt;
}

std::vector<std::vector<int>> chunk_tracklet(int tracklet_len, int clip_len) {
  if (tracklet_len < 1) throw ValidationError("cannot chunk an empty tracklet");
  if (clip_len < 1) throw ConfigError("clip length must be at least 1");
  std::vector<std::vector<int>> chunks;
  for (int start = 0; start < tracklet_len; start += clip_len) {
    std::vector<int> c;
    for (int i = 0; i < clip_len; ++i) c.push_back(std::min(start + i, tracklet_len - 1));
    chunks.push_back(std::move(c));
  }
  return chunks;
}

RowVector extract_tracklet_feature(const DatasetManifest& manifest, const Tracklet& tracklet,
                                   const ParamStore& store, const VisionConfig& cfg, EncoderMode mode,
                                   const AugmentationConfig& aug, int clip_len, FrameCache* cache) {
  if (tracklet.frames.empty()) throw ValidationError("tracklet '" + tracklet.tracklet_id + "' has no frames");
  std::vector<Clip> clips;
  for (auto& idx : chunk_tracklet(static_cast<int>(tracklet.frames.size()), clip_len)) {
    ClipRef ref{&tracklet, -1, std::move(idx), 0};
    clips.push_back(materialize_clip(manifest, ref, aug, false, cache));
  }
  std::vector<const Clip*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);
  Tape tape(false);
  TapeBinding bind(tape, store, GroupMask{});
  const Matrix pooled = tape.value(encode_clips(bind, cfg, mode, ptrs).pooled);
  RowVector f = pooled.colwise().mean();
  const double n = f.norm();
  if (n > 0) f /= n;
  return f;
}

FeatureBank extract_features(const DatasetManifest& manifest, const ParamStore& store, const VisionConfig& cfg,
                             EncoderMode mode, const AugmentationConfig& aug, int clip_len) {
  FeatureBank bank;
  const auto tracks = manifest.test_tracklets();
  bank.embeddings.resize(static_cast<Eigen::Index>(tracks.size()), cfg.vit.projection_dim);
  FrameCache cache;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const Tracklet& t = *tracks[i];
    bank.rows.push_back(FeatureRow{t.tracklet_id, t.identity, t.camera_id, t.platform});
    bank.embeddings.row(static_cast<Eigen::Index>(i)) =
        extract_tracklet_feature(manifest, t, store, cfg, mode, aug, clip_len, &cache);
  }
  return bank;
}

ProtocolLists build_protocol(const DatasetManifest& manifest, Protocol protocol, Direction direction) {
  ProtocolLists lists;
  lists.protocol = protocol;
  const auto tracks = manifest.test_tracklets();
  if (tracks.empty()) throw ValidationError("test split has no tracklets");
  if (protocol == Protocol::kCrossCamera) {
    lists.exclude_same_camera = true;
    for (int i = 0; i < static_cast<int>(tracks.size()); ++i) {
      lists.query.push_back(i);
      lists.gallery.push_back(i);
    }
    return lists;
  }
  require_cross_platform(manifest);
  const PlatformTag q = direction == Direction::kGroundToAerial ? PlatformTag::kGround : PlatformTag::kAerial;
  for (int i = 0; i < static_cast<int>(tracks.size()); ++i)
    (tracks[static_cast<std::size_t>(i)]->platform == q ? lists.query : lists.gallery).push_back(i);
  return lists;
}

Metrics evaluate_rankings(const Matrix& distance, const std::vector<int>& query_ids,
                          const std::vector<int>& gallery_ids, const std::vector<int>& query_cams,
                          const std::vector<int>& gallery_cams, bool exclude_same_camera, int max_rank,
                          const std::vector<std::string>& query_names) {
  const int nq = static_cast<int>(query_ids.size());
  const int ng = static_cast<int>(gallery_ids.size());
  if (distance.rows() != nq || distance.cols() != ng || static_cast<int>(query_cams.size()) != nq ||
      static_cast<int>(gallery_cams.size()) != ng)
    throw ValidationError("evaluate_rankings: inconsistent query/gallery sizes");
  if (max_rank < 1) throw ConfigError("max_rank must be at least 1");

  Metrics m;
  m.n_query = nq;
  m.n_gallery = ng;
  const int depth = std::min(max_rank, std::max(ng, 1));
  std::vector<int> hits_at(static_cast<std::size_t>(depth), 0);
  double ap_sum = 0.0;
  int evaluated = 0;

  std::vector<int> order(static_cast<std::size_t>(ng));
  for (int q = 0; q < nq; ++q) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return distance(q, a) < distance(q, b); });
    int rank = 0;
    int hits = 0;
    int first = 0;
    double precision_sum = 0.0;
    for (int g : order) {
      const bool same_id = gallery_ids[static_cast<std::size_t>(g)] == query_ids[static_cast<std::size_t>(q)];
      if (exclude_same_camera && same_id &&
          gallery_cams[static_cast<std::size_t>(g)] == query_cams[static_cast<std::size_t>(q)])
        continue;
      ++rank;
      if (!same_id) continue;
      ++hits;
      if (first == 0) first = rank;
      precision_sum += static_cast<double>(hits) / rank;
    }
    if (hits == 0) {
      ++m.excluded_queries;
      continue;
    }
    ++evaluated;
    const double ap = precision_sum / hits;
    ap_sum += ap;
    if (first <= depth) ++hits_at[static_cast<std::size_t>(first - 1)];
    std::string name = q < static_cast<int>(query_names.size()) ? query_names[static_cast<std::size_t>(q)]
                                                                 : std::to_string(q);
    m.per_query.push_back(QueryResult{std::move(name), ap, first});
  }
  m.cmc.assign(static_cast<std::size_t>(depth), 0.0);
  if (evaluated > 0) {
    int cum = 0;
    for (int r = 0; r < depth; ++r) {
      cum += hits_at[static_cast<std::size_t>(r)];
      m.cmc[static_cast<std::size_t>(r)] = static_cast<double>(cum) / evaluated;
    }
    m.mAP = ap_sum / evaluated;
  }
  return m;
}

Metrics compute_metrics(const FeatureBank& bank, const ProtocolLists& lists, int max_rank) {
  auto pick = [&](const std::vector<int>& idx) {
    Matrix e(static_cast<Eigen::Index>(idx.size()), bank.embeddings.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      RowVector r = bank.embeddings.row(idx[i]);
      const double n = r.norm();
      e.row(static_cast<Eigen::Index>(i)) = n > 0 ? RowVector(r / n) : r;
    }
    return e;
  };
  const Matrix q = pick(lists.query);
  const Matrix g = pick(lists.gallery);
  const Matrix dist = Matrix::Ones(q.rows(), g.rows()) - q * g.transpose();
  std::vector<int> qid, gid, qcam, gcam;
  std::vector<std::string> names;
  for (int i : lists.query) {
    const auto& r = bank.rows.at(static_cast<std::size_t>(i));
    qid.push_back(r.identity);
    qcam.push_back(r.camera_id);
    names.push_back(r.tracklet_id);
  }
  for (int i : lists.gallery) {
    const auto& r = bank.rows.at(static_cast<std::size_t>(i));
    gid.push_back(r.identity);
    gcam.push_back(r.camera_id);
  }
  Metrics m = evaluate_rankings(dist, qid, gid, qcam, gcam, lists.exclude_same_camera, max_rank, names);
  m.protocol = lists.protocol;
  return m;
}

nlohmann::ordered_json metrics_to_json(const Metrics& m, const std::string& checkpoint_id) {
  nlohmann::ordered_json j;
  j["protocol"] = to_string(m.protocol);
  j["mAP"] = m.mAP;
  j["cmc"] = m.cmc;
  j["n_query"] = m.n_query;
  j["n_gallery"] = m.n_gallery;
  j["excluded_queries"] = m.excluded_queries;
  j["checkpoint_id"] = checkpoint_id;
  return j;
}

namespace {

void draw_line(Image& img, int x0, int y0, int x1, int y1, std::array<unsigned char, 3> c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (x0 >= 0 && y0 >= 0 && x0 < img.width && y0 < img.height)
      for (int k = 0; k < 3; ++k) img.at(y0, x0, k) = c[static_cast<std::size_t>(k)];
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

// CMC curve on a white canvas: axes, 10% grid lines, one marker per rank.
Image plot_cmc(const std::vector<double>& cmc) {
  constexpr int W = 400, H = 300, L = 40, R = 380, T = 20, B = 270;
  Image img;
  img.height = H;
  img.width = W;
  img.rgb.assign(static_cast<std::size_t>(W * H * 3), 255);
  auto py = [&](double v) { return B - static_cast<int>(std::lround(v * (B - T))); };
  for (int k = 1; k <= 10; ++k) draw_line(img, L, py(k / 10.0), R, py(k / 10.0), {225, 225, 225});
  draw_line(img, L, B, R, B, {0, 0, 0});
  draw_line(img, L, T, L, B, {0, 0, 0});
  const int n = static_cast<int>(cmc.size());
  auto px = [&](int r) { return n <= 1 ? (L + R) / 2 : L + (R - L) * r / (n - 1); };
  for (int r = 0; r < n; ++r) {
    const int x = px(r), y = py(cmc[static_cast<std::size_t>(r)]);
    if (r > 0) draw_line(img, px(r - 1), py(cmc[static_cast<std::size_t>(r - 1)]), x, y, {31, 119, 180});
    for (int d = -2; d <= 2; ++d) draw_line(img, x - 2, y + d, x + 2, y + d, {214, 39, 40});
  }
  return img;
}

}  // namespace

void emit_report(const Metrics& m, const std::string& checkpoint_id, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());
  {
    std::ofstream out(out_dir / "metrics.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (out_dir / "metrics.json").string());
    out << metrics_to_json(m, checkpoint_id).dump(2) << "\n";
  }
  {
    std::ofstream out(out_dir / "per_query.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (out_dir / "per_query.csv").string());
    out << "query_id,ap,first_match_rank\n";
    char buf[64];
    for (const auto& q : m.per_query) {
      std::snprintf(buf, sizeof(buf), "%.17g", q.ap);
      out << q.query_id << "," << buf << "," << q.first_match_rank << "\n";
    }
  }
  write_png(out_dir / "cmc.png", plot_cmc(m.cmc));
}

}  // namespace vsla
