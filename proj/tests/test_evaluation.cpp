#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support/fixtures.hpp"
#include "vsla/errors.hpp"
#include "vsla/evaluation.hpp"
#include "vsla/image_io.hpp"
#include "vsla/rng.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

using namespace vsla;
namespace fs = std::filesystem;

namespace {

struct OracleResult {
  std::vector<double> ap;  // evaluated queries only
  std::vector<int> first;
  int excluded = 0;
};

// Direct transcription: filter, sort by (distance, gallery index), walk the list.
OracleResult oracle(const Matrix& d, const std::vector<int>& qid, const std::vector<int>& gid,
                    const std::vector<int>& qcam, const std::vector<int>& gcam, bool exclude) {
  OracleResult r;
  for (std::size_t q = 0; q < qid.size(); ++q) {
    std::vector<std::pair<double, std::size_t>> kept;
    for (std::size_t g = 0; g < gid.size(); ++g)
      if (!(exclude && gid[g] == qid[q] && gcam[g] == qcam[q])) kept.emplace_back(d(q, g), g);
    std::sort(kept.begin(), kept.end());
    std::vector<int> relevant_ranks;
    for (std::size_t i = 0; i < kept.size(); ++i)
      if (gid[kept[i].second] == qid[q]) relevant_ranks.push_back(static_cast<int>(i) + 1);
    if (relevant_ranks.empty()) {
      ++r.excluded;
      continue;
    }
    double ap = 0;
    for (std::size_t k = 0; k < relevant_ranks.size(); ++k) ap += (k + 1.0) / relevant_ranks[k];
    r.ap.push_back(ap / static_cast<double>(relevant_ranks.size()));
    r.first.push_back(relevant_ranks[0]);
  }
  return r;
}

void write_gray_frames(const fs::path& dir, int n, int h, int w) {
  for (int i = 0; i < n; ++i) {
    Image img(h, w);
    for (std::size_t k = 0; k < img.rgb.size(); ++k) img.rgb[k] = static_cast<std::uint8_t>((k * (i + 3) * 37) % 251);
    write_png(dir / ("f" + std::to_string(i) + ".png"), img);
  }
}

}  // namespace

TEST_CASE("single-match examples") {
  Matrix d(1, 3);
  d << 0.1, 0.5, 0.9;
  auto m = evaluate_rankings(d, {7}, {7, 1, 2}, {0}, {1, 1, 1}, false, 3);
  CHECK(m.mAP == 1.0);
  CHECK(m.cmc[0] == 1.0);

  Matrix d2(1, 2);
  d2 << 0.1, 0.2;
  m = evaluate_rankings(d2, {7}, {1, 7}, {0}, {1, 1}, false, 20);
  CHECK(m.mAP == 0.5);
  CHECK(m.cmc == std::vector<double>{0.0, 1.0});
  CHECK(m.per_query.at(0).first_match_rank == 2);
}

TEST_CASE("ranking metrics agree with a brute-force oracle") {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto rng = make_rng({s, 0xe7a1});
    const int nq = static_cast<int>(uniform_int(rng, 1, 6));
    const int ng = static_cast<int>(uniform_int(rng, 1, 12));
    const int ids = static_cast<int>(uniform_int(rng, 1, 5));
    const bool exclude = uniform_int(rng, 0, 1) == 1;
    const int max_rank = static_cast<int>(uniform_int(rng, 1, 15));
    std::vector<int> qid, gid, qcam, gcam;
    for (int i = 0; i < nq; ++i) {
      qid.push_back(static_cast<int>(uniform_int(rng, 0, ids - 1)));
      qcam.push_back(static_cast<int>(uniform_int(rng, 0, 2)));
    }
    for (int i = 0; i < ng; ++i) {
      gid.push_back(static_cast<int>(uniform_int(rng, 0, ids - 1)));
      gcam.push_back(static_cast<int>(uniform_int(rng, 0, 2)));
    }
    Matrix d(nq, ng);
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = static_cast<double>(uniform_int(rng, 0, 4)) / 4.0;

    const auto m = evaluate_rankings(d, qid, gid, qcam, gcam, exclude, max_rank);
    const auto o = oracle(d, qid, gid, qcam, gcam, exclude);
    CAPTURE(s);
    REQUIRE(m.per_query.size() == o.ap.size());
    CHECK(m.excluded_queries == o.excluded);
    double mean = 0;
    for (std::size_t i = 0; i < o.ap.size(); ++i) {
      CHECK(m.per_query[i].ap == doctest::Approx(o.ap[i]).epsilon(1e-12));
      CHECK(m.per_query[i].first_match_rank == o.first[i]);
      mean += o.ap[i];
    }
    if (!o.ap.empty()) mean /= static_cast<double>(o.ap.size());
    CHECK(m.mAP == doctest::Approx(mean).epsilon(1e-12));
    const int depth = std::min(max_rank, ng);
    REQUIRE(static_cast<int>(m.cmc.size()) == depth);
    for (int r = 1; r <= depth; ++r) {
      const double expect = o.ap.empty() ? 0.0
                                         : static_cast<double>(std::count_if(o.first.begin(), o.first.end(),
                                                                             [&](int f) { return f <= r; })) /
                                               static_cast<double>(o.ap.size());
      CHECK(m.cmc[r - 1] == doctest::Approx(expect).epsilon(1e-12));
      if (r > 1) CHECK(m.cmc[r - 1] >= m.cmc[r - 2]);
    }
    CHECK(m.mAP >= 0.0);
    CHECK(m.mAP <= 1.0);
  }
}

TEST_CASE("ranking input checks") {
  CHECK_THROWS_AS(evaluate_rankings(Matrix::Zero(1, 2), {0}, {0}, {0}, {0}, false, 5), ValidationError);
  CHECK_THROWS_AS(evaluate_rankings(Matrix::Zero(1, 1), {0}, {0}, {0}, {0}, false, 0), ConfigError);
}

TEST_CASE("chunking matches an enumeration of chunk bounds") {
  for (int T = 1; T <= 8; ++T)
    for (int len = 1; len <= 4 * T + 3; ++len) {
      const auto chunks = chunk_tracklet(len, T);
      const int n = (len + T - 1) / T;
      REQUIRE(static_cast<int>(chunks.size()) == n);
      for (int c = 0; c < n; ++c) {
        REQUIRE(static_cast<int>(chunks[c].size()) == T);
        for (int i = 0; i < T; ++i) CHECK(chunks[c][i] == std::min(c * T + i, len - 1));
      }
    }
  const auto three = chunk_tracklet(2 * 4 + 3, 4);
  CHECK(three.size() == 3);
  CHECK(three[2] == std::vector<int>{8, 9, 10, 10});
}

TEST_CASE("tracklet features pool chunks and normalise") {
  fx::TempDir dir("feat");
  const int T = 4;
  auto cfg = VisionConfig::tiny();
  write_gray_frames(dir.path, T, cfg.vit.image_height, cfg.vit.image_width);
  ParamStore store;
  init_vision(store, cfg, 3);
  fx::randomize(store, "ifa.", 0.05, 4);
  fx::randomize(store, "cfaa.", 0.05, 5);
  DatasetManifest m;
  m.root = dir.path;
  m.image_height = cfg.vit.image_height;
  m.image_width = cfg.vit.image_width;
  Tracklet one{"one", 0, 0, PlatformTag::kGround, {}};
  for (int i = 0; i < T; ++i) one.frames.push_back("f" + std::to_string(i) + ".png");
  Tracklet rep{"rep", 0, 0, PlatformTag::kGround, {}};
  for (int k = 0; k < 3 * T; ++k) rep.frames.push_back(one.frames[static_cast<std::size_t>(k % T)]);
  AugmentationConfig aug;
  aug.crop_height = cfg.vit.image_height;
  aug.crop_width = cfg.vit.image_width;

  const auto mode = EncoderMode::kIfaCfaa;
  const RowVector f1 = extract_tracklet_feature(m, one, store, cfg, mode, aug, T);
  CHECK(f1.norm() == doctest::Approx(1.0));

  Clip clip;
  clip.frames = T;
  clip.height = cfg.vit.image_height;
  clip.width = cfg.vit.image_width;
  std::vector<Image> imgs;
  for (const auto& f : one.frames) imgs.push_back(read_png(dir.path / f));
  auto rng = make_rng({0});
  clip.pixels = augment(imgs, aug, rng, false);
  const RowVector pooled = pool_frames(encode_clip(store, cfg, mode, clip));
  CHECK((f1 - pooled / pooled.norm()).cwiseAbs().maxCoeff() < 1e-10);

  // Chunks of a repeated tracklet are identical sets, so the feature is unchanged.
  const RowVector f3 = extract_tracklet_feature(m, rep, store, cfg, mode, aug, T);
  CHECK((f3 - f1).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("protocol lists") {
  fx::TempDir dir("proto");
  ToyDatasetOptions opts;
  opts.n_ids = 6;
  opts.frames_per_tracklet = 2;
  const auto m = gen_toy_dataset(opts, dir.path);
  const auto test = m.test_tracklets();
  std::map<const Tracklet*, int> index;
  for (std::size_t i = 0; i < test.size(); ++i) index[test[i]] = static_cast<int>(i);

  const auto g2a = build_protocol(m, Protocol::kCrossPlatform, Direction::kGroundToAerial);
  CHECK_FALSE(g2a.exclude_same_camera);
  for (int q : g2a.query) CHECK(test[static_cast<std::size_t>(q)]->platform == PlatformTag::kGround);
  for (int g : g2a.gallery) CHECK(test[static_cast<std::size_t>(g)]->platform == PlatformTag::kAerial);
  CHECK(g2a.query.size() + g2a.gallery.size() == test.size());
  const auto a2g = build_protocol(m, Protocol::kCrossPlatform, Direction::kAerialToGround);
  CHECK(a2g.query == g2a.gallery);

  auto broken = m;
  std::erase_if(broken.tracklets, [&](const Tracklet& t) {
    return t.identity == m.split.test[0] && t.platform == PlatformTag::kAerial;
  });
  CHECK_THROWS_AS(build_protocol(broken, Protocol::kCrossPlatform), ValidationError);

  const auto cc = build_protocol(m, Protocol::kCrossCamera);
  CHECK(cc.exclude_same_camera);
  CHECK(cc.query.size() == test.size());
  CHECK(parse_protocol("cross_camera") == Protocol::kCrossCamera);
  CHECK(parse_direction("aerial_to_ground") == Direction::kAerialToGround);
  CHECK_FALSE(parse_protocol("nope").has_value());
}

TEST_CASE("cross-camera exclusion on a two-camera toy") {
  // Query identity 0 from camera 0; a same-camera copy of itself would otherwise rank first.
  FeatureBank bank;
  bank.rows = {{"q", 0, 0, PlatformTag::kGround},
               {"same_cam", 0, 0, PlatformTag::kGround},
               {"other", 1, 1, PlatformTag::kAerial},
               {"cross_cam", 0, 1, PlatformTag::kAerial}};
  bank.embeddings.resize(4, 2);
  bank.embeddings << 1, 0, 1, 0, 0.8, 0.6, 0.6, 0.8;
  ProtocolLists lists;
  lists.protocol = Protocol::kCrossCamera;
  lists.query = {0};
  lists.gallery = {1, 2, 3};
  lists.exclude_same_camera = true;
  auto m = compute_metrics(bank, lists);
  REQUIRE(m.per_query.size() == 1);
  CHECK(m.per_query[0].first_match_rank == 2);
  CHECK(m.mAP == doctest::Approx(0.5));
  lists.exclude_same_camera = false;
  m = compute_metrics(bank, lists);
  CHECK(m.per_query[0].first_match_rank == 1);

  lists.exclude_same_camera = true;
  lists.gallery = {1, 2};
  m = compute_metrics(bank, lists);
  CHECK(m.excluded_queries == 1);
  CHECK(m.per_query.empty());
}

TEST_CASE("report files") {
  fx::TempDir dir("report");
  Matrix d(2, 3);
  d << 0.1, 0.2, 0.3, 0.3, 0.1, 0.2;
  const auto m = evaluate_rankings(d, {1, 2}, {1, 2, 2}, {0, 0}, {1, 1, 1}, false, 20, {"qa", "qb"});
  emit_report(m, "abcdef0123456789", dir.path);
  for (const char* f : {"metrics.json", "per_query.csv", "cmc.png"}) CHECK(fs::exists(dir.path / f));
  std::ifstream in(dir.path / "metrics.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("mAP").get<double>() == m.mAP);
  CHECK(j.at("checkpoint_id") == "abcdef0123456789");
  CHECK(j.at("cmc").size() == m.cmc.size());
  std::ifstream csv(dir.path / "per_query.csv");
  std::string header, line;
  std::getline(csv, header);
  CHECK(header == "query_id,ap,first_match_rank");
  std::getline(csv, line);
  CHECK(line.rfind("qa,1,1", 0) == 0);
  const Image png = read_png(dir.path / "cmc.png");
  CHECK(png.width > 0);

  fx::TempDir again("report2");
  emit_report(m, "abcdef0123456789", again.path);
  for (const char* f : {"metrics.json", "per_query.csv", "cmc.png"}) {
    std::ifstream a(dir.path / f, std::ios::binary), b(again.path / f, std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }
}
