#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support/fixtures.hpp"
#include "vsla/checkpoint.hpp"
#include "vsla/config.hpp"
#include "vsla/errors.hpp"
#include "vsla/optimizer.hpp"
#include "vsla/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace vsla;
namespace fs = std::filesystem;

namespace {

// 16-identity toy at tiny resolution: 8 train identities, P=2, K=2 -> 4 batches per epoch.
struct Toy {
  fx::TempDir dir{"train"};
  DatasetManifest manifest;
  RunConfig cfg;

  Toy() {
    ToyDatasetOptions opts;
    opts.frames_per_tracklet = 4;
    opts.image_height = 32;
    opts.image_width = 16;
    manifest = gen_toy_dataset(opts, dir.path / "data");
    cfg = default_run_config("tiny");
    cfg.sampler.clip_len = 2;
    cfg.sampler.ids_per_batch = 2;
    cfg.sampler.clips_per_id = 2;
    cfg.augmentation.crop_height = 32;
    cfg.augmentation.crop_width = 16;
    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 2;
    cfg.stage2.base_lr = 1e-3;
    cfg.eval.clip_len = 2;
    cfg.validate();
  }

  int n_train() const { return static_cast<int>(manifest.split.train.size()); }
  ParamStore fresh() const { return init_model(cfg.model, n_train(), cfg.seed); }
};

std::map<ParamGroup, std::uint64_t> hashes(const ParamStore& s) {
  std::map<ParamGroup, std::uint64_t> h;
  for (auto g : kAllGroups) h[g] = s.group_hash(g);
  return h;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const auto cfg = default_run_config("clip_vit_b16");
  const auto s2 = cfg.stage2_effective();
  CHECK(learning_rate(s2, 0) == doctest::Approx(1e-4));
  CHECK(learning_rate(s2, 59) == doctest::Approx(1e-4));
  CHECK(learning_rate(s2, 60) == doctest::Approx(1e-5));
  CHECK(learning_rate(s2, 90) == doctest::Approx(1e-6));
  CHECK(learning_rate(cfg.stage1, 0) == doctest::Approx(3.5e-4));
  auto ft = cfg;
  ft.tuning = TuningMode::kFullFinetune;
  CHECK(learning_rate(ft.stage2_effective(), 0) == doctest::Approx(5e-6));
  CHECK(cfg.stage1.epochs == 30);
  CHECK(cfg.stage2.epochs == 120);
}

TEST_CASE("trainability masks") {
  CHECK(trainability_mask(1, EncoderMode::kIfaCfaaPbp, TuningMode::kAdapter) == GroupMask{ParamGroup::kPrompts});
  CHECK(trainability_mask(2, EncoderMode::kIfaCfaaPbp, TuningMode::kAdapter) ==
        GroupMask{ParamGroup::kIfa, ParamGroup::kCfaa, ParamGroup::kPbp, ParamGroup::kHead});
  CHECK(trainability_mask(2, EncoderMode::kIfa, TuningMode::kAdapter) == GroupMask{ParamGroup::kIfa, ParamGroup::kHead});
  CHECK(trainability_mask(2, EncoderMode::kBaseline, TuningMode::kFullFinetune) ==
        GroupMask{ParamGroup::kBackbone, ParamGroup::kHead});
  CHECK_THROWS_AS(trainability_mask(3, EncoderMode::kIfa, TuningMode::kAdapter), ConfigError);
}

TEST_CASE("Adam follows the bias-corrected update") {
  ParamStore s;
  s.add(ParamSpec{"w", ParamGroup::kHead, 1, 2}, (Matrix(1, 2) << 1.0, -2.0).finished());
  AdamConfig ac;
  Adam adam(ac);
  double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {1.0, -2.0};
  for (int t = 1; t <= 3; ++t) {
    const Matrix g = (Matrix(1, 2) << 0.5 * t, -0.25).finished();
    adam.step(s, {{"w", g}}, 0.01);
    for (int i = 0; i < 2; ++i) {
      const double gi = g(0, i) + ac.weight_decay * w[i];
      m[i] = ac.beta1 * m[i] + (1 - ac.beta1) * gi;
      v[i] = ac.beta2 * v[i] + (1 - ac.beta2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(ac.beta1, t)), vh = v[i] / (1 - std::pow(ac.beta2, t));
      w[i] -= 0.01 * mh / (std::sqrt(vh) + ac.eps);
      CHECK(s.at("w").value(0, i) == doctest::Approx(w[i]).epsilon(1e-14));
    }
  }
  CHECK(adam.steps() == 3);
  Adam restored(ac);
  restored.load_state(adam.state(), adam.steps());
  CHECK(restored.state().size() == 2);
  CHECK_THROWS_AS(restored.load_state({{"x/w", Matrix::Zero(1, 2)}}, 1), std::invalid_argument);
}

TEST_CASE("stage one updates the prompt bank only") {
  Toy toy;
  Trainer tr(toy.cfg, toy.manifest, 1, toy.fresh());
  const auto before = hashes(tr.params());
  for (int i = 0; i < 3; ++i) {
    const auto rec = tr.step();
    CHECK(std::isfinite(rec.loss));
    CHECK(rec.terms.count("i2t") == 1);
    CHECK(rec.terms.count("t2i") == 1);
  }
  const auto after = hashes(tr.params());
  for (auto g : kAllGroups) {
    CAPTURE(group_name(g));
    CHECK((before.at(g) != after.at(g)) == (g == ParamGroup::kPrompts));
  }
}

TEST_CASE("stage two trains adapters and head, or the full encoder") {
  Toy toy;
  for (auto tuning : {TuningMode::kAdapter, TuningMode::kFullFinetune}) {
    auto cfg = toy.cfg;
    cfg.tuning = tuning;
    Trainer tr(cfg, toy.manifest, 2, toy.fresh());
    const auto before = hashes(tr.params());
    for (int i = 0; i < 3; ++i) {
      const auto rec = tr.step();
      CHECK(std::isfinite(rec.loss));
      CHECK(rec.terms.size() == 5);
    }
    const auto after = hashes(tr.params());
    CAPTURE(to_string(tuning));
    CHECK((before.at(ParamGroup::kBackbone) != after.at(ParamGroup::kBackbone)) == (tuning == TuningMode::kFullFinetune));
    CHECK(before.at(ParamGroup::kIfa) != after.at(ParamGroup::kIfa));
    CHECK(before.at(ParamGroup::kCfaa) != after.at(ParamGroup::kCfaa));
    CHECK(before.at(ParamGroup::kPbp) != after.at(ParamGroup::kPbp));
    CHECK(before.at(ParamGroup::kHead) != after.at(ParamGroup::kHead));
    CHECK(before.at(ParamGroup::kPrompts) == after.at(ParamGroup::kPrompts));
    CHECK(before.at(ParamGroup::kTextBackbone) == after.at(ParamGroup::kTextBackbone));
  }
}

TEST_CASE("checkpoints round-trip byte for byte") {
  Toy toy;
  Trainer tr(toy.cfg, toy.manifest, 2, toy.fresh());
  tr.step();
  const Checkpoint ck = tr.snapshot();
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(checkpoint_id(back) == checkpoint_id(ck));
  CHECK(checkpoint_id(ck).size() == 16);

  const fs::path file = toy.dir.path / "a.ckpt";
  save_checkpoint(ck, file);
  CHECK(slurp(file) == bytes);
  save_checkpoint(load_checkpoint(file), toy.dir.path / "b.ckpt");
  CHECK(slurp(toy.dir.path / "b.ckpt") == bytes);
  CHECK_THROWS_AS(load_checkpoint(toy.dir.path / "none.ckpt"), IoError);
}

TEST_CASE("damaged checkpoints are rejected") {
  Toy toy;
  Checkpoint ck;
  ck.params = toy.fresh();
  ck.meta["stage"] = 1;
  const std::string bytes = serialize_checkpoint(ck);
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    CAPTURE(cut);
    CHECK_THROWS_AS(parse_checkpoint(std::string_view(bytes).substr(0, cut)), CheckpointError);
  }
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(parse_checkpoint(flipped), CheckpointError);

  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(magic), CheckpointError);

  std::string version = bytes;
  version[8] = static_cast<char>(kCheckpointVersion + 1);
  try {
    parse_checkpoint(version);
    FAIL("expected a version error");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("migrat") != std::string::npos);
  }
}

TEST_CASE("resuming mid-epoch reproduces the next step") {
  Toy toy;
  for (int stage : {1, 2}) {
    CAPTURE(stage);
    Trainer a(toy.cfg, toy.manifest, stage, toy.fresh());
    REQUIRE(a.batches_in_epoch() == 4);
    for (int i = 0; i < 5; ++i) a.step();  // epoch 1, batch 1
    CHECK(a.epoch() == 1);
    CHECK(a.batch_index() == 1);
    const Checkpoint snap = parse_checkpoint(serialize_checkpoint(a.snapshot()));
    Trainer b = Trainer::resume(toy.cfg, toy.manifest, snap);
    CHECK(b.epoch() == 1);
    CHECK(b.batch_index() == 1);
    CHECK(b.global_step() == 5);
    for (int i = 0; i < 2; ++i) {
      const auto ra = a.step(), rb = b.step();
      CHECK(rb.loss == doctest::Approx(ra.loss).epsilon(1e-6));
      CHECK(rb.lr == ra.lr);
    }
    CHECK(a.params() == b.params());
    CHECK(a.history().size() == b.history().size());
  }
}

TEST_CASE("a run finishes after the configured epochs") {
  Toy toy;
  Trainer tr(toy.cfg, toy.manifest, 1, toy.fresh());
  int steps = 0;
  while (!tr.finished()) {
    tr.step();
    ++steps;
  }
  CHECK(steps == 2 * 4);
  CHECK(tr.history().size() == 2);
  CHECK_THROWS(tr.step());
}

TEST_CASE("missing or misshapen parameters are refused") {
  Toy toy;
  ParamStore partial;
  init_vision(partial, toy.cfg.model.vision, 1);
  CHECK_THROWS_AS(Trainer(toy.cfg, toy.manifest, 1, partial), CheckpointError);

  Checkpoint ck;
  ck.params = toy.fresh();
  ck.meta["stage"] = 1;
  auto other = toy.manifest;
  other.split.train.pop_back();
  Trainer tr(toy.cfg, toy.manifest, 1, toy.fresh());
  CHECK_THROWS(Trainer::resume(toy.cfg, other, tr.snapshot()));
}

TEST_CASE("a non-finite loss aborts with a diagnostic dump") {
  Toy toy;
  auto params = toy.fresh();
  params.at("head.weight").value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Trainer tr(toy.cfg, toy.manifest, 2, params);
  tr.set_dump_dir(toy.dir.path / "logs");
  CHECK_THROWS_AS(tr.step(), DivergenceError);
  bool dumped = false;
  for (const auto& e : fs::directory_iterator(toy.dir.path / "logs"))
    dumped = dumped || e.path().filename().string().rfind("nan_dump", 0) == 0;
  CHECK(dumped);
}

TEST_CASE("run config JSON") {
  const auto cfg = default_run_config("tiny");
  const auto j = to_json(cfg);
  const auto back = run_config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());

  nlohmann::json user = {{"model", {{"preset", "tiny"}}}, {"stage2", {{"base_lr", 0.01}}}};
  apply_override(user, "sampler.clip_len=4");
  apply_override(user, "eval.protocol=cross_camera");
  const auto over = run_config_from_json(user);
  CHECK(over.stage2.base_lr == 0.01);
  CHECK(over.sampler.clip_len == 4);
  CHECK(over.eval.protocol == Protocol::kCrossCamera);
  CHECK(over.stage1.base_lr == cfg.stage1.base_lr);

  CHECK_THROWS_AS(run_config_from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"sampler", {{"clip_len", "eight"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"sampler", {{"clips_per_id", 1}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"augmentation", {{"crop_height", 64}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"model", {{"preset", "resnet"}}}}), ConfigError);
  CHECK_THROWS_AS(default_run_config("resnet"), ConfigError);
  nlohmann::json bad;
  CHECK_THROWS_AS(apply_override(bad, "no_equals_sign"), ConfigError);
}

TEST_CASE("run directory records the configuration") {
  Toy toy;
  RunDir dir{toy.dir.path / "run"};
  dir.create(toy.cfg, "vsla train --stage 1");
  std::ifstream in(dir.root / "run_manifest.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("seed") == toy.cfg.seed);
  CHECK(j.at("command") == "vsla train --stage 1");
  CHECK(j.at("run_id").get<std::string>().size() == 12);
  CHECK(fs::exists(dir.root / "config.json"));
  CHECK(fs::is_directory(dir.checkpoints()));
}
