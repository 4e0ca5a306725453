#include "vsla/training.hpp"

#include "vsla/errors.hpp"
#include "vsla/evaluation.hpp"
#include "vsla/losses.hpp"
#include "vsla/model.hpp"
#include "vsla/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace vsla {

using nlohmann::json;

namespace {

std::vector<int> distinct(const std::vector<int>& labels) {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::map<ParamGroup, std::uint64_t> frozen_hashes(const ParamStore& p, const GroupMask& mask) {
  std::map<ParamGroup, std::uint64_t> h;
  for (auto g : kAllGroups)
    if (!mask.contains(g)) h[g] = p.group_hash(g);
  return h;
}

json terms_json(const std::map<std::string, double>& terms) {
  json j = json::object();
  for (const auto& [k, v] : terms) j[k] = v;
  return j;
}

std::vector<int> raw_train_labels(const LabelMap& labels) {
  std::vector<int> raw;
  for (int i = 0; i < labels.size(); ++i) raw.push_back(labels.raw_of(i));
  return raw;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, const DatasetManifest& manifest, int stage, ParamStore params)
    : cfg_(std::move(cfg)),
      manifest_(&manifest),
      stage_(stage),
      params_(std::move(params)),
      labels_(remap_train_labels(manifest)) {
  cfg_.validate();
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  stage_cfg_ = stage == 1 ? cfg_.stage1 : cfg_.stage2_effective();
  adam_ = Adam(stage_cfg_.optimizer);
  mask_ = trainability_mask(stage, cfg_.mode, cfg_.tuning);
  const int n_train = labels_.size();
  for (const auto& spec : model_layout(cfg_.model, n_train)) {
    if (!params_.has(spec.name))
      throw CheckpointError("parameter '" + spec.name + "' is missing for this configuration");
    const auto& p = params_.at(spec.name);
    if (p.value.rows() != spec.rows || p.value.cols() != spec.cols)
      throw CheckpointError("parameter '" + spec.name + "' has shape " + std::to_string(p.value.rows()) + "x" +
                            std::to_string(p.value.cols()) + ", expected " + std::to_string(spec.rows) + "x" +
                            std::to_string(spec.cols) + " (identity count or geometry mismatch)");
  }
  if (labels_.size() < 2) throw ValidationError("training needs at least two train identities");
  if (stage_ == 2) gallery_ = build_text_gallery(params_, cfg_.model.text, n_train);
}

int Trainer::batches_in_epoch() const { return batches_per_epoch(labels_, cfg_.sampler); }

void Trainer::ensure_batches() {
  if (batches_epoch_ == epoch_) return;
  batches_ = pk_batches(*manifest_, labels_, cfg_.sampler, derive_seed({stage_cfg_.seed, static_cast<std::uint64_t>(stage_)}),
                        epoch_);
  batches_epoch_ = epoch_;
}

StepRecord Trainer::step() {
  if (finished()) throw Error("stage " + std::to_string(stage_) + " has already finished");
  ensure_batches();
  const Batch& batch = batches_.at(static_cast<std::size_t>(batch_));
  const double lr = learning_rate(stage_cfg_, epoch_);
  const auto before = frozen_hashes(params_, mask_);
  StepRecord rec = stage_ == 1 ? stage1_step(batch, lr) : stage2_step(batch, lr);
  if (frozen_hashes(params_, mask_) != before) throw Error("a frozen parameter group changed during a step");

  accum_loss_ += rec.loss;
  for (const auto& [k, v] : rec.terms) accum_terms_[k] += v;
  ++accum_count_;
  if (++batch_ == static_cast<int>(batches_.size())) {
    EpochSummary s;
    s.epoch = epoch_;
    s.loss = accum_loss_ / accum_count_;
    for (const auto& [k, v] : accum_terms_) s.terms[k] = v / accum_count_;
    history_.push_back(std::move(s));
    accum_loss_ = 0.0;
    accum_terms_.clear();
    accum_count_ = 0;
    batch_ = 0;
    ++epoch_;
  }
  return rec;
}

StepRecord Trainer::stage1_step(const Batch& batch, double lr) {
  std::vector<Clip> clips;
  std::vector<int> labels;
  for (const auto& ref : batch.clips) {
    ClipRef r = ref;
    if (!cfg_.stage1_pooled) r.frame_indices = {ref.frame_indices.front()};
    clips.push_back(materialize_clip(*manifest_, r, cfg_.augmentation, cfg_.stage1_augment, cache_.get()));
    labels.push_back(ref.label);
  }
  std::vector<const Clip*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);

  Tape frozen(false);
  TapeBinding vb(frozen, params_, GroupMask{});
  const Matrix visual = frozen.value(encode_clips(vb, cfg_.model.vision, cfg_.mode, ptrs).pooled);

  const std::vector<int> ids = distinct(labels);
  Tape tape;
  TapeBinding tb(tape, params_, mask_);
  const Var text = encode_identities(tb, cfg_.model.text, ids, labels_.size());
  const Matrix& text_rows = tape.value(text);
  const auto i2t = loss_i2t(visual, labels, text_rows, ids, cfg_.model.similarity);
  const auto t2i = loss_t2i(visual, labels, text_rows, ids, cfg_.model.similarity);
  StepRecord rec;
  rec.stage = 1;
  rec.epoch = epoch_;
  rec.batch = batch_;
  rec.lr = lr;
  rec.loss = i2t.value + t2i.value;
  rec.terms = {{"i2t", i2t.value}, {"t2i", t2i.value}};
  if (!std::isfinite(rec.loss)) diverged(batch, rec.terms);

  const Var loss = ops::external_loss(tape, {text}, rec.loss, {i2t.d_text + t2i.d_text});
  tape.backward(loss);
  adam_.step(params_, tb.gradients(), lr);
  rec.step = adam_.steps();
  return rec;
}

StepRecord Trainer::stage2_step(const Batch& batch, double lr) {
  std::vector<Clip> clips;
  std::vector<int> labels;
  for (const auto& ref : batch.clips) {
    clips.push_back(materialize_clip(*manifest_, ref, cfg_.augmentation, true, cache_.get()));
    labels.push_back(ref.label);
  }
  std::vector<const Clip*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);

  Tape tape;
  TapeBinding bind(tape, params_, mask_);
  const VisionForward vf = encode_clips(bind, cfg_.model.vision, cfg_.mode, ptrs);
  const Var logits = classifier_logits(bind, vf.pooled);
  const Stage2Loss l =
      loss_stage2(tape.value(vf.pooled), tape.value(logits), labels, gallery_, cfg_.model.similarity, cfg_.loss);
  StepRecord rec;
  rec.stage = 2;
  rec.epoch = epoch_;
  rec.batch = batch_;
  rec.lr = lr;
  rec.loss = l.total;
  rec.terms = {{"v2sce", l.terms.v2sce}, {"triplet", l.terms.triplet}, {"id", l.terms.id},
               {"i2t", l.terms.i2t},     {"t2i", l.terms.t2i}};
  if (!std::isfinite(rec.loss)) diverged(batch, rec.terms);

  const Var loss = ops::external_loss(tape, {vf.pooled, logits}, l.total, {l.d_visual, l.d_logits});
  tape.backward(loss);
  adam_.step(params_, bind.gradients(), lr);
  rec.step = adam_.steps();
  return rec;
}

void Trainer::diverged(const Batch& batch, const std::map<std::string, double>& terms) {
  json dump = {{"stage", stage_}, {"epoch", epoch_}, {"batch", batch_}, {"terms", json::object()}};
  for (const auto& [k, v] : terms) dump["terms"][k] = std::isfinite(v) ? json(v) : json(std::to_string(v));
  for (const auto& c : batch.clips)
    dump["clips"].push_back({{"tracklet", c.tracklet->tracklet_id},
                             {"label", c.label},
                             {"frames", c.frame_indices},
                             {"aug_seed", c.aug_seed}});
  std::string where;
  if (!dump_dir_.empty()) {
    std::filesystem::create_directories(dump_dir_);
    const auto path = dump_dir_ / ("nan_dump_stage" + std::to_string(stage_) + ".json");
    std::ofstream(path) << dump.dump(2) << "\n";
    where = "; batch dumped to " + path.string();
  }
  throw DivergenceError("non-finite loss at stage " + std::to_string(stage_) + " epoch " + std::to_string(epoch_) +
                        " batch " + std::to_string(batch_) + where);
}

void Trainer::record_validation(double map) {
  if (history_.empty()) throw Error("record_validation: no completed epoch");
  history_.back().val_map = map;
  if (!best_map_ || map > *best_map_) {
    best_map_ = map;
    best_epoch_ = history_.back().epoch;
  }
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c;
  c.params = params_;
  c.optimizer = adam_.state();
  json history = json::array();
  for (const auto& h : history_) {
    json e = {{"epoch", h.epoch}, {"loss", h.loss}, {"terms", terms_json(h.terms)}};
    if (h.val_map) e["val_map"] = *h.val_map;
    history.push_back(std::move(e));
  }
  c.meta = {{"stage", stage_},
            {"mode", to_string(cfg_.mode)},
            {"tuning", to_string(cfg_.tuning)},
            {"n_train", labels_.size()},
            {"train_labels", raw_train_labels(labels_)},
            {"config", json::parse(to_json(cfg_).dump())},
            {"run",
             {{"seed", stage_cfg_.seed},
              {"epoch", epoch_},
              {"batch", batch_},
              {"global_step", adam_.steps()},
              {"finished", finished()}}},
            {"accum", {{"loss", accum_loss_}, {"terms", terms_json(accum_terms_)}, {"count", accum_count_}}},
            {"history", history},
            {"best", {{"mAP", best_map_ ? json(*best_map_) : json(nullptr)}, {"epoch", best_epoch_}}}};
  return c;
}

Trainer Trainer::resume(RunConfig cfg, const DatasetManifest& manifest, const Checkpoint& ckpt) {
  try {
    const json& m = ckpt.meta;
    const int stage = m.at("stage").get<int>();
    Trainer t(std::move(cfg), manifest, stage, ckpt.params);
    if (m.at("train_labels").get<std::vector<int>>() != raw_train_labels(t.labels_))
      throw CheckpointError("checkpoint train identities do not match the manifest");
    const json& run = m.at("run");
    t.epoch_ = run.at("epoch").get<int>();
    t.batch_ = run.at("batch").get<int>();
    t.adam_.load_state(ckpt.optimizer, run.at("global_step").get<std::int64_t>());
    const json& acc = m.at("accum");
    t.accum_loss_ = acc.at("loss").get<double>();
    t.accum_count_ = acc.at("count").get<int>();
    for (auto it = acc.at("terms").begin(); it != acc.at("terms").end(); ++it) t.accum_terms_[it.key()] = it->get<double>();
    for (const auto& e : m.at("history")) {
      EpochSummary s;
      s.epoch = e.at("epoch").get<int>();
      s.loss = e.at("loss").get<double>();
      for (auto it = e.at("terms").begin(); it != e.at("terms").end(); ++it) s.terms[it.key()] = it->get<double>();
      if (e.contains("val_map")) s.val_map = e.at("val_map").get<double>();
      t.history_.push_back(std::move(s));
    }
    const json& best = m.at("best");
    if (!best.at("mAP").is_null()) t.best_map_ = best.at("mAP").get<double>();
    t.best_epoch_ = best.at("epoch").get<int>();
    return t;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint run state is malformed: ") + e.what());
  }
}

void load_pretrained(ParamStore& store, const std::filesystem::path& path) {
  const Checkpoint src = load_checkpoint(path);
  for (auto& p : store.params()) {
    if (p.spec.group != ParamGroup::kBackbone && p.spec.group != ParamGroup::kTextBackbone) continue;
    if (!src.params.has(p.spec.name)) throw ConfigError("pretrained weights lack '" + p.spec.name + "'");
    const Matrix& v = src.params.at(p.spec.name).value;
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
      throw ConfigError("pretrained '" + p.spec.name + "' has shape " + std::to_string(v.rows()) + "x" +
                        std::to_string(v.cols()) + ", model expects " + std::to_string(p.value.rows()) + "x" +
                        std::to_string(p.value.cols()));
    p.value = v;
  }
}

void RunDir::create(const RunConfig& cfg, const std::string& command) const {
  std::error_code ec;
  for (const auto& d : {root, checkpoints(), logs(), reports()}) {
    std::filesystem::create_directories(d, ec);
    if (ec) throw IoError("cannot create " + d.string() + ": " + ec.message());
  }
  const std::string echo = to_json(cfg).dump(2);
  std::ofstream(root / "config.json") << echo << "\n";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : echo) h = (h ^ static_cast<unsigned char>(ch)) * 0x100000001b3ULL;
  char id[17];
  std::snprintf(id, sizeof(id), "%016llx", static_cast<unsigned long long>(h));
  nlohmann::ordered_json manifest = {{"run_id", std::string(id, 12)},
                                     {"command", command},
                                     {"seed", cfg.seed},
                                     {"config", json::parse(echo)}};
  std::ofstream(root / "run_manifest.json") << manifest.dump(2) << "\n";
}

double validation_map(const RunConfig& cfg, const DatasetManifest& manifest, const ParamStore& params) {
  const ProtocolLists lists = build_protocol(manifest, cfg.eval.protocol, cfg.eval.direction);
  const FeatureBank bank =
      extract_features(manifest, params, cfg.model.vision, cfg.mode, cfg.augmentation, cfg.eval.clip_len);
  return compute_metrics(bank, lists, cfg.eval.max_rank).mAP;
}

namespace {

std::filesystem::path last_path(const RunDir& dir, int stage) {
  return dir.checkpoints() / (stage == 1 ? "stage1.ckpt" : "stage2_last.ckpt");
}

StageResult drive(Trainer& t, const DatasetManifest& manifest, const RunDir& dir) {
  t.set_dump_dir(dir.logs());
  std::ofstream log(dir.logs() / "train.jsonl", std::ios::app);
  if (!log) throw IoError("cannot open " + (dir.logs() / "train.jsonl").string());
  StageResult result;
  const auto best_path = dir.checkpoints() / "stage2_best.ckpt";
  while (!t.finished()) {
    const StepRecord r = t.step();
    log << json({{"event", "step"},
                 {"stage", r.stage},
                 {"epoch", r.epoch},
                 {"batch", r.batch},
                 {"step", r.step},
                 {"lr", r.lr},
                 {"loss", r.loss},
                 {"terms", terms_json(r.terms)}})
               .dump()
        << "\n";
    if (t.batch_index() != 0) continue;
    const int done = t.epoch();
    if (t.stage() == 2 && (done % t.config().eval.eval_period == 0 || t.finished())) {
      t.record_validation(validation_map(t.config(), manifest, t.params()));
      if (t.best_epoch() == done - 1) save_checkpoint(t.snapshot(), best_path);
    }
    const EpochSummary& s = t.history().back();
    json e = {{"event", "epoch"}, {"stage", t.stage()}, {"epoch", s.epoch}, {"loss", s.loss}, {"terms", terms_json(s.terms)}};
    if (s.val_map) e["val_map"] = *s.val_map;
    log << e.dump() << "\n";
    log.flush();
    save_checkpoint(t.snapshot(), last_path(dir, t.stage()));
  }
  if (t.stage() == 2 && !t.best_map()) {
    t.record_validation(validation_map(t.config(), manifest, t.params()));
    save_checkpoint(t.snapshot(), best_path);
  }
  if (!std::filesystem::exists(last_path(dir, t.stage()))) save_checkpoint(t.snapshot(), last_path(dir, t.stage()));
  result.last = last_path(dir, t.stage());
  if (t.stage() == 2) result.best = best_path;
  result.history = t.history();
  return result;
}

}  // namespace

StageResult run_stage1(const RunConfig& cfg, const DatasetManifest& manifest, const RunDir& dir) {
  const LabelMap labels = remap_train_labels(manifest);
  ParamStore params = init_model(cfg.model, labels.size(), cfg.seed);
  if (!cfg.pretrained.empty()) load_pretrained(params, cfg.pretrained);
  Trainer t(cfg, manifest, 1, std::move(params));
  return drive(t, manifest, dir);
}

StageResult run_stage2(const RunConfig& cfg, const DatasetManifest& manifest,
                       const std::filesystem::path& stage1_checkpoint, const RunDir& dir) {
  const Checkpoint s1 = load_checkpoint(stage1_checkpoint);
  const LabelMap labels = remap_train_labels(manifest);
  if (!s1.meta.contains("n_train") || s1.meta["n_train"].get<int>() != labels.size())
    throw CheckpointError("stage-1 checkpoint was trained on " +
                          (s1.meta.contains("n_train") ? s1.meta["n_train"].dump() : std::string("an unknown number of")) +
                          " identities but the manifest has " + std::to_string(labels.size()));
  if (s1.meta.value("stage", 0) != 1) throw CheckpointError("stage 2 expects a stage-1 checkpoint");
  Trainer t(cfg, manifest, 2, s1.params);
  return drive(t, manifest, dir);
}

StageResult resume_stage(const RunConfig& cfg, const DatasetManifest& manifest,
                         const std::filesystem::path& checkpoint, const RunDir& dir) {
  Trainer t = Trainer::resume(cfg, manifest, load_checkpoint(checkpoint));
  return drive(t, manifest, dir);
}

}  // namespace vsla
