#pragma once

#include "vsla/checkpoint.hpp"
#include "vsla/config.hpp"
#include "vsla/datamodel.hpp"
#include "vsla/optimizer.hpp"
#include "vsla/sampling.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vsla {

struct StepRecord {
  int stage = 0;
  int epoch = 0;
  int batch = 0;
  std::int64_t step = 0;  // 1-based count of optimizer steps in this stage
  double lr = 0.0;
  double loss = 0.0;
  std::map<std::string, double> terms;
};

struct EpochSummary {
  int epoch = 0;
  double loss = 0.0;  // mean over the epoch's batches
  std::map<std::string, double> terms;
  std::optional<double> val_map;
};

/// One stage of optimization, advanced a batch at a time. The data order is a
/// pure function of (seed, stage, epoch), so a trainer restored from a
/// snapshot continues exactly where the original would have.
class Trainer {
 public:
  /// Fresh stage starting from `params` (which must cover the full model layout).
  Trainer(RunConfig cfg, const DatasetManifest& manifest, int stage, ParamStore params);

  /// Restores a trainer from a snapshot taken by `snapshot()`.
  static Trainer resume(RunConfig cfg, const DatasetManifest& manifest, const Checkpoint& ckpt);

  StepRecord step();
  bool finished() const { return epoch_ >= stage_cfg_.epochs; }

  int stage() const { return stage_; }
  int epoch() const { return epoch_; }
  int batch_index() const { return batch_; }
  std::int64_t global_step() const { return adam_.steps(); }
  int batches_in_epoch() const;

  const RunConfig& config() const { return cfg_; }
  const StageConfig& stage_config() const { return stage_cfg_; }
  const ParamStore& params() const { return params_; }
  const GroupMask& mask() const { return mask_; }
  const LabelMap& labels() const { return labels_; }
  const std::vector<EpochSummary>& history() const { return history_; }

  /// Attaches a validation mAP to the most recent completed epoch and tracks the best.
  void record_validation(double map);
  std::optional<double> best_map() const { return best_map_; }
  int best_epoch() const { return best_epoch_; }

  /// Where a diagnostic dump goes if a loss turns non-finite.
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

  Checkpoint snapshot() const;

 private:
  void ensure_batches();
  StepRecord stage1_step(const Batch& batch, double lr);
  StepRecord stage2_step(const Batch& batch, double lr);
  [[noreturn]] void diverged(const Batch& batch, const std::map<std::string, double>& terms);

  RunConfig cfg_;
  const DatasetManifest* manifest_;
  int stage_;
  StageConfig stage_cfg_;
  ParamStore params_;
  GroupMask mask_;
  LabelMap labels_;
  Adam adam_;
  int epoch_ = 0;
  int batch_ = 0;
  std::vector<Batch> batches_;
  int batches_epoch_ = -1;
  Matrix gallery_;  // stage 2: frozen text embeddings of every train identity
  std::unique_ptr<FrameCache> cache_ = std::make_unique<FrameCache>();
  double accum_loss_ = 0.0;
  std::map<std::string, double> accum_terms_;
  int accum_count_ = 0;
  std::vector<EpochSummary> history_;
  std::optional<double> best_map_;
  int best_epoch_ = -1;
  std::filesystem::path dump_dir_;
};

/// Copies backbone weights (image and text towers) from a checkpoint into `store`.
/// Throws ConfigError when a shape differs or a tensor is missing.
void load_pretrained(ParamStore& store, const std::filesystem::path& path);

/// Run directory layout: config.json, run_manifest.json, checkpoints/, logs/, reports/.
struct RunDir {
  std::filesystem::path root;

  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path logs() const { return root / "logs"; }
  std::filesystem::path reports() const { return root / "reports"; }
  void create(const RunConfig& cfg, const std::string& command) const;
};

struct StageResult {
  std::filesystem::path last;
  std::optional<std::filesystem::path> best;  // stage 2 only
  std::vector<EpochSummary> history;
};

/// Stage 1 from scratch (or pretrained backbone); writes checkpoints/stage1.ckpt.
StageResult run_stage1(const RunConfig& cfg, const DatasetManifest& manifest, const RunDir& dir);

/// Stage 2 from a stage-1 checkpoint; writes checkpoints/stage2_last.ckpt and
/// checkpoints/stage2_best.ckpt (best validation mAP).
StageResult run_stage2(const RunConfig& cfg, const DatasetManifest& manifest,
                       const std::filesystem::path& stage1_checkpoint, const RunDir& dir);

/// Continues an interrupted stage from its last checkpoint.
StageResult resume_stage(const RunConfig& cfg, const DatasetManifest& manifest,
                         const std::filesystem::path& checkpoint, const RunDir& dir);

/// Validation mAP of `params` on the test split under the configured protocol.
double validation_map(const RunConfig& cfg, const DatasetManifest& manifest, const ParamStore& params);

}  // namespace vsla
