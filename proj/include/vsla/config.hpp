#pragma once

#include "vsla/evaluation.hpp"
#include "vsla/losses.hpp"
#include "vsla/model.hpp"
#include "vsla/optimizer.hpp"
#include "vsla/sampling.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace vsla {

struct StageConfig {
  int stage = 1;
  int epochs = 30;
  double base_lr = 3.5e-4;
  std::vector<int> lr_milestones = {60, 90};
  std::vector<double> lr_factors = {0.1, 0.01};
  AdamConfig optimizer;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Piecewise-constant schedule: base_lr times the factor of the last milestone
/// reached (epochs are 0-based).
double learning_rate(const StageConfig& cfg, int epoch);

struct EvalSettings {
  int clip_len = 8;
  Protocol protocol = Protocol::kCrossPlatform;
  Direction direction = Direction::kGroundToAerial;
  int max_rank = 20;
  int eval_period = 10;  // stage-2 epochs between validation passes
};

struct RunConfig {
  std::string preset = "tiny";  // "tiny" or "clip_vit_b16"
  std::string manifest;
  std::string pretrained;       // optional checkpoint supplying backbone weights
  ModelConfig model;
  EncoderMode mode = EncoderMode::kIfaCfaaPbp;
  TuningMode tuning = TuningMode::kAdapter;
  SamplerConfig sampler;
  AugmentationConfig augmentation;
  LossWeights loss;
  StageConfig stage1;
  StageConfig stage2;
  double stage2_ft_lr = 5e-6;   // base LR of stage 2 under full fine-tuning
  bool stage1_pooled = false;   // stage-1 image side: one frame per clip, or pooled clips
  bool stage1_augment = false;  // stage-1 frames take the eval path (resize + normalize) unless set
  EvalSettings eval;
  std::uint64_t seed = 1;

  /// Stage-2 settings with the base LR of the selected tuning mode.
  StageConfig stage2_effective() const;
  void validate() const;
};

RunConfig default_run_config(std::string_view preset);

/// Full nested JSON form; every field is present.
nlohmann::ordered_json to_json(const RunConfig& cfg);

/// Starts from the defaults of `model.preset` (tiny when absent) and applies
/// the given keys. Unknown keys and ill-typed values raise ConfigError; the
/// result is validated.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, std::string_view assignment);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace vsla
