#pragma once

#include "vsla/losses.hpp"
#include "vsla/params.hpp"
#include "vsla/text_encoder.hpp"
#include "vsla/vision_encoder.hpp"

#include <cstdint>
#include <optional>
#include <string_view>

namespace vsla {

/// Geometry of both towers plus the frozen similarity scale.
struct ModelConfig {
  VisionConfig vision;
  TextConfig text;
  SimilarityConfig similarity;

  /// CLIP ViT-B/16 geometry (logit scale 100, the pretrained value).
  static ModelConfig clip_vit_b16();
  /// Tiny towers for desk-scale runs (logit scale 1).
  static ModelConfig tiny();
  void validate() const;
};

/// Stage-2 tuning regime: full image-encoder fine-tuning or adapters only.
enum class TuningMode { kFullFinetune, kAdapter };

std::string_view to_string(TuningMode m);

/// Every parameter of the model: vision tower (+adapters, prompt banks),
/// text tower, prompt bank and the ID classifier head.
ParamLayout model_layout(const ModelConfig& cfg, int n_train);

/// Tiny/random constructor; the head is Gaussian(0, 0.001^2) with zero bias.
ParamStore init_model(const ModelConfig& cfg, int n_train, std::uint64_t seed);

/// Stage 1: prompt bank only. Stage 2, full: backbone (+ enabled adapters) and
/// head. Stage 2, adapter: enabled adapter groups and head.
GroupMask trainability_mask(int stage, EncoderMode mode, TuningMode tuning);

/// Exact parameter counts per group for a configuration.
struct ParamCounts {
  std::int64_t backbone = 0;
  std::int64_t ifa = 0;
  std::int64_t cfaa = 0;
  std::int64_t pbp = 0;
  std::int64_t prompts = 0;  // shared prompts + id tokens (text-side learnables)
  std::int64_t head = 0;

  std::int64_t vsla() const { return ifa + cfaa; }
};

/// Counts of the groups that `mode` enables (disabled adapters report 0);
/// backbone is the whole image encoder. Computed from shapes only.
ParamCounts count_tunable_params(const ModelConfig& cfg, int n_train, EncoderMode mode);

/// Sum of the groups selected by `mask`.
std::int64_t trainable_total(const ParamCounts& counts, const GroupMask& mask);

/// Rounds a parameter count to millions with one decimal (e.g. 4730880 -> 4.7).
double to_millions(std::int64_t count);

/// Linear ID classifier on video embeddings.
Var classifier_logits(TapeBinding& bind, Var video_embeddings);

}  // namespace vsla
