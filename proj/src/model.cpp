#include "vsla/model.hpp"

#include "transformer.hpp"
#include "vsla/errors.hpp"

#include <cmath>

namespace vsla {

ModelConfig ModelConfig::clip_vit_b16() {
  ModelConfig c;
  c.vision = VisionConfig::vit_base16();
  c.text = TextConfig::clip();
  c.similarity.logit_scale = 100.0;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.vision = VisionConfig::tiny();
  c.text = TextConfig::tiny();
  c.similarity.logit_scale = 1.0;
  return c;
}

void ModelConfig::validate() const {
  vision.validate();
  text.validate();
  if (vision.vit.projection_dim != text.projection_dim)
    throw ConfigError("model: vision and text projection dims differ (" +
                      std::to_string(vision.vit.projection_dim) + " vs " + std::to_string(text.projection_dim) + ")");
  if (!(similarity.logit_scale > 0)) throw ConfigError("model: logit_scale must be positive");
}

std::string_view to_string(TuningMode m) { return m == TuningMode::kFullFinetune ? "full" : "adapter"; }

ParamLayout model_layout(const ModelConfig& cfg, int n_train) {
  cfg.validate();
  ParamLayout layout = vision_layout(cfg.vision);
  for (auto& s : text_layout(cfg.text, n_train)) layout.push_back(std::move(s));
  detail::add_param(layout, "head.weight", ParamGroup::kHead, cfg.vision.vit.projection_dim, n_train);
  detail::add_param(layout, "head.bias", ParamGroup::kHead, 1, n_train);
  return layout;
}

ParamStore init_model(const ModelConfig& cfg, int n_train, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  init_vision(store, cfg.vision, seed);
  init_text(store, cfg.text, n_train, seed);
  ParamLayout head;
  detail::add_param(head, "head.weight", ParamGroup::kHead, cfg.vision.vit.projection_dim, n_train);
  detail::add_param(head, "head.bias", ParamGroup::kHead, 1, n_train);
  detail::init_from_layout(store, head, seed, [](const ParamSpec& s) { return s.name == "head.bias" ? 0.0 : 1e-3; });
  return store;
}

GroupMask trainability_mask(int stage, EncoderMode mode, TuningMode tuning) {
  if (stage == 1) return GroupMask{ParamGroup::kPrompts};
  if (stage != 2) throw ConfigError("trainability_mask: stage must be 1 or 2");
  const ModeFlags f = flags_of(mode);
  GroupMask m{ParamGroup::kHead};
  if (tuning == TuningMode::kFullFinetune) m.set(ParamGroup::kBackbone);
  m.set(ParamGroup::kIfa, f.ifa);
  m.set(ParamGroup::kCfaa, f.cfaa);
  m.set(ParamGroup::kPbp, f.pbp);
  return m;
}

ParamCounts count_tunable_params(const ModelConfig& cfg, int n_train, EncoderMode mode) {
  const ParamLayout layout = model_layout(cfg, n_train);
  const ModeFlags f = flags_of(mode);
  ParamCounts c;
  c.backbone = count_params(layout, ParamGroup::kBackbone);
  c.ifa = f.ifa ? count_params(layout, ParamGroup::kIfa) : 0;
  c.cfaa = f.cfaa ? count_params(layout, ParamGroup::kCfaa) : 0;
  c.pbp = f.pbp ? count_params(layout, ParamGroup::kPbp) : 0;
  c.prompts = count_params(layout, ParamGroup::kPrompts);
  c.head = count_params(layout, ParamGroup::kHead);
  return c;
}

std::int64_t trainable_total(const ParamCounts& c, const GroupMask& m) {
  std::int64_t n = 0;
  if (m.contains(ParamGroup::kBackbone)) n += c.backbone;
  if (m.contains(ParamGroup::kIfa)) n += c.ifa;
  if (m.contains(ParamGroup::kCfaa)) n += c.cfaa;
  if (m.contains(ParamGroup::kPbp)) n += c.pbp;
  if (m.contains(ParamGroup::kPrompts)) n += c.prompts;
  if (m.contains(ParamGroup::kHead)) n += c.head;
  return n;
}

double to_millions(std::int64_t count) { return std::round(static_cast<double>(count) / 1e5) / 10.0; }

Var classifier_logits(TapeBinding& bind, Var video_embeddings) {
  return detail::linear(bind, video_embeddings, "head");
}

}  // namespace vsla
