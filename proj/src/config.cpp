#include "vsla/config.hpp"

#include "vsla/errors.hpp"

#include <fstream>
#include <sstream>

namespace vsla {

using nlohmann::json;
using nlohmann::ordered_json;

void StageConfig::validate() const {
  const std::string s = "stage" + std::to_string(stage) + ": ";
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  if (epochs < 0) throw ConfigError(s + "epochs must be >= 0");
  if (!(base_lr > 0)) throw ConfigError(s + "base_lr must be positive");
  if (lr_milestones.size() != lr_factors.size())
    throw ConfigError(s + "lr_milestones and lr_factors must have the same length");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] < 1) throw ConfigError(s + "lr milestones must be positive");
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) throw ConfigError(s + "lr milestones must be ascending");
    if (!(lr_factors[i] > 0)) throw ConfigError(s + "lr factors must be positive");
  }
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    throw ConfigError(s + "adam betas must lie in [0,1)");
  if (!(optimizer.eps > 0)) throw ConfigError(s + "adam eps must be positive");
  if (!(optimizer.weight_decay >= 0)) throw ConfigError(s + "weight_decay must be >= 0");
}

double learning_rate(const StageConfig& cfg, int epoch) {
  double factor = 1.0;
  for (std::size_t i = 0; i < cfg.lr_milestones.size(); ++i)
    if (epoch >= cfg.lr_milestones[i]) factor = cfg.lr_factors[i];
  return cfg.base_lr * factor;
}

StageConfig RunConfig::stage2_effective() const {
  StageConfig s = stage2;
  if (tuning == TuningMode::kFullFinetune) s.base_lr = stage2_ft_lr;
  return s;
}

void RunConfig::validate() const {
  model.validate();
  sampler.validate();
  augmentation.validate();
  loss.validate();
  stage1.validate();
  stage2_effective().validate();
  if (stage1.stage != 1 || stage2.stage != 2) throw ConfigError("stage numbering is fixed (stage1 = 1, stage2 = 2)");
  if (augmentation.crop_height != model.vision.vit.image_height ||
      augmentation.crop_width != model.vision.vit.image_width)
    throw ConfigError("augmentation crop (" + std::to_string(augmentation.crop_height) + "x" +
                      std::to_string(augmentation.crop_width) + ") must equal the encoder input (" +
                      std::to_string(model.vision.vit.image_height) + "x" +
                      std::to_string(model.vision.vit.image_width) + ")");
  if (eval.clip_len < 1) throw ConfigError("eval.clip_len must be >= 1");
  if (eval.max_rank < 1) throw ConfigError("eval.max_rank must be >= 1");
  if (eval.eval_period < 1) throw ConfigError("eval.eval_period must be >= 1");
}

RunConfig default_run_config(std::string_view preset) {
  RunConfig c;
  c.preset = std::string(preset);
  if (preset == "tiny") {
    c.model = ModelConfig::tiny();
  } else if (preset == "clip_vit_b16") {
    c.model = ModelConfig::clip_vit_b16();
  } else {
    throw ConfigError("unknown model preset '" + std::string(preset) + "' (expected tiny or clip_vit_b16)");
  }
  c.augmentation.crop_height = c.model.vision.vit.image_height;
  c.augmentation.crop_width = c.model.vision.vit.image_width;
  c.stage1.stage = 1;
  c.stage1.epochs = 30;
  c.stage1.base_lr = 3.5e-4;
  c.stage2.stage = 2;
  c.stage2.epochs = 120;
  c.stage2.base_lr = 1e-4;
  return c;
}

namespace {

std::string_view activation_name(Activation a) { return a == Activation::kGelu ? "gelu" : "quick_gelu"; }

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "quick_gelu") return Activation::kQuickGelu;
  throw ConfigError("unknown activation '" + s + "' (expected gelu or quick_gelu)");
}

ordered_json stage_json(const StageConfig& s) {
  return {{"epochs", s.epochs},
          {"base_lr", s.base_lr},
          {"lr_milestones", s.lr_milestones},
          {"lr_factors", s.lr_factors},
          {"beta1", s.optimizer.beta1},
          {"beta2", s.optimizer.beta2},
          {"eps", s.optimizer.eps},
          {"weight_decay", s.optimizer.weight_decay}};
}

void read_stage(const json& j, StageConfig& s) {
  s.epochs = j.at("epochs").get<int>();
  s.base_lr = j.at("base_lr").get<double>();
  s.lr_milestones = j.at("lr_milestones").get<std::vector<int>>();
  s.lr_factors = j.at("lr_factors").get<std::vector<double>>();
  s.optimizer.beta1 = j.at("beta1").get<double>();
  s.optimizer.beta2 = j.at("beta2").get<double>();
  s.optimizer.eps = j.at("eps").get<double>();
  s.optimizer.weight_decay = j.at("weight_decay").get<double>();
}

// Every key of `user` must exist in `reference`, recursively through objects.
void check_keys(const json& user, const json& reference, const std::string& path) {
  if (!user.is_object()) return;
  if (!reference.is_object()) throw ConfigError("config key '" + path + "' is not a section");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (reference.at(it.key()).is_object()) {
      if (!it->is_object()) throw ConfigError("config key '" + key + "' must be an object");
      check_keys(*it, reference.at(it.key()), key);
    }
  }
}

}  // namespace

ordered_json to_json(const RunConfig& c) {
  const auto& v = c.model.vision;
  const auto& t = c.model.text;
  const auto& a = c.augmentation;
  ordered_json j;
  j["seed"] = c.seed;
  j["dataset"] = {{"manifest", c.manifest}};
  j["model"] = {
      {"preset", c.preset},
      {"pretrained", c.pretrained},
      {"logit_scale", c.model.similarity.logit_scale},
      {"vision",
       {{"image_height", v.vit.image_height},
        {"image_width", v.vit.image_width},
        {"patch_size", v.vit.patch_size},
        {"width", v.vit.width},
        {"layers", v.vit.layers},
        {"heads", v.vit.heads},
        {"mlp_ratio", v.vit.mlp_ratio},
        {"projection_dim", v.vit.projection_dim},
        {"activation", activation_name(v.vit.activation)}}},
      {"ifa", {{"bottleneck", v.ifa.bottleneck}}},
      {"cfaa", {{"bottleneck", v.cfaa.bottleneck}, {"heads", v.cfaa.heads}}},
      {"pbp", {{"depth", v.pbp.depth}, {"length", v.pbp.length}}},
      {"text",
       {{"width", t.width},
        {"layers", t.layers},
        {"heads", t.heads},
        {"mlp_ratio", t.mlp_ratio},
        {"context_length", t.context_length},
        {"projection_dim", t.projection_dim},
        {"shared_prompts", t.shared_prompts},
        {"id_tokens", t.id_tokens},
        {"activation", activation_name(t.activation)}}}};
  j["mode"] = to_string(c.mode);
  j["tuning"] = to_string(c.tuning);
  j["sampler"] = {{"clip_len", c.sampler.clip_len},
                  {"ids_per_batch", c.sampler.ids_per_batch},
                  {"clips_per_id", c.sampler.clips_per_id},
                  {"shuffle_frames", c.sampler.shuffle_frames}};
  j["augmentation"] = {{"pad", a.pad},
                       {"crop_height", a.crop_height},
                       {"crop_width", a.crop_width},
                       {"hflip_prob", a.hflip_prob},
                       {"erase",
                        {{"enabled", a.erase.enabled},
                         {"probability", a.erase.probability},
                         {"area_min", a.erase.area_min},
                         {"area_max", a.erase.area_max},
                         {"aspect_min", a.erase.aspect_min}}},
                       {"mean", a.mean},
                       {"std", a.std}};
  j["loss"] = {{"triplet", c.loss.triplet},
               {"id", c.loss.id},
               {"i2t", c.loss.i2t},
               {"t2i", c.loss.t2i},
               {"margin", c.loss.margin},
               {"label_smoothing", c.loss.label_smoothing},
               {"soft_margin", c.loss.soft_margin}};
  j["stage1"] = stage_json(c.stage1);
  j["stage1"]["pooled"] = c.stage1_pooled;
  j["stage1"]["augment"] = c.stage1_augment;
  j["stage2"] = stage_json(c.stage2);
  j["stage2"]["ft_base_lr"] = c.stage2_ft_lr;
  j["eval"] = {{"clip_len", c.eval.clip_len},
               {"protocol", to_string(c.eval.protocol)},
               {"direction", to_string(c.eval.direction)},
               {"max_rank", c.eval.max_rank},
               {"eval_period", c.eval.eval_period}};
  return j;
}

RunConfig run_config_from_json(const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  std::string preset = "tiny";
  if (user.contains("model") && user["model"].is_object() && user["model"].contains("preset")) {
    if (!user["model"]["preset"].is_string()) throw ConfigError("model.preset must be a string");
    preset = user["model"]["preset"].get<std::string>();
  }
  const RunConfig base = default_run_config(preset);
  json merged = json::parse(to_json(base).dump());
  check_keys(user, merged, "");
  merged.merge_patch(user);

  RunConfig c = base;
  try {
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.manifest = merged.at("dataset").at("manifest").get<std::string>();
    const json& m = merged.at("model");
    c.pretrained = m.at("pretrained").get<std::string>();
    c.model.similarity.logit_scale = m.at("logit_scale").get<double>();
    auto& v = c.model.vision;
    const json& mv = m.at("vision");
    v.vit.image_height = mv.at("image_height").get<int>();
    v.vit.image_width = mv.at("image_width").get<int>();
    v.vit.patch_size = mv.at("patch_size").get<int>();
    v.vit.width = mv.at("width").get<int>();
    v.vit.layers = mv.at("layers").get<int>();
    v.vit.heads = mv.at("heads").get<int>();
    v.vit.mlp_ratio = mv.at("mlp_ratio").get<int>();
    v.vit.projection_dim = mv.at("projection_dim").get<int>();
    v.vit.activation = parse_activation(mv.at("activation").get<std::string>());
    v.ifa.bottleneck = m.at("ifa").at("bottleneck").get<int>();
    v.cfaa.bottleneck = m.at("cfaa").at("bottleneck").get<int>();
    v.cfaa.heads = m.at("cfaa").at("heads").get<int>();
    v.pbp.depth = m.at("pbp").at("depth").get<int>();
    v.pbp.length = m.at("pbp").at("length").get<int>();
    auto& t = c.model.text;
    const json& mt = m.at("text");
    t.width = mt.at("width").get<int>();
    t.layers = mt.at("layers").get<int>();
    t.heads = mt.at("heads").get<int>();
    t.mlp_ratio = mt.at("mlp_ratio").get<int>();
    t.context_length = mt.at("context_length").get<int>();
    t.projection_dim = mt.at("projection_dim").get<int>();
    t.shared_prompts = mt.at("shared_prompts").get<int>();
    t.id_tokens = mt.at("id_tokens").get<int>();
    t.activation = parse_activation(mt.at("activation").get<std::string>());

    const auto mode = parse_encoder_mode(merged.at("mode").get<std::string>());
    if (!mode) throw ConfigError("unknown mode '" + merged.at("mode").get<std::string>() + "'");
    c.mode = *mode;
    const auto tuning = merged.at("tuning").get<std::string>();
    if (tuning == "full") {
      c.tuning = TuningMode::kFullFinetune;
    } else if (tuning == "adapter") {
      c.tuning = TuningMode::kAdapter;
    } else {
      throw ConfigError("unknown tuning '" + tuning + "' (expected full or adapter)");
    }

    const json& s = merged.at("sampler");
    c.sampler.clip_len = s.at("clip_len").get<int>();
    c.sampler.ids_per_batch = s.at("ids_per_batch").get<int>();
    c.sampler.clips_per_id = s.at("clips_per_id").get<int>();
    c.sampler.shuffle_frames = s.at("shuffle_frames").get<bool>();

    const json& a = merged.at("augmentation");
    c.augmentation.pad = a.at("pad").get<int>();
    c.augmentation.crop_height = a.at("crop_height").get<int>();
    c.augmentation.crop_width = a.at("crop_width").get<int>();
    c.augmentation.hflip_prob = a.at("hflip_prob").get<double>();
    c.augmentation.erase.enabled = a.at("erase").at("enabled").get<bool>();
    c.augmentation.erase.probability = a.at("erase").at("probability").get<double>();
    c.augmentation.erase.area_min = a.at("erase").at("area_min").get<double>();
    c.augmentation.erase.area_max = a.at("erase").at("area_max").get<double>();
    c.augmentation.erase.aspect_min = a.at("erase").at("aspect_min").get<double>();
    c.augmentation.mean = a.at("mean").get<std::array<double, 3>>();
    c.augmentation.std = a.at("std").get<std::array<double, 3>>();

    const json& l = merged.at("loss");
    c.loss.triplet = l.at("triplet").get<double>();
    c.loss.id = l.at("id").get<double>();
    c.loss.i2t = l.at("i2t").get<double>();
    c.loss.t2i = l.at("t2i").get<double>();
    c.loss.margin = l.at("margin").get<double>();
    c.loss.label_smoothing = l.at("label_smoothing").get<double>();
    c.loss.soft_margin = l.at("soft_margin").get<bool>();

    read_stage(merged.at("stage1"), c.stage1);
    c.stage1_pooled = merged.at("stage1").at("pooled").get<bool>();
    c.stage1_augment = merged.at("stage1").at("augment").get<bool>();
    read_stage(merged.at("stage2"), c.stage2);
    c.stage2_ft_lr = merged.at("stage2").at("ft_base_lr").get<double>();
    c.stage1.seed = c.seed;
    c.stage2.seed = c.seed;

    const json& e = merged.at("eval");
    c.eval.clip_len = e.at("clip_len").get<int>();
    const auto protocol = parse_protocol(e.at("protocol").get<std::string>());
    if (!protocol) throw ConfigError("unknown eval.protocol '" + e.at("protocol").get<std::string>() + "'");
    c.eval.protocol = *protocol;
    const auto direction = parse_direction(e.at("direction").get<std::string>());
    if (!direction) throw ConfigError("unknown eval.direction '" + e.at("direction").get<std::string>() + "'");
    c.eval.direction = *direction;
    c.eval.max_rank = e.at("max_rank").get<int>();
    c.eval.eval_period = e.at("eval_period").get<int>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config has an ill-typed value: ") + ex.what());
  }
  c.validate();
  return c;
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' must look like key.path=value");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

}  // namespace vsla
