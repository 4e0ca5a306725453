#include "vsla/vision_encoder.hpp"

#include "transformer.hpp"
#include "vsla/errors.hpp"

#include <cmath>

namespace vsla {

using detail::add_param;

void ViTConfig::validate() const {
  if (patch_size < 1 || image_height % patch_size != 0 || image_width % patch_size != 0)
    throw ConfigError("vit: image size must be divisible by patch_size");
  if (width < 1 || heads < 1 || width % heads != 0)
    throw ConfigError("vit: width must be divisible by heads");
  if (layers < 1) throw ConfigError("vit: layers must be >= 1");
  if (mlp_ratio < 1 || projection_dim < 1) throw ConfigError("vit: mlp_ratio and projection_dim must be >= 1");
}

VisionConfig VisionConfig::vit_base16() { return VisionConfig{}; }

VisionConfig VisionConfig::tiny() {
  VisionConfig c;
  c.vit.image_height = 32;
  c.vit.image_width = 16;
  c.vit.patch_size = 4;
  c.vit.width = 64;
  c.vit.layers = 2;
  c.vit.heads = 4;
  c.vit.projection_dim = 32;
  c.vit.activation = Activation::kGelu;
  c.ifa.bottleneck = 16;
  c.cfaa.bottleneck = 16;
  c.cfaa.heads = 2;
  c.pbp.depth = 1;
  c.pbp.length = 4;
  return c;
}

void VisionConfig::validate() const {
  vit.validate();
  if (ifa.bottleneck < 1) throw ConfigError("ifa: bottleneck must be >= 1");
  if (cfaa.bottleneck < 1) throw ConfigError("cfaa: bottleneck must be >= 1");
  if (cfaa.bottleneck % cfaa.resolved_heads() != 0)
    throw ConfigError("cfaa: bottleneck must be divisible by its head count");
  if (pbp.depth < 0 || pbp.depth > vit.layers) throw ConfigError("pbp: depth must lie in [0, layers]");
  if (pbp.length < 0) throw ConfigError("pbp: length must be >= 0");
}

std::string_view to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::kBaseline: return "baseline";
    case EncoderMode::kIfa: return "ifa";
    case EncoderMode::kIfaCfaa: return "ifa_cfaa";
    case EncoderMode::kIfaCfaaPbp: return "ifa_cfaa_pbp";
  }
  return "baseline";
}

std::optional<EncoderMode> parse_encoder_mode(std::string_view s) {
  for (auto m : {EncoderMode::kBaseline, EncoderMode::kIfa, EncoderMode::kIfaCfaa, EncoderMode::kIfaCfaaPbp})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

ModeFlags flags_of(EncoderMode m) {
  switch (m) {
    case EncoderMode::kBaseline: return {};
    case EncoderMode::kIfa: return {true, false, false};
    case EncoderMode::kIfaCfaa: return {true, true, false};
    case EncoderMode::kIfaCfaaPbp: return {true, true, true};
  }
  return {};
}

namespace {

std::string block(int k) { return "visual.blocks." + std::to_string(k); }
std::string ifa_prefix(int k) { return "ifa." + std::to_string(k); }
std::string cfaa_prefix(int k) { return "cfaa." + std::to_string(k); }
std::string pbp_name(PlatformTag p, int k) {
  return std::string("pbp.") + (p == PlatformTag::kGround ? "ground." : "aerial.") + std::to_string(k);
}

}  // namespace

ParamLayout vision_layout(const VisionConfig& cfg) {
  cfg.validate();
  const auto& v = cfg.vit;
  const int d = v.width;
  const int pp = 3 * v.patch_size * v.patch_size;
  ParamLayout layout;
  const auto bb = ParamGroup::kBackbone;
  add_param(layout, "visual.conv1.weight", bb, pp, d);
  add_param(layout, "visual.class_embedding", bb, 1, d);
  add_param(layout, "visual.positional_embedding", bb, v.tokens(), d);
  add_param(layout, "visual.ln_pre.weight", bb, 1, d);
  add_param(layout, "visual.ln_pre.bias", bb, 1, d);
  for (int k = 0; k < v.layers; ++k) detail::block_layout(layout, block(k), bb, d, v.mlp_ratio);
  add_param(layout, "visual.ln_post.weight", bb, 1, d);
  add_param(layout, "visual.ln_post.bias", bb, 1, d);
  add_param(layout, "visual.proj", bb, d, v.projection_dim);

  const int a = cfg.ifa.bottleneck;
  for (int k = 0; k < v.layers; ++k) {
    add_param(layout, ifa_prefix(k) + ".down.weight", ParamGroup::kIfa, d, a);
    add_param(layout, ifa_prefix(k) + ".down.bias", ParamGroup::kIfa, 1, a);
    add_param(layout, ifa_prefix(k) + ".up.weight", ParamGroup::kIfa, a, d);
    add_param(layout, ifa_prefix(k) + ".up.bias", ParamGroup::kIfa, 1, d);
  }
  const int c = cfg.cfaa.bottleneck;
  const auto cg = ParamGroup::kCfaa;
  for (int k = 0; k < v.layers; ++k) {
    const auto p = cfaa_prefix(k);
    add_param(layout, p + ".down.weight", cg, d, c);
    add_param(layout, p + ".down.bias", cg, 1, c);
    add_param(layout, p + ".ln.weight", cg, 1, c);
    add_param(layout, p + ".ln.bias", cg, 1, c);
    add_param(layout, p + ".attn.in_proj.weight", cg, c, 3 * c);
    add_param(layout, p + ".attn.in_proj.bias", cg, 1, 3 * c);
    add_param(layout, p + ".attn.out_proj.weight", cg, c, c);
    add_param(layout, p + ".attn.out_proj.bias", cg, 1, c);
    add_param(layout, p + ".up.weight", cg, c, d);
    add_param(layout, p + ".up.bias", cg, 1, d);
  }
  if (cfg.pbp.length > 0) {
    for (int k = 0; k < cfg.pbp.depth; ++k) {
      add_param(layout, pbp_name(PlatformTag::kGround, k), ParamGroup::kPbp, cfg.pbp.length, d);
      add_param(layout, pbp_name(PlatformTag::kAerial, k), ParamGroup::kPbp, cfg.pbp.length, d);
    }
  }
  return layout;
}

void init_vision(ParamStore& store, const VisionConfig& cfg, std::uint64_t seed) {
  const auto& v = cfg.vit;
  const double d = v.width;
  const double scale = 1.0 / std::sqrt(d);
  const double proj_std = scale / std::sqrt(2.0 * v.layers);
  const double fc_std = 1.0 / std::sqrt(2.0 * d);
  const double patch_std = 1.0 / std::sqrt(3.0 * v.patch_size * v.patch_size);
  const double bottleneck_std = 1.0 / std::sqrt(static_cast<double>(cfg.cfaa.bottleneck));
  using detail::ends_with;
  detail::init_from_layout(store, vision_layout(cfg), seed, [&](const ParamSpec& s) -> double {
    const auto& n = s.name;
    if (ends_with(n, "ln_1.weight") || ends_with(n, "ln_2.weight") || ends_with(n, "ln_pre.weight") ||
        ends_with(n, "ln_post.weight") || ends_with(n, ".ln.weight"))
      return -1.0;
    if (ends_with(n, ".bias")) return 0.0;
    if (n.rfind("ifa.", 0) == 0 || n.rfind("cfaa.", 0) == 0) {
      if (ends_with(n, ".up.weight")) return 0.0;
      if (ends_with(n, ".down.weight")) return scale;
      return bottleneck_std;
    }
    if (n == "visual.conv1.weight") return patch_std;
    if (ends_with(n, "out_proj.weight") || ends_with(n, "c_proj.weight")) return proj_std;
    if (ends_with(n, "c_fc.weight")) return fc_std;
    return scale;
  });
}

Var ifa_residual(TapeBinding& bind, int layer, Var x) {
  Tape& t = bind.tape();
  const auto p = ifa_prefix(layer);
  return detail::linear(bind, ops::gelu(t, detail::linear(bind, x, p + ".down")), p + ".up");
}

namespace {

/// Frame-axis attention groups: one group per (clip, token position) over the clip's frames.
std::shared_ptr<AttentionGroups> cross_frame_groups(std::span<const int> frames_per_clip, int tokens) {
  auto g = std::make_shared<AttentionGroups>();
  int frame0 = 0;
  for (int t_count : frames_per_clip) {
    for (int n = 0; n < tokens; ++n) {
      std::vector<int> rows;
      rows.reserve(static_cast<std::size_t>(t_count));
      for (int f = 0; f < t_count; ++f) rows.push_back((frame0 + f) * tokens + n);
      g->queries.push_back(rows);
      g->keys.push_back(std::move(rows));
    }
    frame0 += t_count;
  }
  return g;
}

}  // namespace

Var cfaa_residual(TapeBinding& bind, const VisionConfig& cfg, int layer, Var x,
                  std::span<const int> frames_per_clip, int tokens_per_frame) {
  const auto p = cfaa_prefix(layer);
  Var z = detail::linear(bind, x, p + ".down");
  z = detail::layer_norm(bind, z, p + ".ln");
  Var o = detail::multi_head_attention(bind, z, p + ".attn",
                                       cross_frame_groups(frames_per_clip, tokens_per_frame),
                                       cfg.cfaa.resolved_heads(), cfg.cfaa.bottleneck);
  o = detail::linear(bind, o, p + ".attn.out_proj");
  return detail::linear(bind, o, p + ".up");
}

CfaaOutput cfaa_forward(const ParamStore& store, const VisionConfig& cfg, int layer,
                        const Matrix& tokens, int frames) {
  if (frames < 1 || tokens.rows() % frames != 0)
    throw ConfigError("cfaa_forward: token rows must be a multiple of the frame count");
  if (tokens.cols() != cfg.vit.width) throw ConfigError("cfaa_forward: token width mismatch");
  Tape tape(false);
  TapeBinding bind(tape, store, GroupMask{});
  const int s = static_cast<int>(tokens.rows() / frames);
  const int fpc[1] = {frames};
  Var out = cfaa_residual(bind, cfg, layer, tape.constant(tokens), fpc, s);
  return CfaaOutput{tape.value(out), {s, frames, cfg.cfaa.bottleneck}};
}

VisionForward encode_clips(TapeBinding& bind, const VisionConfig& cfg, EncoderMode mode,
                           std::span<const Clip* const> clips) {
  const auto& v = cfg.vit;
  const ModeFlags flags = flags_of(mode);
  Tape& t = bind.tape();
  const int ps = v.patch_size, gh = v.image_height / ps, gw = v.image_width / ps;
  const int n_patch = gh * gw, s = n_patch + 1, pp = 3 * ps * ps;

  VisionForward fwd;
  int total_frames = 0;
  for (const Clip* c : clips) {
    if (c->height != v.image_height || c->width != v.image_width)
      throw ConfigError("encode_clips: clip '" + c->source + "' is " + std::to_string(c->height) + "x" +
                        std::to_string(c->width) + ", encoder expects " + std::to_string(v.image_height) +
                        "x" + std::to_string(v.image_width));
    if (c->frames < 1) throw ValidationError("encode_clips: clip '" + c->source + "' has no frames");
    fwd.frames_per_clip.push_back(c->frames);
    total_frames += c->frames;
  }
  if (total_frames == 0) throw ValidationError("encode_clips: empty batch");

  // Patch matrix: one row per (frame, patch), columns ordered (channel, py, px).
  Matrix patches(static_cast<Eigen::Index>(total_frames) * n_patch, pp);
  {
    Eigen::Index row = 0;
    for (const Clip* c : clips) {
      for (int f = 0; f < c->frames; ++f) {
        for (int gy = 0; gy < gh; ++gy) {
          for (int gx = 0; gx < gw; ++gx, ++row) {
            for (int ch = 0; ch < 3; ++ch)
              for (int py = 0; py < ps; ++py)
                for (int px = 0; px < ps; ++px)
                  patches(row, (ch * ps + py) * ps + px) = c->at(f, gy * ps + py, gx * ps + px, ch);
          }
        }
      }
    }
  }
  Var patch_tokens = ops::matmul(t, t.constant(std::move(patches)), bind("visual.conv1.weight"));
  Var table = ops::concat_rows(t, {bind("visual.class_embedding"), patch_tokens});
  std::vector<int> token_rows, pos_rows;
  const int rows = total_frames * s;
  token_rows.reserve(static_cast<std::size_t>(rows));
  pos_rows.reserve(static_cast<std::size_t>(rows));
  for (int f = 0; f < total_frames; ++f) {
    for (int n = 0; n < s; ++n) {
      token_rows.push_back(n == 0 ? 0 : 1 + f * n_patch + (n - 1));
      pos_rows.push_back(n);
    }
  }
  Var x = ops::add(t, ops::gather_rows(t, table, std::move(token_rows)),
                   ops::gather_rows(t, bind("visual.positional_embedding"), std::move(pos_rows)));
  x = detail::layer_norm(bind, x, "visual.ln_pre");

  // Per-frame self-attention groups; PBP variants add the platform's prompt rows as keys.
  std::vector<PlatformTag> frame_platform;
  for (const Clip* c : clips)
    for (int f = 0; f < c->frames; ++f) frame_platform.push_back(c->platform);
  const int l = cfg.pbp.length;
  auto make_groups = [&](bool with_prompts) {
    auto g = std::make_shared<AttentionGroups>();
    for (int f = 0; f < total_frames; ++f) {
      std::vector<int> q(static_cast<std::size_t>(s));
      for (int n = 0; n < s; ++n) q[n] = f * s + n;
      std::vector<int> k = q;
      if (with_prompts) {
        const int base = rows + (frame_platform[f] == PlatformTag::kAerial ? l : 0);
        for (int j = 0; j < l; ++j) k.push_back(base + j);
      }
      g->queries.push_back(std::move(q));
      g->keys.push_back(std::move(k));
    }
    return std::shared_ptr<const AttentionGroups>(std::move(g));
  };
  const bool use_pbp = flags.pbp && cfg.pbp.depth > 0 && l > 0;
  const auto plain_groups = make_groups(false);
  const auto prompt_groups = use_pbp ? make_groups(true) : nullptr;
  std::vector<int> frame_token_rows(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) frame_token_rows[i] = i;

  for (int k = 0; k < v.layers; ++k) {
    const auto b = block(k);
    Var h = detail::layer_norm(bind, x, b + ".ln_1");
    Var attn;
    if (use_pbp && k < cfg.pbp.depth) {
      Var src = ops::concat_rows(t, {h, bind(pbp_name(PlatformTag::kGround, k)),
                                     bind(pbp_name(PlatformTag::kAerial, k))});
      attn = detail::multi_head_attention(bind, src, b + ".attn", prompt_groups, v.heads, v.width);
      attn = ops::gather_rows(t, attn, frame_token_rows);
    } else {
      attn = detail::multi_head_attention(bind, h, b + ".attn", plain_groups, v.heads, v.width);
    }
    attn = detail::linear(bind, attn, b + ".attn.out_proj");
    Var xp = ops::add(t, attn, x);
    if (flags.cfaa) xp = ops::add(t, xp, cfaa_residual(bind, cfg, k, x, fwd.frames_per_clip, s));
    Var m = detail::mlp(bind, detail::layer_norm(bind, xp, b + ".ln_2"), b + ".mlp", v.activation);
    x = ops::add(t, m, xp);
    if (flags.ifa) x = ops::add(t, x, ifa_residual(bind, k, xp));
  }

  std::vector<int> cls_rows(static_cast<std::size_t>(total_frames));
  for (int f = 0; f < total_frames; ++f) cls_rows[f] = f * s;
  Var cls = detail::layer_norm(bind, ops::gather_rows(t, x, std::move(cls_rows)), "visual.ln_post");
  fwd.frame_embeddings = ops::matmul(t, cls, bind("visual.proj"));
  fwd.pooled = ops::block_mean_rows(t, fwd.frame_embeddings, fwd.frames_per_clip);
  return fwd;
}

Matrix encode_clip(const ParamStore& store, const VisionConfig& cfg, EncoderMode mode, const Clip& clip) {
  Tape tape(false);
  TapeBinding bind(tape, store, GroupMask{});
  const Clip* one[1] = {&clip};
  return tape.value(encode_clips(bind, cfg, mode, one).frame_embeddings);
}

RowVector pool_frames(const Matrix& frame_embeddings) {
  if (frame_embeddings.rows() < 1) throw ValidationError("pool_frames: no frames");
  return frame_embeddings.colwise().mean();
}

}  // namespace vsla
