#pragma once

#include "vsla/params.hpp"
#include "vsla/sampling.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vsla {

enum class Activation { kGelu, kQuickGelu };

struct ViTConfig {
  int image_height = 256;
  int image_width = 128;
  int patch_size = 16;
  int width = 768;
  int layers = 12;
  int heads = 12;
  int mlp_ratio = 4;
  int projection_dim = 512;
  Activation activation = Activation::kQuickGelu;

  int patches() const { return (image_height / patch_size) * (image_width / patch_size); }
  int tokens() const { return patches() + 1; }
  void validate() const;
};

/// Intra-Frame Adapter: bottleneck branch parallel to each MLP block.
struct IFAConfig {
  int bottleneck = 256;
};

/// Cross-Frame Attention Adapter: bottleneck branch parallel to each MSA
/// block whose attention runs over the frame axis. No frame positional encoding.
struct CFAAConfig {
  int bottleneck = 256;
  int heads = 0;  // 0 selects max(1, bottleneck / 64)

  int resolved_heads() const { return heads > 0 ? heads : std::max(1, bottleneck / 64); }
};

/// Platform-Bridge Prompts: per-platform learnable tokens joined to the MSA
/// input of the first `depth` layers.
struct PBPConfig {
  int depth = 3;
  int length = 16;
};

struct VisionConfig {
  ViTConfig vit;
  IFAConfig ifa;
  CFAAConfig cfaa;
  PBPConfig pbp;

  /// CLIP ViT-B/16 geometry on 256x128 person crops.
  static VisionConfig vit_base16();
  /// Small random-init backbone for desk-scale tests (D=64, L=2, 4x4 patches on 32x16).
  static VisionConfig tiny();
  void validate() const;
};

enum class EncoderMode { kBaseline, kIfa, kIfaCfaa, kIfaCfaaPbp };

std::string_view to_string(EncoderMode m);
std::optional<EncoderMode> parse_encoder_mode(std::string_view s);

struct ModeFlags {
  bool ifa = false;
  bool cfaa = false;
  bool pbp = false;
};
ModeFlags flags_of(EncoderMode m);

/// Shapes of every vision parameter, adapters and prompt banks included.
ParamLayout vision_layout(const VisionConfig& cfg);

/// Random initialisation; adapter up-projections are zero. Each parameter is
/// drawn from its own stream keyed by (seed, name).
void init_vision(ParamStore& store, const VisionConfig& cfg, std::uint64_t seed);

struct VisionForward {
  Var frame_embeddings;  // sum(T_b) x projection_dim, clip-major
  Var pooled;            // B x projection_dim, mean over each clip's frames
  std::vector<int> frames_per_clip;
};

/// Encodes a batch of clips. Each clip's frames form a set: per layer
///   x' = MSA(LN(x)) + x + CFAA(x)
///   x  = MLP(LN(x')) + x' + IFA(x')
/// with the adapter terms present according to `mode`. With PBP, layers k <
/// depth attend over the frame tokens joined with the clip platform's prompts;
/// prompt outputs are dropped. The class token of the last layer is projected.
VisionForward encode_clips(TapeBinding& bind, const VisionConfig& cfg, EncoderMode mode,
                           std::span<const Clip* const> clips);

/// Per-frame embeddings (T x projection_dim) of one clip, no gradients.
Matrix encode_clip(const ParamStore& store, const VisionConfig& cfg, EncoderMode mode,
                   const Clip& clip);

/// Mean over the frame axis.
RowVector pool_frames(const Matrix& frame_embeddings);

struct CfaaOutput {
  Matrix residual;                    // (T*S) x D, frame-major like the input
  std::array<int, 3> attention_shape; // (S, T, bottleneck) seen by the cross-frame attention
};

/// CFAA branch of `layer` on frame-major tokens ((T*S) x D).
CfaaOutput cfaa_forward(const ParamStore& store, const VisionConfig& cfg, int layer,
                        const Matrix& tokens, int frames);

/// Tape-level CFAA residual; exposed for gradient checks.
Var cfaa_residual(TapeBinding& bind, const VisionConfig& cfg, int layer, Var x,
                  std::span<const int> frames_per_clip, int tokens_per_frame);

/// Tape-level IFA residual.
Var ifa_residual(TapeBinding& bind, int layer, Var x);

}  // namespace vsla
