#pragma once

#include "vsla/params.hpp"
#include "vsla/vision_encoder.hpp"

#include <span>
#include <vector>

namespace vsla {

/// Frozen text tower plus the learnable prompt bank.
struct TextConfig {
  int width = 512;  // word-embedding and transformer width
  int layers = 12;
  int heads = 8;
  int mlp_ratio = 4;
  int context_length = 77;
  int projection_dim = 512;
  int shared_prompts = 8;  // n, split n/2 before and n/2 after the id tokens
  int id_tokens = 4;       // M per identity
  Activation activation = Activation::kQuickGelu;

  /// BOS + n shared prompts + M id tokens + EOS.
  int sequence_length() const { return shared_prompts + id_tokens + 2; }
  void validate() const;

  static TextConfig clip();
  static TextConfig tiny();
};

/// Special-token rows of `text.token_embedding`.
enum SpecialToken : int { kBos = 0, kEos = 1, kPad = 2 };

/// Frozen tower ("text_backbone") and prompt bank ("prompts": shared n x width,
/// ids (N_train*M) x width).
ParamLayout text_layout(const TextConfig& cfg, int n_train);

/// Random tower; prompt bank drawn from N(0, 0.02^2), the token-embedding scale.
void init_text(ParamStore& store, const TextConfig& cfg, int n_train, std::uint64_t seed);

/// Row indices into the embedding table [specials; shared prompts; id tokens]
/// for identity `label`, padded to the context length, plus the EOS position:
///   [BOS] P_1..P_{n/2} S_1..S_M P_{n/2+1}..P_n [EOS] [PAD]...
struct ComposedSequence {
  std::vector<int> table_rows;
  int eos_position = 0;
};
ComposedSequence compose_sequence(const TextConfig& cfg, int label, int n_train);

/// Token embeddings of the composed sequence (context_length x width).
Matrix compose_embeddings(const ParamStore& store, const TextConfig& cfg, int label, int n_train);

/// Causal transformer over the composed sequences of `labels`; the EOS state
/// is projected. Returns labels.size() x projection_dim.
Var encode_identities(TapeBinding& bind, const TextConfig& cfg, std::span<const int> labels,
                      int n_train);

/// Row k = embedding of identity k.
Matrix build_text_gallery(const ParamStore& store, const TextConfig& cfg, int n_train);

}  // namespace vsla
