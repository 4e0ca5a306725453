#include "vsla/text_encoder.hpp"

#include "transformer.hpp"
#include "vsla/errors.hpp"

#include <cmath>

namespace vsla {

using detail::add_param;

void TextConfig::validate() const {
  if (shared_prompts < 2 || shared_prompts % 2 != 0)
    throw ConfigError("text: shared_prompts must be even and >= 2");
  if (id_tokens < 1) throw ConfigError("text: id_tokens must be >= 1");
  if (width < 1 || heads < 1 || width % heads != 0) throw ConfigError("text: width must be divisible by heads");
  if (layers < 1) throw ConfigError("text: layers must be >= 1");
  if (sequence_length() > context_length)
    throw ConfigError("text: composed sequence of " + std::to_string(sequence_length()) +
                      " tokens overflows context length " + std::to_string(context_length));
}

TextConfig TextConfig::clip() { return TextConfig{}; }

TextConfig TextConfig::tiny() {
  TextConfig c;
  c.width = 32;
  c.layers = 1;
  c.heads = 2;
  c.context_length = 16;
  c.projection_dim = 32;
  c.activation = Activation::kGelu;
  return c;
}

namespace {
std::string block(int k) { return "text.blocks." + std::to_string(k); }
}  // namespace

ParamLayout text_layout(const TextConfig& cfg, int n_train) {
  cfg.validate();
  if (n_train < 1) throw ConfigError("text: at least one train identity is required");
  ParamLayout layout;
  const auto tb = ParamGroup::kTextBackbone;
  add_param(layout, "text.token_embedding", tb, 3, cfg.width);
  add_param(layout, "text.positional_embedding", tb, cfg.context_length, cfg.width);
  for (int k = 0; k < cfg.layers; ++k) detail::block_layout(layout, block(k), tb, cfg.width, cfg.mlp_ratio);
  add_param(layout, "text.ln_final.weight", tb, 1, cfg.width);
  add_param(layout, "text.ln_final.bias", tb, 1, cfg.width);
  add_param(layout, "text.projection", tb, cfg.width, cfg.projection_dim);
  add_param(layout, "prompts.shared", ParamGroup::kPrompts, cfg.shared_prompts, cfg.width);
  add_param(layout, "prompts.ids", ParamGroup::kPrompts, static_cast<Eigen::Index>(n_train) * cfg.id_tokens,
            cfg.width);
  return layout;
}

void init_text(ParamStore& store, const TextConfig& cfg, int n_train, std::uint64_t seed) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  const double proj_std = scale / std::sqrt(2.0 * cfg.layers);
  const double fc_std = 1.0 / std::sqrt(2.0 * cfg.width);
  using detail::ends_with;
  detail::init_from_layout(store, text_layout(cfg, n_train), seed, [&](const ParamSpec& s) -> double {
    const auto& n = s.name;
    if (ends_with(n, "ln_1.weight") || ends_with(n, "ln_2.weight") || ends_with(n, "ln_final.weight"))
      return -1.0;
    if (ends_with(n, ".bias")) return 0.0;
    if (n == "text.token_embedding" || n.rfind("prompts.", 0) == 0) return 0.02;
    if (n == "text.positional_embedding") return 0.01;
    if (ends_with(n, "out_proj.weight") || ends_with(n, "c_proj.weight")) return proj_std;
    if (ends_with(n, "c_fc.weight")) return fc_std;
    return scale;
  });
}

ComposedSequence compose_sequence(const TextConfig& cfg, int label, int n_train) {
  if (label < 0 || label >= n_train)
    throw std::out_of_range("compose_sequence: identity " + std::to_string(label) + " outside [0, " +
                            std::to_string(n_train) + ")");
  cfg.validate();
  const int n = cfg.shared_prompts, m = cfg.id_tokens;
  const int shared0 = 3, ids0 = 3 + n;
  ComposedSequence seq;
  seq.table_rows.reserve(static_cast<std::size_t>(cfg.context_length));
  seq.table_rows.push_back(kBos);
  for (int i = 0; i < n / 2; ++i) seq.table_rows.push_back(shared0 + i);
  for (int j = 0; j < m; ++j) seq.table_rows.push_back(ids0 + label * m + j);
  for (int i = n / 2; i < n; ++i) seq.table_rows.push_back(shared0 + i);
  seq.eos_position = static_cast<int>(seq.table_rows.size());
  seq.table_rows.push_back(kEos);
  while (static_cast<int>(seq.table_rows.size()) < cfg.context_length) seq.table_rows.push_back(kPad);
  return seq;
}

Matrix compose_embeddings(const ParamStore& store, const TextConfig& cfg, int label, int n_train) {
  Tape tape(false);
  TapeBinding bind(tape, store, GroupMask{});
  Var table = ops::concat_rows(tape, {bind("text.token_embedding"), bind("prompts.shared"), bind("prompts.ids")});
  return tape.value(ops::gather_rows(tape, table, compose_sequence(cfg, label, n_train).table_rows));
}

Var encode_identities(TapeBinding& bind, const TextConfig& cfg, std::span<const int> labels, int n_train) {
  Tape& t = bind.tape();
  const int ctx = cfg.context_length;
  Var table = ops::concat_rows(t, {bind("text.token_embedding"), bind("prompts.shared"), bind("prompts.ids")});
  std::vector<int> rows, pos_rows, eos_rows;
  auto groups = std::make_shared<AttentionGroups>();
  groups->causal = true;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto seq = compose_sequence(cfg, labels[i], n_train);
    const int base = static_cast<int>(i) * ctx;
    std::vector<int> g;
    for (int p = 0; p < ctx; ++p) {
      rows.push_back(seq.table_rows[p]);
      pos_rows.push_back(p);
      g.push_back(base + p);
    }
    groups->queries.push_back(g);
    groups->keys.push_back(std::move(g));
    eos_rows.push_back(base + seq.eos_position);
  }
  Var x = ops::add(t, ops::gather_rows(t, table, std::move(rows)),
                   ops::gather_rows(t, bind("text.positional_embedding"), std::move(pos_rows)));
  std::shared_ptr<const AttentionGroups> causal = std::move(groups);
  for (int k = 0; k < cfg.layers; ++k) {
    const auto b = block(k);
    Var h = detail::layer_norm(bind, x, b + ".ln_1");
    Var a = detail::multi_head_attention(bind, h, b + ".attn", causal, cfg.heads, cfg.width);
    x = ops::add(t, detail::linear(bind, a, b + ".attn.out_proj"), x);
    x = ops::add(t, detail::mlp(bind, detail::layer_norm(bind, x, b + ".ln_2"), b + ".mlp", cfg.activation), x);
  }
  Var eos = detail::layer_norm(bind, ops::gather_rows(t, x, std::move(eos_rows)), "text.ln_final");
  return ops::matmul(t, eos, bind("text.projection"));
}

Matrix build_text_gallery(const ParamStore& store, const TextConfig& cfg, int n_train) {
  Tape tape(false);
  TapeBinding bind(tape, store, GroupMask{});
  std::vector<int> labels(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) labels[i] = i;
  return tape.value(encode_identities(bind, cfg, labels, n_train));
}

}  // namespace vsla
