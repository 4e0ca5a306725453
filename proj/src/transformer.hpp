#pragma once

// Building blocks shared by the vision and text towers.

#include "vsla/params.hpp"
#include "vsla/rng.hpp"
#include "vsla/vision_encoder.hpp"

#include <functional>
#include <string>

namespace vsla::detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void add_param(ParamLayout& layout, std::string name, ParamGroup g, Eigen::Index rows,
                      Eigen::Index cols) {
  layout.push_back(ParamSpec{std::move(name), g, rows, cols});
}

/// Pre-LN transformer block: ln_1, attn (in_proj + out_proj), ln_2, mlp (c_fc, c_proj).
inline void block_layout(ParamLayout& layout, const std::string& prefix, ParamGroup g, int width,
                         int mlp_ratio) {
  add_param(layout, prefix + ".ln_1.weight", g, 1, width);
  add_param(layout, prefix + ".ln_1.bias", g, 1, width);
  add_param(layout, prefix + ".attn.in_proj.weight", g, width, 3 * width);
  add_param(layout, prefix + ".attn.in_proj.bias", g, 1, 3 * width);
  add_param(layout, prefix + ".attn.out_proj.weight", g, width, width);
  add_param(layout, prefix + ".attn.out_proj.bias", g, 1, width);
  add_param(layout, prefix + ".ln_2.weight", g, 1, width);
  add_param(layout, prefix + ".ln_2.bias", g, 1, width);
  add_param(layout, prefix + ".mlp.c_fc.weight", g, width, mlp_ratio * width);
  add_param(layout, prefix + ".mlp.c_fc.bias", g, 1, mlp_ratio * width);
  add_param(layout, prefix + ".mlp.c_proj.weight", g, mlp_ratio * width, width);
  add_param(layout, prefix + ".mlp.c_proj.bias", g, 1, width);
}

/// Initialises every parameter of `layout` that is missing from `store`;
/// `stddev_of` returns the Gaussian std for a name, negative meaning "ones"
/// and zero meaning "zeros".
inline void init_from_layout(ParamStore& store, const ParamLayout& layout, std::uint64_t seed,
                             const std::function<double(const ParamSpec&)>& stddev_of) {
  for (const auto& spec : layout) {
    if (store.has(spec.name)) continue;
    const double sd = stddev_of(spec);
    Matrix m;
    if (sd < 0) {
      m = Matrix::Ones(spec.rows, spec.cols);
    } else if (sd == 0) {
      m = Matrix::Zero(spec.rows, spec.cols);
    } else {
      auto rng = make_rng({seed, name_hash(spec.name)});
      m = gaussian(spec.rows, spec.cols, sd, rng);
    }
    store.add(spec, std::move(m));
  }
}

inline bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline Var linear(TapeBinding& bind, Var x, const std::string& prefix) {
  Tape& t = bind.tape();
  return ops::add_row(t, ops::matmul(t, x, bind(prefix + ".weight")), bind(prefix + ".bias"));
}

inline Var layer_norm(TapeBinding& bind, Var x, const std::string& prefix) {
  return ops::layer_norm(bind.tape(), x, bind(prefix + ".weight"), bind(prefix + ".bias"));
}

inline Var activate(Tape& t, Var x, Activation a) {
  return a == Activation::kQuickGelu ? ops::quick_gelu(t, x) : ops::gelu(t, x);
}

/// Multi-head attention with fused in-projection, before out_proj. Queries,
/// keys and values are all projected from `src`; the output keeps `src`'s row
/// count (rows outside every query group are zero).
inline Var multi_head_attention(TapeBinding& bind, Var src, const std::string& prefix,
                                std::shared_ptr<const AttentionGroups> groups, int heads,
                                Eigen::Index width) {
  Tape& t = bind.tape();
  Var qkv = linear(bind, src, prefix + ".in_proj");
  Var q = ops::slice_cols(t, qkv, 0, width);
  Var k = ops::slice_cols(t, qkv, width, width);
  Var v = ops::slice_cols(t, qkv, 2 * width, width);
  return ops::attention(t, q, k, v, std::move(groups), heads);
}

inline Var mlp(TapeBinding& bind, Var x, const std::string& prefix, Activation a) {
  Tape& t = bind.tape();
  return linear(bind, activate(t, linear(bind, x, prefix + ".c_fc"), a), prefix + ".c_proj");
}

}  // namespace vsla::detail
