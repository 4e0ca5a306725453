#pragma once

// Random problem instances shared by the gradient checks.

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/reference.hpp"
#include "vsla/losses.hpp"
#include "vsla/rng.hpp"
#include "vsla/vision_encoder.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <numeric>
#include <vector>

namespace inst {

using namespace vsla;

struct Instance {
  Matrix visual, text, gallery, logits;
  std::vector<int> labels, text_labels;
  SimilarityConfig sim;
};

// P identities x K clips out of `classes`, with random embeddings.
Instance make_instance(std::uint64_t seed) {
  auto rng = make_rng({seed, 0x1055});
  const int classes = 3 + static_cast<int>(uniform_int(rng, 0, 3));
  const int P = 2 + static_cast<int>(uniform_int(rng, 0, classes - 2));
  const int K = 2 + static_cast<int>(uniform_int(rng, 0, 1));
  const int d = 3 + static_cast<int>(uniform_int(rng, 0, 3));
  std::vector<int> ids(static_cast<std::size_t>(classes));
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  Instance in;
  for (int p = 0; p < P; ++p)
    for (int k = 0; k < K; ++k) in.labels.push_back(ids[p]);
  in.text_labels.assign(ids.begin(), ids.begin() + P);
  std::sort(in.text_labels.begin(), in.text_labels.end());
  in.visual = gaussian(P * K, d, 1.0, rng);
  in.gallery = gaussian(classes, d, 1.0, rng);
  in.text.resize(P, d);
  for (int u = 0; u < P; ++u) in.text.row(u) = in.gallery.row(in.text_labels[u]);
  in.logits = gaussian(P * K, classes, 1.0, rng);
  in.sim.logit_scale = 1.0 + 4.0 * uniform01(rng);
  return in;
}

struct EncoderCase {
  ParamStore store;
  VisionConfig cfg;
  EncoderMode mode;
  std::vector<Clip> clips;
  GroupMask trainable;
};

EncoderCase make_case(std::uint64_t seed) {
  auto rng = make_rng({seed, 0xe4c});
  EncoderCase c;
  c.cfg = VisionConfig::tiny();
  c.cfg.vit.width = 16;
  c.cfg.vit.heads = 2;
  c.cfg.vit.projection_dim = 8;
  c.cfg.ifa.bottleneck = 4;
  c.cfg.cfaa.bottleneck = 4;
  c.cfg.cfaa.heads = 1 + static_cast<int>(uniform_int(rng, 0, 1)) ;
  c.cfg.pbp.length = 2;
  c.cfg.pbp.depth = static_cast<int>(uniform_int(rng, 1, 2));
  c.cfg.vit.image_height = 16;
  c.cfg.vit.image_width = 8;
  const EncoderMode modes[] = {EncoderMode::kIfa, EncoderMode::kIfaCfaa, EncoderMode::kIfaCfaaPbp};
  c.mode = modes[uniform_int(rng, 0, 2)];
  init_vision(c.store, c.cfg, seed);
  fx::randomize(c.store, "ifa.", 0.3, seed + 1);
  fx::randomize(c.store, "cfaa.", 0.3, seed + 2);
  fx::randomize(c.store, "pbp.", 0.5, seed + 3);
  const int n = 1 + static_cast<int>(uniform_int(rng, 0, 1));
  for (int i = 0; i < n; ++i)
    c.clips.push_back(fx::random_clip(c.cfg, 1 + static_cast<int>(uniform_int(rng, 0, 2)),
                                      uniform_int(rng, 0, 1) ? PlatformTag::kAerial : PlatformTag::kGround,
                                      seed * 7 + i));
  c.trainable = GroupMask{ParamGroup::kIfa, ParamGroup::kCfaa, ParamGroup::kPbp};
  if (seed % 5 == 0) c.trainable.set(ParamGroup::kBackbone);
  return c;
}

double encoder_objective(const EncoderCase& c, const ParamStore& s, const Matrix& g_frames, const Matrix& g_pool) {
  std::vector<const Clip*> ptrs;
  for (const auto& clip : c.clips) ptrs.push_back(&clip);
  Tape t(false);
  TapeBinding bind(t, s, GroupMask{});
  const auto out = encode_clips(bind, c.cfg, c.mode, ptrs);
  return t.value(out.frame_embeddings).cwiseProduct(g_frames).sum() + t.value(out.pooled).cwiseProduct(g_pool).sum();
}


/// Relative error of the analytic gradient of each loss term against central
/// differences of the straight-line oracle, over every input the term depends on.
inline std::map<std::string, double> loss_gradient_errors(const Instance& in, double label_smoothing = 0.1,
                                                         double margin = 0.3) {
  const double sc = in.sim.logit_scale, ls = label_smoothing;
  std::map<std::string, double> err;
  auto worst = [&](const std::string& k, double e) { err[k] = std::max(err[k], e); };

  const auto t2i = loss_t2i(in.visual, in.labels, in.text, in.text_labels, in.sim);
  worst("t2i", gc::relative_error(t2i.d_visual, gc::numeric_grad([&](const Matrix& v) {
                                    return ref::t2i(v, in.labels, in.text, in.text_labels, sc);
                                  }, in.visual)));
  worst("t2i", gc::relative_error(t2i.d_text, gc::numeric_grad([&](const Matrix& t) {
                                    return ref::t2i(in.visual, in.labels, t, in.text_labels, sc);
                                  }, in.text)));
  const auto i2t = loss_i2t(in.visual, in.labels, in.text, in.text_labels, in.sim);
  worst("i2t", gc::relative_error(i2t.d_visual, gc::numeric_grad([&](const Matrix& v) {
                                    return ref::i2t(v, in.labels, in.text, in.text_labels, sc);
                                  }, in.visual)));
  worst("i2t", gc::relative_error(i2t.d_text, gc::numeric_grad([&](const Matrix& t) {
                                    return ref::i2t(in.visual, in.labels, t, in.text_labels, sc);
                                  }, in.text)));
  const auto v2s = loss_v2sce(in.visual, in.labels, in.gallery, in.sim, ls);
  worst("v2sce", gc::relative_error(v2s.d_input, gc::numeric_grad([&](const Matrix& v) {
                                      return ref::v2sce(v, in.labels, in.gallery, sc, ls);
                                    }, in.visual)));
  const auto tri = loss_triplet(in.visual, in.labels, margin);
  worst("triplet", gc::relative_error(tri.d_embeddings, gc::numeric_grad([&](const Matrix& v) {
                                        return ref::triplet(v, in.labels, margin);
                                      }, in.visual)));
  const auto id = loss_id(in.logits, in.labels, ls);
  worst("id", gc::relative_error(id.d_input, gc::numeric_grad([&](const Matrix& z) {
                                   return ref::id_loss(z, in.labels, ls);
                                 }, in.logits)));
  return err;
}

/// Directional derivative of sum(frames * Gf) + sum(pooled * Gp) along one random
/// direction over every trained tensor, analytic versus central difference.
inline double encoder_gradient_error(const EncoderCase& c, std::uint64_t seed) {
  std::vector<const Clip*> ptrs;
  int frames = 0;
  for (const auto& clip : c.clips) {
    ptrs.push_back(&clip);
    frames += clip.frames;
  }
  auto rng = make_rng({seed, 0xd1});
  const Matrix gf = gaussian(frames, c.cfg.vit.projection_dim, 1.0, rng);
  const Matrix gp = gaussian(static_cast<Eigen::Index>(c.clips.size()), c.cfg.vit.projection_dim, 1.0, rng);

  Tape t;
  TapeBinding bind(t, c.store, c.trainable);
  const auto out = encode_clips(bind, c.cfg, c.mode, ptrs);
  Var l = ops::add(t, ops::external_loss(t, {out.frame_embeddings}, 0.0, {gf}),
                   ops::external_loss(t, {out.pooled}, 0.0, {gp}));
  t.backward(l);
  const auto grads = bind.gradients();
  if (grads.empty()) return 1.0;

  ParamStore plus = c.store, minus = c.store;
  double analytic = 0;
  const double h = 1e-5;
  for (const auto& [name, g] : grads) {
    const Matrix u = gaussian(g.rows(), g.cols(), 1.0, rng);
    analytic += g.cwiseProduct(u).sum();
    plus.at(name).value += h * u;
    minus.at(name).value -= h * u;
  }
  const double numeric = (encoder_objective(c, plus, gf, gp) - encoder_objective(c, minus, gf, gp)) / (2 * h);
  return fx::rel_err(analytic, numeric);
}

}  // namespace inst
