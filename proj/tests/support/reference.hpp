#pragma once

// Straight-line reimplementations of the encoders and losses, written from the
// formulas with plain Eigen loops. Used as oracles for the tape-based code.

#include "vsla/params.hpp"
#include "vsla/sampling.hpp"
#include "vsla/text_encoder.hpp"
#include "vsla/vision_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace ref {

using vsla::Matrix;
using vsla::RowVector;

inline const Matrix& P(const vsla::ParamStore& s, const std::string& name) { return s.at(name).value; }

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, double eps = 1e-5) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mean = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= static_cast<double>(x.cols());
    double var = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + eps) * g(0, c) + b(0, c);
  }
  return y;
}

inline Matrix ln(const vsla::ParamStore& s, const Matrix& x, const std::string& prefix) {
  return layer_norm(x, P(s, prefix + ".weight"), P(s, prefix + ".bias"));
}

inline Matrix linear(const vsla::ParamStore& s, const Matrix& x, const std::string& prefix) {
  Matrix y = x * P(s, prefix + ".weight");
  y.rowwise() += RowVector(P(s, prefix + ".bias").row(0));
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double quick_gelu(double x) { return x / (1.0 + std::exp(-1.702 * x)); }

inline Matrix activate(const Matrix& x, vsla::Activation a) {
  Matrix y = x;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    y.data()[i] = a == vsla::Activation::kGelu ? gelu(y.data()[i]) : quick_gelu(y.data()[i]);
  return y;
}

// Scaled dot-product attention, head by head; query i sees keys 0..i when causal.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, bool causal = false) {
  const Eigen::Index d = q.cols(), dh = d / heads;
  Matrix out = Matrix::Zero(q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      std::vector<double> score(static_cast<std::size_t>(k.rows()), -std::numeric_limits<double>::infinity());
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < k.rows(); ++j) {
        if (causal && j > i) continue;
        double dot = 0;
        for (Eigen::Index c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        score[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, score[j]);
      }
      double z = 0;
      for (auto& sc : score) {
        sc = std::isinf(sc) ? 0.0 : std::exp(sc - mx);
        z += sc;
      }
      for (Eigen::Index j = 0; j < k.rows(); ++j)
        for (Eigen::Index c = 0; c < dh; ++c) out(i, h * dh + c) += score[j] / z * v(j, h * dh + c);
    }
  }
  return out;
}

// Self-attention of `src` rows; only the first `n_query` rows produce outputs.
inline Matrix self_attention(const vsla::ParamStore& s, const Matrix& src, const std::string& prefix, int heads,
                             Eigen::Index n_query, bool causal = false) {
  const Eigen::Index d = src.cols();
  const Matrix qkv = linear(s, src, prefix + ".in_proj");
  const Matrix q = qkv.block(0, 0, n_query, d);
  const Matrix k = qkv.block(0, d, src.rows(), d);
  const Matrix v = qkv.block(0, 2 * d, src.rows(), d);
  return linear(s, attention(q, k, v, heads, causal), prefix + ".out_proj");
}

// Per-frame embeddings (T x projection) of one clip.
inline Matrix vision_forward(const vsla::ParamStore& s, const vsla::VisionConfig& cfg, vsla::EncoderMode mode,
                             const vsla::Clip& clip) {
  const auto& v = cfg.vit;
  const auto f = vsla::flags_of(mode);
  const int ps = v.patch_size, gh = v.image_height / ps, gw = v.image_width / ps, S = gh * gw + 1, D = v.width;
  const int T = clip.frames;
  std::vector<Matrix> x(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    Matrix tok(S, D);
    tok.row(0) = P(s, "visual.class_embedding").row(0);
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        RowVector patch(3 * ps * ps);
        for (int c = 0; c < 3; ++c)
          for (int py = 0; py < ps; ++py)
            for (int px = 0; px < ps; ++px)
              patch((c * ps + py) * ps + px) = clip.at(t, gy * ps + py, gx * ps + px, c);
        tok.row(1 + gy * gw + gx) = patch * P(s, "visual.conv1.weight");
      }
    tok += P(s, "visual.positional_embedding");
    x[t] = ln(s, tok, "visual.ln_pre");
  }
  const bool pbp = f.pbp && cfg.pbp.depth > 0 && cfg.pbp.length > 0;
  const std::string plat = clip.platform == vsla::PlatformTag::kGround ? "ground" : "aerial";
  for (int k = 0; k < v.layers; ++k) {
    const std::string b = "visual.blocks." + std::to_string(k);
    std::vector<Matrix> xp(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      Matrix h = ln(s, x[t], b + ".ln_1");
      if (pbp && k < cfg.pbp.depth) {
        const Matrix& prompts = P(s, "pbp." + plat + "." + std::to_string(k));
        Matrix src(S + prompts.rows(), D);
        src << h, prompts;
        h = src;
      }
      xp[t] = self_attention(s, h, b + ".attn", v.heads, S) + x[t];
    }
    if (f.cfaa) {
      const std::string c = "cfaa." + std::to_string(k);
      const int a = cfg.cfaa.bottleneck;
      std::vector<Matrix> z(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) z[t] = ln(s, linear(s, x[t], c + ".down"), c + ".ln");
      for (int n = 0; n < S; ++n) {
        Matrix across(T, a);
        for (int t = 0; t < T; ++t) across.row(t) = z[t].row(n);
        const Matrix o = linear(s, self_attention(s, across, c + ".attn", cfg.cfaa.resolved_heads(), T), c + ".up");
        for (int t = 0; t < T; ++t) xp[t].row(n) += o.row(t);
      }
    }
    for (int t = 0; t < T; ++t) {
      Matrix y = linear(s, activate(linear(s, ln(s, xp[t], b + ".ln_2"), b + ".mlp.c_fc"), v.activation),
                        b + ".mlp.c_proj") +
                 xp[t];
      if (f.ifa) {
        const std::string i = "ifa." + std::to_string(k);
        y += linear(s, activate(linear(s, xp[t], i + ".down"), vsla::Activation::kGelu), i + ".up");
      }
      x[t] = y;
    }
  }
  Matrix out(T, v.projection_dim);
  for (int t = 0; t < T; ++t) out.row(t) = ln(s, x[t].row(0), "visual.ln_post") * P(s, "visual.proj");
  return out;
}

// Text embedding (1 x projection) of one identity.
inline RowVector text_forward(const vsla::ParamStore& s, const vsla::TextConfig& cfg, int label) {
  const int n = cfg.shared_prompts, m = cfg.id_tokens, W = cfg.width, ctx = cfg.context_length;
  const Matrix& tok = P(s, "text.token_embedding");
  const Matrix& shared = P(s, "prompts.shared");
  const Matrix& ids = P(s, "prompts.ids");
  Matrix x(ctx, W);
  int r = 0;
  x.row(r++) = tok.row(0);
  for (int i = 0; i < n / 2; ++i) x.row(r++) = shared.row(i);
  for (int j = 0; j < m; ++j) x.row(r++) = ids.row(label * m + j);
  for (int i = n / 2; i < n; ++i) x.row(r++) = shared.row(i);
  const int eos = r;
  x.row(r++) = tok.row(1);
  while (r < ctx) x.row(r++) = tok.row(2);
  x += P(s, "text.positional_embedding");
  for (int k = 0; k < cfg.layers; ++k) {
    const std::string b = "text.blocks." + std::to_string(k);
    x = x + self_attention(s, ln(s, x, b + ".ln_1"), b + ".attn", cfg.heads, ctx, true);
    x = x + linear(s, activate(linear(s, ln(s, x, b + ".ln_2"), b + ".mlp.c_fc"), cfg.activation), b + ".mlp.c_proj");
  }
  return ln(s, x.row(eos), "text.ln_final") * P(s, "text.projection");
}

inline RowVector unit(const RowVector& v) { return v / v.norm(); }

inline double cosine(const RowVector& a, const RowVector& b) { return a.dot(b) / (a.norm() * b.norm()); }

// -log softmax_i(z) for a vector of logits.
inline double nll(const std::vector<double>& z, std::size_t i) {
  double mx = *std::max_element(z.begin(), z.end()), sum = 0;
  for (double v : z) sum += std::exp(v - mx);
  return -(z[i] - mx - std::log(sum));
}

inline double t2i(const Matrix& V, const std::vector<int>& y, const Matrix& T, const std::vector<int>& ty, double scale) {
  std::set<int> labels(y.begin(), y.end());
  double total = 0;
  for (int lab : labels) {
    const auto u = static_cast<Eigen::Index>(std::find(ty.begin(), ty.end(), lab) - ty.begin());
    std::vector<double> z;
    for (Eigen::Index b = 0; b < V.rows(); ++b) z.push_back(scale * cosine(V.row(b), T.row(u)));
    double acc = 0;
    int count = 0;
    for (std::size_t p = 0; p < y.size(); ++p)
      if (y[p] == lab) {
        acc += nll(z, p);
        ++count;
      }
    total += acc / count;
  }
  return total / static_cast<double>(labels.size());
}

inline double i2t(const Matrix& V, const std::vector<int>& y, const Matrix& T, const std::vector<int>& ty, double scale) {
  double total = 0;
  for (Eigen::Index b = 0; b < V.rows(); ++b) {
    std::vector<double> z;
    for (Eigen::Index u = 0; u < T.rows(); ++u) z.push_back(scale * cosine(V.row(b), T.row(u)));
    const auto own = static_cast<std::size_t>(std::find(ty.begin(), ty.end(), y[b]) - ty.begin());
    total += nll(z, own);
  }
  return total / static_cast<double>(V.rows());
}

inline double smoothed_ce(const std::vector<double>& z, int y, double ls) {
  const auto n = z.size();
  double loss = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double q = (static_cast<int>(k) == y ? 1.0 - ls : 0.0) + ls / static_cast<double>(n);
    loss += q * nll(z, k);
  }
  return loss;
}

inline double v2sce(const Matrix& V, const std::vector<int>& y, const Matrix& G, double scale, double ls) {
  double total = 0;
  for (Eigen::Index b = 0; b < V.rows(); ++b) {
    std::vector<double> z;
    for (Eigen::Index k = 0; k < G.rows(); ++k) z.push_back(scale * cosine(V.row(b), G.row(k)));
    total += smoothed_ce(z, y[b], ls);
  }
  return total / static_cast<double>(V.rows());
}

inline double id_loss(const Matrix& logits, const std::vector<int>& y, double ls) {
  double total = 0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    std::vector<double> z(logits.row(b).data(), logits.row(b).data() + logits.cols());
    total += smoothed_ce(z, y[b], ls);
  }
  return total / static_cast<double>(logits.rows());
}

// Exhaustive mining: every (positive, negative) pair per anchor, keep the hardest.
inline double triplet(const Matrix& E, const std::vector<int>& y, double margin, bool soft = false) {
  double total = 0;
  for (Eigen::Index a = 0; a < E.rows(); ++a) {
    double worst = -std::numeric_limits<double>::infinity();
    for (Eigen::Index p = 0; p < E.rows(); ++p) {
      if (p == a || y[p] != y[a]) continue;
      for (Eigen::Index n = 0; n < E.rows(); ++n) {
        if (y[n] == y[a]) continue;
        worst = std::max(worst, (E.row(a) - E.row(p)).norm() - (E.row(a) - E.row(n)).norm());
      }
    }
    total += soft ? std::log1p(std::exp(worst)) : std::max(0.0, worst + margin);
  }
  return total / static_cast<double>(E.rows());
}

}  // namespace ref
