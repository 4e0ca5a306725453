#include "vsla/losses.hpp"

#include "vsla/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace vsla {

void LossWeights::validate() const {
  for (double v : {triplet, id, i2t, t2i, margin, label_smoothing})
    if (!(v >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  if (label_smoothing >= 1.0) throw ConfigError("label_smoothing must be < 1");
}

Matrix normalize_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (!(n > 0)) throw std::domain_error("normalize_rows: zero-norm row");
    out.row(r) = x.row(r) / n;
  }
  return out;
}

Matrix normalize_rows_backward(const Matrix& x, const Matrix& d_normalized) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    const RowVector u = x.row(r) / n;
    out.row(r) = (d_normalized.row(r) - u * u.dot(d_normalized.row(r))) / n;
  }
  return out;
}

namespace {

void require_rows(const Matrix& m, std::size_t n, const char* what) {
  if (static_cast<std::size_t>(m.rows()) != n)
    throw std::invalid_argument(std::string(what) + ": row count does not match label count");
}

std::map<int, int> text_index(std::span<const int> text_labels) {
  std::map<int, int> idx;
  for (std::size_t u = 0; u < text_labels.size(); ++u) idx[text_labels[u]] = static_cast<int>(u);
  return idx;
}

int lookup(const std::map<int, int>& idx, int label) {
  auto it = idx.find(label);
  if (it == idx.end())
    throw std::out_of_range("label " + std::to_string(label) + " has no text embedding");
  return it->second;
}

/// log-sum-exp of a vector and its softmax.
double log_softmax_into(const Eigen::VectorXd& z, Eigen::VectorXd& p) {
  const double mx = z.maxCoeff();
  p = (z.array() - mx).exp();
  const double s = p.sum();
  p /= s;
  return mx + std::log(s);
}

/// Shared tail: turn d(loss)/d(scaled cosine) into gradients on the raw inputs.
ContrastiveLoss finish(double value, const Matrix& d_logits, const Matrix& vn, const Matrix& tn,
                       const Matrix& visual, const Matrix& text, double scale) {
  const Matrix d_sim = d_logits * scale;
  ContrastiveLoss out;
  out.value = value;
  out.d_visual = normalize_rows_backward(visual, d_sim * tn);
  out.d_text = normalize_rows_backward(text, d_sim.transpose() * vn);
  return out;
}

}  // namespace

ContrastiveLoss loss_t2i(const Matrix& visual, std::span<const int> labels, const Matrix& text_rows,
                         std::span<const int> text_labels, const SimilarityConfig& sim) {
  require_rows(visual, labels.size(), "loss_t2i");
  require_rows(text_rows, text_labels.size(), "loss_t2i");
  const auto idx = text_index(text_labels);
  const Matrix vn = normalize_rows(visual), tn = normalize_rows(text_rows);
  const Matrix z = sim.logit_scale * vn * tn.transpose();  // B x U
  const std::set<int> distinct(labels.begin(), labels.end());
  const double inv_labels = 1.0 / static_cast<double>(distinct.size());

  Matrix dz = Matrix::Zero(z.rows(), z.cols());
  double total = 0.0;
  Eigen::VectorXd p;
  for (int y : distinct) {
    const int u = lookup(idx, y);
    const double lse = log_softmax_into(z.col(u), p);
    std::vector<Eigen::Index> pos;
    for (std::size_t b = 0; b < labels.size(); ++b)
      if (labels[b] == y) pos.push_back(static_cast<Eigen::Index>(b));
    const double inv_pos = 1.0 / static_cast<double>(pos.size());
    double term = 0.0;
    for (auto b : pos) term -= (z(b, u) - lse);
    total += term * inv_pos;
    dz.col(u) += p * inv_labels;
    for (auto b : pos) dz(b, u) -= inv_pos * inv_labels;
  }
  return finish(total * inv_labels, dz, vn, tn, visual, text_rows, sim.logit_scale);
}

ContrastiveLoss loss_i2t(const Matrix& visual, std::span<const int> labels, const Matrix& text_rows,
                         std::span<const int> text_labels, const SimilarityConfig& sim) {
  require_rows(visual, labels.size(), "loss_i2t");
  require_rows(text_rows, text_labels.size(), "loss_i2t");
  const auto idx = text_index(text_labels);
  const Matrix vn = normalize_rows(visual), tn = normalize_rows(text_rows);
  const Matrix z = sim.logit_scale * vn * tn.transpose();
  const double inv_b = 1.0 / static_cast<double>(labels.size());

  Matrix dz(z.rows(), z.cols());
  double total = 0.0;
  Eigen::VectorXd p;
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    const int u = lookup(idx, labels[static_cast<std::size_t>(b)]);
    const double lse = log_softmax_into(z.row(b).transpose(), p);
    total -= z(b, u) - lse;
    dz.row(b) = p.transpose() * inv_b;
    dz(b, u) -= inv_b;
  }
  return finish(total * inv_b, dz, vn, tn, visual, text_rows, sim.logit_scale);
}

ContrastiveLoss loss_stage1(const Matrix& visual, std::span<const int> labels, const Matrix& text_rows,
                            std::span<const int> text_labels, const SimilarityConfig& sim) {
  ContrastiveLoss a = loss_i2t(visual, labels, text_rows, text_labels, sim);
  const ContrastiveLoss b = loss_t2i(visual, labels, text_rows, text_labels, sim);
  a.value += b.value;
  a.d_visual += b.d_visual;
  a.d_text += b.d_text;
  return a;
}

std::vector<double> smoothed_target(int label, int classes, double label_smoothing) {
  if (label < 0 || label >= classes)
    throw std::out_of_range("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  std::vector<double> q(static_cast<std::size_t>(classes), label_smoothing / classes);
  q[static_cast<std::size_t>(label)] += 1.0 - label_smoothing;
  return q;
}

namespace {

/// Mean smoothed cross-entropy over rows of `z`; returns value and d/dz.
double smoothed_ce(const Matrix& z, std::span<const int> labels, double ls, Matrix& dz) {
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  dz.resize(z.rows(), z.cols());
  double total = 0.0;
  Eigen::VectorXd p;
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    const auto q = smoothed_target(labels[static_cast<std::size_t>(b)], static_cast<int>(z.cols()), ls);
    const double lse = log_softmax_into(z.row(b).transpose(), p);
    for (Eigen::Index k = 0; k < z.cols(); ++k) {
      total -= q[static_cast<std::size_t>(k)] * (z(b, k) - lse);
      dz(b, k) = (p(k) - q[static_cast<std::size_t>(k)]) * inv_b;
    }
  }
  return total * inv_b;
}

}  // namespace

CrossEntropyLoss loss_v2sce(const Matrix& visual, std::span<const int> labels, const Matrix& gallery,
                            const SimilarityConfig& sim, double label_smoothing) {
  require_rows(visual, labels.size(), "loss_v2sce");
  const Matrix vn = normalize_rows(visual), gn = normalize_rows(gallery);
  const Matrix z = sim.logit_scale * vn * gn.transpose();
  Matrix dz;
  CrossEntropyLoss out;
  out.value = smoothed_ce(z, labels, label_smoothing, dz);
  const Matrix d_sim = dz * sim.logit_scale;
  out.d_input = normalize_rows_backward(visual, d_sim * gn);
  out.d_gallery = normalize_rows_backward(gallery, d_sim.transpose() * vn);
  return out;
}

TripletLoss loss_triplet(const Matrix& e, std::span<const int> labels, double margin, bool soft_margin) {
  require_rows(e, labels.size(), "loss_triplet");
  const auto n = static_cast<Eigen::Index>(labels.size());
  {
    std::map<int, int> counts;
    for (int y : labels) ++counts[y];
    bool all_pairs = true;
    for (const auto& [y, c] : counts) all_pairs = all_pairs && c >= 2;
    if (counts.size() < 2 || !all_pairs)
      throw ConfigError("loss_triplet: batch needs >= 2 identities with >= 2 samples each");
  }
  Matrix dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      dist(i, j) = std::sqrt(std::max((e.row(i) - e.row(j)).squaredNorm(), 1e-24));

  TripletLoss out;
  out.d_embeddings = Matrix::Zero(e.rows(), e.cols());
  out.hardest_positive.resize(static_cast<std::size_t>(n));
  out.hardest_negative.resize(static_cast<std::size_t>(n));
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index p = -1, q = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (p < 0 || dist(i, j) > dist(i, p)) p = j;
      } else if (q < 0 || dist(i, j) < dist(i, q)) {
        q = j;
      }
    }
    const double dp = dist(i, p), dn = dist(i, q);
    out.hardest_positive[i] = dp;
    out.hardest_negative[i] = dn;
    double slope;
    if (soft_margin) {
      const double x = dp - dn;
      out.value += x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      slope = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double h = dp - dn + margin;
      out.value += std::max(h, 0.0);
      slope = h > 0 ? 1.0 : 0.0;
    }
    if (slope == 0.0) continue;
    const RowVector gp = (e.row(i) - e.row(p)) / dp;
    const RowVector gn = (e.row(i) - e.row(q)) / dn;
    out.d_embeddings.row(i) += slope * inv_n * (gp - gn);
    out.d_embeddings.row(p) -= slope * inv_n * gp;
    out.d_embeddings.row(q) += slope * inv_n * gn;
  }
  out.value *= inv_n;
  return out;
}

CrossEntropyLoss loss_id(const Matrix& logits, std::span<const int> labels, double label_smoothing) {
  require_rows(logits, labels.size(), "loss_id");
  CrossEntropyLoss out;
  out.value = smoothed_ce(logits, labels, label_smoothing, out.d_input);
  return out;
}

Stage2Loss loss_stage2(const Matrix& visual, const Matrix& logits, std::span<const int> labels,
                       const Matrix& gallery, const SimilarityConfig& sim, const LossWeights& w) {
  std::vector<int> distinct(labels.begin(), labels.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  Matrix text_rows(static_cast<Eigen::Index>(distinct.size()), gallery.cols());
  for (std::size_t u = 0; u < distinct.size(); ++u) {
    if (distinct[u] < 0 || distinct[u] >= gallery.rows())
      throw std::out_of_range("loss_stage2: label outside the text gallery");
    text_rows.row(static_cast<Eigen::Index>(u)) = gallery.row(distinct[u]);
  }

  const auto v2s = loss_v2sce(visual, labels, gallery, sim, w.label_smoothing);
  const auto tri = loss_triplet(visual, labels, w.margin, w.soft_margin);
  const auto id = loss_id(logits, labels, w.label_smoothing);
  const auto i2t = loss_i2t(visual, labels, text_rows, distinct, sim);
  const auto t2i = loss_t2i(visual, labels, text_rows, distinct, sim);

  Stage2Loss out;
  out.terms = {v2s.value, tri.value, id.value, i2t.value, t2i.value};
  out.total = v2s.value + w.triplet * tri.value + w.id * id.value + w.i2t * i2t.value + w.t2i * t2i.value;
  out.d_visual = v2s.d_input + w.triplet * tri.d_embeddings + w.i2t * i2t.d_visual + w.t2i * t2i.d_visual;
  out.d_logits = w.id * id.d_input;
  return out;
}

}  // namespace vsla
