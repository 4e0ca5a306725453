#pragma once

#include "vsla/tape.hpp"

#include <span>
#include <vector>

namespace vsla {

/// Cosine similarity scaled by a frozen logit scale inside every softmax.
struct SimilarityConfig {
  double logit_scale = 1.0;
};

struct LossWeights {
  double triplet = 1.0;          // beta
  double id = 0.25;              // gamma
  double i2t = 1.0;              // delta
  double t2i = 1.0;              // epsilon
  double margin = 0.3;           // theta
  double label_smoothing = 0.1;
  bool soft_margin = false;      // softplus(d_p - d_n) instead of the hinge

  void validate() const;
};

/// Value of a loss and its gradient with respect to each input.
struct ContrastiveLoss {
  double value = 0.0;
  Matrix d_visual;
  Matrix d_text;
};

struct CrossEntropyLoss {
  double value = 0.0;
  Matrix d_input;    // d/d(visual) for v2sce, d/d(logits) for the id loss
  Matrix d_gallery;  // v2sce only
};

struct TripletLoss {
  double value = 0.0;
  Matrix d_embeddings;
  std::vector<double> hardest_positive;  // d_p per anchor
  std::vector<double> hardest_negative;  // d_n per anchor
};

/// Row-wise L2 normalisation and its backward pass.
Matrix normalize_rows(const Matrix& x);
Matrix normalize_rows_backward(const Matrix& x, const Matrix& d_normalized);

/// Text-to-image: for every distinct batch label y, the mean over its positive
/// images of -log softmax over the B images of s(I_b, T_y); averaged over labels.
/// `text_rows[u]` embeds label `text_labels[u]`.
ContrastiveLoss loss_t2i(const Matrix& visual, std::span<const int> labels, const Matrix& text_rows,
                         std::span<const int> text_labels, const SimilarityConfig& sim);

/// Image-to-text: for every image, -log softmax of its own label's text among
/// the text rows; averaged over images.
ContrastiveLoss loss_i2t(const Matrix& visual, std::span<const int> labels, const Matrix& text_rows,
                         std::span<const int> text_labels, const SimilarityConfig& sim);

/// Stage-one objective: i2t + t2i.
ContrastiveLoss loss_stage1(const Matrix& visual, std::span<const int> labels, const Matrix& text_rows,
                            std::span<const int> text_labels, const SimilarityConfig& sim);

/// Smoothed target q_k = (1 - ls) [k == y] + ls / N.
std::vector<double> smoothed_target(int label, int classes, double label_smoothing);

/// Visual-to-semantic cross-entropy against the full text gallery (N_train rows).
CrossEntropyLoss loss_v2sce(const Matrix& visual, std::span<const int> labels, const Matrix& gallery,
                            const SimilarityConfig& sim, double label_smoothing);

/// Batch-hard triplet loss on Euclidean distances of unnormalised embeddings.
TripletLoss loss_triplet(const Matrix& embeddings, std::span<const int> labels, double margin,
                         bool soft_margin = false);

/// Smoothed cross-entropy of classifier logits.
CrossEntropyLoss loss_id(const Matrix& logits, std::span<const int> labels, double label_smoothing);

struct Stage2Terms {
  double v2sce = 0.0;
  double triplet = 0.0;
  double id = 0.0;
  double i2t = 0.0;
  double t2i = 0.0;
};

struct Stage2Loss {
  double total = 0.0;
  Stage2Terms terms;
  Matrix d_visual;
  Matrix d_logits;
};

/// L_v2sce + beta L_tri + gamma L_id + delta L_i2t + epsilon L_t2i on video-level
/// embeddings; the text side is frozen, so no text gradient is returned.
Stage2Loss loss_stage2(const Matrix& visual, const Matrix& logits, std::span<const int> labels,
                       const Matrix& gallery, const SimilarityConfig& sim, const LossWeights& w);

}  // namespace vsla
