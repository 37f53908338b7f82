#pragma once

#include <string>
#include <utility>

#include "alignclip/geometry.hpp"

namespace alignclip {

// Learnable softmax temperature stored as a log-scale. The effective
// multiplier is s = min(exp(log_scale), clamp_max); while the clamp is active
// the parameter receives zero gradient.
struct Temperature {
  double log_scale = 2.6592600369327783;  // ln(1/0.07)
  double clamp_max = 100.0;

  double scale() const;
  bool clamped() const;
};

enum class SeparationMode { none, image_only, text_only, both };

std::string to_string(SeparationMode m);
SeparationMode separation_mode_from_string(const std::string& s);

// Weights and switches for the combined objective:
//   total = alpha * crsep + beta * (separation terms enabled by mode)
// rescaling_enabled controls whether intra-modality similarities are weighted
// by semantic distance or taken as-is.
struct LossConfig {
  double alpha = 1.0;
  double beta = 0.5;
  SeparationMode mode = SeparationMode::image_only;
  bool rescaling_enabled = true;

  void validate() const;
};

// Every term is reported even when its weight is zero; terms disabled by
// `mode` are reported as 0. total must reconstruct from the parts.
struct LossBreakdown {
  double clip = 0.0;
  double crsep = 0.0;
  double imsep_image = 0.0;
  double imsep_text = 0.0;
  double total = 0.0;
};

// One training view: image embeddings, text embeddings, and the ground-truth
// semantic descriptors the separation terms are weighted by. Row i of each
// part describes the same underlying sample; labels are identity.
struct PairedBatch {
  EmbeddingBatch image;     // normalized, b x d
  EmbeddingBatch text;      // normalized, b x d
  EmbeddingBatch semantic;  // raw descriptors, b x k, rows nonzero
};

struct LossGradients {
  Matrix d_image;      // d total / d image values
  Matrix d_text;       // d total / d text values
  double d_log_scale = 0.0;
  LossBreakdown breakdown;
};

// Scaled cross-modal logit matrices (image->text, text->image). The second is
// the transpose of the first.
std::pair<SimilarityMatrix, SimilarityMatrix> clip_logits(const EmbeddingBatch& image,
                                                          const EmbeddingBatch& text,
                                                          const Temperature& temp);

// Symmetric InfoNCE with identity labels: mean of the two directional
// cross-entropies.
double clip_loss(const EmbeddingBatch& image, const EmbeddingBatch& text, const Temperature& temp);

// Pairwise cosine similarity of semantic descriptors and its complement.
// Returns (S, D) with diag(S) forced to exactly 1 and diag(D) to exactly 0.
// D entries can exceed 1 when descriptors point away from each other.
std::pair<SimilarityMatrix, SimilarityMatrix> semantic_distance(const EmbeddingBatch& semantic);

// Element-wise product, used to weight intra-modality similarity by semantic
// distance.
SimilarityMatrix rescale(const SimilarityMatrix& sim, const SimilarityMatrix& dist);

// Separation logits for one modality: the cross-modal diagonal is kept as the
// positive, off-diagonals are the intra-modality similarities weighted by
// semantic distance (or left unweighted when rescaling is off).
// `dist` must have an exactly zero diagonal.
SimilarityMatrix vsep_logits(const EmbeddingBatch& own, const EmbeddingBatch& other,
                             const SimilarityMatrix& dist, const Temperature& temp,
                             bool rescaling_enabled);

// Cross-entropy of the separation logits against identity labels, for the
// image and text sides respectively.
double imsep_loss(const PairedBatch& batch, const Temperature& temp, bool rescaling_enabled);
double tsep_loss(const PairedBatch& batch, const Temperature& temp, bool rescaling_enabled);

// Sum (not mean) of the two directional cross-entropies; equals 2 * clip_loss.
double crsep_loss(const EmbeddingBatch& image, const EmbeddingBatch& text, const Temperature& temp);

LossBreakdown total_loss(const PairedBatch& batch, const Temperature& temp, const LossConfig& cfg);

// Analytic gradients of total w.r.t. the embedding entries and the
// temperature log-scale. Semantic descriptors are constants.
LossGradients loss_gradients(const PairedBatch& batch, const Temperature& temp, const LossConfig& cfg);

}  // namespace alignclip
