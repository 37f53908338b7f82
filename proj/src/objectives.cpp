#include "alignclip/objectives.hpp"

#include <cmath>
#include <string>

#include "alignclip/errors.hpp"
#include "gemm.hpp"

namespace alignclip {

double Temperature::scale() const {
  if (!std::isfinite(log_scale)) throw NonFinite("temperature log_scale is not finite");
  if (!(clamp_max > 0.0)) throw InvalidConfig("temperature clamp_max must be positive");
  double s = std::exp(log_scale);
  return s < clamp_max ? s : clamp_max;
}

bool Temperature::clamped() const { return std::exp(log_scale) >= clamp_max; }

std::string to_string(SeparationMode m) {
  switch (m) {
    case SeparationMode::none: return "none";
    case SeparationMode::image_only: return "image_only";
    case SeparationMode::text_only: return "text_only";
    case SeparationMode::both: return "both";
  }
  return "none";
}

SeparationMode separation_mode_from_string(const std::string& s) {
  if (s == "none") return SeparationMode::none;
  if (s == "image_only") return SeparationMode::image_only;
  if (s == "text_only") return SeparationMode::text_only;
  if (s == "both") return SeparationMode::both;
  throw InvalidConfig("unknown separation_mode \"" + s + "\"");
}

void LossConfig::validate() const {
  if (!std::isfinite(alpha) || alpha <= 0.0) throw InvalidConfig("loss alpha must be positive");
  if (!std::isfinite(beta) || beta < 0.0) throw InvalidConfig("loss beta must be non-negative");
  if (mode == SeparationMode::none && beta > 0.0)
    throw InvalidConfig("separation_mode none with beta > 0 would silently drop the separation term");
}

namespace {

void require_pair(const EmbeddingBatch& image, const EmbeddingBatch& text, const char* op) {
  if (!image.normalized || !text.normalized)
    throw DataError(std::string(op) + ": embeddings must be normalized");
  if (image.dim != text.dim)
    throw DimensionMismatch(std::string(op) + ": width mismatch, " + std::to_string(image.dim) +
                            " vs " + std::to_string(text.dim));
  if (image.rows != text.rows)
    throw DimensionMismatch(std::string(op) + ": row mismatch, " + std::to_string(image.rows) +
                            " vs " + std::to_string(text.rows));
  if (image.rows == 0) throw DimensionMismatch(std::string(op) + ": empty batch");
}

// raw pairwise products without the normalized-flag requirement of
// similarity(); callers above have already validated shapes
SimilarityMatrix gram(const EmbeddingBatch& a, const EmbeddingBatch& b) {
  SimilarityMatrix s(a.rows);
  detail::mm_nt(a.rows, b.rows, a.dim, a.values.data(), b.values.data(), s.values.data());
  return s;
}

// Cross-entropy against identity labels on scale*raw logits. When grad is
// non-null it receives d(mean CE)/d(logit) = (softmax - I)/b.
double ce_identity(const SimilarityMatrix& raw, double scale, SimilarityMatrix* grad) {
  size_t b = raw.rows;
  double total = 0.0;
  for (size_t i = 0; i < b; ++i) {
    const double* row = raw.row(i);
    double mx = row[0] * scale;
    for (size_t j = 0; j < b; ++j) {
      double l = row[j] * scale;
      if (!std::isfinite(l))
        throw NonFinite("cross_entropy: non-finite logit at (" + std::to_string(i) + "," +
                        std::to_string(j) + ")");
      if (l > mx) mx = l;
    }
    double sum = 0.0;
    for (size_t j = 0; j < b; ++j) sum += std::exp(row[j] * scale - mx);
    total += std::log(sum) - (row[i] * scale - mx);
    if (grad) {
      double* g = grad->row(i);
      double inv = 1.0 / (sum * static_cast<double>(b));
      for (size_t j = 0; j < b; ++j) g[j] = std::exp(row[j] * scale - mx) * inv;
      g[i] -= 1.0 / static_cast<double>(b);
    }
  }
  return total / static_cast<double>(b);
}

SimilarityMatrix transpose(const SimilarityMatrix& m) {
  SimilarityMatrix t(m.rows);
  for (size_t i = 0; i < m.rows; ++i)
    for (size_t j = 0; j < m.rows; ++j) t.at(j, i) = m.at(i, j);
  return t;
}

// Separation logits in raw (unscaled) form: cross-modal positives on the
// diagonal, distance-weighted intra-modality similarities elsewhere.
SimilarityMatrix sep_raw(const SimilarityMatrix& cross, const SimilarityMatrix& intra,
                         const SimilarityMatrix& dist, bool rescaling_enabled) {
  size_t b = cross.rows;
  SimilarityMatrix a(b);
  for (size_t i = 0; i < b; ++i) {
    for (size_t j = 0; j < b; ++j) {
      if (i == j)
        a.at(i, j) = cross.at(i, i);
      else
        a.at(i, j) = intra.at(i, j) * (rescaling_enabled ? dist.at(i, j) : 1.0);
    }
  }
  return a;
}

struct SepGrads {
  Matrix d_own;
  Matrix d_other;
  double d_raw_dot = 0.0;  // sum of G .* raw logits, for the temperature chain
};

// Gradients of one separation cross-entropy w.r.t. both embedding batches.
// own = the modality whose intra-similarities fill the off-diagonal.
SepGrads sep_backward(const EmbeddingBatch& own, const EmbeddingBatch& other,
                      const SimilarityMatrix& raw, const SimilarityMatrix& G,
                      const SimilarityMatrix& dist, bool rescaling_enabled, double scale) {
  size_t b = own.rows, d = own.dim;
  SepGrads out;
  out.d_own = Matrix(b, d);
  out.d_other = Matrix(b, d);
  // diagonal entries are cross-modal dots: d/d own_i = G_ii * other_i
  for (size_t i = 0; i < b; ++i) {
    double g = G.at(i, i) * scale;
    const double* oth = other.row(i);
    const double* ow = own.row(i);
    double* dow = out.d_own.row(i);
    double* dot = out.d_other.row(i);
    for (size_t k = 0; k < d; ++k) {
      dow[k] += g * oth[k];
      dot[k] += g * ow[k];
    }
  }
  // off-diagonals are own_i . own_j weighted by dist: with W = G .* dist
  // (zero diagonal), d/d own = (W + W^T) own
  SimilarityMatrix w(b);
  for (size_t i = 0; i < b; ++i)
    for (size_t j = 0; j < b; ++j)
      w.at(i, j) = i == j ? 0.0 : G.at(i, j) * (rescaling_enabled ? dist.at(i, j) : 1.0);
  SimilarityMatrix wsym(b);
  for (size_t i = 0; i < b; ++i)
    for (size_t j = 0; j < b; ++j) wsym.at(i, j) = w.at(i, j) + w.at(j, i);
  detail::mm_nn(b, d, b, wsym.values.data(), own.values.data(), out.d_own.v.data(), scale, 1.0);
  for (size_t i = 0; i < b; ++i)
    for (size_t j = 0; j < b; ++j) out.d_raw_dot += G.at(i, j) * raw.at(i, j);
  return out;
}

struct TotalState {
  LossBreakdown breakdown;
  LossGradients grads;
};

// One shared implementation so the reported breakdown and the gradients are
// produced by identical arithmetic.
TotalState total_impl(const PairedBatch& batch, const Temperature& temp, const LossConfig& cfg,
                      bool want_grads) {
  cfg.validate();
  require_pair(batch.image, batch.text, "total_loss");
  bool sep_image =
      cfg.mode == SeparationMode::image_only || cfg.mode == SeparationMode::both;
  bool sep_text = cfg.mode == SeparationMode::text_only || cfg.mode == SeparationMode::both;
  if ((sep_image || sep_text) && batch.semantic.rows != batch.image.rows)
    throw DimensionMismatch("total_loss: semantic rows " + std::to_string(batch.semantic.rows) +
                            " do not match batch rows " + std::to_string(batch.image.rows));

  size_t b = batch.image.rows;
  double s = temp.scale();
  double dsdt = temp.clamped() ? 0.0 : s;

  TotalState st;
  SimilarityMatrix cross = gram(batch.image, batch.text);
  SimilarityMatrix cross_t = transpose(cross);

  SimilarityMatrix gv(b), gt(b);
  double ce_v = ce_identity(cross, s, want_grads ? &gv : nullptr);
  double ce_t = ce_identity(cross_t, s, want_grads ? &gt : nullptr);
  st.breakdown.clip = 0.5 * (ce_v + ce_t);
  st.breakdown.crsep = ce_v + ce_t;

  if (want_grads) {
    st.grads.d_image = Matrix(b, batch.image.dim);
    st.grads.d_text = Matrix(b, batch.image.dim);
    // d crsep / d image = s * (Gv + Gt^T) text;  d / d text = s * (Gv^T + Gt) image
    SimilarityMatrix gi(b), gx(b);
    for (size_t i = 0; i < b; ++i)
      for (size_t j = 0; j < b; ++j) {
        gi.at(i, j) = gv.at(i, j) + gt.at(j, i);
        gx.at(i, j) = gv.at(j, i) + gt.at(i, j);
      }
    detail::mm_nn(b, batch.image.dim, b, gi.values.data(), batch.text.values.data(),
                  st.grads.d_image.v.data(), cfg.alpha * s, 1.0);
    detail::mm_nn(b, batch.image.dim, b, gx.values.data(), batch.image.values.data(),
                  st.grads.d_text.v.data(), cfg.alpha * s, 1.0);
    double dot = 0.0;
    for (size_t i = 0; i < b; ++i)
      for (size_t j = 0; j < b; ++j)
        dot += gv.at(i, j) * cross.at(i, j) + gt.at(i, j) * cross_t.at(i, j);
    st.grads.d_log_scale += cfg.alpha * dot * dsdt;
  }

  if (sep_image || sep_text) {
    auto [sem, dist] = semantic_distance(batch.semantic);
    (void)sem;
    if (sep_image) {
      SimilarityMatrix intra = gram(batch.image, batch.image);
      SimilarityMatrix raw = sep_raw(cross, intra, dist, cfg.rescaling_enabled);
      SimilarityMatrix g(b);
      st.breakdown.imsep_image = ce_identity(raw, s, want_grads ? &g : nullptr);
      if (want_grads) {
        SepGrads sg = sep_backward(batch.image, batch.text, raw, g, dist, cfg.rescaling_enabled, s);
        for (size_t i = 0; i < st.grads.d_image.v.size(); ++i) {
          st.grads.d_image.v[i] += cfg.beta * sg.d_own.v[i];
          st.grads.d_text.v[i] += cfg.beta * sg.d_other.v[i];
        }
        st.grads.d_log_scale += cfg.beta * sg.d_raw_dot * dsdt;
      }
    }
    if (sep_text) {
      SimilarityMatrix intra = gram(batch.text, batch.text);
      SimilarityMatrix raw = sep_raw(cross, intra, dist, cfg.rescaling_enabled);
      SimilarityMatrix g(b);
      st.breakdown.imsep_text = ce_identity(raw, s, want_grads ? &g : nullptr);
      if (want_grads) {
        SepGrads sg = sep_backward(batch.text, batch.image, raw, g, dist, cfg.rescaling_enabled, s);
        for (size_t i = 0; i < st.grads.d_image.v.size(); ++i) {
          st.grads.d_text.v[i] += cfg.beta * sg.d_own.v[i];
          st.grads.d_image.v[i] += cfg.beta * sg.d_other.v[i];
        }
        st.grads.d_log_scale += cfg.beta * sg.d_raw_dot * dsdt;
      }
    }
  }

  st.breakdown.total = cfg.alpha * st.breakdown.crsep +
                       cfg.beta * (st.breakdown.imsep_image + st.breakdown.imsep_text);
  st.grads.breakdown = st.breakdown;
  return st;
}

}  // namespace

std::pair<SimilarityMatrix, SimilarityMatrix> clip_logits(const EmbeddingBatch& image,
                                                          const EmbeddingBatch& text,
                                                          const Temperature& temp) {
  require_pair(image, text, "clip_logits");
  double s = temp.scale();
  SimilarityMatrix v = gram(image, text);
  for (double& x : v.values) x *= s;
  return {v, transpose(v)};
}

double clip_loss(const EmbeddingBatch& image, const EmbeddingBatch& text, const Temperature& temp) {
  require_pair(image, text, "clip_loss");
  double s = temp.scale();
  SimilarityMatrix cross = gram(image, text);
  double ce_v = ce_identity(cross, s, nullptr);
  double ce_t = ce_identity(transpose(cross), s, nullptr);
  return 0.5 * (ce_v + ce_t);
}

std::pair<SimilarityMatrix, SimilarityMatrix> semantic_distance(const EmbeddingBatch& semantic) {
  if (semantic.rows == 0 || semantic.dim == 0)
    throw DimensionMismatch("semantic_distance: empty descriptor batch");
  EmbeddingBatch unit =
      semantic.normalized ? semantic : l2_normalize_rows(semantic.as_matrix());
  SimilarityMatrix sim = gram(unit, unit);
  size_t b = sim.rows;
  SimilarityMatrix dist(b);
  for (size_t i = 0; i < b; ++i) {
    sim.at(i, i) = 1.0;  // exact, so dist keeps an exactly zero diagonal
    for (size_t j = 0; j < b; ++j) dist.at(i, j) = i == j ? 0.0 : 1.0 - sim.at(i, j);
  }
  return {sim, dist};
}

SimilarityMatrix rescale(const SimilarityMatrix& sim, const SimilarityMatrix& dist) {
  if (sim.rows != dist.rows)
    throw DimensionMismatch("rescale: size mismatch, " + std::to_string(sim.rows) + " vs " +
                            std::to_string(dist.rows));
  SimilarityMatrix out(sim.rows);
  for (size_t i = 0; i < sim.values.size(); ++i) out.values[i] = sim.values[i] * dist.values[i];
  return out;
}

SimilarityMatrix vsep_logits(const EmbeddingBatch& own, const EmbeddingBatch& other,
                             const SimilarityMatrix& dist, const Temperature& temp,
                             bool rescaling_enabled) {
  require_pair(own, other, "vsep_logits");
  if (dist.rows != own.rows)
    throw DimensionMismatch("vsep_logits: distance matrix has " + std::to_string(dist.rows) +
                            " rows for batch of " + std::to_string(own.rows));
  for (size_t i = 0; i < dist.rows; ++i)
    if (std::abs(dist.at(i, i)) > 1e-12)
      throw NonZeroDiagonal("vsep_logits: distance diagonal must be zero at row " + std::to_string(i));
  double s = temp.scale();
  SimilarityMatrix cross = gram(own, other);
  SimilarityMatrix intra = gram(own, own);
  SimilarityMatrix raw = sep_raw(cross, intra, dist, rescaling_enabled);
  for (double& x : raw.values) x *= s;
  return raw;
}

double imsep_loss(const PairedBatch& batch, const Temperature& temp, bool rescaling_enabled) {
  LossConfig cfg;
  cfg.mode = SeparationMode::image_only;
  cfg.rescaling_enabled = rescaling_enabled;
  return total_impl(batch, temp, cfg, false).breakdown.imsep_image;
}

double tsep_loss(const PairedBatch& batch, const Temperature& temp, bool rescaling_enabled) {
  LossConfig cfg;
  cfg.mode = SeparationMode::text_only;
  cfg.rescaling_enabled = rescaling_enabled;
  return total_impl(batch, temp, cfg, false).breakdown.imsep_text;
}

double crsep_loss(const EmbeddingBatch& image, const EmbeddingBatch& text, const Temperature& temp) {
  require_pair(image, text, "crsep_loss");
  double s = temp.scale();
  SimilarityMatrix cross = gram(image, text);
  double ce_v = ce_identity(cross, s, nullptr);
  double ce_t = ce_identity(transpose(cross), s, nullptr);
  return ce_v + ce_t;
}

LossBreakdown total_loss(const PairedBatch& batch, const Temperature& temp, const LossConfig& cfg) {
  return total_impl(batch, temp, cfg, false).breakdown;
}

LossGradients loss_gradients(const PairedBatch& batch, const Temperature& temp,
                             const LossConfig& cfg) {
  TotalState st = total_impl(batch, temp, cfg, true);
  return std::move(st.grads);
}

}  // namespace alignclip
