#include "alignclip/geometry.hpp"

#include <cmath>
#include <mutex>
#include <string>

#include "alignclip/errors.hpp"
#include "gemm.hpp"

namespace alignclip {

namespace detail {

void pin_blas_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

}  // namespace detail

Matrix EmbeddingBatch::as_matrix() const {
  Matrix m(rows, dim);
  m.v = values;
  return m;
}

LabelVector LabelVector::identity(size_t n) {
  LabelVector l;
  l.values.resize(n);
  for (size_t i = 0; i < n; ++i) l.values[i] = i;
  return l;
}

EmbeddingBatch l2_normalize_rows(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) throw DimensionMismatch("l2_normalize_rows: empty matrix");
  EmbeddingBatch out(m.rows, m.cols);
  for (size_t i = 0; i < m.rows; ++i) {
    const double* src = m.row(i);
    double sq = 0.0;
    for (size_t j = 0; j < m.cols; ++j) sq += src[j] * src[j];
    if (!std::isfinite(sq)) throw NonFinite("l2_normalize_rows: non-finite input in row " + std::to_string(i));
    double norm = std::sqrt(sq);
    if (norm <= 1e-12) throw ZeroRow("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    double inv = 1.0 / norm;
    double* dst = out.row(i);
    for (size_t j = 0; j < m.cols; ++j) dst[j] = src[j] * inv;
  }
  out.normalized = true;
  return out;
}

SimilarityMatrix similarity(const EmbeddingBatch& a, const EmbeddingBatch& b) {
  if (a.dim != b.dim)
    throw DimensionMismatch("similarity: width mismatch, " + std::to_string(a.dim) + " vs " +
                            std::to_string(b.dim));
  if (a.rows != b.rows)
    throw DimensionMismatch("similarity: row mismatch, " + std::to_string(a.rows) + " vs " +
                            std::to_string(b.rows));
  if (a.rows == 0) throw DimensionMismatch("similarity: empty batch");
  SimilarityMatrix s(a.rows);
  detail::mm_nt(a.rows, b.rows, a.dim, a.values.data(), b.values.data(), s.values.data());
  return s;
}

double softmax_cross_entropy(const SimilarityMatrix& logits, const LabelVector& labels) {
  size_t b = logits.rows;
  if (b == 0) throw DimensionMismatch("softmax_cross_entropy: empty logits");
  if (labels.values.size() != b)
    throw DimensionMismatch("softmax_cross_entropy: " + std::to_string(labels.values.size()) +
                            " labels for " + std::to_string(b) + " rows");
  double total = 0.0;
  for (size_t i = 0; i < b; ++i) {
    size_t y = labels.values[i];
    if (y >= b) throw DataError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    const double* row = logits.row(i);
    double mx = row[0];
    for (size_t j = 0; j < b; ++j) {
      if (!std::isfinite(row[j]))
        throw NonFinite("softmax_cross_entropy: non-finite logit at (" + std::to_string(i) + "," +
                        std::to_string(j) + ")");
      if (row[j] > mx) mx = row[j];
    }
    double sum = 0.0;
    for (size_t j = 0; j < b; ++j) sum += std::exp(row[j] - mx);
    total += std::log(sum) - (row[y] - mx);
  }
  return total / static_cast<double>(b);
}

}  // namespace alignclip
