#pragma once

#include <cstddef>
#include <vector>

namespace alignclip {

// Dense row-major matrix of doubles. All numeric state in the library lives
// in 64-bit floats; file formats may narrow (e.g. rasters) but computation
// never does.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double& at(size_t i, size_t j) { return v[i * cols + j]; }
  double at(size_t i, size_t j) const { return v[i * cols + j]; }
  double* row(size_t i) { return v.data() + i * cols; }
  const double* row(size_t i) const { return v.data() + i * cols; }
};

// A batch of embedding rows. `normalized` is a promise made by the producer:
// every row has unit L2 norm (within 1e-9). Ops that require unit rows check
// the flag, not the numbers, so gradient probes that nudge individual entries
// stay representable.
struct EmbeddingBatch {
  size_t rows = 0;
  size_t dim = 0;
  std::vector<double> values;
  bool normalized = false;

  EmbeddingBatch() = default;
  EmbeddingBatch(size_t r, size_t d) : rows(r), dim(d), values(r * d, 0.0) {}

  double& at(size_t i, size_t j) { return values[i * dim + j]; }
  double at(size_t i, size_t j) const { return values[i * dim + j]; }
  double* row(size_t i) { return values.data() + i * dim; }
  const double* row(size_t i) const { return values.data() + i * dim; }

  Matrix as_matrix() const;
};

// Square matrix of pairwise scores, row i = query i against every column.
struct SimilarityMatrix {
  size_t rows = 0;
  std::vector<double> values;

  SimilarityMatrix() = default;
  explicit SimilarityMatrix(size_t r) : rows(r), values(r * r, 0.0) {}

  double& at(size_t i, size_t j) { return values[i * rows + j]; }
  double at(size_t i, size_t j) const { return values[i * rows + j]; }
  double* row(size_t i) { return values.data() + i * rows; }
  const double* row(size_t i) const { return values.data() + i * rows; }
};

// Per-row target column indices. Contrastive batches use identity labels:
// row i matches column i.
struct LabelVector {
  std::vector<size_t> values;

  static LabelVector identity(size_t n);
};

// Scales every row to unit L2 norm. A row with norm <= 1e-12 is an error
// (ZeroRow), never silently nudged.
EmbeddingBatch l2_normalize_rows(const Matrix& m);

// a * b^T for two row-aligned batches of equal width. Entries of normalized
// inputs are cosines in [-1, 1].
SimilarityMatrix similarity(const EmbeddingBatch& a, const EmbeddingBatch& b);

// Mean over rows of -log softmax(row)[label]. Uses max-subtraction so large
// logit scales stay finite; non-finite logits throw NonFinite.
double softmax_cross_entropy(const SimilarityMatrix& logits, const LabelVector& labels);

}  // namespace alignclip
