#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "alignclip/geometry.hpp"
#include "alignclip/objectives.hpp"
#include "alignclip/rng.hpp"

namespace testutil {

inline alignclip::Matrix random_matrix(size_t rows, size_t cols, alignclip::Rng& rng) {
  alignclip::Matrix m(rows, cols);
  for (double& v : m.v) v = rng.normal();
  return m;
}

inline alignclip::EmbeddingBatch random_normalized(size_t rows, size_t dim,
                                                   alignclip::Rng& rng) {
  return alignclip::l2_normalize_rows(random_matrix(rows, dim, rng));
}

// Strictly positive entries, so rows are never zero and cosine distances stay
// in (0, 1) territory most of the time.
inline alignclip::EmbeddingBatch random_semantic(size_t rows, size_t dim,
                                                 alignclip::Rng& rng) {
  alignclip::EmbeddingBatch b(rows, dim);
  for (double& v : b.values) v = 0.1 + rng.uniform();
  return b;
}

// Pairwise-orthogonal semantics (distinct one-hots); requires dim >= rows.
inline alignclip::EmbeddingBatch one_hot_semantics(size_t rows, size_t dim) {
  alignclip::EmbeddingBatch b(rows, dim);
  for (size_t i = 0; i < rows; ++i) b.at(i, i % dim) = 1.0;
  return b;
}

inline alignclip::PairedBatch random_paired(size_t rows, size_t dim, size_t sem_dim,
                                            alignclip::Rng& rng) {
  alignclip::PairedBatch batch{random_normalized(rows, dim, rng),
                               random_normalized(rows, dim, rng),
                               random_semantic(rows, sem_dim, rng)};
  return batch;
}

// Unique scratch directory removed on destruction.
class TmpDir {
 public:
  explicit TmpDir(const std::string& stem) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            (stem + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TmpDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TmpDir(const TmpDir&) = delete;
  TmpDir& operator=(const TmpDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
