#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "alignclip/encoder.hpp"
#include "alignclip/geometry.hpp"

namespace alignclip {

struct MetricsReport {
  std::string model_tag;
  std::string dataset_tag;
  uint64_t seed = 0;
  double alignment = 0.0;
  double mean_angle_deg = 0.0;
  double gap_norm = 0.0;
  std::vector<std::pair<double, double>> cdf;  // (threshold, fraction <= threshold)
  double zeroshot_top1 = 0.0;
  double zeroshot_top5 = 0.0;
  std::map<int, double> recall_i2t;
  std::map<int, double> recall_t2i;
};

// Mean diagonal dot product of row-paired normalized batches; in [-1, 1].
double alignment_score(const EmbeddingBatch& image, const EmbeddingBatch& text);

// Angle (degrees) whose cosine is the alignment score.
double mean_angle_degrees(const EmbeddingBatch& image, const EmbeddingBatch& text);

// L2 distance between the two modality centroids.
double modality_gap(const EmbeddingBatch& image, const EmbeddingBatch& text);

// Empirical CDF of positive-pair cosines over the given thresholds. Dots are
// clamped to [-1, 1] so the final fraction at threshold 1 is exactly 1.
std::vector<std::pair<double, double>> positive_cosine_cdf(const EmbeddingBatch& image,
                                                           const EmbeddingBatch& text,
                                                           const std::vector<double>& thresholds);

// 41 evenly spaced thresholds covering [-1, 1].
std::vector<double> default_cdf_thresholds();

double median_positive_cosine(const EmbeddingBatch& image, const EmbeddingBatch& text);

struct ZeroShotResult {
  double top1 = 0.0;
  double top5 = 0.0;
};

// Core scoring on prepared embeddings: argmax cosine with lowest-index
// tie-breaks; top-5 degrades to top-C when there are fewer than 5 classes.
ZeroShotResult zero_shot_from_embeddings(const EmbeddingBatch& images,
                                         const std::vector<size_t>& labels,
                                         const EmbeddingBatch& class_embeddings);

// Full protocol: encode every class's caption set, average and re-normalize
// into one prototype per class, then classify the images.
ZeroShotResult zero_shot_classify(const SharedEncoderParams& params, const ImageBatch& images,
                                  const std::vector<size_t>& labels,
                                  const std::vector<TokenBatch>& class_captions);

struct RecallResult {
  std::map<int, double> image_to_text;
  std::map<int, double> text_to_image;
};

// Recall@k in both directions with deterministic index tie-breaks. Requires
// more rows than the largest k so the numbers stay meaningful.
RecallResult retrieval_recall(const EmbeddingBatch& image, const EmbeddingBatch& text,
                              const std::vector<int>& ks = {1, 5, 10});

struct SpherePoint {
  double x = 0.0, y = 0.0, z = 0.0;
  int modality = 0;  // 0 = image, 1 = text
};

// Joint PCA of both batches to 3 components, each point radially projected
// onto the unit sphere. Throws DegenerateRank when the pooled data does not
// span 3 dimensions.
std::vector<SpherePoint> sphere_projection(const EmbeddingBatch& image, const EmbeddingBatch& text);

std::string projection_to_csv(const std::vector<SpherePoint>& points);

void validate_report(const MetricsReport& report);
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
void emit_report(const MetricsReport& report, const std::string& path);
MetricsReport parse_report(const std::string& path);

}  // namespace alignclip
