#include "alignclip/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "alignclip/errors.hpp"

namespace alignclip {

namespace {

void require_paired(const EmbeddingBatch& a, const EmbeddingBatch& b, const char* op) {
  if (!a.normalized || !b.normalized)
    throw DataError(std::string(op) + ": embeddings must be normalized");
  if (a.dim != b.dim || a.rows != b.rows)
    throw DimensionMismatch(std::string(op) + ": batches must be row-aligned with equal width");
  if (a.rows == 0) throw DimensionMismatch(std::string(op) + ": empty batch");
}

double pair_dot(const EmbeddingBatch& a, const EmbeddingBatch& b, size_t i) {
  const double* x = a.row(i);
  const double* y = b.row(i);
  double s = 0.0;
  for (size_t j = 0; j < a.dim; ++j) s += x[j] * y[j];
  return s;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Deterministic:
// fixed sweep order, fixed sign convention on the eigenvectors.
void jacobi_eigen(Matrix a, std::vector<double>& eigenvalues, Matrix& eigenvectors) {
  size_t n = a.rows;
  eigenvectors = Matrix(n, n);
  for (size_t i = 0; i < n; ++i) eigenvectors.at(i, i) = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (size_t p = 0; p < n; ++p)
      for (size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-24) break;
    for (size_t p = 0; p < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        double apq = a.at(p, q);
        if (apq == 0.0) continue;
        double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (size_t k = 0; k < n; ++k) {
          double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (size_t k = 0; k < n; ++k) {
          double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (size_t k = 0; k < n; ++k) {
          double vkp = eigenvectors.at(k, p), vkq = eigenvectors.at(k, q);
          eigenvectors.at(k, p) = c * vkp - s * vkq;
          eigenvectors.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  eigenvalues.resize(n);
  for (size_t i = 0; i < n; ++i) eigenvalues[i] = a.at(i, i);
  // sort descending by eigenvalue, stable in index for exact ties
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t x, size_t y) { return eigenvalues[x] > eigenvalues[y]; });
  std::vector<double> ev(n);
  Matrix vecs(n, n);
  for (size_t c = 0; c < n; ++c) {
    ev[c] = eigenvalues[order[c]];
    // sign convention: largest-magnitude component positive
    size_t arg = 0;
    double best = 0.0;
    for (size_t r = 0; r < n; ++r) {
      double mag = std::abs(eigenvectors.at(r, order[c]));
      if (mag > best) {
        best = mag;
        arg = r;
      }
    }
    double sign = eigenvectors.at(arg, order[c]) < 0.0 ? -1.0 : 1.0;
    for (size_t r = 0; r < n; ++r) vecs.at(r, c) = eigenvectors.at(r, order[c]) * sign;
  }
  eigenvalues = std::move(ev);
  eigenvectors = std::move(vecs);
}

}  // namespace

double alignment_score(const EmbeddingBatch& image, const EmbeddingBatch& text) {
  require_paired(image, text, "alignment_score");
  double sum = 0.0;
  for (size_t i = 0; i < image.rows; ++i) sum += pair_dot(image, text, i);
  return sum / static_cast<double>(image.rows);
}

double mean_angle_degrees(const EmbeddingBatch& image, const EmbeddingBatch& text) {
  double a = std::clamp(alignment_score(image, text), -1.0, 1.0);
  return std::acos(a) * 180.0 / 3.14159265358979323846;
}

double modality_gap(const EmbeddingBatch& image, const EmbeddingBatch& text) {
  require_paired(image, text, "modality_gap");
  double sq = 0.0;
  for (size_t j = 0; j < image.dim; ++j) {
    double mi = 0.0, mt = 0.0;
    for (size_t i = 0; i < image.rows; ++i) {
      mi += image.at(i, j);
      mt += text.at(i, j);
    }
    double d = (mi - mt) / static_cast<double>(image.rows);
    sq += d * d;
  }
  return std::sqrt(sq);
}

std::vector<std::pair<double, double>> positive_cosine_cdf(const EmbeddingBatch& image,
                                                           const EmbeddingBatch& text,
                                                           const std::vector<double>& thresholds) {
  require_paired(image, text, "positive_cosine_cdf");
  if (thresholds.empty()) throw InvalidConfig("positive_cosine_cdf: no thresholds given");
  for (size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1]))
      throw InvalidConfig("positive_cosine_cdf: thresholds must be strictly increasing");
  std::vector<double> dots(image.rows);
  for (size_t i = 0; i < image.rows; ++i)
    dots[i] = std::clamp(pair_dot(image, text, i), -1.0, 1.0);
  std::vector<std::pair<double, double>> cdf;
  cdf.reserve(thresholds.size());
  for (double t : thresholds) {
    size_t cnt = 0;
    for (double d : dots)
      if (d <= t) ++cnt;
    cdf.emplace_back(t, static_cast<double>(cnt) / static_cast<double>(dots.size()));
  }
  return cdf;
}

std::vector<double> default_cdf_thresholds() {
  std::vector<double> t(41);
  for (size_t i = 0; i < t.size(); ++i) t[i] = -1.0 + static_cast<double>(i) * (2.0 / 40.0);
  t.back() = 1.0;
  return t;
}

double median_positive_cosine(const EmbeddingBatch& image, const EmbeddingBatch& text) {
  require_paired(image, text, "median_positive_cosine");
  std::vector<double> dots(image.rows);
  for (size_t i = 0; i < image.rows; ++i) dots[i] = pair_dot(image, text, i);
  std::sort(dots.begin(), dots.end());
  size_t n = dots.size();
  return n % 2 ? dots[n / 2] : 0.5 * (dots[n / 2 - 1] + dots[n / 2]);
}

ZeroShotResult zero_shot_from_embeddings(const EmbeddingBatch& images,
                                         const std::vector<size_t>& labels,
                                         const EmbeddingBatch& class_embeddings) {
  size_t c = class_embeddings.rows;
  if (c == 0) throw EmptyClassSet("zero_shot: no classes");
  if (images.rows == 0) throw DimensionMismatch("zero_shot: empty image batch");
  if (images.dim != class_embeddings.dim)
    throw DimensionMismatch("zero_shot: embedding width mismatch");
  if (labels.size() != images.rows)
    throw DimensionMismatch("zero_shot: one label required per image");
  size_t k5 = std::min<size_t>(5, c);
  size_t hit1 = 0, hit5 = 0;
  std::vector<double> scores(c);
  for (size_t i = 0; i < images.rows; ++i) {
    size_t y = labels[i];
    if (y >= c) throw DataError("zero_shot: label " + std::to_string(y) + " out of range");
    const double* img = images.row(i);
    for (size_t j = 0; j < c; ++j) {
      const double* cls = class_embeddings.row(j);
      double s = 0.0;
      for (size_t d = 0; d < images.dim; ++d) s += img[d] * cls[d];
      scores[j] = s;
    }
    // rank of the truth with lowest-index tie-breaks
    size_t rank = 1;
    for (size_t j = 0; j < c; ++j) {
      if (j == y) continue;
      if (scores[j] > scores[y] || (scores[j] == scores[y] && j < y)) ++rank;
    }
    if (rank <= 1) ++hit1;
    if (rank <= k5) ++hit5;
  }
  ZeroShotResult r;
  r.top1 = static_cast<double>(hit1) / static_cast<double>(images.rows);
  r.top5 = static_cast<double>(hit5) / static_cast<double>(images.rows);
  return r;
}

ZeroShotResult zero_shot_classify(const SharedEncoderParams& params, const ImageBatch& images,
                                  const std::vector<size_t>& labels,
                                  const std::vector<TokenBatch>& class_captions) {
  if (class_captions.empty()) throw EmptyClassSet("zero_shot: no classes given");
  EmbeddingBatch prototypes(class_captions.size(), params.cfg.proj_dim);
  for (size_t cl = 0; cl < class_captions.size(); ++cl) {
    if (class_captions[cl].count == 0)
      throw EmptyClassSet("zero_shot: class " + std::to_string(cl) + " has no captions");
    EmbeddingBatch embs = encode_text(class_captions[cl], params);
    Matrix mean(1, embs.dim);
    for (size_t i = 0; i < embs.rows; ++i)
      for (size_t j = 0; j < embs.dim; ++j) mean.at(0, j) += embs.at(i, j);
    for (size_t j = 0; j < embs.dim; ++j) mean.at(0, j) /= static_cast<double>(embs.rows);
    EmbeddingBatch unit = l2_normalize_rows(mean);
    std::copy(unit.row(0), unit.row(0) + unit.dim, prototypes.row(cl));
  }
  prototypes.normalized = true;
  EmbeddingBatch img_embs = encode_image(images, params);
  return zero_shot_from_embeddings(img_embs, labels, prototypes);
}

RecallResult retrieval_recall(const EmbeddingBatch& image, const EmbeddingBatch& text,
                              const std::vector<int>& ks) {
  require_paired(image, text, "retrieval_recall");
  if (ks.empty()) throw InvalidConfig("retrieval_recall: no k values");
  int max_k = 0;
  for (int k : ks) {
    if (k < 1) throw InvalidConfig("retrieval_recall: k must be at least 1");
    max_k = std::max(max_k, k);
  }
  size_t b = image.rows;
  if (b <= static_cast<size_t>(max_k))
    throw BatchTooSmall("retrieval_recall: need more than " + std::to_string(max_k) +
                        " rows, got " + std::to_string(b));
  SimilarityMatrix s = similarity(image, text);
  RecallResult out;
  for (int k : ks) {
    out.image_to_text[k] = 0.0;
    out.text_to_image[k] = 0.0;
  }
  for (size_t i = 0; i < b; ++i) {
    size_t rank_i2t = 1, rank_t2i = 1;
    double si = s.at(i, i);
    for (size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      if (s.at(i, j) > si || (s.at(i, j) == si && j < i)) ++rank_i2t;
      if (s.at(j, i) > si || (s.at(j, i) == si && j < i)) ++rank_t2i;
    }
    for (int k : ks) {
      if (rank_i2t <= static_cast<size_t>(k)) out.image_to_text[k] += 1.0;
      if (rank_t2i <= static_cast<size_t>(k)) out.text_to_image[k] += 1.0;
    }
  }
  for (int k : ks) {
    out.image_to_text[k] /= static_cast<double>(b);
    out.text_to_image[k] /= static_cast<double>(b);
  }
  return out;
}

std::vector<SpherePoint> sphere_projection(const EmbeddingBatch& image,
                                           const EmbeddingBatch& text) {
  require_paired(image, text, "sphere_projection");
  size_t n = image.rows + text.rows;
  size_t d = image.dim;
  if (n < 3) throw BatchTooSmall("sphere_projection: need at least 3 points");
  if (d < 3) throw DegenerateRank("sphere_projection: embedding width below 3");
  Matrix x(n, d);
  for (size_t i = 0; i < image.rows; ++i)
    std::copy(image.row(i), image.row(i) + d, x.row(i));
  for (size_t i = 0; i < text.rows; ++i)
    std::copy(text.row(i), text.row(i) + d, x.row(image.rows + i));
  std::vector<double> mean(d, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) mean[j] += x.at(i, j);
  for (size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) x.at(i, j) -= mean[j];
  Matrix cov(d, d);
  for (size_t i = 0; i < n; ++i)
    for (size_t a = 0; a < d; ++a) {
      double xa = x.at(i, a);
      if (xa == 0.0) continue;
      for (size_t c = 0; c < d; ++c) cov.at(a, c) += xa * x.at(i, c);
    }
  for (double& v : cov.v) v /= static_cast<double>(n - 1);

  std::vector<double> eig;
  Matrix vecs;
  jacobi_eigen(cov, eig, vecs);
  if (!(eig[0] > 0.0) || eig[2] <= eig[0] * 1e-12)
    throw DegenerateRank("sphere_projection: pooled embeddings span fewer than 3 dimensions");

  std::vector<SpherePoint> points(n);
  for (size_t i = 0; i < n; ++i) {
    double p[3] = {0.0, 0.0, 0.0};
    for (size_t c = 0; c < 3; ++c)
      for (size_t j = 0; j < d; ++j) p[c] += x.at(i, j) * vecs.at(j, c);
    double norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    SpherePoint sp;
    if (norm <= 1e-15) {
      sp.x = 0.0;
      sp.y = 0.0;
      sp.z = 1.0;  // centered points have no direction; pin them to a pole
    } else {
      sp.x = p[0] / norm;
      sp.y = p[1] / norm;
      sp.z = p[2] / norm;
    }
    sp.modality = i < image.rows ? 0 : 1;
    points[i] = sp;
  }
  return points;
}

std::string projection_to_csv(const std::vector<SpherePoint>& points) {
  std::ostringstream out;
  out << "x,y,z,modality\n";
  out.precision(17);
  for (const auto& p : points)
    out << p.x << ',' << p.y << ',' << p.z << ',' << (p.modality == 0 ? "image" : "text") << '\n';
  return out.str();
}

void validate_report(const MetricsReport& report) {
  if (report.model_tag.empty() || report.dataset_tag.empty())
    throw InvalidConfig("report: provenance tags must be non-empty");
  auto finite01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  if (!std::isfinite(report.alignment) || report.alignment < -1.0 || report.alignment > 1.0)
    throw NonFinite("report: alignment out of range");
  if (!std::isfinite(report.mean_angle_deg) || !std::isfinite(report.gap_norm))
    throw NonFinite("report: non-finite geometry fields");
  if (report.cdf.empty()) throw InvalidConfig("report: empty cdf");
  double prev = -1.0;
  for (const auto& [t, f] : report.cdf) {
    if (!std::isfinite(t) || !finite01(f)) throw NonFinite("report: bad cdf entry");
    if (f < prev) throw InvalidConfig("report: cdf must be non-decreasing");
    prev = f;
  }
  if (report.cdf.back().second != 1.0) throw InvalidConfig("report: cdf must end at 1");
  if (!finite01(report.zeroshot_top1) || !finite01(report.zeroshot_top5) ||
      report.zeroshot_top1 > report.zeroshot_top5 + 1e-12)
    throw InvalidConfig("report: zero-shot accuracies inconsistent");
  for (const auto* m : {&report.recall_i2t, &report.recall_t2i}) {
    double last = 0.0;
    for (const auto& [k, v] : *m) {
      if (k < 1 || !finite01(v) || v + 1e-12 < last)
        throw InvalidConfig("report: recall values must be valid and non-decreasing in k");
      last = v;
    }
  }
}

std::string report_to_json(const MetricsReport& report) {
  validate_report(report);
  nlohmann::ordered_json j;
  j["model"] = report.model_tag;
  j["dataset"] = report.dataset_tag;
  j["seed"] = report.seed;
  j["alignment"] = report.alignment;
  j["mean_angle_deg"] = report.mean_angle_deg;
  j["gap_norm"] = report.gap_norm;
  j["cdf"] = nlohmann::ordered_json::array();
  for (const auto& [t, f] : report.cdf) j["cdf"].push_back({t, f});
  j["zeroshot"]["top1"] = report.zeroshot_top1;
  j["zeroshot"]["top5"] = report.zeroshot_top5;
  auto fill = [](const std::map<int, double>& m) {
    nlohmann::ordered_json o;
    for (const auto& [k, v] : m) o[std::to_string(k)] = v;
    return o;
  };
  j["recall"]["image_to_text"] = fill(report.recall_i2t);
  j["recall"]["text_to_image"] = fill(report.recall_t2i);
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw CorruptFile(std::string("report: invalid JSON: ") + e.what());
  }
  MetricsReport r;
  try {
    r.model_tag = j.at("model").get<std::string>();
    r.dataset_tag = j.at("dataset").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.alignment = j.at("alignment").get<double>();
    r.mean_angle_deg = j.at("mean_angle_deg").get<double>();
    r.gap_norm = j.at("gap_norm").get<double>();
    for (const auto& e : j.at("cdf"))
      r.cdf.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
    r.zeroshot_top1 = j.at("zeroshot").at("top1").get<double>();
    r.zeroshot_top5 = j.at("zeroshot").at("top5").get<double>();
    for (const auto& [k, v] : j.at("recall").at("image_to_text").items())
      r.recall_i2t[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("recall").at("text_to_image").items())
      r.recall_t2i[std::stoi(k)] = v.get<double>();
  } catch (const nlohmann::ordered_json::exception& e) {
    throw CorruptFile(std::string("report: missing or malformed field: ") + e.what());
  }
  validate_report(r);
  return r;
}

void emit_report(const MetricsReport& report, const std::string& path) {
  std::string text = report_to_json(report);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path);
  out << text;
  if (!out) throw IoError("short write to report " + path);
}

MetricsReport parse_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open report " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return report_from_json(buf.str());
}

}  // namespace alignclip
