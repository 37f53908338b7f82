#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alignclip/encoder.hpp"
#include "alignclip/geometry.hpp"
#include "alignclip/kvconfig.hpp"
#include "alignclip/rng.hpp"

namespace alignclip {

// Four attributes, four values each: 256 distinct concepts.
enum class Shape : uint8_t { square = 0, cross = 1, disk = 2, triangle = 3 };
enum class Size : uint8_t { tiny = 0, small_ = 1, medium = 2, large = 3 };
enum class Position : uint8_t { top_left = 0, top_right = 1, bottom_left = 2, bottom_right = 3 };
enum class Intensity : uint8_t { faint = 0, dim = 1, bright = 2, vivid = 3 };

constexpr size_t kAttributeCount = 4;
constexpr size_t kValuesPerAttribute = 4;
constexpr size_t kSemanticDim = kAttributeCount * kValuesPerAttribute;

struct SyntheticScene {
  Shape shape = Shape::square;
  Size size = Size::tiny;
  Position position = Position::top_left;
  Intensity intensity = Intensity::faint;

  uint8_t attribute(size_t a) const;
};

struct GenConfig {
  uint64_t n_samples = 1024;
  size_t image_size = 16;
  double imbalance = 0.5;     // in [0,1]: fraction of attributes dropped from captions
  double noise_std = 0.02;    // Gaussian pixel noise, clipped back to [0,1]
  size_t vocab_size = 64;     // must cover the built-in word list
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  uint64_t seed = 1;

  void validate() const;
  KvConfig to_kv() const;
  static GenConfig from_kv(const KvConfig& kv);
};

enum class Split : uint8_t { train = 0, val = 1, test = 2 };

struct Dataset {
  GenConfig cfg;
  std::vector<SyntheticScene> scenes;
  std::vector<float> images;        // [n, S, S], stored f32
  std::vector<uint16_t> tokens;     // [n, caption_slots]
  std::vector<uint16_t> lengths;    // valid prefix per caption
  Matrix semantics;                 // [n, 16] ground-truth attribute one-hots
  std::vector<uint8_t> split;       // Split per row
  std::vector<std::string> vocab;   // id -> word
  uint64_t checksum = 0;            // file checksum once saved/loaded, 0 before

  size_t size() const { return scenes.size(); }
  size_t caption_slots() const;
  std::vector<size_t> split_indices(Split s) const;
  std::string tag() const;
};

// Fixed word list shared by generator and tokenizer. Indices are stable:
// specials first, then template words, then attribute words.
const std::vector<std::string>& vocabulary();
uint16_t word_id(const std::string& word);

// Deterministic rasterization: the scene's shape is drawn inside one 4x4-cell
// of the position grid with 4x supersampled coverage shading, then Gaussian
// noise is added and the result clipped to [0, 1]. The rng is consumed only
// when noise_std > 0.
std::vector<float> render_image(const SyntheticScene& scene, const GenConfig& cfg, Rng& rng);

struct Caption {
  std::vector<uint16_t> tokens;
  std::vector<double> semantic;  // 16-dim
};

// Natural-language template with ceil(imbalance * 4) attributes dropped
// (capped so at least one survives). The semantic vector one-hot encodes
// exactly the attributes the caption retains.
Caption caption_scene(const SyntheticScene& scene, const GenConfig& cfg, Rng& rng);

Dataset generate_dataset(const GenConfig& cfg);

void save_dataset(const std::string& path, Dataset& dataset);  // fills dataset.checksum
Dataset load_dataset(const std::string& path);

// Row-aligned raw model inputs for a set of dataset rows.
struct RawBatch {
  ImageBatch images;
  TokenBatch tokens;
  Matrix semantics;
  std::vector<size_t> rows;  // dataset row ids, for provenance
};

RawBatch make_raw_batch(const Dataset& data, const std::vector<size_t>& rows);

// Shuffled fixed-size batches over one split; the trailing partial batch is
// dropped. Same (dataset, split, epoch_seed, batch_size) always yields the
// same sequence.
std::vector<RawBatch> batches(const Dataset& data, Split split, size_t batch_size,
                              uint64_t epoch_seed);

// Zero-shot protocol: one class per (shape, size) pair, 16 classes, each
// described by a single caption. Returns per-class caption batches and the
// class label of every row in `rows`.
struct ZeroShotSpec {
  std::vector<TokenBatch> class_captions;
  std::vector<size_t> labels;
  std::vector<std::string> class_names;
};

ZeroShotSpec zero_shot_spec(const Dataset& data, const std::vector<size_t>& rows);

}  // namespace alignclip
