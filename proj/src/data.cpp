#include "alignclip/data.hpp"

#include <algorithm>
#include <cmath>

#include "alignclip/binio.hpp"
#include "alignclip/errors.hpp"

namespace alignclip {

namespace {

constexpr uint32_t kDatasetMagic = 0x53444341;  // "ACDS"
constexpr uint32_t kDatasetVersion = 1;
constexpr size_t kCaptionSlots = 12;

const char* kShapeWords[4] = {"square", "cross", "disk", "triangle"};
const char* kSizeWords[4] = {"tiny", "small", "medium", "large"};
const char* kIntensityWords[4] = {"faint", "dim", "bright", "vivid"};
const char* kPositionWords[4] = {"top-left", "top-right", "bottom-left", "bottom-right"};

// attribute order used for caption dropping and semantic slots
enum Attr { kShape = 0, kSize = 1, kPosition = 2, kIntensity = 3 };

bool shape_covers(Shape shape, double u, double v) {
  switch (shape) {
    case Shape::square:
      return true;
    case Shape::cross:
      return std::abs(u - 0.5) <= 1.0 / 6.0 || std::abs(v - 0.5) <= 1.0 / 6.0;
    case Shape::disk: {
      double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case Shape::triangle:
      return u + v <= 1.0;
  }
  return false;
}

}  // namespace

uint8_t SyntheticScene::attribute(size_t a) const {
  switch (a) {
    case kShape: return static_cast<uint8_t>(shape);
    case kSize: return static_cast<uint8_t>(size);
    case kPosition: return static_cast<uint8_t>(position);
    default: return static_cast<uint8_t>(intensity);
  }
}

void GenConfig::validate() const {
  if (n_samples == 0) throw InvalidConfig("n_samples must be positive");
  if (image_size < 16 || image_size % 16 != 0)
    throw InvalidConfig("image_size must be a positive multiple of 16");
  if (!std::isfinite(imbalance) || imbalance < 0.0 || imbalance > 1.0)
    throw InvalidConfig("imbalance must be in [0, 1]");
  if (!std::isfinite(noise_std) || noise_std < 0.0)
    throw InvalidConfig("noise_std must be non-negative");
  if (vocab_size < vocabulary().size())
    throw InvalidConfig("vocab_size must cover the " + std::to_string(vocabulary().size()) +
                        "-word vocabulary");
  if (train_frac < 0 || val_frac < 0 || test_frac < 0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw InvalidConfig("split fractions must be non-negative and sum to 1");
}

KvConfig GenConfig::to_kv() const {
  KvConfig kv;
  kv.set_u64("n_samples", n_samples);
  kv.set_u64("image_size", image_size);
  kv.set_double("imbalance", imbalance);
  kv.set_double("noise_std", noise_std);
  kv.set_u64("vocab_size", vocab_size);
  kv.set_double("train_frac", train_frac);
  kv.set_double("val_frac", val_frac);
  kv.set_double("test_frac", test_frac);
  kv.set_u64("seed", seed);
  return kv;
}

GenConfig GenConfig::from_kv(const KvConfig& kv) {
  GenConfig c;
  c.n_samples = kv.get_u64("n_samples", c.n_samples);
  c.image_size = kv.get_u64("image_size", c.image_size);
  c.imbalance = kv.get_double("imbalance", c.imbalance);
  c.noise_std = kv.get_double("noise_std", c.noise_std);
  c.vocab_size = kv.get_u64("vocab_size", c.vocab_size);
  c.train_frac = kv.get_double("train_frac", c.train_frac);
  c.val_frac = kv.get_double("val_frac", c.val_frac);
  c.test_frac = kv.get_double("test_frac", c.test_frac);
  c.seed = kv.get_u64("seed", c.seed);
  c.validate();
  return c;
}

size_t Dataset::caption_slots() const {
  return scenes.empty() ? 0 : tokens.size() / scenes.size();
}

std::vector<size_t> Dataset::split_indices(Split s) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < split.size(); ++i)
    if (split[i] == static_cast<uint8_t>(s)) out.push_back(i);
  return out;
}

std::string Dataset::tag() const { return checksum_hex(checksum); }

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w = {"<pad>", "<bos>", "<eos>", "a", "photo", "of", "the", "at"};
    for (auto* s : kShapeWords) w.push_back(s);
    for (auto* s : kSizeWords) w.push_back(s);
    for (auto* s : kIntensityWords) w.push_back(s);
    for (auto* s : kPositionWords) w.push_back(s);
    return w;
  }();
  return words;
}

uint16_t word_id(const std::string& word) {
  const auto& words = vocabulary();
  for (size_t i = 0; i < words.size(); ++i)
    if (words[i] == word) return static_cast<uint16_t>(i);
  throw DataError("word \"" + word + "\" is not in the vocabulary");
}

std::vector<float> render_image(const SyntheticScene& scene, const GenConfig& cfg, Rng& rng) {
  size_t s = cfg.image_size;
  size_t cell = s / 4;
  // position grid corners keep the four locations maximally apart
  static const size_t kCellRow[4] = {0, 0, 3, 3};
  static const size_t kCellCol[4] = {0, 3, 0, 3};
  size_t gr = kCellRow[static_cast<size_t>(scene.position)];
  size_t gc = kCellCol[static_cast<size_t>(scene.position)];
  double extent = static_cast<double>((static_cast<size_t>(scene.size) + 1) * cell) / 4.0;
  double off = (static_cast<double>(cell) - extent) / 2.0;
  double box_y = static_cast<double>(gr * cell) + off;
  double box_x = static_cast<double>(gc * cell) + off;
  double level = (static_cast<double>(scene.intensity) + 1.0) / 4.0;

  std::vector<float> img(s * s, 0.0f);
  size_t py0 = gr * cell, px0 = gc * cell;
  for (size_t py = py0; py < py0 + cell; ++py) {
    for (size_t px = px0; px < px0 + cell; ++px) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
          double y = static_cast<double>(py) + (sy + 0.5) / 4.0;
          double x = static_cast<double>(px) + (sx + 0.5) / 4.0;
          double u = (y - box_y) / extent;
          double v = (x - box_x) / extent;
          if (u < 0.0 || u >= 1.0 || v < 0.0 || v >= 1.0) continue;
          if (shape_covers(scene.shape, u, v)) ++hits;
        }
      }
      img[py * s + px] = static_cast<float>(level * hits / 16.0);
    }
  }
  if (cfg.noise_std > 0.0) {
    for (auto& pix : img) {
      double v = static_cast<double>(pix) + rng.normal() * cfg.noise_std;
      pix = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

Caption caption_scene(const SyntheticScene& scene, const GenConfig& cfg, Rng& rng) {
  size_t dropped = static_cast<size_t>(std::ceil(cfg.imbalance * static_cast<double>(kAttributeCount)));
  dropped = std::min(dropped, kAttributeCount - 1);  // a caption always keeps something
  std::vector<size_t> order = {kShape, kSize, kPosition, kIntensity};
  rng.shuffle(order);
  bool keep[kAttributeCount] = {false, false, false, false};
  for (size_t i = 0; i < kAttributeCount - dropped; ++i) keep[order[i]] = true;

  Caption cap;
  cap.semantic.assign(kSemanticDim, 0.0);
  for (size_t a = 0; a < kAttributeCount; ++a)
    if (keep[a]) cap.semantic[a * kValuesPerAttribute + scene.attribute(a)] = 1.0;

  cap.tokens = {word_id("<bos>"), word_id("a"), word_id("photo"), word_id("of"), word_id("the")};
  if (keep[kIntensity]) cap.tokens.push_back(word_id(kIntensityWords[static_cast<size_t>(scene.intensity)]));
  if (keep[kSize]) cap.tokens.push_back(word_id(kSizeWords[static_cast<size_t>(scene.size)]));
  if (keep[kShape]) cap.tokens.push_back(word_id(kShapeWords[static_cast<size_t>(scene.shape)]));
  if (keep[kPosition]) {
    cap.tokens.push_back(word_id("at"));
    cap.tokens.push_back(word_id(kPositionWords[static_cast<size_t>(scene.position)]));
  }
  cap.tokens.push_back(word_id("<eos>"));
  return cap;
}

Dataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  size_t n = cfg.n_samples;
  size_t s = cfg.image_size;

  Dataset d;
  d.cfg = cfg;
  d.scenes.resize(n);
  d.images.resize(n * s * s);
  d.tokens.assign(n * kCaptionSlots, word_id("<pad>"));
  d.lengths.resize(n);
  d.semantics = Matrix(n, kSemanticDim);
  d.split.resize(n);
  d.vocab = vocabulary();

  for (size_t i = 0; i < n; ++i) {
    SyntheticScene sc;
    sc.shape = static_cast<Shape>(rng.below(4));
    sc.size = static_cast<Size>(rng.below(4));
    sc.position = static_cast<Position>(rng.below(4));
    sc.intensity = static_cast<Intensity>(rng.below(4));
    d.scenes[i] = sc;

    Caption cap = caption_scene(sc, cfg, rng);
    if (cap.tokens.size() > kCaptionSlots) throw ShapeMismatch("caption exceeds slot budget");
    d.lengths[i] = static_cast<uint16_t>(cap.tokens.size());
    std::copy(cap.tokens.begin(), cap.tokens.end(), d.tokens.begin() + i * kCaptionSlots);
    std::copy(cap.semantic.begin(), cap.semantic.end(), d.semantics.row(i));

    std::vector<float> img = render_image(sc, cfg, rng);
    std::copy(img.begin(), img.end(), d.images.begin() + i * s * s);
  }

  size_t n_train = static_cast<size_t>(std::floor(cfg.train_frac * static_cast<double>(n)));
  size_t n_val = static_cast<size_t>(std::floor(cfg.val_frac * static_cast<double>(n)));
  for (size_t i = 0; i < n; ++i) {
    if (i < n_train)
      d.split[i] = static_cast<uint8_t>(Split::train);
    else if (i < n_train + n_val)
      d.split[i] = static_cast<uint8_t>(Split::val);
    else
      d.split[i] = static_cast<uint8_t>(Split::test);
  }
  return d;
}

namespace {

std::vector<uint8_t> serialize_dataset(const Dataset& d) {
  ByteWriter w;
  w.str(d.cfg.to_kv().serialize());
  w.u32(static_cast<uint32_t>(d.vocab.size()));
  for (const auto& word : d.vocab) w.str(word);
  w.u64(d.scenes.size());
  w.u32(static_cast<uint32_t>(d.cfg.image_size));
  w.u32(static_cast<uint32_t>(kCaptionSlots));
  w.u32(static_cast<uint32_t>(kSemanticDim));
  for (const auto& sc : d.scenes) {
    w.u8(static_cast<uint8_t>(sc.shape));
    w.u8(static_cast<uint8_t>(sc.size));
    w.u8(static_cast<uint8_t>(sc.position));
    w.u8(static_cast<uint8_t>(sc.intensity));
  }
  for (uint8_t sp : d.split) w.u8(sp);
  for (float px : d.images) w.f32(px);
  for (uint16_t t : d.tokens) w.u16(t);
  for (uint16_t l : d.lengths) w.u16(l);
  for (double v : d.semantics.v) w.f64(v);
  return w.take();
}

}  // namespace

void save_dataset(const std::string& path, Dataset& dataset) {
  std::vector<uint8_t> payload = serialize_dataset(dataset);
  write_checked_file(path, kDatasetMagic, kDatasetVersion, payload);
  dataset.checksum = framed_checksum(kDatasetMagic, kDatasetVersion, payload);
}

Dataset load_dataset(const std::string& path) {
  CheckedFile f = read_checked_file(path, kDatasetMagic);
  if (f.version != kDatasetVersion)
    throw VersionMismatch(path + ": dataset format version " + std::to_string(f.version) +
                          ", expected " + std::to_string(kDatasetVersion));
  ByteReader r(f.payload);
  Dataset d;
  d.cfg = GenConfig::from_kv(KvConfig::parse_text(r.str()));
  uint32_t vocab_n = r.u32();
  d.vocab.resize(vocab_n);
  for (auto& wrd : d.vocab) wrd = r.str();
  uint64_t n = r.u64();
  uint32_t s = r.u32();
  uint32_t slots = r.u32();
  uint32_t sem_dim = r.u32();
  if (s != d.cfg.image_size || slots != kCaptionSlots || sem_dim != kSemanticDim)
    throw CorruptFile(path + ": header dimensions are inconsistent");
  if (n != d.cfg.n_samples) throw CorruptFile(path + ": sample count does not match config");
  d.scenes.resize(n);
  for (auto& sc : d.scenes) {
    uint8_t a = r.u8(), b = r.u8(), c = r.u8(), e = r.u8();
    if (a >= 4 || b >= 4 || c >= 4 || e >= 4) throw CorruptFile(path + ": scene attribute out of range");
    sc.shape = static_cast<Shape>(a);
    sc.size = static_cast<Size>(b);
    sc.position = static_cast<Position>(c);
    sc.intensity = static_cast<Intensity>(e);
  }
  d.split.resize(n);
  for (auto& sp : d.split) {
    sp = r.u8();
    if (sp > 2) throw CorruptFile(path + ": split tag out of range");
  }
  d.images.resize(n * s * s);
  for (auto& px : d.images) px = r.f32();
  d.tokens.resize(n * slots);
  for (auto& t : d.tokens) t = r.u16();
  d.lengths.resize(n);
  for (auto& l : d.lengths) {
    l = r.u16();
    if (l == 0 || l > slots) throw CorruptFile(path + ": caption length out of range");
  }
  d.semantics = Matrix(n, sem_dim);
  for (auto& v : d.semantics.v) v = r.f64();
  r.expect_end();
  d.checksum = f.checksum;
  return d;
}

RawBatch make_raw_batch(const Dataset& data, const std::vector<size_t>& rows) {
  size_t s = data.cfg.image_size;
  size_t slots = data.caption_slots();
  RawBatch b;
  b.rows = rows;
  b.images.count = rows.size();
  b.images.image_size = s;
  b.images.pixels.resize(rows.size() * s * s);
  b.tokens.count = rows.size();
  b.tokens.seq_len = slots;
  b.tokens.tokens.resize(rows.size() * slots);
  b.tokens.valid.resize(rows.size() * slots);
  b.semantics = Matrix(rows.size(), data.semantics.cols);
  for (size_t i = 0; i < rows.size(); ++i) {
    size_t row = rows[i];
    if (row >= data.size()) throw DataError("batch row index out of range");
    const float* src = data.images.data() + row * s * s;
    double* dst = b.images.pixels.data() + i * s * s;
    for (size_t j = 0; j < s * s; ++j) dst[j] = static_cast<double>(src[j]);
    for (size_t t = 0; t < slots; ++t) {
      b.tokens.tokens[i * slots + t] = data.tokens[row * slots + t];
      b.tokens.valid[i * slots + t] = t < data.lengths[row] ? 1 : 0;
    }
    std::copy(data.semantics.row(row), data.semantics.row(row) + data.semantics.cols,
              b.semantics.row(i));
  }
  return b;
}

std::vector<RawBatch> batches(const Dataset& data, Split split, size_t batch_size,
                              uint64_t epoch_seed) {
  if (batch_size < 2)
    throw BatchTooSmall("batch_size " + std::to_string(batch_size) + " is below the minimum of 2");
  std::vector<size_t> idx = data.split_indices(split);
  Rng rng(epoch_seed);
  rng.shuffle(idx);
  std::vector<RawBatch> out;
  for (size_t off = 0; off + batch_size <= idx.size(); off += batch_size)
    out.push_back(make_raw_batch(
        data, std::vector<size_t>(idx.begin() + off, idx.begin() + off + batch_size)));
  return out;
}

ZeroShotSpec zero_shot_spec(const Dataset& data, const std::vector<size_t>& rows) {
  ZeroShotSpec spec;
  size_t slots = data.caption_slots();
  for (size_t sh = 0; sh < 4; ++sh) {
    for (size_t sz = 0; sz < 4; ++sz) {
      std::vector<uint16_t> toks = {word_id("<bos>"), word_id("a"), word_id("photo"),
                                    word_id("of"),    word_id("the"), word_id(kSizeWords[sz]),
                                    word_id(kShapeWords[sh]), word_id("<eos>")};
      TokenBatch tb;
      tb.count = 1;
      tb.seq_len = slots;
      tb.tokens.assign(slots, word_id("<pad>"));
      tb.valid.assign(slots, 0);
      for (size_t t = 0; t < toks.size(); ++t) {
        tb.tokens[t] = toks[t];
        tb.valid[t] = 1;
      }
      spec.class_captions.push_back(std::move(tb));
      spec.class_names.push_back(std::string(kSizeWords[sz]) + " " + kShapeWords[sh]);
    }
  }
  for (size_t row : rows) {
    if (row >= data.size()) throw DataError("zero-shot row index out of range");
    const auto& sc = data.scenes[row];
    spec.labels.push_back(static_cast<size_t>(sc.shape) * 4 + static_cast<size_t>(sc.size));
  }
  return spec;
}

}  // namespace alignclip
