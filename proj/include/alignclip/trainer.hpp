#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "alignclip/data.hpp"
#include "alignclip/encoder.hpp"
#include "alignclip/kvconfig.hpp"
#include "alignclip/objectives.hpp"

namespace alignclip {

struct TrainConfig {
  size_t epochs = 30;
  size_t batch_size = 64;
  double base_lr = 1e-3;
  size_t warmup_steps = 75;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  uint64_t seed = 1;
  std::string tag = "run";
  LossConfig loss;
  SharedEncoderConfig model;

  void validate() const;
  KvConfig to_kv() const;
  static TrainConfig from_kv(const KvConfig& kv);
};

// First and second Adam moments, one slot per parameter tensor, plus the
// number of optimizer updates applied so far.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  uint64_t step = 0;

  static OptimizerState zeros_like(const SharedEncoderParams& p);
};

// Linear warmup from zero over warmup_steps, then cosine decay to zero at
// total_steps. `step` counts completed updates, so the first update uses
// lr_at(0) and warmup ends exactly at base_lr.
double lr_at(size_t step, size_t total_steps, const TrainConfig& cfg);

// Decoupled weight decay applied before the adaptive update; bias-corrected
// moments. One-dimensional tensors and the temperature are never decayed.
void optimizer_step(SharedEncoderParams& params, const ParamGrads& grads, OptimizerState& opt,
                    double lr, const TrainConfig& cfg);

struct EpochRecord {
  size_t epoch = 0;  // 1-based
  LossBreakdown mean_loss;
  double val_alignment = 0.0;
  double val_gap = 0.0;
  double lr = 0.0;
};

using RunHistory = std::vector<EpochRecord>;

std::string history_to_jsonl(const RunHistory& history);
RunHistory history_from_jsonl(const std::string& text);

struct Checkpoint {
  TrainConfig cfg;
  std::string dataset_tag;
  SharedEncoderParams params;
  OptimizerState opt;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
// Refuses checkpoints whose stored config differs from the expected one.
Checkpoint load_checkpoint(const std::string& path, const TrainConfig& expected);

struct TrainOptions {
  size_t threads = 1;
  std::ostream* log = nullptr;                 // per-epoch progress lines
  std::optional<Checkpoint> resume;            // continue from a saved state
  std::optional<uint64_t> stop_after_steps;    // halt mid-run after this many total updates
};

struct TrainResult {
  SharedEncoderParams params;
  OptimizerState opt;
  RunHistory history;
};

// A model can only consume a dataset whose image size, caption length, and
// vocabulary fit its input layers; mismatches are data errors.
void ensure_compatible(const SharedEncoderConfig& model, const Dataset& data);

// Deterministic full training run. Batch order depends only on (seed, epoch),
// so resuming from a checkpoint at update k and continuing matches an
// uninterrupted run bit for bit.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainOptions& opts = {});

}  // namespace alignclip
