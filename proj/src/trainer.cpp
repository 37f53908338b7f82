#include "alignclip/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include <json.hpp>

#include "alignclip/binio.hpp"
#include "alignclip/errors.hpp"
#include "alignclip/metrics.hpp"
#include "alignclip/rng.hpp"

namespace alignclip {

namespace {

constexpr uint32_t kCheckpointMagic = 0x504b4341;  // "ACKP"
constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void ensure_compatible(const SharedEncoderConfig& model, const Dataset& data) {
  if (data.cfg.image_size != model.image_size)
    throw DimensionMismatch("model expects " + std::to_string(model.image_size) +
                            "px images, dataset holds " + std::to_string(data.cfg.image_size) +
                            "px");
  if (data.caption_slots() > model.max_seq_len)
    throw DimensionMismatch("captions longer than the model's sequence length");
  if (data.cfg.vocab_size > model.vocab_size)
    throw DimensionMismatch("dataset vocabulary exceeds the model's embedding table");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw InvalidConfig("epochs must be at least 1");
  if (batch_size < 2) throw InvalidConfig("batch_size must be at least 2");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    throw InvalidConfig("base_lr must be positive and finite");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw InvalidConfig("adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw InvalidConfig("adam eps must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw InvalidConfig("weight_decay must be non-negative");
  if (tag.empty()) throw InvalidConfig("run tag must be non-empty");
  loss.validate();
  model.validate();
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  kv.set_u64("epochs", epochs);
  kv.set_u64("batch_size", batch_size);
  kv.set_double("base_lr", base_lr);
  kv.set_u64("warmup_steps", warmup_steps);
  kv.set_double("weight_decay", weight_decay);
  kv.set_double("beta1", beta1);
  kv.set_double("beta2", beta2);
  kv.set_double("eps", eps);
  kv.set_u64("seed", seed);
  kv.set("tag", tag);
  kv.set_double("loss.alpha", loss.alpha);
  kv.set_double("loss.beta", loss.beta);
  kv.set("loss.mode", to_string(loss.mode));
  kv.set_bool("loss.rescaling", loss.rescaling_enabled);
  kv.set_u64("model.layers", model.layers);
  kv.set_u64("model.heads", model.heads);
  kv.set_u64("model.model_dim", model.model_dim);
  kv.set_u64("model.proj_dim", model.proj_dim);
  kv.set_u64("model.image_size", model.image_size);
  kv.set_u64("model.patch_size", model.patch_size);
  kv.set_u64("model.vocab_size", model.vocab_size);
  kv.set_u64("model.max_seq_len", model.max_seq_len);
  kv.set("model.sharing", to_string(model.sharing));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig cfg;
  cfg.epochs = kv.get_u64("epochs");
  cfg.batch_size = kv.get_u64("batch_size");
  cfg.base_lr = kv.get_double("base_lr");
  cfg.warmup_steps = kv.get_u64("warmup_steps");
  cfg.weight_decay = kv.get_double("weight_decay");
  cfg.beta1 = kv.get_double("beta1");
  cfg.beta2 = kv.get_double("beta2");
  cfg.eps = kv.get_double("eps");
  cfg.seed = kv.get_u64("seed");
  cfg.tag = kv.get_string("tag");
  cfg.loss.alpha = kv.get_double("loss.alpha");
  cfg.loss.beta = kv.get_double("loss.beta");
  cfg.loss.mode = separation_mode_from_string(kv.get_string("loss.mode"));
  cfg.loss.rescaling_enabled = kv.get_bool("loss.rescaling");
  cfg.model.layers = kv.get_u64("model.layers");
  cfg.model.heads = kv.get_u64("model.heads");
  cfg.model.model_dim = kv.get_u64("model.model_dim");
  cfg.model.proj_dim = kv.get_u64("model.proj_dim");
  cfg.model.image_size = kv.get_u64("model.image_size");
  cfg.model.patch_size = kv.get_u64("model.patch_size");
  cfg.model.vocab_size = kv.get_u64("model.vocab_size");
  cfg.model.max_seq_len = kv.get_u64("model.max_seq_len");
  cfg.model.sharing = sharing_from_string(kv.get_string("model.sharing"));
  cfg.validate();
  return cfg;
}

OptimizerState OptimizerState::zeros_like(const SharedEncoderParams& p) {
  OptimizerState s;
  s.m.resize(p.tensors.size());
  s.v.resize(p.tensors.size());
  for (size_t i = 0; i < p.tensors.size(); ++i) {
    s.m[i].assign(p.tensors[i].size(), 0.0);
    s.v[i].assign(p.tensors[i].size(), 0.0);
  }
  return s;
}

double lr_at(size_t step, size_t total_steps, const TrainConfig& cfg) {
  if (step >= total_steps) return 0.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  size_t warm = std::min(cfg.warmup_steps, total_steps);
  double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void optimizer_step(SharedEncoderParams& params, const ParamGrads& grads, OptimizerState& opt,
                    double lr, const TrainConfig& cfg) {
  if (grads.g.size() != params.tensors.size() || opt.m.size() != params.tensors.size())
    throw ShapeMismatch("optimizer_step: gradient/state tensor count mismatch");
  uint64_t t = opt.step + 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    NamedTensor& tensor = params.tensors[i];
    const std::vector<double>& g = grads.g[i];
    if (g.size() != tensor.size() || opt.m[i].size() != tensor.size() ||
        opt.v[i].size() != tensor.size())
      throw ShapeMismatch("optimizer_step: size mismatch on tensor " + tensor.name);
    double decay = tensor.weight_decay ? (1.0 - lr * cfg.weight_decay) : 1.0;
    double* p = tensor.v.data();
    double* m = opt.m[i].data();
    double* v = opt.v[i].data();
    for (size_t j = 0; j < tensor.size(); ++j) {
      double gj = g[j];
      if (!std::isfinite(gj))
        throw NonFinite("optimizer_step: non-finite gradient in tensor " + tensor.name);
      p[j] *= decay;  // decoupled decay happens before the adaptive update
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  opt.step = t;
}

std::string history_to_jsonl(const RunHistory& history) {
  std::string out;
  for (const EpochRecord& r : history) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["loss"]["clip"] = r.mean_loss.clip;
    j["loss"]["crsep"] = r.mean_loss.crsep;
    j["loss"]["imsep_image"] = r.mean_loss.imsep_image;
    j["loss"]["imsep_text"] = r.mean_loss.imsep_text;
    j["loss"]["total"] = r.mean_loss.total;
    j["val_alignment"] = r.val_alignment;
    j["val_gap"] = r.val_gap;
    j["lr"] = r.lr;
    out += j.dump();
    out += '\n';
  }
  return out;
}

RunHistory history_from_jsonl(const std::string& text) {
  RunHistory history;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch").get<size_t>();
      r.mean_loss.clip = j.at("loss").at("clip").get<double>();
      r.mean_loss.crsep = j.at("loss").at("crsep").get<double>();
      r.mean_loss.imsep_image = j.at("loss").at("imsep_image").get<double>();
      r.mean_loss.imsep_text = j.at("loss").at("imsep_text").get<double>();
      r.mean_loss.total = j.at("loss").at("total").get<double>();
      r.val_alignment = j.at("val_alignment").get<double>();
      r.val_gap = j.at("val_gap").get<double>();
      r.lr = j.at("lr").get<double>();
      history.push_back(r);
    } catch (const std::exception& e) {
      throw CorruptFile("history line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return history;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  if (ckpt.opt.m.size() != ckpt.params.tensors.size() ||
      ckpt.opt.v.size() != ckpt.params.tensors.size())
    throw ShapeMismatch("checkpoint: optimizer state does not match parameters");
  ByteWriter w;
  w.str(ckpt.cfg.to_kv().serialize());
  w.str(ckpt.dataset_tag);
  w.u64(ckpt.params.tensors.size());
  for (const NamedTensor& t : ckpt.params.tensors) {
    w.str(t.name);
    w.u8(static_cast<uint8_t>(t.owner));
    w.u8(t.weight_decay ? 1 : 0);
    w.u32(static_cast<uint32_t>(t.shape.size()));
    for (size_t d : t.shape) w.u64(d);
    for (double x : t.v) w.f64(x);
  }
  w.u64(ckpt.opt.step);
  for (size_t i = 0; i < ckpt.params.tensors.size(); ++i) {
    if (ckpt.opt.m[i].size() != ckpt.params.tensors[i].size() ||
        ckpt.opt.v[i].size() != ckpt.params.tensors[i].size())
      throw ShapeMismatch("checkpoint: moment size mismatch on " + ckpt.params.tensors[i].name);
    for (double x : ckpt.opt.m[i]) w.f64(x);
    for (double x : ckpt.opt.v[i]) w.f64(x);
  }
  write_checked_file(path, kCheckpointMagic, kCheckpointVersion, w.take());
}

Checkpoint load_checkpoint(const std::string& path) {
  CheckedFile f = read_checked_file(path, kCheckpointMagic);
  if (f.version != kCheckpointVersion)
    throw VersionMismatch("checkpoint " + path + ": version " + std::to_string(f.version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  ByteReader r(f.payload);
  Checkpoint ckpt;
  ckpt.cfg = TrainConfig::from_kv(KvConfig::parse_text(r.str()));
  ckpt.dataset_tag = r.str();
  // Rebuild the canonical layout, then overwrite tensor data; any divergence
  // between the stored table and the layout marks the file as corrupt.
  ckpt.params = init_params(ckpt.cfg.model, ckpt.cfg.seed);
  uint64_t count = r.u64();
  if (count != ckpt.params.tensors.size())
    throw CorruptFile("checkpoint: tensor count " + std::to_string(count) + ", expected " +
                      std::to_string(ckpt.params.tensors.size()));
  for (NamedTensor& t : ckpt.params.tensors) {
    std::string name = r.str();
    uint8_t owner = r.u8();
    uint8_t wd = r.u8();
    uint32_t ndim = r.u32();
    std::vector<size_t> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = r.u64();
    if (name != t.name || owner != static_cast<uint8_t>(t.owner) ||
        (wd != 0) != t.weight_decay || shape != t.shape)
      throw CorruptFile("checkpoint: tensor table mismatch at " + t.name);
    for (double& x : t.v) x = r.f64();
  }
  ckpt.opt = OptimizerState::zeros_like(ckpt.params);
  ckpt.opt.step = r.u64();
  for (size_t i = 0; i < ckpt.params.tensors.size(); ++i) {
    for (double& x : ckpt.opt.m[i]) x = r.f64();
    for (double& x : ckpt.opt.v[i]) x = r.f64();
  }
  r.expect_end();
  return ckpt;
}

Checkpoint load_checkpoint(const std::string& path, const TrainConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.cfg.to_kv().serialize() != expected.to_kv().serialize())
    throw VersionMismatch("checkpoint " + path + " was produced under a different config");
  return ckpt;
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainOptions& opts) {
  cfg.validate();
  if (opts.threads == 0) throw InvalidConfig("threads must be at least 1");
  ensure_compatible(cfg.model, data);

  std::vector<size_t> train_rows = data.split_indices(Split::train);
  if (train_rows.size() < cfg.batch_size)
    throw BatchTooSmall("training split has " + std::to_string(train_rows.size()) +
                        " rows, need at least one full batch of " +
                        std::to_string(cfg.batch_size));
  size_t steps_per_epoch = train_rows.size() / cfg.batch_size;
  size_t total_steps = cfg.epochs * steps_per_epoch;

  TrainResult result;
  if (opts.resume) {
    const Checkpoint& ck = *opts.resume;
    if (ck.cfg.to_kv().serialize() != cfg.to_kv().serialize())
      throw VersionMismatch("resume checkpoint was produced under a different config");
    if (ck.dataset_tag != data.tag())
      throw VersionMismatch("resume checkpoint was trained on a different dataset");
    if (ck.opt.step > total_steps)
      throw InvalidConfig("resume checkpoint is past the end of this run");
    result.params = ck.params;
    result.opt = ck.opt;
  } else {
    result.params = init_params(cfg.model, cfg.seed);
    result.opt = OptimizerState::zeros_like(result.params);
  }

  // Validation inputs are fixed across epochs; build them once.
  std::vector<size_t> val_rows = data.split_indices(Split::val);
  RawBatch val;
  if (!val_rows.empty()) val = make_raw_batch(data, val_rows);

  WorkspaceHandle ws;
  uint64_t done = result.opt.step;
  size_t start_epoch = steps_per_epoch == 0 ? cfg.epochs : done / steps_per_epoch;
  bool halted = opts.stop_after_steps && done >= *opts.stop_after_steps;

  for (size_t e = start_epoch; e < cfg.epochs && !halted; ++e) {
    std::vector<RawBatch> order = batches(data, Split::train, cfg.batch_size, mix_seed(cfg.seed, e));
    size_t skip = (e == start_epoch) ? done % steps_per_epoch : 0;
    LossBreakdown sum;
    size_t steps_in_epoch = 0;
    double last_lr = 0.0;
    for (size_t b = skip; b < order.size(); ++b) {
      double lr = lr_at(result.opt.step, total_steps, cfg);
      EncoderGradients g = encoder_gradients(order[b].images, order[b].tokens,
                                             order[b].semantics, result.params, cfg.loss, ws.ws,
                                             opts.threads);
      if (!std::isfinite(g.breakdown.total))
        throw NonFinite("training produced a non-finite loss at update " +
                        std::to_string(result.opt.step + 1));
      optimizer_step(result.params, g.grads, result.opt, lr, cfg);
      sum.clip += g.breakdown.clip;
      sum.crsep += g.breakdown.crsep;
      sum.imsep_image += g.breakdown.imsep_image;
      sum.imsep_text += g.breakdown.imsep_text;
      sum.total += g.breakdown.total;
      last_lr = lr;
      ++steps_in_epoch;
      if (opts.stop_after_steps && result.opt.step >= *opts.stop_after_steps) {
        halted = true;
        break;
      }
    }
    // An epoch interrupted by stop_after_steps gets no record; a record always
    // summarizes every update of its epoch (minus any resumed-over prefix).
    if (skip + steps_in_epoch < order.size()) break;

    EpochRecord rec;
    rec.epoch = e + 1;
    double n = static_cast<double>(steps_in_epoch);
    rec.mean_loss.clip = sum.clip / n;
    rec.mean_loss.crsep = sum.crsep / n;
    rec.mean_loss.imsep_image = sum.imsep_image / n;
    rec.mean_loss.imsep_text = sum.imsep_text / n;
    rec.mean_loss.total = sum.total / n;
    rec.lr = last_lr;
    if (!val_rows.empty()) {
      EmbeddingBatch vi = encode_image(val.images, result.params);
      EmbeddingBatch vt = encode_text(val.tokens, result.params);
      rec.val_alignment = alignment_score(vi, vt);
      rec.val_gap = modality_gap(vi, vt);
    }
    result.history.push_back(rec);
    if (opts.log) {
      (*opts.log) << "epoch " << rec.epoch << "/" << cfg.epochs << " loss " << rec.mean_loss.total
                  << " clip " << rec.mean_loss.clip << " val_align " << rec.val_alignment
                  << " val_gap " << rec.val_gap << " lr " << rec.lr << "\n";
      opts.log->flush();
    }
  }
  return result;
}

}  // namespace alignclip
