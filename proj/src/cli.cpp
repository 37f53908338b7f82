#include "alignclip/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "alignclip/data.hpp"
#include "alignclip/errors.hpp"
#include "alignclip/metrics.hpp"
#include "alignclip/presets.hpp"
#include "alignclip/trainer.hpp"

namespace alignclip {

namespace {

namespace fs = std::filesystem;

bool quiet_logs() {
  const char* v = std::getenv("ALIGNCLIP_LOG");
  return v != nullptr && (std::string(v) == "quiet" || std::string(v) == "0");
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw IoError("cannot create output directory " + path + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("short write to " + path);
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InvalidConfig("--split must be train, val, or test (got '" + s + "')");
}

struct GenerateArgs {
  std::string out;
  std::string config;
  uint64_t n = 0;
  size_t image_size = 0;
  double imbalance = 0.0;
  double noise_std = 0.0;
  size_t vocab_size = 0;
  double train_frac = 0.0, val_frac = 0.0, test_frac = 0.0;
  uint64_t seed = 0;
  CLI::Option *o_n = nullptr, *o_image = nullptr, *o_imb = nullptr, *o_noise = nullptr,
              *o_vocab = nullptr, *o_train = nullptr, *o_val = nullptr, *o_test = nullptr,
              *o_seed = nullptr;
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string preset;
  std::string config;
  std::string resume;
  std::string tag;
  uint64_t seed = 0;
  size_t threads = 1;
  uint64_t stop_after = 0;
  CLI::Option *o_seed = nullptr, *o_tag = nullptr, *o_stop = nullptr;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
};

struct CompareArgs {
  std::vector<std::string> reports;
  std::string out;
};

int cmd_generate(const GenerateArgs& a) {
  GenConfig cfg;
  if (!a.config.empty()) cfg = GenConfig::from_kv(KvConfig::parse_file(a.config));
  if (a.o_n->count()) cfg.n_samples = a.n;
  if (a.o_image->count()) cfg.image_size = a.image_size;
  if (a.o_imb->count()) cfg.imbalance = a.imbalance;
  if (a.o_noise->count()) cfg.noise_std = a.noise_std;
  if (a.o_vocab->count()) cfg.vocab_size = a.vocab_size;
  if (a.o_train->count()) cfg.train_frac = a.train_frac;
  if (a.o_val->count()) cfg.val_frac = a.val_frac;
  if (a.o_test->count()) cfg.test_frac = a.test_frac;
  if (a.o_seed->count()) cfg.seed = a.seed;
  cfg.validate();

  ensure_dir(a.out);
  Dataset data = generate_dataset(cfg);
  std::string path = (fs::path(a.out) / "dataset.bin").string();
  save_dataset(path, data);
  write_text((fs::path(a.out) / "genconfig.txt").string(), cfg.to_kv().serialize());
  std::cout << "dataset " << data.tag() << " n=" << data.size() << " -> " << path << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  if (a.preset.empty() == a.config.empty())
    throw InvalidConfig("train needs exactly one of --preset or --config");
  TrainConfig cfg = a.preset.empty() ? TrainConfig::from_kv(KvConfig::parse_file(a.config))
                                     : make_preset(a.preset);
  if (a.o_seed->count()) cfg.seed = a.seed;
  if (a.o_tag->count()) cfg.tag = a.tag;
  cfg.validate();

  Dataset data = load_dataset(a.data);
  TrainOptions opts;
  opts.threads = a.threads;
  if (!quiet_logs()) opts.log = &std::cerr;
  if (!a.resume.empty()) opts.resume = load_checkpoint(a.resume, cfg);
  if (a.o_stop->count()) opts.stop_after_steps = a.stop_after;

  ensure_dir(a.out);
  write_text((fs::path(a.out) / "config.txt").string(), cfg.to_kv().serialize());
  TrainResult result = train(cfg, data, opts);
  write_text((fs::path(a.out) / "history.jsonl").string(), history_to_jsonl(result.history));
  Checkpoint ckpt{cfg, data.tag(), std::move(result.params), std::move(result.opt)};
  std::string ckpt_path = (fs::path(a.out) / "checkpoint.bin").string();
  save_checkpoint(ckpt_path, ckpt);
  std::cout << "trained " << cfg.tag << " for " << ckpt.opt.step << " updates -> " << ckpt_path
            << "\n";
  return 0;
}

// Encodes one split of a dataset under a checkpoint's model after checking
// shape compatibility; shared by eval and project.
struct EncodedSplit {
  Checkpoint ckpt;
  Dataset data;
  std::vector<size_t> rows;
  RawBatch raw;
  EmbeddingBatch image{1, 1};
  EmbeddingBatch text{1, 1};
};

EncodedSplit encode_split(const std::string& ckpt_path, const std::string& data_path,
                          const std::string& split_name) {
  EncodedSplit es;
  es.ckpt = load_checkpoint(ckpt_path);
  es.data = load_dataset(data_path);
  ensure_compatible(es.ckpt.cfg.model, es.data);
  Split split = split_from_string(split_name);
  es.rows = es.data.split_indices(split);
  if (es.rows.empty())
    throw BatchTooSmall("split '" + split_name + "' of " + data_path + " has no rows");
  es.raw = make_raw_batch(es.data, es.rows);
  es.image = encode_image(es.raw.images, es.ckpt.params);
  es.text = encode_text(es.raw.tokens, es.ckpt.params);
  return es;
}

KvConfig provenance_kv(const EncodedSplit& es, const std::string& ckpt_path,
                       const std::string& data_path, const std::string& split) {
  KvConfig kv;
  kv.set("checkpoint", ckpt_path);
  kv.set("data", data_path);
  kv.set("split", split);
  kv.set("model_tag", es.ckpt.cfg.tag);
  kv.set("dataset_tag", es.data.tag());
  kv.set_u64("seed", es.ckpt.cfg.seed);
  return kv;
}

int cmd_eval(const EvalArgs& a) {
  EncodedSplit es = encode_split(a.checkpoint, a.data, a.split);
  MetricsReport report;
  report.model_tag = es.ckpt.cfg.tag;
  report.dataset_tag = es.data.tag();
  report.seed = es.ckpt.cfg.seed;
  report.alignment = alignment_score(es.image, es.text);
  report.mean_angle_deg = mean_angle_degrees(es.image, es.text);
  report.gap_norm = modality_gap(es.image, es.text);
  report.cdf = positive_cosine_cdf(es.image, es.text, default_cdf_thresholds());
  ZeroShotSpec zs = zero_shot_spec(es.data, es.rows);
  ZeroShotResult z = zero_shot_classify(es.ckpt.params, es.raw.images, zs.labels,
                                        zs.class_captions);
  report.zeroshot_top1 = z.top1;
  report.zeroshot_top5 = z.top5;
  RecallResult rec = retrieval_recall(es.image, es.text);
  report.recall_i2t = rec.image_to_text;
  report.recall_t2i = rec.text_to_image;

  ensure_dir(a.out);
  std::string path = (fs::path(a.out) / "report.json").string();
  emit_report(report, path);
  write_text((fs::path(a.out) / "eval_config.txt").string(),
             provenance_kv(es, a.checkpoint, a.data, a.split).serialize());
  std::cout << "eval " << report.model_tag << " on " << report.dataset_tag << "/" << a.split
            << ": alignment " << report.alignment << " top1 " << report.zeroshot_top1
            << " i2t_r1 " << report.recall_i2t.at(1) << " -> " << path << "\n";
  return 0;
}

int cmd_project(const EvalArgs& a) {
  EncodedSplit es = encode_split(a.checkpoint, a.data, a.split);
  std::vector<SpherePoint> points = sphere_projection(es.image, es.text);
  ensure_dir(a.out);
  std::string path = (fs::path(a.out) / "projection.csv").string();
  write_text(path, projection_to_csv(points));
  write_text((fs::path(a.out) / "project_config.txt").string(),
             provenance_kv(es, a.checkpoint, a.data, a.split).serialize());
  std::cout << "projected " << points.size() << " points -> " << path << "\n";
  return 0;
}

std::string format_compare_table(const std::vector<MetricsReport>& reports) {
  auto pad = [](std::string s, size_t w) {
    if (s.size() < w) s.resize(w, ' ');
    return s;
  };
  auto num = [&](double v, size_t w) {
    std::ostringstream c;
    c.setf(std::ios::fixed);
    c.precision(4);
    c << v;
    return pad(c.str(), w);
  };
  std::ostringstream out;
  out << "dataset " << reports.front().dataset_tag << "\n";
  out << pad("model", 22) << pad("seed", 6);
  for (const char* h : {"alignment", "angle_deg", "gap", "zs@1", "zs@5", "i2t@1", "i2t@5",
                        "i2t@10", "t2i@1", "t2i@5", "t2i@10"})
    out << pad(h, 10);
  out << "\n";
  for (const MetricsReport& r : reports) {
    out << pad(r.model_tag, 22) << pad(std::to_string(r.seed), 6) << num(r.alignment, 10)
        << num(r.mean_angle_deg, 10) << num(r.gap_norm, 10) << num(r.zeroshot_top1, 10)
        << num(r.zeroshot_top5, 10) << num(r.recall_i2t.at(1), 10) << num(r.recall_i2t.at(5), 10)
        << num(r.recall_i2t.at(10), 10) << num(r.recall_t2i.at(1), 10)
        << num(r.recall_t2i.at(5), 10) << num(r.recall_t2i.at(10), 10) << "\n";
  }
  return out.str();
}

int cmd_compare(const CompareArgs& a) {
  if (a.reports.size() < 2) throw InvalidConfig("compare needs at least two report files");
  std::vector<MetricsReport> reports;
  reports.reserve(a.reports.size());
  for (const std::string& path : a.reports) reports.push_back(parse_report(path));
  for (size_t i = 1; i < reports.size(); ++i)
    if (reports[i].dataset_tag != reports.front().dataset_tag)
      throw DataError("compare: " + a.reports[i] + " is from dataset " + reports[i].dataset_tag +
                      ", others are from " + reports.front().dataset_tag);
  std::string table = format_compare_table(reports);
  std::cout << table;
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text((fs::path(a.out) / "compare.txt").string(), table);
    KvConfig kv;
    for (size_t i = 0; i < a.reports.size(); ++i)
      kv.set("report." + std::to_string(i), a.reports[i]);
    kv.set("dataset_tag", reports.front().dataset_tag);
    write_text((fs::path(a.out) / "compare_config.txt").string(), kv.serialize());
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"deterministic dual-encoder contrastive training sandbox"};
  app.require_subcommand(1);

  GenerateArgs g;
  CLI::App* gen = app.add_subcommand("generate-data", "render a synthetic paired dataset");
  gen->add_option("--out", g.out, "output directory")->required();
  gen->add_option("--config", g.config, "generator config file (key = value)");
  g.o_n = gen->add_option("--n", g.n, "number of samples");
  g.o_image = gen->add_option("--image-size", g.image_size, "square image edge in pixels");
  g.o_imb = gen->add_option("--imbalance", g.imbalance, "fraction of attributes dropped from captions");
  g.o_noise = gen->add_option("--noise-std", g.noise_std, "pixel noise standard deviation");
  g.o_vocab = gen->add_option("--vocab-size", g.vocab_size, "tokenizer vocabulary size");
  g.o_train = gen->add_option("--train-frac", g.train_frac, "training split fraction");
  g.o_val = gen->add_option("--val-frac", g.val_frac, "validation split fraction");
  g.o_test = gen->add_option("--test-frac", g.test_frac, "test split fraction");
  g.o_seed = gen->add_option("--seed", g.seed, "generator seed");

  TrainArgs t;
  CLI::App* tr = app.add_subcommand("train", "train a model on a dataset");
  tr->add_option("--data", t.data, "dataset file")->required();
  tr->add_option("--out", t.out, "output directory")->required();
  tr->add_option("--preset", t.preset, "named config preset");
  tr->add_option("--config", t.config, "training config file (key = value)");
  t.o_seed = tr->add_option("--seed", t.seed, "training seed override");
  t.o_tag = tr->add_option("--tag", t.tag, "run tag override");
  tr->add_option("--threads", t.threads, "worker threads for batch evaluation");
  tr->add_option("--resume", t.resume, "checkpoint to continue from");
  t.o_stop = tr->add_option("--stop-after-steps", t.stop_after, "halt after this many total updates");

  EvalArgs e;
  CLI::App* ev = app.add_subcommand("eval", "measure embedding geometry and downstream accuracy");
  ev->add_option("--checkpoint", e.checkpoint, "trained checkpoint file")->required();
  ev->add_option("--data", e.data, "dataset file")->required();
  ev->add_option("--out", e.out, "output directory")->required();
  ev->add_option("--split", e.split, "dataset split to evaluate (train|val|test)");

  CompareArgs c;
  CLI::App* cmp = app.add_subcommand("compare", "tabulate several eval reports side by side");
  cmp->add_option("reports", c.reports, "report.json files")->required();
  cmp->add_option("--out", c.out, "optional directory for the table");

  EvalArgs p;
  CLI::App* pr = app.add_subcommand("project", "export a 3d sphere projection of the embeddings");
  pr->add_option("--checkpoint", p.checkpoint, "trained checkpoint file")->required();
  pr->add_option("--data", p.data, "dataset file")->required();
  pr->add_option("--out", p.out, "output directory")->required();
  pr->add_option("--split", p.split, "dataset split to project (train|val|test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);  // prints help or the offending flag
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(g);
    if (tr->parsed()) return cmd_train(t);
    if (ev->parsed()) return cmd_eval(e);
    if (cmp->parsed()) return cmd_compare(c);
    if (pr->parsed()) return cmd_project(p);
    return 2;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 3;
  } catch (const NumericError& err) {
    std::cerr << "numerical abort: " << err.what() << "\n";
    return 4;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.emplace_back("alignclip");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const std::string& s : full) argv.push_back(s.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace alignclip
