#include <doctest.h>

#include <cmath>

#include "alignclip/encoder.hpp"
#include "alignclip/errors.hpp"
#include "alignclip/rng.hpp"
#include "support/util.hpp"

using namespace alignclip;

namespace {

SharedEncoderConfig tiny_cfg(Sharing sharing = Sharing::shared) {
  SharedEncoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.model_dim = 8;
  c.proj_dim = 4;
  c.image_size = 8;
  c.patch_size = 4;
  c.vocab_size = 24;
  c.max_seq_len = 6;
  c.sharing = sharing;
  return c;
}

ImageBatch random_images(size_t count, size_t image_size, Rng& rng) {
  ImageBatch b;
  b.count = count;
  b.image_size = image_size;
  b.pixels.resize(count * image_size * image_size);
  for (double& p : b.pixels) p = rng.uniform();
  return b;
}

TokenBatch random_tokens(size_t count, size_t seq_len, size_t vocab, Rng& rng) {
  TokenBatch b;
  b.count = count;
  b.seq_len = seq_len;
  b.tokens.resize(count * seq_len);
  b.valid.assign(count * seq_len, 0);
  for (size_t i = 0; i < count; ++i) {
    size_t len = 1 + rng.below(seq_len);
    for (size_t t = 0; t < seq_len; ++t) {
      b.tokens[i * seq_len + t] = static_cast<uint32_t>(rng.below(vocab));
      if (t < len) b.valid[i * seq_len + t] = 1;
    }
  }
  return b;
}

Matrix random_semantics(size_t rows, size_t dim, Rng& rng) {
  Matrix m(rows, dim);
  for (double& v : m.v) v = 0.1 + rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("init_params is bit-deterministic in the seed") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams a = init_params(cfg, 42);
  SharedEncoderParams b = init_params(cfg, 42);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(a.tensors[i].name == b.tensors[i].name);
    CHECK(a.tensors[i].v == b.tensors[i].v);  // bitwise
  }
  SharedEncoderParams c = init_params(cfg, 43);
  CHECK(a.tensors[a.patch_w].v != c.tensors[c.patch_w].v);
}

TEST_CASE("initialization statistics and temperature") {
  SharedEncoderParams p = init_params(SharedEncoderConfig::toy(), 1);
  CHECK(p.temperature_log_scale() == doctest::Approx(std::log(1.0 / 0.07)).epsilon(1e-15));
  // biases zero, gains one
  int ln_idx = p.find("trunk.l0.ln1.g");
  REQUIRE(ln_idx >= 0);
  for (double v : p.tensors[ln_idx].v) CHECK(v == 1.0);
  int b_idx = p.find("trunk.l0.attn.bq");
  REQUIRE(b_idx >= 0);
  for (double v : p.tensors[b_idx].v) CHECK(v == 0.0);
  // weights are small
  int w_idx = p.find("trunk.l0.attn.wq");
  REQUIRE(w_idx >= 0);
  double mx = 0.0;
  for (double v : p.tensors[w_idx].v) mx = std::max(mx, std::abs(v));
  CHECK(mx < 0.2);  // 10 sigma
  CHECK(mx > 0.0);
}

TEST_CASE("weight decay marks exactly the matrix-shaped tensors") {
  SharedEncoderParams p = init_params(tiny_cfg(), 5);
  for (const NamedTensor& t : p.tensors) {
    bool is_matrix = t.shape.size() >= 2;
    bool is_temp = t.name == "temp.t";
    CHECK(t.weight_decay == (is_matrix && !is_temp));
  }
}

TEST_CASE("parameter sharing accounting is exact") {
  SharedEncoderConfig shared_cfg = tiny_cfg(Sharing::shared);
  SharedEncoderConfig unshared_cfg = tiny_cfg(Sharing::unshared);
  SharedEncoderParams sp = init_params(shared_cfg, 1);
  SharedEncoderParams up = init_params(unshared_cfg, 1);
  CHECK(sp.parameter_count() < up.parameter_count());
  CHECK(sp.parameter_count() + trunk_parameter_count(shared_cfg) +
            projection_parameter_count(shared_cfg) ==
        up.parameter_count());

  SharedEncoderConfig toy = SharedEncoderConfig::toy();
  SharedEncoderConfig toy_un = toy;
  toy_un.sharing = Sharing::unshared;
  CHECK(init_params(toy, 1).parameter_count() + trunk_parameter_count(toy) +
            projection_parameter_count(toy) ==
        init_params(toy_un, 1).parameter_count());
}

TEST_CASE("paper-scale config constructs with the expected parameter count") {
  SharedEncoderConfig cfg = SharedEncoderConfig::paper_scale();
  CHECK(cfg.layers == 12);
  CHECK(cfg.heads == 12);
  CHECK(cfg.max_seq_len == 77);
  SharedEncoderParams p = init_params(cfg, 1);
  CHECK(p.parameter_count() == 123999745ULL);
}

TEST_CASE("encoder outputs are unit rows of proj_dim width") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 7);
  Rng rng(2);
  ImageBatch imgs = random_images(3, cfg.image_size, rng);
  TokenBatch toks = random_tokens(3, cfg.max_seq_len, cfg.vocab_size, rng);
  EmbeddingBatch ei = encode_image(imgs, p);
  EmbeddingBatch et = encode_text(toks, p);
  CHECK(ei.rows == 3);
  CHECK(ei.dim == cfg.proj_dim);
  CHECK(et.rows == 3);
  CHECK(et.dim == cfg.proj_dim);
  CHECK(ei.normalized);
  CHECK(et.normalized);
  for (const EmbeddingBatch* e : {&ei, &et})
    for (size_t i = 0; i < e->rows; ++i) {
      double n = 0.0;
      for (size_t j = 0; j < e->dim; ++j) n += e->at(i, j) * e->at(i, j);
      CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
    }
}

TEST_CASE("identical inputs give identical embeddings") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 9);
  Rng rng(3);
  ImageBatch one = random_images(1, cfg.image_size, rng);
  ImageBatch two;
  two.count = 2;
  two.image_size = cfg.image_size;
  two.pixels = one.pixels;
  two.pixels.insert(two.pixels.end(), one.pixels.begin(), one.pixels.end());
  EmbeddingBatch e = encode_image(two, p);
  for (size_t j = 0; j < e.dim; ++j) CHECK(std::abs(e.at(0, j) - e.at(1, j)) < 1e-12);
}

TEST_CASE("single-pixel perturbation moves the embedding smoothly") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 11);
  Rng rng(4);
  ImageBatch base = random_images(1, cfg.image_size, rng);
  base.pixels[5] = 0.5;
  ImageBatch bumped = base;
  bumped.pixels[5] += 1e-6;
  EmbeddingBatch e0 = encode_image(base, p);
  EmbeddingBatch e1 = encode_image(bumped, p);
  double diff = 0.0;
  for (size_t j = 0; j < e0.dim; ++j) diff += std::abs(e1.at(0, j) - e0.at(0, j));
  CHECK(diff > 0.0);
  CHECK(diff < 1e-3);  // O(1e-6) input change cannot produce an O(1) jump
}

TEST_CASE("padding beyond the mask never reaches the output") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 13);
  TokenBatch toks;
  toks.count = 2;
  toks.seq_len = 6;
  toks.tokens = {1, 2, 3, 0, 0, 0, 4, 5, 6, 7, 0, 0};
  toks.valid = {1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0};
  EmbeddingBatch a = encode_text(toks, p);
  TokenBatch scrambled = toks;
  scrambled.tokens[3] = 23;
  scrambled.tokens[4] = 17;
  scrambled.tokens[5] = 9;
  scrambled.tokens[10] = 21;
  EmbeddingBatch b = encode_text(scrambled, p);
  for (size_t i = 0; i < a.rows; ++i)
    for (size_t j = 0; j < a.dim; ++j) CHECK(a.at(i, j) == b.at(i, j));  // exactly
}

TEST_CASE("rows encode independently of their batch") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 15);
  Rng rng(5);
  ImageBatch imgs = random_images(4, cfg.image_size, rng);
  TokenBatch toks = random_tokens(4, cfg.max_seq_len, cfg.vocab_size, rng);
  EmbeddingBatch batched_i = encode_image(imgs, p);
  EmbeddingBatch batched_t = encode_text(toks, p);
  for (size_t i = 0; i < 4; ++i) {
    ImageBatch one;
    one.count = 1;
    one.image_size = cfg.image_size;
    one.pixels.assign(imgs.image(i), imgs.image(i) + cfg.image_size * cfg.image_size);
    TokenBatch tone;
    tone.count = 1;
    tone.seq_len = toks.seq_len;
    tone.tokens.assign(toks.row(i), toks.row(i) + toks.seq_len);
    tone.valid.assign(toks.mask(i), toks.mask(i) + toks.seq_len);
    EmbeddingBatch ei = encode_image(one, p);
    EmbeddingBatch et = encode_text(tone, p);
    for (size_t j = 0; j < ei.dim; ++j) {
      CHECK(std::abs(ei.at(0, j) - batched_i.at(i, j)) < 1e-10);
      CHECK(std::abs(et.at(0, j) - batched_t.at(i, j)) < 1e-10);
    }
  }
}

TEST_CASE("input validation rejects malformed batches") {
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 17);
  Rng rng(6);

  ImageBatch wrong = random_images(1, 16, rng);  // model wants 8
  CHECK_THROWS_AS(encode_image(wrong, p), ShapeMismatch);

  TokenBatch empty_row = random_tokens(2, cfg.max_seq_len, cfg.vocab_size, rng);
  for (size_t t = 0; t < empty_row.seq_len; ++t) empty_row.valid[t] = 0;
  CHECK_THROWS_AS(encode_text(empty_row, p), EmptySequence);

  TokenBatch oov = random_tokens(1, cfg.max_seq_len, cfg.vocab_size, rng);
  oov.tokens[0] = static_cast<uint32_t>(cfg.vocab_size);
  oov.valid[0] = 1;
  CHECK_THROWS_AS(encode_text(oov, p), DataError);
}

TEST_CASE("sharing identity: one trunk serves both modalities") {
  Rng rng(7);
  SharedEncoderConfig cfg = tiny_cfg(Sharing::shared);
  SharedEncoderParams p = init_params(cfg, 19);
  ImageBatch imgs = random_images(2, cfg.image_size, rng);
  TokenBatch toks = random_tokens(2, cfg.max_seq_len, cfg.vocab_size, rng);
  EmbeddingBatch ei0 = encode_image(imgs, p);
  EmbeddingBatch et0 = encode_text(toks, p);

  // same tensor indices in both layouts
  CHECK(p.image_trunk.layers[0].wq == p.text_trunk.layers[0].wq);
  CHECK(p.proj_image == p.proj_text);

  int wq = p.find("trunk.l0.attn.wq");
  REQUIRE(wq >= 0);
  p.tensors[wq].v[3] += 0.25;
  EmbeddingBatch ei1 = encode_image(imgs, p);
  EmbeddingBatch et1 = encode_text(toks, p);
  CHECK(ei1.values != ei0.values);
  CHECK(et1.values != et0.values);
}

TEST_CASE("unshared trunks are independent") {
  Rng rng(8);
  SharedEncoderConfig cfg = tiny_cfg(Sharing::unshared);
  SharedEncoderParams p = init_params(cfg, 21);
  ImageBatch imgs = random_images(2, cfg.image_size, rng);
  TokenBatch toks = random_tokens(2, cfg.max_seq_len, cfg.vocab_size, rng);
  EmbeddingBatch ei0 = encode_image(imgs, p);
  EmbeddingBatch et0 = encode_text(toks, p);

  CHECK(p.image_trunk.layers[0].wq != p.text_trunk.layers[0].wq);
  int wq_txt = p.find("trunk_txt.l0.attn.wq");
  REQUIRE(wq_txt >= 0);
  p.tensors[wq_txt].v[2] += 0.25;
  EmbeddingBatch ei1 = encode_image(imgs, p);
  EmbeddingBatch et1 = encode_text(toks, p);
  CHECK(ei1.values == ei0.values);  // image path untouched
  CHECK(et1.values != et0.values);
}

TEST_CASE("encoder_gradients matches finite differences on sampled parameters") {
  Rng rng(9);
  SharedEncoderConfig cfg = tiny_cfg();
  size_t b = 3;
  ImageBatch imgs = random_images(b, cfg.image_size, rng);
  TokenBatch toks = random_tokens(b, cfg.max_seq_len, cfg.vocab_size, rng);
  Matrix sem = random_semantics(b, 5, rng);

  for (Sharing sharing : {Sharing::shared, Sharing::unshared}) {
    SharedEncoderConfig c = tiny_cfg(sharing);
    SharedEncoderParams p = init_params(c, 23);
    LossConfig loss{1.0, 0.5, SeparationMode::both, true};
    EncoderGradients g = encoder_gradients(imgs, toks, sem, p, loss);

    auto loss_at = [&](SharedEncoderParams& params) {
      EmbeddingBatch ei = encode_image(imgs, params);
      EmbeddingBatch et = encode_text(toks, params);
      EmbeddingBatch es(sem.rows, sem.cols);
      es.values = sem.v;
      PairedBatch pb{std::move(ei), std::move(et), std::move(es)};
      return total_loss(pb, params.temperature(), loss).total;
    };
    CHECK(std::abs(g.breakdown.total - loss_at(p)) < 1e-12);

    const double h = 1e-4;
    Rng pick(31 + static_cast<uint64_t>(sharing));
    size_t checked = 0;
    while (checked < 20) {
      size_t ti = pick.below(p.tensors.size());
      size_t ei = pick.below(p.tensors[ti].size());
      double saved = p.tensors[ti].v[ei];
      p.tensors[ti].v[ei] = saved + h;
      double up = loss_at(p);
      p.tensors[ti].v[ei] = saved - h;
      double down = loss_at(p);
      p.tensors[ti].v[ei] = saved;
      double fd = (up - down) / (2.0 * h);
      double an = g.grads.g[ti][ei];
      double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
      INFO(p.tensors[ti].name, "[", ei, "] analytic ", an, " fd ", fd);
      CHECK(err < 1e-3);
      ++checked;
    }
  }
}

TEST_CASE("temperature gradient flows through encoder_gradients") {
  Rng rng(10);
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 29);
  size_t b = 3;
  ImageBatch imgs = random_images(b, cfg.image_size, rng);
  TokenBatch toks = random_tokens(b, cfg.max_seq_len, cfg.vocab_size, rng);
  Matrix sem = random_semantics(b, 5, rng);
  LossConfig loss{1.0, 0.5, SeparationMode::image_only, true};
  EncoderGradients g = encoder_gradients(imgs, toks, sem, p, loss);

  const double h = 1e-5;
  auto loss_with_t = [&](double t) {
    SharedEncoderParams q = p;
    q.set_temperature_log_scale(t);
    EmbeddingBatch ei = encode_image(imgs, q);
    EmbeddingBatch et = encode_text(toks, q);
    EmbeddingBatch es(sem.rows, sem.cols);
    es.values = sem.v;
    PairedBatch pb{std::move(ei), std::move(et), std::move(es)};
    return total_loss(pb, q.temperature(), loss).total;
  };
  double t0 = p.temperature_log_scale();
  double fd = (loss_with_t(t0 + h) - loss_with_t(t0 - h)) / (2.0 * h);
  double an = g.grads.g[p.temp_idx][0];
  CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4}) < 1e-4);
}

TEST_CASE("image tensors receive gradient even with beta zero") {
  Rng rng(12);
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 33);
  size_t b = 3;
  ImageBatch imgs = random_images(b, cfg.image_size, rng);
  TokenBatch toks = random_tokens(b, cfg.max_seq_len, cfg.vocab_size, rng);
  Matrix sem = random_semantics(b, 5, rng);
  LossConfig loss{1.0, 0.0, SeparationMode::none, true};
  EncoderGradients g = encoder_gradients(imgs, toks, sem, p, loss);
  double total_mag = 0.0;
  for (double v : g.grads.g[p.patch_w]) total_mag += std::abs(v);
  CHECK(total_mag > 0.0);
}

TEST_CASE("thread count does not change gradients") {
  Rng rng(14);
  SharedEncoderConfig cfg = tiny_cfg();
  SharedEncoderParams p = init_params(cfg, 37);
  size_t b = 4;
  ImageBatch imgs = random_images(b, cfg.image_size, rng);
  TokenBatch toks = random_tokens(b, cfg.max_seq_len, cfg.vocab_size, rng);
  Matrix sem = random_semantics(b, 5, rng);
  LossConfig loss{1.0, 0.5, SeparationMode::both, true};
  EncoderGradients g1 = encoder_gradients(imgs, toks, sem, p, loss, nullptr, 1);
  EncoderGradients g3 = encoder_gradients(imgs, toks, sem, p, loss, nullptr, 3);
  for (size_t i = 0; i < g1.grads.g.size(); ++i) CHECK(g1.grads.g[i] == g3.grads.g[i]);
}

TEST_CASE("config validation") {
  SharedEncoderConfig cfg = tiny_cfg();
  cfg.heads = 3;  // does not divide model_dim 8
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
  SharedEncoderConfig cfg2 = tiny_cfg();
  cfg2.patch_size = 5;  // does not divide image_size 8
  CHECK_THROWS_AS(cfg2.validate(), InvalidConfig);
  CHECK(SharedEncoderConfig{} == SharedEncoderConfig::toy());
}
