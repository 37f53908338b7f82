#include "alignclip/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <thread>

#include "alignclip/errors.hpp"
#include "alignclip/rng.hpp"
#include "gemm.hpp"

namespace alignclip {

std::string to_string(Sharing s) { return s == Sharing::shared ? "shared" : "unshared"; }

Sharing sharing_from_string(const std::string& s) {
  if (s == "shared") return Sharing::shared;
  if (s == "unshared") return Sharing::unshared;
  throw InvalidConfig("unknown sharing mode \"" + s + "\"");
}

void SharedEncoderConfig::validate() const {
  if (layers == 0 || heads == 0 || model_dim == 0 || proj_dim == 0 || image_size == 0 ||
      patch_size == 0 || vocab_size == 0 || max_seq_len == 0)
    throw InvalidConfig("encoder config fields must be positive");
  if (model_dim % heads != 0) throw InvalidConfig("model_dim must be divisible by heads");
  if (image_size % patch_size != 0) throw InvalidConfig("image_size must be divisible by patch_size");
}

SharedEncoderConfig SharedEncoderConfig::toy() { return SharedEncoderConfig{}; }

SharedEncoderConfig SharedEncoderConfig::paper_scale() {
  SharedEncoderConfig c;
  c.layers = 12;
  c.heads = 12;
  c.model_dim = 768;
  c.proj_dim = 768;
  c.image_size = 224;
  c.patch_size = 16;
  c.vocab_size = 49408;
  c.max_seq_len = 77;
  c.sharing = Sharing::shared;
  return c;
}

size_t SharedEncoderParams::parameter_count() const {
  size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

int SharedEncoderParams::find(const std::string& name) const {
  for (size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return static_cast<int>(i);
  return -1;
}

size_t trunk_parameter_count(const SharedEncoderConfig& cfg) {
  size_t c = cfg.model_dim, f = cfg.mlp_dim();
  size_t per_layer = 4 * c * c + 2 * c * f + 9 * c + f;
  return cfg.layers * per_layer + 2 * c;
}

size_t projection_parameter_count(const SharedEncoderConfig& cfg) {
  return cfg.model_dim * cfg.proj_dim;
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

enum class Init { normal, zero, one, temperature };

struct Builder {
  SharedEncoderParams& p;
  Rng rng;

  int add(const std::string& name, Owner owner, std::vector<size_t> shape, Init kind) {
    NamedTensor t;
    t.name = name;
    t.owner = owner;
    t.shape = std::move(shape);
    t.weight_decay = t.shape.size() >= 2;
    size_t n = 1;
    for (size_t s : t.shape) n *= s;
    t.v.resize(n);
    switch (kind) {
      case Init::normal:
        for (double& x : t.v) x = rng.normal() * 0.02;
        break;
      case Init::zero:
        break;
      case Init::one:
        std::fill(t.v.begin(), t.v.end(), 1.0);
        break;
      case Init::temperature:
        t.v[0] = std::log(1.0 / 0.07);
        break;
    }
    p.tensors.push_back(std::move(t));
    return static_cast<int>(p.tensors.size() - 1);
  }

  TrunkLayout add_trunk(const std::string& pfx, Owner owner, const SharedEncoderConfig& cfg) {
    size_t c = cfg.model_dim, f = cfg.mlp_dim();
    TrunkLayout lay;
    for (size_t l = 0; l < cfg.layers; ++l) {
      std::string lp = pfx + ".l" + std::to_string(l) + ".";
      TrunkLayout::Layer L{};
      L.ln1_g = add(lp + "ln1.g", owner, {c}, Init::one);
      L.ln1_b = add(lp + "ln1.b", owner, {c}, Init::zero);
      L.wq = add(lp + "attn.wq", owner, {c, c}, Init::normal);
      L.bq = add(lp + "attn.bq", owner, {c}, Init::zero);
      L.wk = add(lp + "attn.wk", owner, {c, c}, Init::normal);
      L.bk = add(lp + "attn.bk", owner, {c}, Init::zero);
      L.wv = add(lp + "attn.wv", owner, {c, c}, Init::normal);
      L.bv = add(lp + "attn.bv", owner, {c}, Init::zero);
      L.wo = add(lp + "attn.wo", owner, {c, c}, Init::normal);
      L.bo = add(lp + "attn.bo", owner, {c}, Init::zero);
      L.ln2_g = add(lp + "ln2.g", owner, {c}, Init::one);
      L.ln2_b = add(lp + "ln2.b", owner, {c}, Init::zero);
      L.w1 = add(lp + "mlp.w1", owner, {c, f}, Init::normal);
      L.b1 = add(lp + "mlp.b1", owner, {f}, Init::zero);
      L.w2 = add(lp + "mlp.w2", owner, {f, c}, Init::normal);
      L.b2 = add(lp + "mlp.b2", owner, {c}, Init::zero);
      lay.layers.push_back(L);
    }
    lay.lnf_g = add(pfx + ".lnf.g", owner, {c}, Init::one);
    lay.lnf_b = add(pfx + ".lnf.b", owner, {c}, Init::zero);
    return lay;
  }
};

void parallel_for(size_t n, size_t threads, const std::function<void(size_t, size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    if (n > 0) fn(0, n);
    return;
  }
  size_t k = std::min(threads, n);
  size_t chunk = (n + k - 1) / k;
  std::vector<std::thread> pool;
  for (size_t t = 0; t < k; ++t) {
    size_t a = t * chunk;
    size_t b = std::min(n, a + chunk);
    if (a >= b) break;
    pool.emplace_back([&fn, a, b] { fn(a, b); });
  }
  for (auto& th : pool) th.join();
}

void add_bias(double* y, const double* b, size_t rows, size_t c, size_t threads) {
  parallel_for(rows, threads, [&](size_t r0, size_t r1) {
    for (size_t r = r0; r < r1; ++r) {
      double* yr = y + r * c;
      for (size_t j = 0; j < c; ++j) yr[j] += b[j];
    }
  });
}

// column sums; serial so accumulation order never depends on thread count
void add_colsum(const double* dy, double* db, size_t rows, size_t c) {
  for (size_t r = 0; r < rows; ++r) {
    const double* dr = dy + r * c;
    for (size_t j = 0; j < c; ++j) db[j] += dr[j];
  }
}

void layernorm_forward(const double* x, const double* g, const double* b, double* out,
                       double* mean, double* rstd, size_t rows, size_t c, size_t threads) {
  parallel_for(rows, threads, [&](size_t r0, size_t r1) {
    for (size_t r = r0; r < r1; ++r) {
      const double* xr = x + r * c;
      double m = 0.0;
      for (size_t j = 0; j < c; ++j) m += xr[j];
      m /= static_cast<double>(c);
      double var = 0.0;
      for (size_t j = 0; j < c; ++j) {
        double d = xr[j] - m;
        var += d * d;
      }
      var /= static_cast<double>(c);
      double rs = 1.0 / std::sqrt(var + kLnEps);
      mean[r] = m;
      rstd[r] = rs;
      double* o = out + r * c;
      for (size_t j = 0; j < c; ++j) o[j] = (xr[j] - m) * rs * g[j] + b[j];
    }
  });
}

void layernorm_backward(const double* dout, const double* x, const double* g, const double* mean,
                        const double* rstd, double* dx, double* dg, double* db, size_t rows,
                        size_t c, size_t threads) {
  parallel_for(rows, threads, [&](size_t r0, size_t r1) {
    for (size_t r = r0; r < r1; ++r) {
      const double* xr = x + r * c;
      const double* dr = dout + r * c;
      double m = mean[r], rs = rstd[r];
      double s1 = 0.0, s2 = 0.0;
      for (size_t j = 0; j < c; ++j) {
        double xhat = (xr[j] - m) * rs;
        double dxhat = dr[j] * g[j];
        s1 += dxhat;
        s2 += dxhat * xhat;
      }
      s1 /= static_cast<double>(c);
      s2 /= static_cast<double>(c);
      double* dxr = dx + r * c;
      for (size_t j = 0; j < c; ++j) {
        double xhat = (xr[j] - m) * rs;
        dxr[j] += (dr[j] * g[j] - s1 - xhat * s2) * rs;
      }
    }
  });
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    const double* dr = dout + r * c;
    double m = mean[r], rs = rstd[r];
    for (size_t j = 0; j < c; ++j) {
      dg[j] += dr[j] * (xr[j] - m) * rs;
      db[j] += dr[j];
    }
  }
}

void gelu_forward(const double* x, double* out, size_t n, size_t threads) {
  parallel_for(n, threads, [&](size_t a, size_t b) {
    for (size_t i = a; i < b; ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
  });
}

void gelu_backward(const double* x, const double* dout, double* dx, size_t n, size_t threads) {
  parallel_for(n, threads, [&](size_t a, size_t b) {
    for (size_t i = a; i < b; ++i) {
      double phi = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      dx[i] = dout[i] * (phi + x[i] * pdf);
    }
  });
}

// Scores use 1/sqrt(head_dim); invalid key positions get probability exactly
// zero, which is what makes padding invariance exact rather than approximate.
void attention_forward(const double* q, const double* k, const double* v, double* probs,
                       double* ctx, size_t B, size_t T, size_t H, size_t dh,
                       const uint8_t* valid, size_t threads) {
  size_t c = H * dh;
  double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  parallel_for(B, threads, [&](size_t b0, size_t b1) {
    std::vector<double> sc(T);
    for (size_t b = b0; b < b1; ++b) {
      const uint8_t* vm = valid ? valid + b * T : nullptr;
      for (size_t h = 0; h < H; ++h) {
        for (size_t i = 0; i < T; ++i) {
          const double* qi = q + (b * T + i) * c + h * dh;
          double mx = -1e300;
          for (size_t j = 0; j < T; ++j) {
            if (vm && !vm[j]) continue;
            const double* kj = k + (b * T + j) * c + h * dh;
            double s = 0.0;
            for (size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
            s *= inv;
            sc[j] = s;
            if (s > mx) mx = s;
          }
          double sum = 0.0;
          for (size_t j = 0; j < T; ++j) {
            if (vm && !vm[j]) continue;
            sc[j] = std::exp(sc[j] - mx);
            sum += sc[j];
          }
          double isum = 1.0 / sum;
          double* pr = probs + ((b * H + h) * T + i) * T;
          double* ci = ctx + (b * T + i) * c + h * dh;
          for (size_t d = 0; d < dh; ++d) ci[d] = 0.0;
          for (size_t j = 0; j < T; ++j) {
            double p = (vm && !vm[j]) ? 0.0 : sc[j] * isum;
            pr[j] = p;
            if (p != 0.0) {
              const double* vj = v + (b * T + j) * c + h * dh;
              for (size_t d = 0; d < dh; ++d) ci[d] += p * vj[d];
            }
          }
        }
      }
    }
  });
}

// dq/dk/dv must arrive zeroed; samples write disjoint slices so the batch
// dimension parallelizes safely.
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dctx, double* dq, double* dk, double* dv, size_t B, size_t T,
                        size_t H, size_t dh, size_t threads) {
  size_t c = H * dh;
  double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  parallel_for(B, threads, [&](size_t b0, size_t b1) {
    std::vector<double> dp(T);
    for (size_t b = b0; b < b1; ++b) {
      for (size_t h = 0; h < H; ++h) {
        for (size_t i = 0; i < T; ++i) {
          const double* pr = probs + ((b * H + h) * T + i) * T;
          const double* dci = dctx + (b * T + i) * c + h * dh;
          double row_dot = 0.0;
          for (size_t j = 0; j < T; ++j) {
            if (pr[j] == 0.0) {
              dp[j] = 0.0;
              continue;
            }
            const double* vj = v + (b * T + j) * c + h * dh;
            double s = 0.0;
            for (size_t d = 0; d < dh; ++d) s += dci[d] * vj[d];
            dp[j] = s;
            row_dot += pr[j] * s;
            double* dvj = dv + (b * T + j) * c + h * dh;
            for (size_t d = 0; d < dh; ++d) dvj[d] += pr[j] * dci[d];
          }
          const double* qi = q + (b * T + i) * c + h * dh;
          double* dqi = dq + (b * T + i) * c + h * dh;
          for (size_t j = 0; j < T; ++j) {
            if (pr[j] == 0.0) continue;
            double ds = pr[j] * (dp[j] - row_dot) * inv;
            const double* kj = k + (b * T + j) * c + h * dh;
            double* dkj = dk + (b * T + j) * c + h * dh;
            for (size_t d = 0; d < dh; ++d) {
              dqi[d] += ds * kj[d];
              dkj[d] += ds * qi[d];
            }
          }
        }
      }
    }
  });
}

struct LayerPtrs {
  const double *ln1g, *ln1b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  const double *ln2g, *ln2b, *w1, *b1, *w2, *b2;
};

struct TrunkPtrs {
  std::vector<LayerPtrs> l;
  const double *lnfg, *lnfb;
};

struct LayerGradPtrs {
  double *ln1g, *ln1b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  double *ln2g, *ln2b, *w1, *b1, *w2, *b2;
};

struct TrunkGradPtrs {
  std::vector<LayerGradPtrs> l;
  double *lnfg, *lnfb;
};

TrunkPtrs trunk_ptrs(const SharedEncoderParams& p, const TrunkLayout& lay) {
  TrunkPtrs t;
  auto d = [&](int i) { return p.tensors[i].v.data(); };
  for (const auto& L : lay.layers)
    t.l.push_back({d(L.ln1_g), d(L.ln1_b), d(L.wq), d(L.bq), d(L.wk), d(L.bk), d(L.wv), d(L.bv),
                   d(L.wo), d(L.bo), d(L.ln2_g), d(L.ln2_b), d(L.w1), d(L.b1), d(L.w2), d(L.b2)});
  t.lnfg = d(lay.lnf_g);
  t.lnfb = d(lay.lnf_b);
  return t;
}

TrunkGradPtrs trunk_grad_ptrs(ParamGrads& g, const TrunkLayout& lay) {
  TrunkGradPtrs t;
  auto d = [&](int i) { return g.g[i].data(); };
  for (const auto& L : lay.layers)
    t.l.push_back({d(L.ln1_g), d(L.ln1_b), d(L.wq), d(L.bq), d(L.wk), d(L.bk), d(L.wv), d(L.bv),
                   d(L.wo), d(L.bo), d(L.ln2_g), d(L.ln2_b), d(L.w1), d(L.b1), d(L.w2), d(L.b2)});
  t.lnfg = d(lay.lnf_g);
  t.lnfb = d(lay.lnf_b);
  return t;
}

struct TrunkWork {
  size_t B = 0, T = 0, C = 0, H = 0, L = 0, F = 0, P = 0;

  std::vector<double> xs;  // (2L+1) residual snapshots, each [B*T*C]
  struct LayerBuf {
    std::vector<double> ln1_out, ln1_mean, ln1_rstd;
    std::vector<double> q, k, v, probs, ctx;
    std::vector<double> ln2_out, ln2_mean, ln2_rstd;
    std::vector<double> h1, hg;
  };
  std::vector<LayerBuf> lb;
  std::vector<double> lnf_out, lnf_mean, lnf_rstd;
  std::vector<double> pooled, z, inv_norm, out;
  std::vector<int32_t> pool_arg;
  std::vector<double> patches, emb;  // image stem only

  std::vector<double> dx, dtmp, dq, dk, dv, dctx, dh1, dhg, dpooled, dz, d_lnf;

  double* x(size_t stage) { return xs.data() + stage * B * T * C; }
  const double* x(size_t stage) const { return xs.data() + stage * B * T * C; }

  void resize(size_t B_, size_t T_, size_t C_, size_t H_, size_t L_, size_t F_, size_t P_,
              size_t patch_px) {
    B = B_; T = T_; C = C_; H = H_; L = L_; F = F_; P = P_;
    size_t btc = B * T * C, btf = B * T * F;
    xs.resize((2 * L + 1) * btc);
    lb.resize(L);
    for (auto& b : lb) {
      b.ln1_out.resize(btc);
      b.ln1_mean.resize(B * T);
      b.ln1_rstd.resize(B * T);
      b.q.resize(btc);
      b.k.resize(btc);
      b.v.resize(btc);
      b.probs.resize(B * H * T * T);
      b.ctx.resize(btc);
      b.ln2_out.resize(btc);
      b.ln2_mean.resize(B * T);
      b.ln2_rstd.resize(B * T);
      b.h1.resize(btf);
      b.hg.resize(btf);
    }
    lnf_out.resize(btc);
    lnf_mean.resize(B * T);
    lnf_rstd.resize(B * T);
    pooled.resize(B * C);
    z.resize(B * P);
    inv_norm.resize(B);
    out.resize(B * P);
    pool_arg.resize(B * C);
    if (patch_px) {
      patches.resize(B * (T - 1) * patch_px);
      emb.resize(B * (T - 1) * C);
    }
    dx.resize(btc);
    dtmp.resize(btc);
    dq.resize(btc);
    dk.resize(btc);
    dv.resize(btc);
    dctx.resize(btc);
    dh1.resize(btf);
    dhg.resize(btf);
    dpooled.resize(B * C);
    dz.resize(B * P);
    d_lnf.resize(btc);
  }
};

void trunk_forward(const TrunkPtrs& tp, TrunkWork& w, const uint8_t* valid, size_t threads) {
  size_t n = w.B * w.T;
  for (size_t l = 0; l < w.L; ++l) {
    auto& b = w.lb[l];
    const auto& p = tp.l[l];
    const double* xin = w.x(2 * l);
    double* x_attn = w.x(2 * l + 1);
    double* x_mlp = w.x(2 * l + 2);

    layernorm_forward(xin, p.ln1g, p.ln1b, b.ln1_out.data(), b.ln1_mean.data(), b.ln1_rstd.data(),
                      n, w.C, threads);
    detail::mm_nn(n, w.C, w.C, b.ln1_out.data(), p.wq, b.q.data());
    add_bias(b.q.data(), p.bq, n, w.C, threads);
    detail::mm_nn(n, w.C, w.C, b.ln1_out.data(), p.wk, b.k.data());
    add_bias(b.k.data(), p.bk, n, w.C, threads);
    detail::mm_nn(n, w.C, w.C, b.ln1_out.data(), p.wv, b.v.data());
    add_bias(b.v.data(), p.bv, n, w.C, threads);
    attention_forward(b.q.data(), b.k.data(), b.v.data(), b.probs.data(), b.ctx.data(), w.B, w.T,
                      w.H, w.C / w.H, valid, threads);
    detail::mm_nn(n, w.C, w.C, b.ctx.data(), p.wo, x_attn);
    parallel_for(n, threads, [&](size_t r0, size_t r1) {
      for (size_t r = r0; r < r1; ++r)
        for (size_t j = 0; j < w.C; ++j) x_attn[r * w.C + j] += xin[r * w.C + j] + p.bo[j];
    });

    layernorm_forward(x_attn, p.ln2g, p.ln2b, b.ln2_out.data(), b.ln2_mean.data(),
                      b.ln2_rstd.data(), n, w.C, threads);
    detail::mm_nn(n, w.F, w.C, b.ln2_out.data(), p.w1, b.h1.data());
    add_bias(b.h1.data(), p.b1, n, w.F, threads);
    gelu_forward(b.h1.data(), b.hg.data(), n * w.F, threads);
    detail::mm_nn(n, w.C, w.F, b.hg.data(), p.w2, x_mlp);
    parallel_for(n, threads, [&](size_t r0, size_t r1) {
      for (size_t r = r0; r < r1; ++r)
        for (size_t j = 0; j < w.C; ++j) x_mlp[r * w.C + j] += x_attn[r * w.C + j] + p.b2[j];
    });
  }
  layernorm_forward(w.x(2 * w.L), tp.lnfg, tp.lnfb, w.lnf_out.data(), w.lnf_mean.data(),
                    w.lnf_rstd.data(), n, w.C, threads);
}

// Consumes w.d_lnf (gradient at the final layernorm output) and leaves the
// gradient at the embedded input in w.dx.
void trunk_backward(const TrunkPtrs& tp, const TrunkGradPtrs& tg, TrunkWork& w, size_t threads) {
  size_t n = w.B * w.T;
  size_t btc = n * w.C;
  std::memset(w.dx.data(), 0, btc * sizeof(double));
  layernorm_backward(w.d_lnf.data(), w.x(2 * w.L), tp.lnfg, w.lnf_mean.data(), w.lnf_rstd.data(),
                     w.dx.data(), tg.lnfg, tg.lnfb, n, w.C, threads);
  for (size_t li = w.L; li-- > 0;) {
    auto& b = w.lb[li];
    const auto& p = tp.l[li];
    const auto& g = tg.l[li];
    const double* x_attn = w.x(2 * li + 1);
    const double* xin = w.x(2 * li);

    // w.dx holds the gradient at x_mlp; the residual passes it through while
    // the mlp path adds its contribution via ln2.
    detail::mm_nt(n, w.F, w.C, w.dx.data(), p.w2, w.dhg.data());
    detail::mm_tn(w.F, w.C, n, b.hg.data(), w.dx.data(), g.w2, 1.0, 1.0);
    add_colsum(w.dx.data(), g.b2, n, w.C);
    gelu_backward(b.h1.data(), w.dhg.data(), w.dh1.data(), n * w.F, threads);
    detail::mm_nt(n, w.C, w.F, w.dh1.data(), p.w1, w.dtmp.data());
    detail::mm_tn(w.C, w.F, n, b.ln2_out.data(), w.dh1.data(), g.w1, 1.0, 1.0);
    add_colsum(w.dh1.data(), g.b1, n, w.F);
    layernorm_backward(w.dtmp.data(), x_attn, p.ln2g, b.ln2_mean.data(), b.ln2_rstd.data(),
                       w.dx.data(), g.ln2g, g.ln2b, n, w.C, threads);

    // now w.dx is the gradient at x_attn
    detail::mm_nt(n, w.C, w.C, w.dx.data(), p.wo, w.dctx.data());
    detail::mm_tn(w.C, w.C, n, b.ctx.data(), w.dx.data(), g.wo, 1.0, 1.0);
    add_colsum(w.dx.data(), g.bo, n, w.C);
    std::memset(w.dq.data(), 0, btc * sizeof(double));
    std::memset(w.dk.data(), 0, btc * sizeof(double));
    std::memset(w.dv.data(), 0, btc * sizeof(double));
    attention_backward(b.q.data(), b.k.data(), b.v.data(), b.probs.data(), w.dctx.data(),
                       w.dq.data(), w.dk.data(), w.dv.data(), w.B, w.T, w.H, w.C / w.H, threads);
    detail::mm_nt(n, w.C, w.C, w.dq.data(), p.wq, w.dtmp.data());
    detail::mm_nt(n, w.C, w.C, w.dk.data(), p.wk, w.dtmp.data(), 1.0, 1.0);
    detail::mm_nt(n, w.C, w.C, w.dv.data(), p.wv, w.dtmp.data(), 1.0, 1.0);
    detail::mm_tn(w.C, w.C, n, b.ln1_out.data(), w.dq.data(), g.wq, 1.0, 1.0);
    detail::mm_tn(w.C, w.C, n, b.ln1_out.data(), w.dk.data(), g.wk, 1.0, 1.0);
    detail::mm_tn(w.C, w.C, n, b.ln1_out.data(), w.dv.data(), g.wv, 1.0, 1.0);
    add_colsum(w.dq.data(), g.bq, n, w.C);
    add_colsum(w.dk.data(), g.bk, n, w.C);
    add_colsum(w.dv.data(), g.bv, n, w.C);
    layernorm_backward(w.dtmp.data(), xin, p.ln1g, b.ln1_mean.data(), b.ln1_rstd.data(),
                       w.dx.data(), g.ln1g, g.ln1b, n, w.C, threads);
    // w.dx is now the gradient at this layer's input
  }
}

// pooled -> projection -> unit sphere
void head_forward(const double* proj, TrunkWork& w, bool image, const uint8_t* valid,
                  size_t threads) {
  if (image) {
    parallel_for(w.B, threads, [&](size_t b0, size_t b1) {
      for (size_t b = b0; b < b1; ++b)
        std::memcpy(w.pooled.data() + b * w.C, w.lnf_out.data() + b * w.T * w.C,
                    w.C * sizeof(double));
    });
  } else {
    // max over valid positions, first index wins ties
    parallel_for(w.B, threads, [&](size_t b0, size_t b1) {
      for (size_t b = b0; b < b1; ++b) {
        const uint8_t* vm = valid + b * w.T;
        for (size_t c = 0; c < w.C; ++c) {
          double best = 0.0;
          int32_t arg = -1;
          for (size_t t = 0; t < w.T; ++t) {
            if (!vm[t]) continue;
            double val = w.lnf_out[(b * w.T + t) * w.C + c];
            if (arg < 0 || val > best) {
              best = val;
              arg = static_cast<int32_t>(t);
            }
          }
          w.pooled[b * w.C + c] = best;
          w.pool_arg[b * w.C + c] = arg;
        }
      }
    });
  }
  detail::mm_nn(w.B, w.P, w.C, w.pooled.data(), proj, w.z.data());
  for (size_t b = 0; b < w.B; ++b) {
    const double* zb = w.z.data() + b * w.P;
    double sq = 0.0;
    for (size_t j = 0; j < w.P; ++j) sq += zb[j] * zb[j];
    if (!std::isfinite(sq)) throw NonFinite("encoder output is not finite");
    double norm = std::sqrt(sq);
    if (norm <= 1e-12) throw ZeroRow("encoder produced a zero embedding before normalization");
    w.inv_norm[b] = 1.0 / norm;
    double* ob = w.out.data() + b * w.P;
    for (size_t j = 0; j < w.P; ++j) ob[j] = zb[j] * w.inv_norm[b];
  }
}

// dout [B,P] -> fills w.d_lnf and accumulates the projection gradient
void head_backward(const double* proj, double* dproj, TrunkWork& w, bool image,
                   const double* dout, size_t threads) {
  for (size_t b = 0; b < w.B; ++b) {
    const double* ob = w.out.data() + b * w.P;
    const double* db = dout + b * w.P;
    double dot = 0.0;
    for (size_t j = 0; j < w.P; ++j) dot += ob[j] * db[j];
    double* dzb = w.dz.data() + b * w.P;
    for (size_t j = 0; j < w.P; ++j) dzb[j] = (db[j] - ob[j] * dot) * w.inv_norm[b];
  }
  detail::mm_tn(w.C, w.P, w.B, w.pooled.data(), w.dz.data(), dproj, 1.0, 1.0);
  detail::mm_nt(w.B, w.C, w.P, w.dz.data(), proj, w.dpooled.data());
  std::memset(w.d_lnf.data(), 0, w.B * w.T * w.C * sizeof(double));
  parallel_for(w.B, threads, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      if (image) {
        std::memcpy(w.d_lnf.data() + b * w.T * w.C, w.dpooled.data() + b * w.C,
                    w.C * sizeof(double));
      } else {
        for (size_t c = 0; c < w.C; ++c) {
          int32_t t = w.pool_arg[b * w.C + c];
          w.d_lnf[(b * w.T + static_cast<size_t>(t)) * w.C + c] += w.dpooled[b * w.C + c];
        }
      }
    }
  });
}

void image_stem_forward(const SharedEncoderParams& p, const ImageBatch& imgs, size_t off,
                        TrunkWork& w, size_t threads) {
  const auto& cfg = p.cfg;
  size_t s = cfg.image_size, ps = cfg.patch_size, np = cfg.num_patches();
  size_t side = cfg.patches_per_side(), ppx = ps * ps;
  parallel_for(w.B, threads, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const double* img = imgs.image(off + b);
      for (size_t pidx = 0; pidx < np; ++pidx) {
        size_t pr = pidx / side, pc = pidx % side;
        double* dst = w.patches.data() + (b * np + pidx) * ppx;
        for (size_t u = 0; u < ps; ++u)
          for (size_t vv = 0; vv < ps; ++vv) dst[u * ps + vv] = img[(pr * ps + u) * s + pc * ps + vv];
      }
    }
  });
  const double* pw = p.tensors[p.patch_w].v.data();
  const double* pb = p.tensors[p.patch_b].v.data();
  const double* cls = p.tensors[p.cls].v.data();
  const double* pos = p.tensors[p.img_pos].v.data();
  detail::mm_nn(w.B * np, w.C, ppx, w.patches.data(), pw, w.emb.data());
  double* x0 = w.x(0);
  parallel_for(w.B, threads, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      double* row0 = x0 + b * w.T * w.C;
      for (size_t j = 0; j < w.C; ++j) row0[j] = cls[j] + pos[j];
      for (size_t pidx = 0; pidx < np; ++pidx) {
        double* row = row0 + (1 + pidx) * w.C;
        const double* e = w.emb.data() + (b * np + pidx) * w.C;
        const double* po = pos + (1 + pidx) * w.C;
        for (size_t j = 0; j < w.C; ++j) row[j] = e[j] + pb[j] + po[j];
      }
    }
  });
}

void image_stem_backward(const SharedEncoderParams& p, ParamGrads& g, TrunkWork& w) {
  const auto& cfg = p.cfg;
  size_t np = cfg.num_patches(), ppx = cfg.patch_size * cfg.patch_size;
  double* dcls = g.g[p.cls].data();
  double* dpos = g.g[p.img_pos].data();
  double* dpb = g.g[p.patch_b].data();
  const double* dx = w.dx.data();
  // reuse emb as the gathered patch-embedding gradient
  for (size_t b = 0; b < w.B; ++b) {
    const double* row0 = dx + b * w.T * w.C;
    for (size_t j = 0; j < w.C; ++j) {
      dcls[j] += row0[j];
      dpos[j] += row0[j];
    }
    for (size_t pidx = 0; pidx < np; ++pidx) {
      const double* row = row0 + (1 + pidx) * w.C;
      double* e = w.emb.data() + (b * np + pidx) * w.C;
      double* po = dpos + (1 + pidx) * w.C;
      for (size_t j = 0; j < w.C; ++j) {
        e[j] = row[j];
        po[j] += row[j];
        dpb[j] += row[j];
      }
    }
  }
  detail::mm_tn(ppx, w.C, w.B * np, w.patches.data(), w.emb.data(), g.g[p.patch_w].data(), 1.0,
                1.0);
}

void text_stem_forward(const SharedEncoderParams& p, const TokenBatch& toks, size_t off,
                       TrunkWork& w, size_t threads) {
  const double* tok = p.tensors[p.tok_embed].v.data();
  const double* pos = p.tensors[p.txt_pos].v.data();
  double* x0 = w.x(0);
  parallel_for(w.B, threads, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const uint32_t* row = toks.row(off + b);
      for (size_t t = 0; t < w.T; ++t) {
        const double* e = tok + row[t] * w.C;
        const double* po = pos + t * w.C;
        double* dst = x0 + (b * w.T + t) * w.C;
        for (size_t j = 0; j < w.C; ++j) dst[j] = e[j] + po[j];
      }
    }
  });
}

void text_stem_backward(const SharedEncoderParams& p, ParamGrads& g, const TokenBatch& toks,
                        size_t off, TrunkWork& w) {
  double* dtok = g.g[p.tok_embed].data();
  double* dpos = g.g[p.txt_pos].data();
  const double* dx = w.dx.data();
  for (size_t b = 0; b < w.B; ++b) {
    const uint32_t* row = toks.row(off + b);
    for (size_t t = 0; t < w.T; ++t) {
      const double* src = dx + (b * w.T + t) * w.C;
      double* et = dtok + row[t] * w.C;
      double* po = dpos + t * w.C;
      for (size_t j = 0; j < w.C; ++j) {
        et[j] += src[j];
        po[j] += src[j];
      }
    }
  }
}

void validate_images(const ImageBatch& imgs, const SharedEncoderConfig& cfg) {
  if (imgs.count == 0) throw ShapeMismatch("encode_image: empty batch");
  if (imgs.image_size != cfg.image_size)
    throw ShapeMismatch("encode_image: image size " + std::to_string(imgs.image_size) +
                        " does not match model image size " + std::to_string(cfg.image_size));
  if (imgs.pixels.size() != imgs.count * imgs.image_size * imgs.image_size)
    throw ShapeMismatch("encode_image: pixel buffer size mismatch");
  for (double v : imgs.pixels)
    if (!std::isfinite(v)) throw NonFinite("encode_image: non-finite pixel");
}

void validate_tokens(const TokenBatch& toks, const SharedEncoderConfig& cfg) {
  if (toks.count == 0) throw ShapeMismatch("encode_text: empty batch");
  if (toks.seq_len == 0 || toks.seq_len > cfg.max_seq_len)
    throw ShapeMismatch("encode_text: sequence length " + std::to_string(toks.seq_len) +
                        " exceeds model limit " + std::to_string(cfg.max_seq_len));
  if (toks.tokens.size() != toks.count * toks.seq_len || toks.valid.size() != toks.tokens.size())
    throw ShapeMismatch("encode_text: token buffer size mismatch");
  for (size_t b = 0; b < toks.count; ++b) {
    bool any = false;
    for (size_t t = 0; t < toks.seq_len; ++t) {
      if (toks.mask(b)[t]) any = true;
      if (toks.row(b)[t] >= cfg.vocab_size)
        throw DataError("encode_text: token id " + std::to_string(toks.row(b)[t]) +
                        " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
    if (!any) throw EmptySequence("encode_text: row " + std::to_string(b) + " has no valid tokens");
  }
}

void image_forward(const SharedEncoderParams& p, const ImageBatch& imgs, size_t off, size_t cnt,
                   TrunkWork& w, size_t threads) {
  const auto& cfg = p.cfg;
  w.resize(cnt, cfg.image_tokens(), cfg.model_dim, cfg.heads, cfg.layers, cfg.mlp_dim(),
           cfg.proj_dim, cfg.patch_size * cfg.patch_size);
  image_stem_forward(p, imgs, off, w, threads);
  TrunkPtrs tp = trunk_ptrs(p, p.image_trunk);
  trunk_forward(tp, w, nullptr, threads);
  head_forward(p.tensors[p.proj_image].v.data(), w, true, nullptr, threads);
}

void text_forward(const SharedEncoderParams& p, const TokenBatch& toks, size_t off, size_t cnt,
                  TrunkWork& w, size_t threads) {
  const auto& cfg = p.cfg;
  w.resize(cnt, toks.seq_len, cfg.model_dim, cfg.heads, cfg.layers, cfg.mlp_dim(), cfg.proj_dim,
           0);
  text_stem_forward(p, toks, off, w, threads);
  TrunkPtrs tp = trunk_ptrs(p, p.text_trunk);
  trunk_forward(tp, w, toks.valid.data() + off * toks.seq_len, threads);
  head_forward(p.tensors[p.proj_text].v.data(), w, false, toks.valid.data() + off * toks.seq_len,
               threads);
}

void collect_out(const TrunkWork& w, EmbeddingBatch& dst, size_t off) {
  std::memcpy(dst.values.data() + off * w.P, w.out.data(), w.B * w.P * sizeof(double));
}

}  // namespace

struct EncoderWorkspace {
  TrunkWork img;
  TrunkWork txt;
};

EncoderWorkspace* workspace_create() { return new EncoderWorkspace(); }
void workspace_destroy(EncoderWorkspace* ws) { delete ws; }

ParamGrads ParamGrads::zeros_like(const SharedEncoderParams& p) {
  ParamGrads g;
  g.g.resize(p.tensors.size());
  for (size_t i = 0; i < p.tensors.size(); ++i) g.g[i].assign(p.tensors[i].size(), 0.0);
  return g;
}

void ParamGrads::zero() {
  for (auto& v : g) std::fill(v.begin(), v.end(), 0.0);
}

SharedEncoderParams init_params(const SharedEncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  SharedEncoderParams p;
  p.cfg = cfg;
  Builder b{p, Rng(seed)};
  size_t c = cfg.model_dim;
  p.patch_w = b.add("img.patch_w", Owner::image, {cfg.patch_size * cfg.patch_size, c}, Init::normal);
  p.patch_b = b.add("img.patch_b", Owner::image, {c}, Init::zero);
  p.cls = b.add("img.cls", Owner::image, {c}, Init::normal);
  p.img_pos = b.add("img.pos", Owner::image, {cfg.image_tokens(), c}, Init::normal);
  p.tok_embed = b.add("txt.tok_embed", Owner::text, {cfg.vocab_size, c}, Init::normal);
  p.txt_pos = b.add("txt.pos", Owner::text, {cfg.max_seq_len, c}, Init::normal);
  if (cfg.sharing == Sharing::shared) {
    p.image_trunk = b.add_trunk("trunk", Owner::shared, cfg);
    p.text_trunk = p.image_trunk;
    p.proj_image = b.add("proj.w", Owner::shared, {c, cfg.proj_dim}, Init::normal);
    p.proj_text = p.proj_image;
  } else {
    p.image_trunk = b.add_trunk("trunk_img", Owner::image, cfg);
    p.text_trunk = b.add_trunk("trunk_txt", Owner::text, cfg);
    p.proj_image = b.add("proj_img.w", Owner::image, {c, cfg.proj_dim}, Init::normal);
    p.proj_text = b.add("proj_txt.w", Owner::text, {c, cfg.proj_dim}, Init::normal);
  }
  p.temp_idx = b.add("temp.t", Owner::shared, {1}, Init::temperature);
  return p;
}

EmbeddingBatch encode_image(const ImageBatch& images, const SharedEncoderParams& params) {
  validate_images(images, params.cfg);
  EmbeddingBatch out(images.count, params.cfg.proj_dim);
  TrunkWork w;
  constexpr size_t kChunk = 256;
  for (size_t off = 0; off < images.count; off += kChunk) {
    size_t cnt = std::min(kChunk, images.count - off);
    image_forward(params, images, off, cnt, w, 1);
    collect_out(w, out, off);
  }
  out.normalized = true;
  return out;
}

EmbeddingBatch encode_text(const TokenBatch& tokens, const SharedEncoderParams& params) {
  validate_tokens(tokens, params.cfg);
  EmbeddingBatch out(tokens.count, params.cfg.proj_dim);
  TrunkWork w;
  constexpr size_t kChunk = 256;
  for (size_t off = 0; off < tokens.count; off += kChunk) {
    size_t cnt = std::min(kChunk, tokens.count - off);
    text_forward(params, tokens, off, cnt, w, 1);
    collect_out(w, out, off);
  }
  out.normalized = true;
  return out;
}

EncoderGradients encoder_gradients(const ImageBatch& images, const TokenBatch& tokens,
                                   const Matrix& semantics, const SharedEncoderParams& params,
                                   const LossConfig& loss_cfg, EncoderWorkspace* ws,
                                   size_t threads) {
  validate_images(images, params.cfg);
  validate_tokens(tokens, params.cfg);
  if (images.count != tokens.count || semantics.rows != images.count)
    throw DimensionMismatch("encoder_gradients: images, tokens and semantics must be row-aligned");

  EncoderWorkspace local;
  EncoderWorkspace& work = ws ? *ws : local;

  image_forward(params, images, 0, images.count, work.img, threads);
  text_forward(params, tokens, 0, tokens.count, work.txt, threads);

  PairedBatch batch;
  batch.image = EmbeddingBatch(images.count, params.cfg.proj_dim);
  batch.image.values = work.img.out;
  batch.image.normalized = true;
  batch.text = EmbeddingBatch(tokens.count, params.cfg.proj_dim);
  batch.text.values = work.txt.out;
  batch.text.normalized = true;
  batch.semantic = EmbeddingBatch(semantics.rows, semantics.cols);
  batch.semantic.values = semantics.v;

  LossGradients lg = loss_gradients(batch, params.temperature(), loss_cfg);

  EncoderGradients out;
  out.grads = ParamGrads::zeros_like(params);
  out.breakdown = lg.breakdown;

  TrunkGradPtrs img_g = trunk_grad_ptrs(out.grads, params.image_trunk);
  head_backward(params.tensors[params.proj_image].v.data(), out.grads.g[params.proj_image].data(),
                work.img, true, lg.d_image.v.data(), threads);
  trunk_backward(trunk_ptrs(params, params.image_trunk), img_g, work.img, threads);
  image_stem_backward(params, out.grads, work.img);

  TrunkGradPtrs txt_g = trunk_grad_ptrs(out.grads, params.text_trunk);
  head_backward(params.tensors[params.proj_text].v.data(), out.grads.g[params.proj_text].data(),
                work.txt, false, lg.d_text.v.data(), threads);
  trunk_backward(trunk_ptrs(params, params.text_trunk), txt_g, work.txt, threads);
  text_stem_backward(params, out.grads, tokens, 0, work.txt);

  out.grads.g[params.temp_idx][0] += lg.d_log_scale;
  return out;
}

}  // namespace alignclip
