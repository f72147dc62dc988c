#pragma once

// Flat-buffer forward/backward for the pre-LN encoder. Parameters live in a
// single contiguous array in TransformerParams::visit order. Instantiated
// with float for training and double for evaluation and gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "otfuse/model.hpp"

namespace otfuse::model {

struct LayerOffsets {
  std::size_t ln1_a, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_a, ln2_b, w1,
      b1, w2, b2;
};

struct ParamOffsets {
  std::size_t patch_w, patch_b, cls, pos;
  std::vector<LayerOffsets> layers;
  std::size_t fin_a, fin_b, head_w, head_b;
  std::size_t total;

  explicit ParamOffsets(const ArchConfig &arch);
};

namespace kernels {

// c[m x n] = a[m x k] · b[k x n]
template <typename R>
void mm(const R *a, const R *b, R *c, std::size_t m, std::size_t k,
        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    R *ci = c + i * n;
    std::fill(ci, ci + n, R(0));
    for (std::size_t p = 0; p < k; ++p) {
      const R av = a[i * k + p];
      const R *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += av * bp[j];
    }
  }
}

// c[k x n] += a[m x k]ᵀ · b[m x n]
template <typename R>
void mm_tn_acc(const R *a, const R *b, R *c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const R *bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const R av = a[i * k + p];
      R *cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j)
        cp[j] += av * bi[j];
    }
  }
}

// c[m x k] = a[m x n] · b[k x n]ᵀ
template <typename R>
void mm_nt(const R *a, const R *b, R *c, std::size_t m, std::size_t n,
           std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      R s = 0;
      const R *ai = a + i * n;
      const R *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j)
        s += ai[j] * bp[j];
      c[i * k + p] = s;
    }
}

template <typename R>
void add_bias(R *x, const R *bias, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      x[i * cols + j] += bias[j];
}

template <typename R>
void bias_grad_acc(const R *dy, R *db, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      db[j] += dy[i * cols + j];
}

// Normalizes each of `rows` vectors; stores xhat and 1/std for backward.
template <typename R>
void ln_forward(const R *x, const R *alpha, const R *beta, R *y, R *xhat,
                R *rstd, std::size_t rows, std::size_t d, R eps) {
  for (std::size_t i = 0; i < rows; ++i) {
    const R *xi = x + i * d;
    R mean = 0;
    for (std::size_t j = 0; j < d; ++j)
      mean += xi[j];
    mean /= static_cast<R>(d);
    R var = 0;
    for (std::size_t j = 0; j < d; ++j)
      var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<R>(d);
    const R rs = R(1) / std::sqrt(var + eps);
    rstd[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const R h = (xi[j] - mean) * rs;
      xhat[i * d + j] = h;
      y[i * d + j] = h * alpha[j] + beta[j];
    }
  }
}

// dx += LN backward; accumulates dalpha, dbeta.
template <typename R>
void ln_backward(const R *dy, const R *xhat, const R *rstd, const R *alpha,
                 R *dx, R *dalpha, R *dbeta, std::size_t rows, std::size_t d) {
  std::vector<R> dxhat(d);
  for (std::size_t i = 0; i < rows; ++i) {
    const R *dyi = dy + i * d;
    const R *hi = xhat + i * d;
    R mean_dxhat = 0, mean_dxhat_h = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dyi[j] * alpha[j];
      dalpha[j] += dyi[j] * hi[j];
      dbeta[j] += dyi[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_h += dxhat[j] * hi[j];
    }
    mean_dxhat /= static_cast<R>(d);
    mean_dxhat_h /= static_cast<R>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx[i * d + j] += rstd[i] * (dxhat[j] - mean_dxhat - hi[j] * mean_dxhat_h);
  }
}

template <typename R> R gelu(R x) {
  return R(0.5) * x * (R(1) + std::erf(x / static_cast<R>(std::numbers::sqrt2)));
}

template <typename R> R gelu_grad(R x) {
  const R cdf = R(0.5) * (R(1) + std::erf(x / static_cast<R>(std::numbers::sqrt2)));
  const R pdf = std::exp(R(-0.5) * x * x) /
                static_cast<R>(std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

} // namespace kernels

// Per-example activations kept for the backward pass and for traces.
template <typename R> struct LayerCache {
  std::vector<R> x_in, xhat1, rstd1, a, q, k, v, probs, o, z, x_mid, xhat2,
      rstd2, b, u, g, f;
};

template <typename R> struct ExampleCache {
  std::vector<R> patches;
  std::vector<R> concat; // seq x d, before positional add
  std::vector<R> x0;     // seq x d
  std::vector<LayerCache<R>> layers;
  std::vector<R> x_final, xhat_f, rstd_f, c;
  std::vector<R> logits;
  std::vector<R> scores; // pre-softmax, per layer: heads x seq x seq
};

template <typename R> class EncoderCore {
public:
  EncoderCore(const ArchConfig &arch) : arch_(arch), off_(arch) {}

  const ParamOffsets &offsets() const { return off_; }
  const ArchConfig &arch() const { return arch_; }

  // patches: num_patches x patch_dim. Fills cache and returns its logits.
  void forward(const R *P, const R *patches, ExampleCache<R> &cache,
               bool keep_scores = false) const {
    using namespace kernels;
    const std::size_t d = arch_.hidden_dim, S = arch_.seq_len(),
                      np = arch_.num_patches(), pd = arch_.patch_dim,
                      I = arch_.intermediate_dim, H = arch_.num_heads,
                      dh = arch_.head_dim(), C = arch_.num_classes;
    const R eps = static_cast<R>(arch_.eps_ln);
    const R scale = R(1) / std::sqrt(static_cast<R>(dh));

    cache.patches.assign(patches, patches + np * pd);
    cache.concat.assign(S * d, R(0));
    std::copy(P + off_.cls, P + off_.cls + d, cache.concat.begin());
    mm(patches, P + off_.patch_w, cache.concat.data() + d, np, pd, d);
    add_bias(cache.concat.data() + d, P + off_.patch_b, np, d);
    cache.x0 = cache.concat;
    for (std::size_t i = 0; i < S * d; ++i)
      cache.x0[i] += P[off_.pos + i];

    cache.layers.resize(arch_.num_layers);
    if (keep_scores)
      cache.scores.assign(arch_.num_layers * H * S * S, R(0));
    for (std::size_t l = 0; l < arch_.num_layers; ++l) {
      const LayerOffsets &o = off_.layers[l];
      LayerCache<R> &lc = cache.layers[l];
      if (l == 0)
        lc.x_in = cache.x0;
      lc.xhat1.resize(S * d);
      lc.rstd1.resize(S);
      lc.a.resize(S * d);
      ln_forward(lc.x_in.data(), P + o.ln1_a, P + o.ln1_b, lc.a.data(),
                 lc.xhat1.data(), lc.rstd1.data(), S, d, eps);
      lc.q.resize(S * d);
      lc.k.resize(S * d);
      lc.v.resize(S * d);
      mm(lc.a.data(), P + o.wq, lc.q.data(), S, d, d);
      add_bias(lc.q.data(), P + o.bq, S, d);
      mm(lc.a.data(), P + o.wk, lc.k.data(), S, d, d);
      add_bias(lc.k.data(), P + o.bk, S, d);
      mm(lc.a.data(), P + o.wv, lc.v.data(), S, d, d);
      add_bias(lc.v.data(), P + o.bv, S, d);

      lc.probs.assign(H * S * S, R(0));
      lc.o.assign(S * d, R(0));
      for (std::size_t h = 0; h < H; ++h) {
        R *ph = lc.probs.data() + h * S * S;
        for (std::size_t i = 0; i < S; ++i) {
          R mx = -std::numeric_limits<R>::infinity();
          for (std::size_t j = 0; j < S; ++j) {
            R s = 0;
            for (std::size_t c = 0; c < dh; ++c)
              s += lc.q[i * d + h * dh + c] * lc.k[j * d + h * dh + c];
            s *= scale;
            if (keep_scores)
              cache.scores[((l * H + h) * S + i) * S + j] = s;
            ph[i * S + j] = s;
            mx = std::max(mx, s);
          }
          R sum = 0;
          for (std::size_t j = 0; j < S; ++j) {
            ph[i * S + j] = std::exp(ph[i * S + j] - mx);
            sum += ph[i * S + j];
          }
          for (std::size_t j = 0; j < S; ++j)
            ph[i * S + j] /= sum;
          for (std::size_t j = 0; j < S; ++j) {
            const R pij = ph[i * S + j];
            for (std::size_t c = 0; c < dh; ++c)
              lc.o[i * d + h * dh + c] += pij * lc.v[j * d + h * dh + c];
          }
        }
      }
      lc.z.resize(S * d);
      mm(lc.o.data(), P + o.wo, lc.z.data(), S, d, d);
      add_bias(lc.z.data(), P + o.bo, S, d);
      lc.x_mid.resize(S * d);
      for (std::size_t i = 0; i < S * d; ++i)
        lc.x_mid[i] = lc.x_in[i] + lc.z[i];

      lc.xhat2.resize(S * d);
      lc.rstd2.resize(S);
      lc.b.resize(S * d);
      ln_forward(lc.x_mid.data(), P + o.ln2_a, P + o.ln2_b, lc.b.data(),
                 lc.xhat2.data(), lc.rstd2.data(), S, d, eps);
      lc.u.resize(S * I);
      mm(lc.b.data(), P + o.w1, lc.u.data(), S, d, I);
      add_bias(lc.u.data(), P + o.b1, S, I);
      lc.g.resize(S * I);
      for (std::size_t i = 0; i < S * I; ++i)
        lc.g[i] = gelu(lc.u[i]);
      lc.f.resize(S * d);
      mm(lc.g.data(), P + o.w2, lc.f.data(), S, I, d);
      add_bias(lc.f.data(), P + o.b2, S, d);
      if (l + 1 < arch_.num_layers) {
        auto &next = cache.layers[l + 1].x_in;
        next.resize(S * d);
        for (std::size_t i = 0; i < S * d; ++i)
          next[i] = lc.x_mid[i] + lc.f[i];
      }
    }
    cache.x_final.resize(S * d);
    if (arch_.num_layers == 0) {
      cache.x_final = cache.x0;
    } else {
      const auto &last = cache.layers.back();
      for (std::size_t i = 0; i < S * d; ++i)
        cache.x_final[i] = last.x_mid[i] + last.f[i];
    }
    cache.xhat_f.resize(d);
    cache.rstd_f.resize(1);
    cache.c.resize(d);
    ln_forward(cache.x_final.data(), P + off_.fin_a, P + off_.fin_b,
               cache.c.data(), cache.xhat_f.data(), cache.rstd_f.data(), 1, d,
               eps);
    cache.logits.resize(C);
    mm(cache.c.data(), P + off_.head_w, cache.logits.data(), 1, d, C);
    add_bias(cache.logits.data(), P + off_.head_b, 1, C);
  }

  // Accumulates dLoss/dParams into G given dLoss/dlogits.
  void backward(const R *P, const ExampleCache<R> &cache, const R *dlogits,
                R *G) const {
    using namespace kernels;
    const std::size_t d = arch_.hidden_dim, S = arch_.seq_len(),
                      np = arch_.num_patches(), pd = arch_.patch_dim,
                      I = arch_.intermediate_dim, H = arch_.num_heads,
                      dh = arch_.head_dim(), C = arch_.num_classes;
    const R scale = R(1) / std::sqrt(static_cast<R>(dh));

    mm_tn_acc(cache.c.data(), dlogits, G + off_.head_w, 1, d, C);
    bias_grad_acc(dlogits, G + off_.head_b, 1, C);
    std::vector<R> dc(d);
    mm_nt(dlogits, P + off_.head_w, dc.data(), 1, C, d);

    std::vector<R> dx(S * d, R(0));
    ln_backward(dc.data(), cache.xhat_f.data(), cache.rstd_f.data(),
                P + off_.fin_a, dx.data(), G + off_.fin_a, G + off_.fin_b, 1,
                d);

    std::vector<R> dgact(S * I), du(S * I), dbln(S * d), dmid(S * d),
        dz(S * d), dO(S * d), dq(S * d), dk(S * d), dv(S * d), da(S * d),
        dP(S * S), tmp(S * d);
    for (std::size_t li = arch_.num_layers; li-- > 0;) {
      const LayerOffsets &o = off_.layers[li];
      const LayerCache<R> &lc = cache.layers[li];
      // x_out = x_mid + f
      const std::vector<R> &df = dx;
      mm_tn_acc(lc.g.data(), df.data(), G + o.w2, S, I, d);
      bias_grad_acc(df.data(), G + o.b2, S, d);
      mm_nt(df.data(), P + o.w2, dgact.data(), S, d, I);
      for (std::size_t i = 0; i < S * I; ++i)
        du[i] = dgact[i] * gelu_grad(lc.u[i]);
      mm_tn_acc(lc.b.data(), du.data(), G + o.w1, S, d, I);
      bias_grad_acc(du.data(), G + o.b1, S, I);
      mm_nt(du.data(), P + o.w1, dbln.data(), S, I, d);
      dmid = dx;
      ln_backward(dbln.data(), lc.xhat2.data(), lc.rstd2.data(), P + o.ln2_a,
                  dmid.data(), G + o.ln2_a, G + o.ln2_b, S, d);

      // x_mid = x_in + z
      dz = dmid;
      mm_tn_acc(lc.o.data(), dz.data(), G + o.wo, S, d, d);
      bias_grad_acc(dz.data(), G + o.bo, S, d);
      mm_nt(dz.data(), P + o.wo, dO.data(), S, d, d);

      std::fill(dq.begin(), dq.end(), R(0));
      std::fill(dk.begin(), dk.end(), R(0));
      std::fill(dv.begin(), dv.end(), R(0));
      for (std::size_t h = 0; h < H; ++h) {
        const R *ph = lc.probs.data() + h * S * S;
        for (std::size_t i = 0; i < S; ++i) {
          R dot = 0;
          for (std::size_t j = 0; j < S; ++j) {
            R s = 0;
            for (std::size_t c = 0; c < dh; ++c)
              s += dO[i * d + h * dh + c] * lc.v[j * d + h * dh + c];
            dP[i * S + j] = s;
            dot += s * ph[i * S + j];
            const R pij = ph[i * S + j];
            for (std::size_t c = 0; c < dh; ++c)
              dv[j * d + h * dh + c] += pij * dO[i * d + h * dh + c];
          }
          for (std::size_t j = 0; j < S; ++j) {
            const R ds = ph[i * S + j] * (dP[i * S + j] - dot) * scale;
            for (std::size_t c = 0; c < dh; ++c) {
              dq[i * d + h * dh + c] += ds * lc.k[j * d + h * dh + c];
              dk[j * d + h * dh + c] += ds * lc.q[i * d + h * dh + c];
            }
          }
        }
      }
      mm_tn_acc(lc.a.data(), dq.data(), G + o.wq, S, d, d);
      bias_grad_acc(dq.data(), G + o.bq, S, d);
      mm_tn_acc(lc.a.data(), dk.data(), G + o.wk, S, d, d);
      bias_grad_acc(dk.data(), G + o.bk, S, d);
      mm_tn_acc(lc.a.data(), dv.data(), G + o.wv, S, d, d);
      bias_grad_acc(dv.data(), G + o.bv, S, d);
      mm_nt(dq.data(), P + o.wq, da.data(), S, d, d);
      mm_nt(dk.data(), P + o.wk, tmp.data(), S, d, d);
      for (std::size_t i = 0; i < S * d; ++i)
        da[i] += tmp[i];
      mm_nt(dv.data(), P + o.wv, tmp.data(), S, d, d);
      for (std::size_t i = 0; i < S * d; ++i)
        da[i] += tmp[i];
      dx = dmid;
      ln_backward(da.data(), lc.xhat1.data(), lc.rstd1.data(), P + o.ln1_a,
                  dx.data(), G + o.ln1_a, G + o.ln1_b, S, d);
    }

    for (std::size_t i = 0; i < S * d; ++i)
      G[off_.pos + i] += dx[i];
    for (std::size_t j = 0; j < d; ++j)
      G[off_.cls + j] += dx[j];
    mm_tn_acc(cache.patches.data(), dx.data() + d, G + off_.patch_w, np, pd,
              d);
    bias_grad_acc(dx.data() + d, G + off_.patch_b, np, d);
  }

private:
  ArchConfig arch_;
  ParamOffsets off_;
};

// Softmax cross-entropy on one logit vector; writes dLoss/dlogits scaled by
// `weight` and returns the unscaled loss.
template <typename R>
R cross_entropy(const R *logits, std::size_t C, std::size_t label, R weight,
                R *dlogits) {
  R mx = *std::max_element(logits, logits + C);
  R sum = 0;
  for (std::size_t c = 0; c < C; ++c)
    sum += std::exp(logits[c] - mx);
  const R lse = mx + std::log(sum);
  for (std::size_t c = 0; c < C; ++c) {
    const R p = std::exp(logits[c] - lse);
    dlogits[c] = weight * (p - (c == label ? R(1) : R(0)));
  }
  return lse - logits[label];
}

} // namespace otfuse::model
