#pragma once

// Per-sequence transformer kernels shared by inference and backpropagation.
// Post-layer-norm blocks:
//   h1  = LN(x + Dropout(Attn(x)))
//   out = LN(h1 + Dropout(W2 GELU(W1 h1 + b1) + b2))

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "offkd/encoder.hpp"
#include "offkd/error.hpp"
#include "offkd/rng.hpp"

namespace offkd::detail {

inline constexpr double kLayerNormEps = 1e-5;

struct DropoutPlan {
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t example = 0;
};

enum DropoutSite : std::uint64_t { kSiteEmbedding = 0, kSiteAttention = 1, kSiteFfn = 2 };

// Inverted-dropout factors (0 or 1/(1-rate)); empty means identity.
template <typename T>
void dropout_factors(const DropoutPlan* plan, std::uint64_t layer, DropoutSite site,
                     std::size_t count, std::vector<T>& out) {
  out.clear();
  if (plan == nullptr || plan->rate <= 0.0) return;
  out.resize(count);
  const T keep = static_cast<T>(1.0 / (1.0 - plan->rate));
  for (std::size_t i = 0; i < count; ++i) {
    const double u = unit_from_bits(mix_seed({plan->seed, plan->example, layer, site, i}));
    out[i] = u < plan->rate ? T(0) : keep;
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

// y[r] = b + x[r] W, W stored [in][out].
template <typename T>
void affine(const std::vector<T>& x, std::size_t rows, std::size_t in, const Tensor<T>& w,
            const Tensor<T>& b, std::vector<T>& y) {
  const std::size_t out = b.size();
  y.assign(rows * out, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y.data() + r * out;
    std::copy(b.data.begin(), b.data.end(), yr);
    const T* xr = x.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = xr[i];
      const T* wi = w.data.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
}

// Accumulates dW, db and (if dx != nullptr) adds x-gradients into dx.
template <typename T>
void affine_backward(const std::vector<T>& x, std::size_t rows, std::size_t in,
                     const Tensor<T>& w, const std::vector<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                     std::vector<T>* dx) {
  const std::size_t out = db.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy.data() + r * out;
    const T* xr = x.data() + r * in;
    for (std::size_t o = 0; o < out; ++o) db.data[o] += dyr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = xr[i];
      T* dwi = dw.data.data() + i * out;
      const T* wi = w.data.data() + i * out;
      T acc = T(0);
      for (std::size_t o = 0; o < out; ++o) {
        dwi[o] += xi * dyr[o];
        acc += wi[o] * dyr[o];
      }
      if (dx != nullptr) (*dx)[r * in + i] += acc;
    }
  }
}

template <typename T>
void layer_norm(const std::vector<T>& x, std::size_t rows, std::size_t d, const Tensor<T>& gain,
                const Tensor<T>& bias, std::vector<T>& xhat, std::vector<T>& rstd,
                std::vector<T>& y) {
  xhat.resize(rows * d);
  rstd.resize(rows);
  y.resize(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T mean = T(0);
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mean) * rs;
      xhat[r * d + i] = h;
      y[r * d + i] = gain.data[i] * h + bias.data[i];
    }
  }
}

template <typename T>
void layer_norm_backward(const std::vector<T>& xhat, const std::vector<T>& rstd, std::size_t rows,
                         std::size_t d, const Tensor<T>& gain, const std::vector<T>& dy,
                         Tensor<T>& dgain, Tensor<T>& dbias, std::vector<T>& dx) {
  dx.assign(rows * d, T(0));
  std::vector<T> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    T mean_dxhat = T(0);
    T mean_dxhat_xhat = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      const T g = dy[r * d + i];
      dgain.data[i] += g * xhat[r * d + i];
      dbias.data[i] += g;
      dxhat[i] = g * gain.data[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xhat[r * d + i];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx[r * d + i] = rstd[r] * (dxhat[i] - mean_dxhat - xhat[r * d + i] * mean_dxhat_xhat);
    }
  }
}

template <typename T>
struct LayerCache {
  std::vector<T> input;
  std::vector<T> q, k, v;
  std::vector<T> probs;  // heads x n x n
  std::vector<T> ctx;
  std::vector<T> attn;  // before dropout
  std::vector<T> attn_drop;
  std::vector<T> xhat1, rstd1, h1;
  std::vector<T> ffn_pre, ffn_act;
  std::vector<T> ffn_out;  // before dropout
  std::vector<T> ffn_drop;
  std::vector<T> xhat2, rstd2, out;
};

template <typename T>
struct SequenceCache {
  std::size_t n = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> key_mask;
  std::vector<T> emb_drop;
  std::vector<T> embedded;
  std::vector<LayerCache<T>> layers;

  const std::vector<T>& top() const { return layers.empty() ? embedded : layers.back().out; }
};

template <typename T>
void check_sequence(const ModelParameters<T>& p, std::span<const TokenId> ids,
                    std::span<const std::uint8_t> mask) {
  const auto& cfg = p.config;
  if (ids.empty()) throw InvalidArgument("empty token sequence");
  if (ids.size() > cfg.max_len) {
    throw InvalidArgument("sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
  }
  if (mask.size() != ids.size()) throw InvalidArgument("attention mask length mismatch");
  if (mask[0] == 0) throw InvalidArgument("attention mask must cover position 0 ([CLS])");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw InvalidArgument("token id " + std::to_string(id) + " out of range for vocabulary of " +
                            std::to_string(cfg.vocab_size));
    }
  }
}

template <typename T>
void attention_forward(const LayerCache<T>& c, std::size_t n, std::size_t d, std::size_t heads,
                       const std::vector<std::uint8_t>& key_mask, std::vector<T>& probs,
                       std::vector<T>& ctx) {
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  probs.assign(heads * n * n, T(0));
  ctx.assign(n * d, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      T* pi = probs.data() + (h * n + i) * n;
      T max_score = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (key_mask[j] == 0) continue;
        T s = T(0);
        for (std::size_t t = 0; t < hd; ++t) s += c.q[i * d + off + t] * c.k[j * d + off + t];
        s *= scale;
        pi[j] = s;
        max_score = std::max(max_score, s);
      }
      T sum = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        if (key_mask[j] == 0) continue;
        pi[j] = std::exp(pi[j] - max_score);
        sum += pi[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (key_mask[j] == 0) continue;
        pi[j] /= sum;
        const T pij = pi[j];
        for (std::size_t t = 0; t < hd; ++t) ctx[i * d + off + t] += pij * c.v[j * d + off + t];
      }
    }
  }
}

template <typename T>
void encode_sequence(const ModelParameters<T>& p, std::span<const TokenId> ids,
                     std::span<const std::uint8_t> mask, const DropoutPlan* dropout,
                     SequenceCache<T>& cache) {
  check_sequence(p, ids, mask);
  const auto& cfg = p.config;
  const std::size_t n = ids.size();
  const std::size_t d = cfg.hidden;
  const std::size_t f = cfg.ffn;
  cache.n = n;
  cache.ids.assign(ids.begin(), ids.end());
  cache.key_mask.assign(mask.begin(), mask.end());

  cache.embedded.resize(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const T* tok = p.token_embedding.data.data() + static_cast<std::size_t>(ids[r]) * d;
    const T* pos = p.position_embedding.data.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) cache.embedded[r * d + i] = tok[i] + pos[i];
  }
  dropout_factors(dropout, 0xFFFF, kSiteEmbedding, n * d, cache.emb_drop);
  if (!cache.emb_drop.empty()) {
    for (std::size_t i = 0; i < n * d; ++i) cache.embedded[i] *= cache.emb_drop[i];
  }

  cache.layers.resize(cfg.layers);
  const std::vector<T>* x = &cache.embedded;
  std::vector<T> res(n * d);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& lp = p.layers[l];
    auto& c = cache.layers[l];
    c.input = *x;
    affine(c.input, n, d, lp.query_weight, lp.query_bias, c.q);
    affine(c.input, n, d, lp.key_weight, lp.key_bias, c.k);
    affine(c.input, n, d, lp.value_weight, lp.value_bias, c.v);
    attention_forward(c, n, d, cfg.heads, cache.key_mask, c.probs, c.ctx);
    affine(c.ctx, n, d, lp.output_weight, lp.output_bias, c.attn);
    dropout_factors(dropout, l, kSiteAttention, n * d, c.attn_drop);
    for (std::size_t i = 0; i < n * d; ++i) {
      res[i] = c.input[i] + (c.attn_drop.empty() ? c.attn[i] : c.attn[i] * c.attn_drop[i]);
    }
    layer_norm(res, n, d, lp.attention_norm_gain, lp.attention_norm_bias, c.xhat1, c.rstd1, c.h1);

    affine(c.h1, n, d, lp.ffn_in_weight, lp.ffn_in_bias, c.ffn_pre);
    c.ffn_act.resize(n * f);
    for (std::size_t i = 0; i < n * f; ++i) c.ffn_act[i] = gelu(c.ffn_pre[i]);
    affine(c.ffn_act, n, f, lp.ffn_out_weight, lp.ffn_out_bias, c.ffn_out);
    dropout_factors(dropout, l, kSiteFfn, n * d, c.ffn_drop);
    for (std::size_t i = 0; i < n * d; ++i) {
      res[i] = c.h1[i] + (c.ffn_drop.empty() ? c.ffn_out[i] : c.ffn_out[i] * c.ffn_drop[i]);
    }
    layer_norm(res, n, d, lp.ffn_norm_gain, lp.ffn_norm_bias, c.xhat2, c.rstd2, c.out);
    x = &c.out;
  }
}

// Backpropagates d(top layer) through the encoder, accumulating into grads.
template <typename T>
void backprop_sequence(const ModelParameters<T>& p, const SequenceCache<T>& cache,
                       std::vector<T> d_top, ModelParameters<T>& grads) {
  const auto& cfg = p.config;
  const std::size_t n = cache.n;
  const std::size_t d = cfg.hidden;
  const std::size_t f = cfg.ffn;
  const std::size_t heads = cfg.heads;
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  std::vector<T> d_res, d_h1, d_branch, d_act, d_ctx, dq, dk, dv, d_in, dp;
  std::vector<T>& dy = d_top;
  for (std::size_t l = cfg.layers; l-- > 0;) {
    const auto& lp = p.layers[l];
    auto& gl = grads.layers[l];
    const auto& c = cache.layers[l];

    layer_norm_backward(c.xhat2, c.rstd2, n, d, lp.ffn_norm_gain, dy, gl.ffn_norm_gain,
                        gl.ffn_norm_bias, d_res);
    d_h1 = d_res;
    d_branch = d_res;
    if (!c.ffn_drop.empty()) {
      for (std::size_t i = 0; i < n * d; ++i) d_branch[i] *= c.ffn_drop[i];
    }
    d_act.assign(n * f, T(0));
    affine_backward(c.ffn_act, n, f, lp.ffn_out_weight, d_branch, gl.ffn_out_weight,
                    gl.ffn_out_bias, &d_act);
    for (std::size_t i = 0; i < n * f; ++i) d_act[i] *= gelu_grad(c.ffn_pre[i]);
    affine_backward(c.h1, n, d, lp.ffn_in_weight, d_act, gl.ffn_in_weight, gl.ffn_in_bias, &d_h1);

    layer_norm_backward(c.xhat1, c.rstd1, n, d, lp.attention_norm_gain, d_h1,
                        gl.attention_norm_gain, gl.attention_norm_bias, d_res);
    d_in = d_res;
    d_branch = d_res;
    if (!c.attn_drop.empty()) {
      for (std::size_t i = 0; i < n * d; ++i) d_branch[i] *= c.attn_drop[i];
    }
    d_ctx.assign(n * d, T(0));
    affine_backward(c.ctx, n, d, lp.output_weight, d_branch, gl.output_weight, gl.output_bias,
                    &d_ctx);

    dq.assign(n * d, T(0));
    dk.assign(n * d, T(0));
    dv.assign(n * d, T(0));
    dp.resize(n);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < n; ++i) {
        const T* pi = c.probs.data() + (h * n + i) * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          if (cache.key_mask[j] == 0) {
            dp[j] = T(0);
            continue;
          }
          T s = T(0);
          for (std::size_t t = 0; t < hd; ++t) {
            s += d_ctx[i * d + off + t] * c.v[j * d + off + t];
            dv[j * d + off + t] += pi[j] * d_ctx[i * d + off + t];
          }
          dp[j] = s;
          dot += pi[j] * s;
        }
        for (std::size_t j = 0; j < n; ++j) {
          if (cache.key_mask[j] == 0) continue;
          const T ds = pi[j] * (dp[j] - dot) * scale;
          for (std::size_t t = 0; t < hd; ++t) {
            dq[i * d + off + t] += ds * c.k[j * d + off + t];
            dk[j * d + off + t] += ds * c.q[i * d + off + t];
          }
        }
      }
    }
    affine_backward(c.input, n, d, lp.query_weight, dq, gl.query_weight, gl.query_bias, &d_in);
    affine_backward(c.input, n, d, lp.key_weight, dk, gl.key_weight, gl.key_bias, &d_in);
    affine_backward(c.input, n, d, lp.value_weight, dv, gl.value_weight, gl.value_bias, &d_in);
    dy = d_in;
  }

  if (!cache.emb_drop.empty()) {
    for (std::size_t i = 0; i < n * d; ++i) dy[i] *= cache.emb_drop[i];
  }
  for (std::size_t r = 0; r < n; ++r) {
    T* tok = grads.token_embedding.data.data() + static_cast<std::size_t>(cache.ids[r]) * d;
    T* pos = grads.position_embedding.data.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      tok[i] += dy[r * d + i];
      pos[i] += dy[r * d + i];
    }
  }
}

// Logits of a classifier head on one hidden row.
template <typename T>
std::vector<double> head_logits(const ClassifierHead<T>& head, const T* x, std::size_t d) {
  const std::size_t classes = head.bias.size();
  std::vector<T> y(head.bias.data.begin(), head.bias.data.end());
  for (std::size_t i = 0; i < d; ++i) {
    const T xi = x[i];
    const T* wi = head.weight.data.data() + i * classes;
    for (std::size_t c = 0; c < classes; ++c) y[c] += xi * wi[c];
  }
  return {y.begin(), y.end()};
}

// MLM logits over the full vocabulary for one hidden row.
template <typename T>
void mlm_row_logits(const ModelParameters<T>& p, const T* h, std::vector<T>& out) {
  const std::size_t d = p.config.hidden;
  const std::size_t vocab = p.config.vocab_size;
  out.assign(p.mlm_bias.data.begin(), p.mlm_bias.data.end());
  if (p.config.tie_mlm) {
    for (std::size_t v = 0; v < vocab; ++v) {
      const T* e = p.token_embedding.data.data() + v * d;
      T acc = out[v];
      for (std::size_t i = 0; i < d; ++i) acc += h[i] * e[i];
      out[v] = acc;
    }
  } else {
    for (std::size_t i = 0; i < d; ++i) {
      const T hi = h[i];
      const T* w = p.mlm_weight.data.data() + i * vocab;
      for (std::size_t v = 0; v < vocab; ++v) out[v] += hi * w[v];
    }
  }
}

// Numerically stable softmax in double precision.
inline std::vector<double> softmax(const std::vector<double>& logits) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double z : logits) max_logit = std::max(max_logit, z);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - max_logit);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace offkd::detail
