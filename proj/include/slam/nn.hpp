#pragma once

// Reusable layers. All blocks preserve the time axis and keep outputs at
// valid positions invariant to values stored at padded positions.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "slam/config.hpp"
#include "slam/params.hpp"
#include "slam/tensor.hpp"

namespace slam {

// Validity of positions within a padded batch. Usually built from
// per-sequence valid lengths; concatenated multimodal sequences carry
// padding mid-sequence, so the boolean mask is the source of truth.
struct PaddingMask {
  int64_t batch_size = 0;
  int64_t padded_len = 0;
  std::vector<uint8_t> valid;     // [B * T], 1 marks a valid position
  std::vector<int64_t> lengths;   // present when built from lengths

  PaddingMask() = default;

  static PaddingMask from_lengths(int64_t padded, std::vector<int64_t> lens) {
    PaddingMask m;
    m.batch_size = static_cast<int64_t>(lens.size());
    m.padded_len = padded;
    m.valid.assign(static_cast<size_t>(m.batch_size * padded), 0);
    for (int64_t b = 0; b < m.batch_size; ++b) {
      int64_t l = lens[static_cast<size_t>(b)];
      if (l < 0 || l > padded) throw std::invalid_argument("PaddingMask: valid length exceeds padded length");
      for (int64_t t = 0; t < l; ++t) m.valid[static_cast<size_t>(b * padded + t)] = 1;
    }
    m.lengths = std::move(lens);
    return m;
  }

  static PaddingMask all_valid(int64_t batch, int64_t len) {
    return from_lengths(len, std::vector<int64_t>(static_cast<size_t>(batch), len));
  }

  static PaddingMask from_flags(int64_t batch, int64_t padded, std::vector<uint8_t> flags) {
    if (static_cast<int64_t>(flags.size()) != batch * padded)
      throw std::invalid_argument("PaddingMask: flag count mismatch");
    PaddingMask m;
    m.batch_size = batch;
    m.padded_len = padded;
    m.valid = std::move(flags);
    return m;
  }

  bool is_valid(int64_t b, int64_t t) const { return valid[static_cast<size_t>(b * padded_len + t)] != 0; }

  // Per-batch-row concatenation along time.
  PaddingMask concat(const PaddingMask& other) const {
    if (other.batch_size != batch_size) throw std::invalid_argument("PaddingMask: batch mismatch in concat");
    PaddingMask out;
    out.batch_size = batch_size;
    out.padded_len = padded_len + other.padded_len;
    out.valid.resize(static_cast<size_t>(batch_size * out.padded_len));
    for (int64_t b = 0; b < batch_size; ++b) {
      std::copy_n(valid.begin() + b * padded_len, padded_len, out.valid.begin() + b * out.padded_len);
      std::copy_n(other.valid.begin() + b * other.padded_len, other.padded_len,
                  out.valid.begin() + b * out.padded_len + padded_len);
    }
    return out;
  }

  // Flags expanded to every channel of a [B, T, d] tensor, 1 = padded.
  std::vector<uint8_t> invalid_flags_expanded(int64_t d) const {
    std::vector<uint8_t> f(static_cast<size_t>(batch_size * padded_len * d), 0);
    for (int64_t i = 0; i < batch_size * padded_len; ++i)
      if (!valid[static_cast<size_t>(i)])
        for (int64_t c = 0; c < d; ++c) f[static_cast<size_t>(i * d + c)] = 1;
    return f;
  }
};

// pe[pos, 2i] = sin(pos / 10000^(2i/d)), pe[pos, 2i+1] = cos(same).
template <typename S>
Tensor<S> sinusoidal_pe(int64_t max_len, int64_t d) {
  if (d % 2 != 0) throw std::invalid_argument("sinusoidal_pe: d must be even");
  std::vector<S> out(static_cast<size_t>(max_len * d));
  for (int64_t pos = 0; pos < max_len; ++pos)
    for (int64_t i = 0; i < d / 2; ++i) {
      double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
      out[static_cast<size_t>(pos * d + 2 * i)] = static_cast<S>(std::sin(angle));
      out[static_cast<size_t>(pos * d + 2 * i + 1)] = static_cast<S>(std::cos(angle));
    }
  return Tensor<S>::from_vector({max_len, d}, std::move(out));
}

template <typename S>
struct Linear {
  Tensor<S> w;  // [in, out]
  Tensor<S> b;  // [out]

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& prefix, RngStream& rng, int64_t in, int64_t out) {
    double std = in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 1.0;
    w = ps.create_normal(prefix + ".w", {in, out}, rng, std);
    b = ps.create_const(prefix + ".b", {out}, S(0));
  }

  // x: [n, in] or [B, T, in]
  Tensor<S> operator()(const Tensor<S>& x) const {
    if (x.rank() == 2) return add_bias(matmul(x, w), b);
    if (x.rank() == 3) {
      int64_t B = x.dim(0), T = x.dim(1);
      auto flat = reshape(x, {B * T, x.dim(2)});
      return reshape(add_bias(matmul(flat, w), b), {B, T, w.dim(1)});
    }
    throw std::invalid_argument("Linear: input must be rank 2 or 3");
  }
};

template <typename S>
struct LayerNorm {
  Tensor<S> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& prefix, int64_t d) {
    gamma = ps.create_const(prefix + ".gamma", {d}, S(1));
    beta = ps.create_const(prefix + ".beta", {d}, S(0));
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gamma, beta, S(1e-5)); }
};

// Padding-aware multi-headed self attention. Keys at padded positions are
// excluded by overwriting their scores with a large negative constant, which
// zeroes their weights exactly and cuts both influence and gradient.
template <typename S>
struct Mhsa {
  int64_t d = 0, heads = 0;
  LayerNorm<S> ln;
  Linear<S> wq, wk, wv, wo;

  Mhsa() = default;
  Mhsa(ParamStore<S>& ps, const std::string& prefix, RngStream& rng, int64_t model_dim, int64_t num_heads)
      : d(model_dim), heads(num_heads) {
    if (d % heads != 0) throw std::invalid_argument("mhsa: model_dim not divisible by heads");
    ln = LayerNorm<S>(ps, prefix + ".ln", d);
    wq = Linear<S>(ps, prefix + ".q", rng, d, d);
    wk = Linear<S>(ps, prefix + ".k", rng, d, d);
    wv = Linear<S>(ps, prefix + ".v", rng, d, d);
    wo = Linear<S>(ps, prefix + ".out", rng, d, d);
  }

  // x: [B, T, d]. Returns the attention branch output (residual added by the
  // caller). When `attn_out` is given, the post-softmax weights are copied
  // there ([B*heads, T, T]).
  Tensor<S> operator()(const Tensor<S>& x, const PaddingMask& mask, std::vector<S>* attn_out = nullptr) const {
    int64_t B = x.dim(0), T = x.dim(1);
    if (mask.batch_size != B || mask.padded_len != T) throw std::invalid_argument("mhsa: mask does not match batch");
    int64_t dh = d / heads;
    auto xn = ln(x);
    auto split = [&](const Tensor<S>& t) {
      // [B,T,d] -> [B*heads, T, dh]
      return reshape(transpose(reshape(t, {B, T, heads, dh}), 1, 2), {B * heads, T, dh});
    };
    auto q = split(wq(xn)), k = split(wk(xn)), v = split(wv(xn));
    auto scores = scale(matmul(q, transpose(k, 1, 2)), S(1.0 / std::sqrt(static_cast<double>(dh))));

    // key mask: same invalid-key pattern for every query row and head
    std::vector<uint8_t> flags(static_cast<size_t>(B * heads * T * T), 0);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t j = 0; j < T; ++j) {
        if (mask.valid[static_cast<size_t>(b * T + j)]) continue;
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t i = 0; i < T; ++i)
            flags[static_cast<size_t>(((b * heads + h) * T + i) * T + j)] = 1;
      }
    auto weights = softmax_lastdim(masked_fill(scores, std::move(flags), S(-1e30)));
    if (attn_out) *attn_out = weights.values();
    auto ctx = matmul(weights, v);
    auto merged = reshape(transpose(reshape(ctx, {B, heads, T, dh}), 1, 2), {B, T, d});
    return wo(merged);
  }
};

// Conformer layer: half-step FFN, MHSA, convolution module, half-step FFN,
// final layer norm. The convolution module zeroes padded positions before the
// depthwise convolution so padding cannot leak across time.
template <typename S>
struct ConformerLayer {
  int64_t d = 0;
  ConformerSettings cfg;
  LayerNorm<S> ffn1_ln, ffn2_ln, conv_ln, final_ln;
  Linear<S> ffn1_in, ffn1_out, ffn2_in, ffn2_out;
  Mhsa<S> mhsa;
  Linear<S> conv_pw1, conv_pw2;
  Tensor<S> conv_dw;  // [k, d]
  Tensor<S> conv_gn_gamma, conv_gn_beta;

  ConformerLayer() = default;
  ConformerLayer(ParamStore<S>& ps, const std::string& prefix, RngStream& rng, int64_t model_dim,
                 const ConformerSettings& settings)
      : d(model_dim), cfg(settings) {
    ffn1_ln = LayerNorm<S>(ps, prefix + ".ffn1.ln", d);
    ffn1_in = Linear<S>(ps, prefix + ".ffn1.in", rng, d, cfg.ffn_hidden);
    ffn1_out = Linear<S>(ps, prefix + ".ffn1.out", rng, cfg.ffn_hidden, d);
    mhsa = Mhsa<S>(ps, prefix + ".mhsa", rng, d, cfg.num_heads);
    conv_ln = LayerNorm<S>(ps, prefix + ".conv.ln", d);
    conv_pw1 = Linear<S>(ps, prefix + ".conv.pw1", rng, d, 2 * d);
    conv_dw = ps.create_normal(prefix + ".conv.dw", {cfg.conv_kernel_size, d}, rng,
                               1.0 / std::sqrt(static_cast<double>(cfg.conv_kernel_size)));
    conv_gn_gamma = ps.create_const(prefix + ".conv.gn.gamma", {d}, S(1));
    conv_gn_beta = ps.create_const(prefix + ".conv.gn.beta", {d}, S(0));
    conv_pw2 = Linear<S>(ps, prefix + ".conv.pw2", rng, d, d);
    ffn2_ln = LayerNorm<S>(ps, prefix + ".ffn2.ln", d);
    ffn2_in = Linear<S>(ps, prefix + ".ffn2.in", rng, d, cfg.ffn_hidden);
    ffn2_out = Linear<S>(ps, prefix + ".ffn2.out", rng, cfg.ffn_hidden, d);
    final_ln = LayerNorm<S>(ps, prefix + ".final.ln", d);
  }

  Tensor<S> operator()(const Tensor<S>& x, const PaddingMask& mask) const {
    auto ffn = [this](const Tensor<S>& in, const LayerNorm<S>& ln, const Linear<S>& a, const Linear<S>& b) {
      return scale(b(swish(a(ln(in)))), S(0.5));
    };
    auto h = add(x, ffn(x, ffn1_ln, ffn1_in, ffn1_out));
    h = add(h, mhsa(h, mask));
    h = add(h, conv_module(h, mask));
    h = add(h, ffn(h, ffn2_ln, ffn2_in, ffn2_out));
    return final_ln(h);
  }

  Tensor<S> conv_module(const Tensor<S>& x, const PaddingMask& mask) const {
    auto h = conv_pw1(conv_ln(x));  // [B,T,2d]
    auto a = slice(h, 2, 0, d);
    auto g = slice(h, 2, d, d);
    auto gated = mul(a, sigmoid(g));
    // zero padded positions before the depthwise conv; its kernel spans time
    auto cleared = masked_fill(gated, mask.invalid_flags_expanded(d), S(0));
    auto conv = depthwise_conv1d_same(cleared, conv_dw);
    auto normed = group_norm(conv, cfg.conv_norm_groups, conv_gn_gamma, conv_gn_beta, S(1e-5));
    return conv_pw2(swish(normed));
  }
};

}  // namespace slam
