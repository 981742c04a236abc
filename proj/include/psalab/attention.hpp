#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "psalab/tensor.hpp"

namespace psalab {

struct AttentionConfig {
  int n_heads = 1;
  int d_model = 1;   // D
  int d_head = 1;    // D', per-head width
  bool scale_logits = true;  // 1/sqrt(D') on logits; off reproduces the bare equations
  bool causal = true;

  void validate() const {
    if (n_heads < 1 || d_model < 1 || d_head < 1)
      throw std::invalid_argument("attention config: dimensions must be positive");
    if (n_heads * d_head != d_model)
      throw std::invalid_argument(
          "attention config: n_heads * d_head != d_model (" +
          std::to_string(n_heads) + " * " + std::to_string(d_head) +
          " != " + std::to_string(d_model) + ")");
  }
};

// Projections for one attention block. Per-head D x D' slices are stored
// fused as D x D and split by column block. uk/uv project encoder output
// into the self-attention key/value space; they exist only on pseudo-self
// layers.
template <typename Real>
struct AttentionParamsT {
  TensorT<Real> wq, wk, wv, wf;
  TensorT<Real> uk, uv;  // undefined handles unless pseudo-self

  bool has_pseudo() const { return uk.defined() && uv.defined(); }
};

using AttentionParams = AttentionParamsT<float>;

// A size-S encoding of arbitrary conditioning; S = 0 means no conditioning.
template <typename Real>
struct EncoderOutputT {
  TensorT<Real> x;  // S x D
  int source_len = 0;

  static EncoderOutputT empty(int d_model) {
    EncoderOutputT e;
    e.x = TensorT<Real>::zeros({0, d_model});
    e.source_len = 0;
    return e;
  }
};

using EncoderOutput = EncoderOutputT<float>;

// Row t of the causal mask admits every pseudo column (0..S-1) plus target
// columns up to and including t. Pseudo positions are conditioning, not
// future tokens, so they are exempt from causality.
inline std::vector<uint8_t> attention_mask(int T, int S, bool causal) {
  if (T < 1 || S < 0)
    throw std::invalid_argument("attention_mask: need T >= 1, S >= 0");
  std::vector<uint8_t> m(static_cast<size_t>(T) * (S + T), 1);
  if (causal) {
    for (int t = 0; t < T; ++t)
      for (int j = S + t + 1; j < S + T; ++j)
        m[static_cast<size_t>(t) * (S + T) + j] = 0;
  }
  return m;
}

namespace detail {

template <typename Real>
void check_attention_inputs(const TensorT<Real>& y,
                            const AttentionParamsT<Real>& p,
                            const AttentionConfig& cfg) {
  cfg.validate();
  if (y.rank() != 2 || y.shape[1] != cfg.d_model)
    throw std::invalid_argument("attention: input " + shape_str(y.shape) +
                                " does not match d_model " +
                                std::to_string(cfg.d_model));
  for (const TensorT<Real>* w : {&p.wq, &p.wk, &p.wv, &p.wf})
    if (w->rank() != 2 || w->shape[0] != cfg.d_model ||
        w->shape[1] != cfg.d_model)
      throw std::invalid_argument("attention: projection shape " +
                                  shape_str(w->shape) + " != fused " +
                                  std::to_string(cfg.d_model) + " square");
}

// Shared multi-head core. Keys/values may carry S extra leading rows that
// every query row may attend to; the causal constraint applies only to the
// trailing target block.
template <typename Real>
TensorT<Real> multihead(Tape<Real>& tape, const TensorT<Real>& q_src,
                        const TensorT<Real>& keys, const TensorT<Real>& values,
                        const AttentionParamsT<Real>& p,
                        const AttentionConfig& cfg, int pseudo_rows,
                        bool causal) {
  const int t_len = q_src.shape[0];
  const int key_rows = keys.shape[0];
  // Causal masking presumes keys = [pseudo block ; target block]; cross
  // attention passes source-only keys with causal off.
  const std::vector<uint8_t> mask =
      causal ? attention_mask(t_len, pseudo_rows, true)
             : std::vector<uint8_t>(static_cast<size_t>(t_len) * key_rows, 1);
  std::vector<TensorT<Real>> head_out;
  head_out.reserve(cfg.n_heads);
  const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(double(cfg.d_head)));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int c0 = h * cfg.d_head, c1 = (h + 1) * cfg.d_head;
    TensorT<Real> qh = slice_cols(tape, q_src, c0, c1);
    TensorT<Real> kh = slice_cols(tape, keys, c0, c1);
    TensorT<Real> vh = slice_cols(tape, values, c0, c1);
    TensorT<Real> logits = matmul_nt(tape, qh, kh);
    if (cfg.scale_logits) logits = scale(tape, logits, inv_sqrt);
    TensorT<Real> weights = masked_softmax_rows(tape, logits, mask);
    head_out.push_back(matmul(tape, weights, vh));
  }
  TensorT<Real> concat = cfg.n_heads == 1 ? head_out[0]
                                          : concat_cols(tape, head_out);
  return matmul(tape, concat, p.wf);
}

}  // namespace detail

// softmax((Y Wq)(Y Wk)^T)(Y Wv) per head, causally masked, heads
// concatenated and projected by Wf.
template <typename Real>
TensorT<Real> self_attention(Tape<Real>& tape, const TensorT<Real>& y,
                             const AttentionParamsT<Real>& p,
                             const AttentionConfig& cfg) {
  detail::check_attention_inputs(y, p, cfg);
  TensorT<Real> q = matmul(tape, y, p.wq);
  TensorT<Real> k = matmul(tape, y, p.wk);
  TensorT<Real> v = matmul(tape, y, p.wv);
  return detail::multihead(tape, q, k, v, p, cfg, 0, cfg.causal);
}

// Keys become [X Uk ; Y Wk] and values [X Uv ; Y Wv]: the projected encoder
// rows sit above the target rows as attendable pseudo history. Queries come
// from Y alone, and the causal mask never hides a pseudo row.
template <typename Real>
TensorT<Real> pseudo_self_attention(Tape<Real>& tape,
                                    const EncoderOutputT<Real>& enc,
                                    const TensorT<Real>& y,
                                    const AttentionParamsT<Real>& p,
                                    const AttentionConfig& cfg) {
  detail::check_attention_inputs(y, p, cfg);
  if (!p.has_pseudo())
    throw std::invalid_argument(
        "pseudo_self_attention: params carry no uk/uv projections");
  const int s = enc.source_len;
  if (enc.x.rank() != 2 || enc.x.shape[0] != s || enc.x.shape[1] != cfg.d_model)
    throw std::invalid_argument("pseudo_self_attention: encoder output " +
                                shape_str(enc.x.shape) +
                                " does not match S=" + std::to_string(s) +
                                ", D=" + std::to_string(cfg.d_model));
  TensorT<Real> q = matmul(tape, y, p.wq);
  TensorT<Real> k = matmul(tape, y, p.wk);
  TensorT<Real> v = matmul(tape, y, p.wv);
  if (s == 0) return detail::multihead(tape, q, k, v, p, cfg, 0, cfg.causal);
  TensorT<Real> xk = matmul(tape, enc.x, p.uk);
  TensorT<Real> xv = matmul(tape, enc.x, p.uv);
  TensorT<Real> keys = concat_rows(tape, xk, k);
  TensorT<Real> values = concat_rows(tape, xv, v);
  return detail::multihead(tape, q, keys, values, p, cfg, s, cfg.causal);
}

// Standard encoder-decoder cross attention: queries from Y, keys/values from
// X only, every source position visible.
template <typename Real>
TensorT<Real> context_attention(Tape<Real>& tape,
                                const EncoderOutputT<Real>& enc,
                                const TensorT<Real>& y,
                                const AttentionParamsT<Real>& p,
                                const AttentionConfig& cfg) {
  detail::check_attention_inputs(y, p, cfg);
  if (enc.source_len < 1)
    throw std::invalid_argument(
        "context_attention: source is empty (cross attention needs S >= 1)");
  if (enc.x.rank() != 2 || enc.x.shape[0] != enc.source_len ||
      enc.x.shape[1] != cfg.d_model)
    throw std::invalid_argument("context_attention: encoder output " +
                                shape_str(enc.x.shape) + " malformed");
  TensorT<Real> q = matmul(tape, y, p.wq);
  TensorT<Real> k = matmul(tape, enc.x, p.wk);
  TensorT<Real> v = matmul(tape, enc.x, p.wv);
  return detail::multihead(tape, q, k, v, p, cfg, 0, /*causal=*/false);
}

// Convenience builder for randomly initialized projections.
template <typename Real>
AttentionParamsT<Real> random_attention_params(const AttentionConfig& cfg,
                                               Rng& rng, double stddev,
                                               bool pseudo) {
  AttentionParamsT<Real> p;
  const Shape s{cfg.d_model, cfg.d_model};
  p.wq = TensorT<Real>::randn(s, rng, stddev);
  p.wk = TensorT<Real>::randn(s, rng, stddev);
  p.wv = TensorT<Real>::randn(s, rng, stddev);
  p.wf = TensorT<Real>::randn(s, rng, stddev);
  if (pseudo) {
    p.uk = TensorT<Real>::randn(s, rng, stddev);
    p.uv = TensorT<Real>::randn(s, rng, stddev);
  }
  return p;
}

}  // namespace psalab
