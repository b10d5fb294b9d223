#pragma once

// The four pre-training losses. Masked-position sets come in as MaskSpecs
// (one per batch row); every loss reads targets at masked positions only.

#include <optional>

#include "slam/batch.hpp"
#include "slam/masking.hpp"
#include "slam/model.hpp"
#include "slam/vocab.hpp"

namespace slam {

inline std::vector<uint8_t> mask_flags(const std::vector<MaskSpec>& specs, int64_t padded_len) {
  std::vector<uint8_t> flags(specs.size() * static_cast<size_t>(padded_len), 0);
  for (size_t b = 0; b < specs.size(); ++b)
    for (int64_t t : specs[b].positions) {
      if (t < 0 || t >= padded_len) throw std::out_of_range("mask position outside padded length");
      flags[b * static_cast<size_t>(padded_len) + static_cast<size_t>(t)] = 1;
    }
  return flags;
}

inline double realized_mask_rate(const std::vector<MaskSpec>& specs) {
  int64_t masked = 0, total = 0;
  for (const auto& s : specs) {
    masked += static_cast<int64_t>(s.positions.size());
    total += s.length;
  }
  return total > 0 ? static_cast<double>(masked) / static_cast<double>(total) : 0.0;
}

// Batch-level samplers (one MaskSpec per row, drawn over the valid length).
inline std::vector<MaskSpec> sample_text_masks(const TokenBatch& batch, const MaskingConfig& cfg, RngStream& rng) {
  std::vector<MaskSpec> out;
  out.reserve(static_cast<size_t>(batch.batch));
  for (int64_t b = 0; b < batch.batch; ++b)
    out.push_back(sample_text_spans(batch.lengths[static_cast<size_t>(b)], cfg.text_ratio, cfg.text_span, rng));
  return out;
}

inline std::vector<MaskSpec> sample_speech_masks(const FrameBatch& batch, const MaskingConfig& cfg, RngStream& rng) {
  std::vector<MaskSpec> out;
  out.reserve(static_cast<size_t>(batch.batch));
  for (int64_t b = 0; b < batch.batch; ++b) {
    int64_t T_lat = SlamModel<float>::subsampled_len(batch.lengths[static_cast<size_t>(b)]);
    out.push_back(sample_speech_spans(T_lat, cfg.speech_ratio, cfg.speech_span, rng));
  }
  return out;
}

struct PairedMasks {
  std::vector<MaskSpec> speech, text;
};

inline PairedMasks sample_paired_masks_batch(const PairedBatch& batch, const MaskingConfig& cfg, RngStream& rng) {
  PairedMasks out;
  for (int64_t b = 0; b < batch.batch(); ++b) {
    int64_t T_lat = SlamModel<float>::subsampled_len(batch.frames.lengths[static_cast<size_t>(b)]);
    auto [sp, tx] = sample_paired_masks(T_lat, batch.tokens.lengths[static_cast<size_t>(b)], cfg.paired_speech_ratio,
                                        cfg.speech_span, cfg.paired_text_ratio, rng);
    out.speech.push_back(std::move(sp));
    out.text.push_back(std::move(tx));
  }
  return out;
}

// 80% [MASK], 10% random content token, 10% unchanged. `pure_mask` forces
// [MASK] everywhere (used by evaluation probes).
inline std::vector<int32_t> apply_text_replacement(const std::vector<int32_t>& ids, int64_t padded_len,
                                                   const std::vector<MaskSpec>& specs, int64_t vocab_size,
                                                   RngStream& rng, bool pure_mask = false) {
  std::vector<int32_t> out = ids;
  for (size_t b = 0; b < specs.size(); ++b)
    for (int64_t t : specs[b].positions) {
      size_t i = b * static_cast<size_t>(padded_len) + static_cast<size_t>(t);
      if (pure_mask) {
        out[i] = kMaskId;
        continue;
      }
      double u = rng.uniform();
      if (u < 0.8) {
        out[i] = kMaskId;
      } else if (u < 0.9) {
        out[i] = kFirstContentId + static_cast<int32_t>(rng.uniform_int(vocab_size - kFirstContentId));
      }  // else keep
    }
  return out;
}

// Masked-position cross-entropy against target ids taken from `targets` at
// the masked positions only; rows index a [B*L, d] flattening of hidden.
template <typename S>
Tensor<S> masked_text_ce(const SlamModel<S>& model, const Tensor<S>& hidden_flat,
                         const std::vector<int64_t>& rows, const std::vector<int64_t>& target_ids) {
  if (rows.empty()) throw std::invalid_argument("masked_text_ce: zero masked positions");
  auto h = gather_rows(hidden_flat, rows);
  return cross_entropy_mean(model.mlm_text_logits(h), target_ids);
}

// SpanBERT-style MLM on unlabeled text.
template <typename S>
Tensor<S> bert_loss(const SlamModel<S>& model, const TokenBatch& batch, const std::vector<MaskSpec>& masks,
                    RngStream& rng) {
  auto replaced = apply_text_replacement(batch.ids, batch.tokens, masks, model.cfg.vocab_size, rng);
  auto enc = model.text_encode(replaced, batch.mask());
  auto mm = model.multimodal_encode(std::nullopt,
                                    typename SlamModel<S>::SegmentInput{enc.embeddings, enc.mask}, false);
  auto flat = reshape(mm.hidden, {batch.batch * mm.length, model.cfg.model_dim});
  std::vector<int64_t> rows, targets;
  for (int64_t b = 0; b < batch.batch; ++b)
    for (int64_t t : masks[static_cast<size_t>(b)].positions) {
      rows.push_back(mm.row(b, mm.text_offset, t));
      targets.push_back(batch.ids[static_cast<size_t>(b * batch.tokens + t)]);
    }
  return masked_text_ce(model, flat, rows, targets);
}

// Contrastive identification of the true quantized latent among distractors,
// mean over rows of -log softmax(cos/kappa) with the positive first.
template <typename S>
Tensor<S> contrastive_loss(const Tensor<S>& context, const Tensor<S>& q_pos, const Tensor<S>& negatives, S kappa) {
  if (context.rank() != 2 || q_pos.rank() != 2 || negatives.rank() != 3)
    throw std::invalid_argument("contrastive_loss: need c [n,d], q+ [n,d], negatives [n,K,d]");
  int64_t n = context.dim(0), d = context.dim(1), K = negatives.dim(1);
  if (q_pos.dim(0) != n || negatives.dim(0) != n || q_pos.dim(1) != d || negatives.dim(2) != d)
    throw std::invalid_argument("contrastive_loss: shape mismatch");
  if (K < 1) throw std::invalid_argument("contrastive_loss: need at least one negative");
  auto cands = reshape(concat(reshape(q_pos, {n, 1, d}), negatives, 1), {n * (K + 1), d});
  std::vector<int64_t> rep(static_cast<size_t>(n * (K + 1)));
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j <= K; ++j) rep[static_cast<size_t>(r * (K + 1) + j)] = r;
  auto sims = reshape(cosine_similarity_rows(gather_rows(context, rep), cands), {n, K + 1});
  return cross_entropy_mean(scale(sims, S(1) / kappa), std::vector<int64_t>(static_cast<size_t>(n), 0));
}

// (1/G) * sum_g (1 - exp(H(p̄_g)) / V) over batch-averaged soft assignments.
template <typename S>
Tensor<S> diversity_loss(const Tensor<S>& assign_probs, int64_t groups, int64_t entries) {
  if (assign_probs.rank() != 2 || assign_probs.dim(1) != groups * entries)
    throw std::invalid_argument("diversity_loss: probs must be [n, G*V]");
  auto pbar = reshape(mean_axis0(assign_probs), {groups, entries});
  auto entropy = scale(sum_lastdim(mul(pbar, log_t(add_const(pbar, S(1e-10))))), S(-1));
  auto term = add_const(scale(exp_t(entropy), S(-1) / static_cast<S>(entries)), S(1));
  return mean_all(term);
}

// exp of the entropy of the batch-averaged assignment, averaged over groups.
template <typename S>
double code_perplexity(const Tensor<S>& assign_probs, int64_t groups, int64_t entries) {
  int64_t n = assign_probs.dim(0);
  double acc = 0.0;
  for (int64_t g = 0; g < groups; ++g) {
    double h = 0.0;
    for (int64_t j = 0; j < entries; ++j) {
      double p = 0.0;
      for (int64_t r = 0; r < n; ++r)
        p += static_cast<double>(assign_probs.values()[static_cast<size_t>(r * groups * entries + g * entries + j)]);
      p /= static_cast<double>(n);
      if (p > 0) h -= p * std::log(p);
    }
    acc += std::exp(h);
  }
  return acc / static_cast<double>(groups);
}

template <typename S>
struct W2vResult {
  Tensor<S> contrastive, mlm, diversity;
  std::vector<int64_t> ids;  // quantizer selections used as MLM targets
  double perplexity = 0.0;
  int64_t skipped_utterances = 0;  // rows with < 2 masked positions contribute 0
};

// w2v-BERT: contrastive loss on the speech-stack output C at masked
// positions against quantized unmasked latents, masked codebook-id
// prediction on the multimodal output, and the codebook diversity
// regularizer. Negatives are drawn from masked positions of the same
// utterance.
template <typename S>
W2vResult<S> w2v_bert_loss(const SlamModel<S>& model, const FrameBatch& batch, const std::vector<MaskSpec>& masks,
                           RngStream& rng, const QuantizeOptions& qopt = QuantizeOptions{}) {
  int64_t B = batch.batch, d = model.cfg.model_dim;
  int64_t G = model.cfg.codebook_groups, V = model.cfg.codebook_entries;

  auto frames = batch.template tensor<S>();
  int64_t T_lat_padded = SlamModel<S>::subsampled_len(batch.frames);
  auto flags = mask_flags(masks, T_lat_padded);
  auto senc = model.speech_encode(frames, batch.mask(), &flags);
  int64_t T_lat = senc.latents.dim(1);

  // masked rows in [B*T_lat) order; per-utterance extents for negatives
  std::vector<int64_t> rows;
  std::vector<std::pair<int64_t, int64_t>> utt_range(static_cast<size_t>(B));  // [begin, count) in row space
  for (int64_t b = 0; b < B; ++b) {
    utt_range[static_cast<size_t>(b)].first = static_cast<int64_t>(rows.size());
    for (int64_t t : masks[static_cast<size_t>(b)].positions) rows.push_back(b * T_lat + t);
    utt_range[static_cast<size_t>(b)].second =
        static_cast<int64_t>(rows.size()) - utt_range[static_cast<size_t>(b)].first;
  }
  int64_t n = static_cast<int64_t>(rows.size());
  if (n == 0) throw std::invalid_argument("w2v_bert_loss: zero masked positions");

  auto x_flat = reshape(senc.latents, {B * T_lat, d});
  auto x_m = gather_rows(x_flat, rows);
  auto q = model.quantize(x_m, rng, qopt);

  W2vResult<S> out;
  out.ids = q.ids;
  out.perplexity = code_perplexity(q.assign_probs, G, V);
  out.diversity = diversity_loss(q.assign_probs, G, V);

  // contrastive, grouped by effective negative count
  auto c_flat = reshape(senc.context, {B * T_lat, d});
  auto c_m = gather_rows(c_flat, rows);
  out.contrastive = Tensor<S>::scalar(S(0));
  {
    // bucket rows by K_eff so each cross-entropy matrix is rectangular
    std::vector<std::vector<int64_t>> bucket_rows;
    std::vector<int64_t> bucket_k;
    std::vector<std::vector<int64_t>> bucket_negidx;
    for (int64_t b = 0; b < B; ++b) {
      auto [begin, count] = utt_range[static_cast<size_t>(b)];
      if (count < 2) {
        out.skipped_utterances += count > 0 ? 1 : 0;
        continue;
      }
      int64_t k_eff = std::min<int64_t>(model.cfg.num_negatives, count - 1);
      int64_t bucket = -1;
      for (size_t i = 0; i < bucket_k.size(); ++i)
        if (bucket_k[i] == k_eff) bucket = static_cast<int64_t>(i);
      if (bucket < 0) {
        bucket = static_cast<int64_t>(bucket_k.size());
        bucket_k.push_back(k_eff);
        bucket_rows.emplace_back();
        bucket_negidx.emplace_back();
      }
      for (int64_t r = begin; r < begin + count; ++r) {
        bucket_rows[static_cast<size_t>(bucket)].push_back(r);
        auto picks = rng.sample_without_replacement(count - 1, k_eff);
        for (int64_t p : picks) {
          int64_t other = begin + (p >= r - begin ? p + 1 : p);  // skip self
          bucket_negidx[static_cast<size_t>(bucket)].push_back(other);
        }
      }
    }
    int64_t total_rows = 0;
    for (const auto& br : bucket_rows) total_rows += static_cast<int64_t>(br.size());
    if (total_rows > 0) {
      Tensor<S> acc;
      for (size_t bk = 0; bk < bucket_k.size(); ++bk) {
        int64_t k = bucket_k[bk];
        const auto& brows = bucket_rows[bk];
        int64_t m = static_cast<int64_t>(brows.size());
        std::vector<int64_t> ctx(static_cast<size_t>(m * (k + 1)));
        std::vector<int64_t> cand(static_cast<size_t>(m * (k + 1)));
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j <= k; ++j) ctx[static_cast<size_t>(i * (k + 1) + j)] = brows[static_cast<size_t>(i)];
          cand[static_cast<size_t>(i * (k + 1))] = brows[static_cast<size_t>(i)];
          for (int64_t j = 0; j < k; ++j)
            cand[static_cast<size_t>(i * (k + 1) + 1 + j)] = bucket_negidx[bk][static_cast<size_t>(i * k + j)];
        }
        auto sims = reshape(cosine_similarity_rows(gather_rows(c_m, ctx), gather_rows(q.quantized, cand)), {m, k + 1});
        auto ce = cross_entropy_mean(scale(sims, S(1) / static_cast<S>(model.cfg.contrastive_temperature)),
                                     std::vector<int64_t>(static_cast<size_t>(m), 0));
        auto weighted = scale(ce, static_cast<S>(m) / static_cast<S>(total_rows));
        acc = acc.defined() ? add(acc, weighted) : weighted;
      }
      out.contrastive = acc;
    }
  }

  // masked codebook-id prediction on the multimodal output
  auto mm = model.multimodal_encode(typename SlamModel<S>::SegmentInput{senc.context, senc.mask}, std::nullopt, false);
  auto h_flat = reshape(mm.hidden, {B * mm.length, d});
  std::vector<int64_t> mm_rows;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t : masks[static_cast<size_t>(b)].positions) mm_rows.push_back(mm.row(b, mm.speech_offset, t));
  auto h_m = gather_rows(h_flat, mm_rows);
  Tensor<S> mlm_acc;
  for (int64_t g = 0; g < G; ++g) {
    std::vector<int64_t> targets(static_cast<size_t>(n));
    for (int64_t r = 0; r < n; ++r) targets[static_cast<size_t>(r)] = q.ids[static_cast<size_t>(r * G + g)];
    auto ce = cross_entropy_mean(model.mlm_speech_head[static_cast<size_t>(g)](h_m), targets);
    mlm_acc = mlm_acc.defined() ? add(mlm_acc, ce) : ce;
  }
  out.mlm = scale(mlm_acc, S(1) / static_cast<S>(G));
  return out;
}

template <typename S>
struct TlmResult {
  Tensor<S> text, speech;
  std::vector<int64_t> ids;  // quantizer selections used as speech targets
};

// Translation LM on concatenated speech-text pairs: masked text prediction
// plus masked codebook-id prediction, no contrastive term. Target ids come
// from quantizing the unmasked latents with gradients blocked.
template <typename S>
TlmResult<S> tlm_loss(const SlamModel<S>& model, const PairedBatch& batch, const PairedMasks& masks,
                      RngStream& rng, const QuantizeOptions& qopt = QuantizeOptions{}) {
  int64_t B = batch.batch(), d = model.cfg.model_dim;
  int64_t G = model.cfg.codebook_groups;

  auto frames = batch.frames.template tensor<S>();
  int64_t T_lat_padded = SlamModel<S>::subsampled_len(batch.frames.frames);
  auto flags = mask_flags(masks.speech, T_lat_padded);
  auto senc = model.speech_encode(frames, batch.frames.mask(), &flags);
  int64_t T_lat = senc.latents.dim(1);

  auto replaced = apply_text_replacement(batch.tokens.ids, batch.tokens.tokens, masks.text, model.cfg.vocab_size, rng);
  auto tenc = model.text_encode(replaced, batch.tokens.mask());

  auto mm = model.multimodal_encode(typename SlamModel<S>::SegmentInput{senc.context, senc.mask},
                                    typename SlamModel<S>::SegmentInput{tenc.embeddings, tenc.mask}, false);
  auto h_flat = reshape(mm.hidden, {B * mm.length, d});

  TlmResult<S> out;
  {
    std::vector<int64_t> rows, targets;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t : masks.text[static_cast<size_t>(b)].positions) {
        rows.push_back(mm.row(b, mm.text_offset, t));
        targets.push_back(batch.tokens.ids[static_cast<size_t>(b * batch.tokens.tokens + t)]);
      }
    out.text = masked_text_ce(model, h_flat, rows, targets);
  }
  {
    std::vector<int64_t> lat_rows, mm_rows;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t : masks.speech[static_cast<size_t>(b)].positions) {
        lat_rows.push_back(b * T_lat + t);
        mm_rows.push_back(mm.row(b, mm.speech_offset, t));
      }
    if (lat_rows.empty()) throw std::invalid_argument("tlm_loss: zero masked speech positions");
    auto x_m = detach(gather_rows(reshape(senc.latents, {B * T_lat, d}), lat_rows));
    auto q = model.quantize(x_m, rng, qopt);
    out.ids = q.ids;
    auto h_m = gather_rows(h_flat, mm_rows);
    int64_t n = static_cast<int64_t>(lat_rows.size());
    Tensor<S> acc;
    for (int64_t g = 0; g < G; ++g) {
      std::vector<int64_t> targets(static_cast<size_t>(n));
      for (int64_t r = 0; r < n; ++r) targets[static_cast<size_t>(r)] = q.ids[static_cast<size_t>(r * G + g)];
      auto ce = cross_entropy_mean(model.mlm_speech_head[static_cast<size_t>(g)](h_m), targets);
      acc = acc.defined() ? add(acc, ce) : ce;
    }
    out.speech = scale(acc, S(1) / static_cast<S>(G));
  }
  return out;
}

// Speech-text matching: positives are the batch pairs, negatives pair each
// utterance with the transcript of another (random nonzero rotation, so no
// pair keeps its own transcript). No masking is applied.
template <typename S>
Tensor<S> stm_loss(const SlamModel<S>& model, const PairedBatch& batch, RngStream& rng) {
  int64_t B = batch.batch();
  if (B < 2) throw std::invalid_argument("stm_loss: need batch size >= 2 to form negatives");

  auto frames = batch.frames.template tensor<S>();
  auto senc = model.speech_encode(frames, batch.frames.mask());
  auto tenc_pos = model.text_encode(batch.tokens.ids, batch.tokens.mask());

  int64_t rot = 1 + rng.uniform_int(B - 1);
  TokenBatch neg;
  neg.batch = B;
  neg.tokens = batch.tokens.tokens;
  neg.ids.resize(batch.tokens.ids.size());
  neg.lengths.resize(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    int64_t src = (b + rot) % B;
    neg.lengths[static_cast<size_t>(b)] = batch.tokens.lengths[static_cast<size_t>(src)];
    std::copy_n(batch.tokens.ids.begin() + src * batch.tokens.tokens, batch.tokens.tokens,
                neg.ids.begin() + b * batch.tokens.tokens);
  }
  auto tenc_neg = model.text_encode(neg.ids, neg.mask());

  auto cls_rows = [&](const MultimodalOutput<S>& mm) {
    std::vector<int64_t> rows(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) rows[static_cast<size_t>(b)] = mm.row(b, mm.cls_offset, 0);
    return gather_rows(reshape(mm.hidden, {B * mm.length, model.cfg.model_dim}), rows);
  };
  auto mm_pos = model.multimodal_encode(typename SlamModel<S>::SegmentInput{senc.context, senc.mask},
                                        typename SlamModel<S>::SegmentInput{tenc_pos.embeddings, tenc_pos.mask}, true);
  auto mm_neg = model.multimodal_encode(typename SlamModel<S>::SegmentInput{senc.context, senc.mask},
                                        typename SlamModel<S>::SegmentInput{tenc_neg.embeddings, tenc_neg.mask}, true);
  auto logits = model.stm_logits(concat(cls_rows(mm_pos), cls_rows(mm_neg), 0));
  std::vector<int64_t> targets(static_cast<size_t>(2 * B), 0);
  for (int64_t b = 0; b < B; ++b) targets[static_cast<size_t>(B + b)] = 1;  // class 1 = mismatched
  return cross_entropy_mean(logits, targets);
}

}  // namespace slam
