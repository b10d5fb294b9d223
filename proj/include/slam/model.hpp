#pragma once

// The SLAM topology: convolutional subsampler + speech Conformer stack,
// token-embedding text encoder, shared multimodal Conformer stack, a
// Gumbel-softmax codebook quantizer, and one output head per objective.
//
// Branch sharing: the only parameters reachable from both the speech-only
// and the text-only forward are the M shared layers (audited in tests).

#include <optional>
#include <unordered_set>

#include "slam/config.hpp"
#include "slam/nn.hpp"
#include "slam/params.hpp"
#include "slam/rng.hpp"
#include "slam/tensor.hpp"

namespace slam {

template <typename S>
struct SpeechEncoderOutput {
  Tensor<S> latents;   // X: [B, T_lat, d], always from the unmasked path
  Tensor<S> context;   // C: [B, T_lat, d], from the (optionally masked) path
  PaddingMask mask;    // latent-level validity
};

template <typename S>
struct TextEncoderOutput {
  Tensor<S> embeddings;  // W: [B, T', d]
  PaddingMask mask;
};

template <typename S>
struct QuantizerOutput {
  Tensor<S> quantized;       // [n, d]; with hard selection, exact codebook entries
  std::vector<int64_t> ids;  // [n * G], code index per group
  Tensor<S> assign_probs;    // [n, G * V], per-group softmax of noise-free logits
};

struct QuantizeOptions {
  bool hard = true;   // straight-through one-hot on the forward path
  bool noise = true;  // add Gumbel noise to the selection logits
  // When set, selection indices are taken from here ([n * G]) instead of the
  // argmax. Finite-difference checks use this to keep the discrete targets
  // fixed across evaluations.
  const std::vector<int64_t>* forced_ids = nullptr;
};

template <typename S>
struct MultimodalOutput {
  Tensor<S> hidden;  // [B, L, d]
  int64_t length = 0;
  int64_t cls_offset = -1;
  int64_t speech_offset = -1, speech_len = 0;
  int64_t text_offset = -1, text_len = 0;
  PaddingMask mask;

  // Flat row index into hidden reshaped to [B*L, d].
  int64_t row(int64_t b, int64_t offset, int64_t t) const { return b * length + offset + t; }
};

template <typename S>
class SlamModel {
 public:
  ModelConfig cfg;
  ParamStore<S> params;

  // speech encoder
  Tensor<S> conv1_w, conv1_b, conv2_w, conv2_b;
  Linear<S> latent_proj;
  Tensor<S> mask_embedding;
  std::vector<ConformerLayer<S>> speech_layers;
  LayerNorm<S> speech_out_norm;
  // quantizer
  Linear<S> quant_proj;  // d -> G*V selection logits
  Tensor<S> codebook;    // [G*V, d/G]
  // text encoder
  Tensor<S> token_embedding;  // [V_text, d]
  LayerNorm<S> text_ln;
  // multimodal encoder
  Tensor<S> cls_vec, modality_speech, modality_text;
  std::vector<ConformerLayer<S>> shared_layers;
  // heads
  Linear<S> stm_fc;                        // d -> 2
  Tensor<S> mlm_text_bias;                 // [V_text]; weights tied to token_embedding
  std::vector<Linear<S>> mlm_speech_head;  // per group, d -> V_code

  SlamModel(const ModelConfig& config, uint64_t seed) : cfg(config) {
    cfg.validate();
    RngStream rng(seed);
    int64_t d = cfg.model_dim, c = cfg.subsample_channels, k = cfg.subsample_kernel;

    conv1_w = params.create_normal("speech.sub.conv1.w", {k, k, 1, c}, rng, 1.0 / std::sqrt(double(k * k)));
    conv1_b = params.create_const("speech.sub.conv1.b", {c}, S(0));
    conv2_w = params.create_normal("speech.sub.conv2.w", {k, k, c, c}, rng, 1.0 / std::sqrt(double(k * k * c)));
    conv2_b = params.create_const("speech.sub.conv2.b", {c}, S(0));
    int64_t flat = subsampled_freq() * c;
    latent_proj = Linear<S>(params, "speech.sub.proj", rng, flat, d);
    mask_embedding = params.create_normal("speech.mask_embedding", {d}, rng, 0.1);
    for (int64_t i = 0; i < cfg.n_speech_layers; ++i)
      speech_layers.emplace_back(params, "speech.layer" + std::to_string(i), rng, d, cfg.conformer);
    speech_out_norm = LayerNorm<S>(params, "speech.out_norm", d);

    quant_proj = Linear<S>(params, "quantizer.proj", rng, d, cfg.codebook_groups * cfg.codebook_entries);
    codebook = params.create_normal("quantizer.codebook",
                                    {cfg.codebook_groups * cfg.codebook_entries, d / cfg.codebook_groups}, rng, 1.0);

    token_embedding = params.create_normal("text.embedding", {cfg.vocab_size, d}, rng, 0.05);
    text_ln = LayerNorm<S>(params, "text.ln", d);

    cls_vec = params.create_normal("mm.cls", {d}, rng, 0.02);
    modality_speech = params.create_normal("mm.modality.speech", {d}, rng, 0.02);
    modality_text = params.create_normal("mm.modality.text", {d}, rng, 0.02);
    for (int64_t i = 0; i < cfg.n_shared_layers; ++i)
      shared_layers.emplace_back(params, "mm.layer" + std::to_string(i), rng, d, cfg.conformer);

    stm_fc = Linear<S>(params, "head.stm", rng, d, 2);
    mlm_text_bias = params.create_const("head.mlm_text.b", {cfg.vocab_size}, S(0));
    for (int64_t g = 0; g < cfg.codebook_groups; ++g)
      mlm_speech_head.emplace_back(params, "head.mlm_speech.g" + std::to_string(g), rng, d, cfg.codebook_entries);
  }

  // ceil(T/4): two stride-2 same-padding convolutions.
  static int64_t subsampled_len(int64_t frames) {
    return ((frames + 1) / 2 + 1) / 2;
  }

  int64_t subsampled_freq() const {
    return ((cfg.feature_dim + 1) / 2 + 1) / 2;
  }

  // frames: [B, T, F]. `latent_mask` (optional, [B * T_lat] flags) marks
  // latent positions replaced by the learned mask embedding before the
  // speech Conformer stack.
  SpeechEncoderOutput<S> speech_encode(const Tensor<S>& frames, const PaddingMask& frame_mask,
                                       const std::vector<uint8_t>* latent_mask = nullptr) const {
    if (frames.rank() != 3 || frames.dim(2) != cfg.feature_dim)
      throw std::invalid_argument("speech_encode: frames must be [B, T, F]");
    int64_t B = frames.dim(0), T = frames.dim(1);
    if (T == 0) throw std::invalid_argument("speech_encode: empty sequence");
    if (T < 4) throw std::invalid_argument("speech_encode: need at least 4 frames");
    if (frame_mask.batch_size != B || frame_mask.padded_len != T)
      throw std::invalid_argument("speech_encode: frame mask mismatch");

    // zero padded frames so the conv receptive field sees constants there
    auto cleared = masked_fill(frames, frame_mask.invalid_flags_expanded(cfg.feature_dim), S(0));
    auto x4 = reshape(cleared, {B, T, cfg.feature_dim, 1});
    auto h1 = swish(add_bias(conv2d_same(x4, conv1_w, 2, 2), conv1_b));
    auto h2 = swish(add_bias(conv2d_same(h1, conv2_w, 2, 2), conv2_b));
    int64_t T_lat = h2.dim(1);
    auto latents = latent_proj(reshape(h2, {B, T_lat, h2.dim(2) * h2.dim(3)}));

    std::vector<int64_t> lat_lengths(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b)
      lat_lengths[static_cast<size_t>(b)] = subsampled_len(frame_mask.lengths.at(static_cast<size_t>(b)));
    auto lat_mask = PaddingMask::from_lengths(T_lat, lat_lengths);

    Tensor<S> h = latents;
    if (latent_mask) h = replace_rows(h, *latent_mask, mask_embedding);
    if (cfg.n_speech_layers > 0) {
      auto pe = sinusoidal_pe<S>(T_lat, cfg.model_dim);
      h = add_bcast_batch(h, pe);
      for (const auto& layer : speech_layers) h = layer(h, lat_mask);
    }
    return {latents, h, lat_mask};
  }

  // ids: [B * T'], row-major; values must be < vocab_size.
  TextEncoderOutput<S> text_encode(const std::vector<int32_t>& ids, const PaddingMask& mask) const {
    int64_t B = mask.batch_size, T = mask.padded_len;
    if (static_cast<int64_t>(ids.size()) != B * T) throw std::invalid_argument("text_encode: id count mismatch");
    std::vector<int64_t> rows(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= cfg.vocab_size)
        throw std::out_of_range("text_encode: token id " + std::to_string(ids[i]) + " outside vocabulary");
      rows[i] = ids[i];
    }
    auto emb = reshape(gather_rows(token_embedding, rows), {B, T, cfg.model_dim});
    if (T > 0) emb = add_bcast_batch(emb, sinusoidal_pe<S>(T, cfg.model_dim));
    return {text_ln(emb), mask};
  }

  struct SegmentInput {
    Tensor<S> x;  // [B, T, d]
    PaddingMask mask;
  };

  // Optional CLS vector is prepended; each modality segment gets its own
  // restarted positional encoding plus a learned modality embedding; the
  // speech segment is layer-normalized on entry.
  MultimodalOutput<S> multimodal_encode(const std::optional<SegmentInput>& speech,
                                        const std::optional<SegmentInput>& text, bool cls) const {
    if (!speech && !text) throw std::invalid_argument("multimodal_encode: both modalities absent");
    int64_t B = speech ? speech->x.dim(0) : text->x.dim(0);
    int64_t d = cfg.model_dim;

    MultimodalOutput<S> out;
    Tensor<S> h;
    PaddingMask mask;
    int64_t offset = 0;

    if (cls) {
      h = reshape(tile_rows(cls_vec, B), {B, 1, d});
      mask = PaddingMask::all_valid(B, 1);
      out.cls_offset = 0;
      offset = 1;
    }
    if (speech) {
      if (speech->x.dim(0) != B) throw std::invalid_argument("multimodal_encode: batch mismatch");
      int64_t T = speech->x.dim(1);
      auto seg = add_bias(speech_out_norm(speech->x), modality_speech);
      if (T > 0) seg = add_bcast_batch(seg, sinusoidal_pe<S>(T, d));
      h = h.defined() ? concat(h, seg, 1) : seg;
      mask = mask.valid.empty() ? speech->mask : mask.concat(speech->mask);
      out.speech_offset = offset;
      out.speech_len = T;
      offset += T;
    }
    if (text) {
      if (text->x.dim(0) != B) throw std::invalid_argument("multimodal_encode: batch mismatch");
      int64_t T = text->x.dim(1);
      auto seg = add_bias(text->x, modality_text);
      if (T > 0) seg = add_bcast_batch(seg, sinusoidal_pe<S>(T, d));
      h = h.defined() ? concat(h, seg, 1) : seg;
      mask = mask.valid.empty() ? text->mask : mask.concat(text->mask);
      out.text_offset = offset;
      out.text_len = T;
      offset += T;
    }

    for (const auto& layer : shared_layers) h = layer(h, mask);
    out.hidden = h;
    out.length = offset;
    out.mask = mask;
    return out;
  }

  // latents: [n, d] rows to quantize. Per group: Gumbel-softmax over V
  // entries; with `hard`, the forward value is the selected codebook entry
  // and gradients flow through the soft assignment (straight-through).
  QuantizerOutput<S> quantize(const Tensor<S>& latents, RngStream& rng,
                              const QuantizeOptions& opt = QuantizeOptions{}) const {
    if (latents.rank() != 2 || latents.dim(1) != cfg.model_dim)
      throw std::invalid_argument("quantize: latents must be [n, d]");
    int64_t n = latents.dim(0), G = cfg.codebook_groups, V = cfg.codebook_entries;
    S tau = static_cast<S>(cfg.gumbel_temperature);

    auto logits = quant_proj(latents);  // [n, G*V]
    QuantizerOutput<S> out;
    out.ids.resize(static_cast<size_t>(n * G));
    Tensor<S> quantized, probs;
    for (int64_t g = 0; g < G; ++g) {
      auto lg = slice(logits, 1, g * V, V);  // [n, V]
      auto pg = softmax_lastdim(lg);         // noise-free assignment probabilities
      probs = probs.defined() ? concat(probs, pg, 1) : pg;

      Tensor<S> sel = lg;
      if (opt.noise) {
        std::vector<S> noise(static_cast<size_t>(n * V));
        for (auto& v : noise) v = static_cast<S>(rng.gumbel());
        sel = add(sel, Tensor<S>::from_vector({n, V}, std::move(noise)));
      }
      auto y = softmax_lastdim(scale(sel, S(1) / tau));

      Tensor<S> assign = y;
      std::vector<int64_t> arg;
      if (opt.forced_ids) {
        if (static_cast<int64_t>(opt.forced_ids->size()) != n * G)
          throw std::invalid_argument("quantize: forced_ids size mismatch");
        arg.resize(static_cast<size_t>(n));
        for (int64_t r = 0; r < n; ++r) arg[static_cast<size_t>(r)] = (*opt.forced_ids)[static_cast<size_t>(r * G + g)];
      } else {
        arg = argmax_lastdim(y);
      }
      for (int64_t r = 0; r < n; ++r) out.ids[static_cast<size_t>(r * G + g)] = arg[static_cast<size_t>(r)];
      if (opt.hard) {
        // straight-through: forward value is one-hot, gradient is d(soft)/d(logits)
        std::vector<S> delta(static_cast<size_t>(n * V));
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < V; ++j)
            delta[static_cast<size_t>(r * V + j)] =
                (j == arg[static_cast<size_t>(r)] ? S(1) : S(0)) - y.values()[static_cast<size_t>(r * V + j)];
        assign = add(Tensor<S>::from_vector({n, V}, std::move(delta)), y);
      }
      auto entries = slice(codebook, 0, g * V, V);  // [V, d/G]
      auto qg = matmul(assign, entries);            // [n, d/G]
      quantized = quantized.defined() ? concat(quantized, qg, 1) : qg;
    }
    out.quantized = quantized;
    out.assign_probs = probs;
    return out;
  }

  // h_cls: [B, d] -> [B, 2] rows on the simplex.
  Tensor<S> stm_head(const Tensor<S>& h_cls) const { return softmax_lastdim(stm_fc(h_cls)); }
  Tensor<S> stm_logits(const Tensor<S>& h_cls) const { return stm_fc(h_cls); }

  // h: [n, d] masked-position vectors -> [n, V_text], weight-tied to the
  // token embedding.
  Tensor<S> mlm_text_logits(const Tensor<S>& h) const {
    return add_bias(matmul(h, transpose(token_embedding, 0, 1)), mlm_text_bias);
  }

  // h: [n, d] -> [n, G, V_code], one linear head per group.
  Tensor<S> mlm_speech_logits(const Tensor<S>& h) const {
    int64_t n = h.dim(0), V = cfg.codebook_entries;
    Tensor<S> out;
    for (int64_t g = 0; g < cfg.codebook_groups; ++g) {
      auto lg = reshape(mlm_speech_head[static_cast<size_t>(g)](h), {n, 1, V});
      out = out.defined() ? concat(out, lg, 1) : lg;
    }
    return out;
  }
};

// Names of store parameters that appear as leaves in the graph of `out`.
template <typename S>
std::vector<std::string> reachable_params(const Tensor<S>& out, const ParamStore<S>& ps) {
  std::unordered_set<const Node<S>*> seen;
  std::vector<const Node<S>*> stack = {out.node().get()};
  seen.insert(out.node().get());
  while (!stack.empty()) {
    const Node<S>* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::vector<std::string> names;
  for (const auto& [name, t] : ps.entries())
    if (seen.count(t.node().get())) names.push_back(name);
  return names;
}

}  // namespace slam
