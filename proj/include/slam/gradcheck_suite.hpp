#pragma once

// 64-bit finite-difference suite covering every block and the composite
// model with all four losses. The composite run disables the hard
// straight-through path (the soft assignment is what carries gradients) and
// pins quantizer selections, masks, noise, and negatives so the loss is a
// smooth deterministic function of the parameters.

#include <string>
#include <vector>

#include "slam/grad_check.hpp"
#include "slam/objectives.hpp"

namespace slam {

struct BlockCheckResult {
  std::string block;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int64_t checked = 0;
  bool passed() const { return max_rel_err < tolerance; }
};

namespace gradcheck_detail {

inline Tensor<double> rand_leaf(Shape shape, uint64_t seed, double scl = 1.0) {
  RngStream rng(seed);
  std::vector<double> data(static_cast<size_t>(shape_size(shape)));
  for (auto& v : data) v = rng.normal() * scl;
  return Tensor<double>::leaf(std::move(shape), std::move(data));
}

inline BlockCheckResult from_input_check(const std::string& name, const GradCheckReport& rep, double tol) {
  return {name, rep.max_rel_err, tol, rep.checked};
}

inline ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.feature_dim = 8;
  mc.model_dim = 16;
  mc.n_speech_layers = 1;
  mc.n_shared_layers = 1;
  mc.vocab_size = 64;
  mc.codebook_groups = 2;
  mc.codebook_entries = 8;
  mc.subsample_channels = 4;
  mc.subsample_kernel = 3;
  mc.conformer.ffn_hidden = 24;
  mc.conformer.num_heads = 2;
  mc.conformer.conv_kernel_size = 3;
  mc.conformer.conv_norm_groups = 2;
  mc.num_negatives = 3;
  return mc;
}

inline FrameBatch tiny_frame_batch(int64_t B, int64_t T, int64_t F, uint64_t seed) {
  FrameBatch fb;
  fb.batch = B;
  fb.frames = T;
  fb.feat = F;
  RngStream rng(seed);
  fb.data.resize(static_cast<size_t>(B * T * F));
  for (auto& v : fb.data) v = static_cast<float>(rng.normal());
  fb.lengths.resize(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) fb.lengths[static_cast<size_t>(b)] = T - 2 * b;
  return fb;
}

inline TokenBatch tiny_token_batch(int64_t B, int64_t T, int64_t vocab, uint64_t seed) {
  TokenBatch tb;
  tb.batch = B;
  tb.tokens = T;
  RngStream rng(seed);
  tb.ids.assign(static_cast<size_t>(B * T), kPadId);
  tb.lengths.resize(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    int64_t len = T - b;
    tb.lengths[static_cast<size_t>(b)] = len;
    for (int64_t t = 0; t < len; ++t)
      tb.ids[static_cast<size_t>(b * T + t)] =
          kFirstContentId + static_cast<int32_t>(rng.uniform_int(vocab - kFirstContentId));
  }
  return tb;
}

}  // namespace gradcheck_detail

inline std::vector<BlockCheckResult> run_gradcheck_suite() {
  using namespace gradcheck_detail;
  std::vector<BlockCheckResult> out;

  // --- primitive ops ---
  {
    auto a = rand_leaf({3, 4}, 1), b = rand_leaf({4, 5}, 2);
    out.push_back(from_input_check(
        "matmul", check_input_gradient(a, [&](const Tensor<double>& t) { return matmul(t, b); }), 1e-6));
  }
  {
    auto x = rand_leaf({2, 6, 5, 2}, 3), w = rand_leaf({3, 3, 2, 3}, 4, 0.4);
    out.push_back(from_input_check(
        "conv2d", check_input_gradient(w, [&](const Tensor<double>& t) { return conv2d_same(x, t, 2, 2); }), 1e-6));
  }
  {
    auto x = rand_leaf({2, 7, 4}, 5), w = rand_leaf({3, 4}, 6, 0.4);
    out.push_back(from_input_check(
        "depthwise_conv1d",
        check_input_gradient(x, [&](const Tensor<double>& t) { return depthwise_conv1d_same(t, w); }), 1e-6));
  }
  {
    auto x = rand_leaf({3, 6}, 7);
    out.push_back(from_input_check(
        "softmax", check_input_gradient(x, [](const Tensor<double>& t) { return softmax_lastdim(t); }), 1e-3));
    out.push_back(from_input_check(
        "log_softmax", check_input_gradient(x, [](const Tensor<double>& t) { return log_softmax_lastdim(t); }), 1e-3));
    out.push_back(from_input_check(
        "swish", check_input_gradient(x, [](const Tensor<double>& t) { return swish(t); }), 1e-3));
    out.push_back(from_input_check(
        "gelu", check_input_gradient(x, [](const Tensor<double>& t) { return gelu(t); }), 1e-3));
  }
  {
    auto x = rand_leaf({3, 8}, 8);
    auto gamma = rand_leaf({8}, 9, 0.3), beta = rand_leaf({8}, 10, 0.3);
    out.push_back(from_input_check(
        "layer_norm",
        check_input_gradient(x, [&](const Tensor<double>& t) { return layer_norm(t, gamma, beta, 1e-5); }), 1e-3));
    out.push_back(from_input_check(
        "group_norm",
        check_input_gradient(x, [&](const Tensor<double>& t) { return group_norm(t, 2, gamma, beta, 1e-5); }), 1e-3));
  }
  {
    auto table = rand_leaf({10, 4}, 11);
    out.push_back(from_input_check(
        "embedding_lookup",
        check_input_gradient(table, [](const Tensor<double>& t) { return gather_rows(t, {1, 7, 7, 0, 3}); }), 1e-6));
  }
  {
    auto a = rand_leaf({4, 6}, 12), b = rand_leaf({4, 6}, 13);
    out.push_back(from_input_check(
        "cosine_similarity",
        check_input_gradient(a, [&](const Tensor<double>& t) { return cosine_similarity_rows(t, b); }), 1e-3));
  }
  {
    auto x = rand_leaf({4, 6}, 14);
    out.push_back(from_input_check(
        "cross_entropy",
        check_input_gradient(x, [](const Tensor<double>& t) { return cross_entropy_mean(t, {1, 0, 5, 2}); }), 1e-3));
  }

  // --- blocks with parameters ---
  {
    RngStream rng(21);
    ParamStore<double> ps;
    Mhsa<double> attn(ps, "mhsa", rng, 16, 2);
    auto mask = PaddingMask::from_lengths(5, {5, 3});
    auto x = rand_leaf({2, 5, 16}, 22);
    RngStream prng(23);
    std::vector<double> probe(static_cast<size_t>(x.size()));
    for (auto& v : probe) v = prng.normal();
    auto rep = check_gradients(ps, [&] {
      return sum_all(mul(attn(x, mask), Tensor<double>::from_vector(x.shape(), probe)));
    }, 1e-5, 6);
    out.push_back({"mhsa", rep.max_rel_err, 1e-3, rep.checked});
  }
  {
    RngStream rng(24);
    ParamStore<double> ps;
    ConformerSettings cs;
    cs.ffn_hidden = 24;
    cs.num_heads = 2;
    cs.conv_kernel_size = 3;
    cs.conv_norm_groups = 2;
    ConformerLayer<double> layer(ps, "conf", rng, 16, cs);
    auto mask = PaddingMask::from_lengths(4, {4, 3});
    auto x = rand_leaf({2, 4, 16}, 25);
    RngStream prng(26);
    std::vector<double> probe(static_cast<size_t>(x.size()));
    for (auto& v : probe) v = prng.normal();
    auto rep = check_gradients(ps, [&] {
      return sum_all(mul(layer(x, mask), Tensor<double>::from_vector(x.shape(), probe)));
    }, 1e-5, 6);
    out.push_back({"conformer_layer", rep.max_rel_err, 1e-3, rep.checked});
  }

  // --- model heads and quantizer (tiny model) ---
  auto mc = tiny_model_config();
  {
    SlamModel<double> model(mc, 31);
    auto h = rand_leaf({3, mc.model_dim}, 32);
    RngStream prng(33);
    std::vector<double> probe2(static_cast<size_t>(3 * 2));
    for (auto& v : probe2) v = prng.normal();
    auto rep = check_input_gradient(h, [&](const Tensor<double>& t) { return model.stm_head(t); });
    out.push_back({"stm_head", rep.max_rel_err, 1e-6, rep.checked});
    auto rep2 = check_input_gradient(h, [&](const Tensor<double>& t) { return model.mlm_text_logits(t); });
    out.push_back({"mlm_text_head", rep2.max_rel_err, 1e-6, rep2.checked});
    auto rep3 = check_input_gradient(h, [&](const Tensor<double>& t) { return model.mlm_speech_logits(t); });
    out.push_back({"mlm_speech_head", rep3.max_rel_err, 1e-6, rep3.checked});

    // quantizer in soft mode with pinned noise
    auto x = rand_leaf({4, mc.model_dim}, 34);
    auto rep4 = check_input_gradient(x, [&](const Tensor<double>& t) {
      RngStream qrng(35);
      QuantizeOptions qo;
      qo.hard = false;
      return model.quantize(t, qrng, qo).quantized;
    });
    out.push_back({"quantizer_soft", rep4.max_rel_err, 1e-3, rep4.checked});
  }

  // --- composite: all four objectives on the full tiny model ---
  {
    SlamModel<double> model(mc, 41);
    auto speech = tiny_frame_batch(2, 24, mc.feature_dim, 42);
    auto text = tiny_token_batch(2, 6, mc.vocab_size, 43);
    auto paired_frames = tiny_frame_batch(2, 20, mc.feature_dim, 44);
    auto paired_tokens = tiny_token_batch(2, 5, mc.vocab_size, 45);
    PairedBatch paired{paired_frames, paired_tokens};

    MaskingConfig mk;
    mk.speech_span = 3;
    mk.text_span = 2;
    RngStream mask_rng(46);
    auto text_masks = sample_text_masks(text, mk, mask_rng);
    auto speech_masks = sample_speech_masks(speech, mk, mask_rng);
    auto paired_masks = sample_paired_masks_batch(paired, mk, mask_rng);

    std::vector<int64_t> w2v_ids, tlm_ids;
    auto composite = [&](const std::vector<int64_t>* wi, const std::vector<int64_t>* ti) {
      RngStream rng(47);
      QuantizeOptions qw;
      qw.hard = false;
      qw.forced_ids = wi;
      QuantizeOptions qt = qw;
      qt.forced_ids = ti;
      auto b = bert_loss(model, text, text_masks, rng);
      auto w = w2v_bert_loss(model, speech, speech_masks, rng, qw);
      auto t = tlm_loss(model, paired, paired_masks, rng, qt);
      auto s = stm_loss(model, paired, rng);
      auto total = add(b, add(w.contrastive, add(w.mlm, scale(w.diversity, 0.1))));
      total = add(total, add(t.text, add(t.speech, s)));
      if (!wi) {
        w2v_ids = w.ids;
        tlm_ids = t.ids;
      }
      return total;
    };
    composite(nullptr, nullptr);  // harvest the quantizer selections
    auto rep = check_gradients(model.params, [&] { return composite(&w2v_ids, &tlm_ids); }, 1e-5, 4);
    out.push_back({"composite_model", rep.max_rel_err, 1e-3, rep.checked});
  }

  return out;
}

}  // namespace slam
