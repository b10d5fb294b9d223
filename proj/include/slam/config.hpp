#pragma once

#include <cstdint>
#include <string>

namespace slam {

struct ConformerSettings {
  int64_t ffn_hidden = 256;
  int64_t num_heads = 4;
  int64_t conv_kernel_size = 5;
  int64_t conv_norm_groups = 4;
  double dropout_rate = 0.0;  // kept at 0 so determinism and gradient checks are exact
};

struct ModelConfig {
  int64_t feature_dim = 16;       // F
  int64_t model_dim = 64;         // d
  int64_t n_speech_layers = 2;    // N; 0 skips the speech-specific stack
  int64_t n_shared_layers = 4;    // M
  int64_t vocab_size = 64;        // V_text, includes the reserved specials
  int64_t codebook_groups = 2;    // G
  int64_t codebook_entries = 32;  // V_code per group
  int64_t subsample_channels = 8;
  int64_t subsample_kernel = 3;
  ConformerSettings conformer;
  double contrastive_temperature = 0.1;  // kappa
  int64_t num_negatives = 10;            // K
  double gumbel_temperature = 1.0;
  double weight_bert = 1.0;
  double weight_contrastive = 1.0;
  double weight_w2v_mlm = 1.0;
  double weight_diversity = 0.1;
  double weight_tlm = 1.0;
  double weight_stm = 1.0;

  void validate() const;
};

struct MaskingConfig {
  double text_ratio = 0.15;
  int64_t text_span = 5;
  double speech_ratio = 0.5;
  int64_t speech_span = 10;
  double paired_text_ratio = 0.5;
  double paired_speech_ratio = 0.75;
};

struct OptimizerConfig {
  double peak_lr = 1e-3;
  int64_t warmup_steps = 200;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  bool reset_between_stages = false;
};

struct ScheduleConfig {
  int64_t stage1_steps = 2000;  // self-supervised only
  int64_t stage2_steps = 2000;  // + alignment losses
  int64_t stage3_steps = 1000;  // speech-only continuation
};

struct DataConfig {
  int64_t frames_per_token = 8;  // divisible by 4 so each token owns whole latent frames
  double noise_sigma = 0.1;
  uint64_t prototype_seed = 1234;
  int64_t utt_min_tokens = 8;
  int64_t utt_max_tokens = 32;
  int64_t markov_branching = 3;  // successors per symbol in the token process
  int64_t n_speech = 1000;
  int64_t n_text = 1000;
  int64_t n_paired = 1000;
  int64_t n_heldout = 500;
  int64_t batch_speech = 8;
  int64_t batch_text = 8;
  int64_t batch_paired = 8;
  int64_t max_frames = 256;
  int64_t max_tokens = 32;

  void validate() const;
};

struct Config {
  ModelConfig model;
  MaskingConfig masking;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  DataConfig data;

  void validate() const;
};

// Flat key=value text format; '#' starts a comment. Unknown keys are errors.
Config parse_config(const std::string& text);
Config load_config(const std::string& path);
std::string serialize_config(const Config& cfg);

// Hex fingerprint over the fields that determine parameter identity
// (the model section). Checkpoints refuse to load across fingerprints
// unless forced.
std::string config_fingerprint(const ModelConfig& m);

}  // namespace slam
