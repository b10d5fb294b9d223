#include "slam/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace slam {

void ModelConfig::validate() const {
  if (model_dim <= 0 || feature_dim <= 0) throw std::invalid_argument("config: dims must be positive");
  if (model_dim % conformer.num_heads != 0) throw std::invalid_argument("config: model_dim not divisible by num_heads");
  if (conformer.conv_kernel_size % 2 == 0) throw std::invalid_argument("config: conv_kernel_size must be odd");
  if (model_dim % conformer.conv_norm_groups != 0) throw std::invalid_argument("config: model_dim not divisible by conv_norm_groups");
  if (n_speech_layers < 0) throw std::invalid_argument("config: n_speech_layers must be >= 0");
  if (n_shared_layers < 1) throw std::invalid_argument("config: n_shared_layers must be >= 1");
  if (codebook_groups < 1 || model_dim % codebook_groups != 0)
    throw std::invalid_argument("config: model_dim not divisible by codebook_groups");
  if (codebook_entries < 2) throw std::invalid_argument("config: codebook_entries must be >= 2");
  if (vocab_size < 5) throw std::invalid_argument("config: vocab_size too small for reserved specials");
  if (contrastive_temperature <= 0 || gumbel_temperature <= 0)
    throw std::invalid_argument("config: temperatures must be positive");
  if (num_negatives < 1) throw std::invalid_argument("config: num_negatives must be >= 1");
  if (conformer.dropout_rate != 0.0) throw std::invalid_argument("config: nonzero dropout is not supported");
}

void DataConfig::validate() const {
  if (frames_per_token % 4 != 0) throw std::invalid_argument("config: frames_per_token must be divisible by 4");
  if (noise_sigma < 0) throw std::invalid_argument("config: noise_sigma must be >= 0");
  if (utt_min_tokens < 1 || utt_max_tokens < utt_min_tokens)
    throw std::invalid_argument("config: bad utterance length range");
  if (markov_branching < 1) throw std::invalid_argument("config: markov_branching must be >= 1");
  if (batch_speech < 1 || batch_text < 1 || batch_paired < 1)
    throw std::invalid_argument("config: batch sizes must be >= 1");
}

void Config::validate() const {
  model.validate();
  data.validate();
  if (masking.text_span < 1 || masking.speech_span < 1) throw std::invalid_argument("config: spans must be >= 1");
  if (optimizer.peak_lr <= 0 || optimizer.warmup_steps < 1) throw std::invalid_argument("config: bad optimizer settings");
  if (schedule.stage1_steps < 0 || schedule.stage2_steps < 0 || schedule.stage3_steps < 0)
    throw std::invalid_argument("config: stage steps must be >= 0");
}

namespace {

struct Field {
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

int64_t to_i64(const std::string& s) {
  size_t pos = 0;
  int64_t v = std::stoll(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad integer: " + s);
  return v;
}

uint64_t to_u64(const std::string& s) {
  size_t pos = 0;
  uint64_t v = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad integer: " + s);
  return v;
}

double to_f64(const std::string& s) {
  size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad number: " + s);
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("bad bool: " + s);
}

std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

#define F_I64(key, expr)                                                          \
  {key, Field{[](const Config& c) { return std::to_string(c.expr); },             \
              [](Config& c, const std::string& s) { c.expr = to_i64(s); }}}
#define F_U64(key, expr)                                                          \
  {key, Field{[](const Config& c) { return std::to_string(c.expr); },             \
              [](Config& c, const std::string& s) { c.expr = to_u64(s); }}}
#define F_F64(key, expr)                                                          \
  {key, Field{[](const Config& c) { return fmt_f64(c.expr); },                    \
              [](Config& c, const std::string& s) { c.expr = to_f64(s); }}}
#define F_BOOL(key, expr)                                                         \
  {key, Field{[](const Config& c) { return c.expr ? std::string("true") : std::string("false"); }, \
              [](Config& c, const std::string& s) { c.expr = to_bool(s); }}}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = {
      F_I64("model.feature_dim", model.feature_dim),
      F_I64("model.model_dim", model.model_dim),
      F_I64("model.n_speech_layers", model.n_speech_layers),
      F_I64("model.n_shared_layers", model.n_shared_layers),
      F_I64("model.vocab_size", model.vocab_size),
      F_I64("model.codebook_groups", model.codebook_groups),
      F_I64("model.codebook_entries", model.codebook_entries),
      F_I64("model.subsample_channels", model.subsample_channels),
      F_I64("model.subsample_kernel", model.subsample_kernel),
      F_I64("model.ffn_hidden", model.conformer.ffn_hidden),
      F_I64("model.num_heads", model.conformer.num_heads),
      F_I64("model.conv_kernel_size", model.conformer.conv_kernel_size),
      F_I64("model.conv_norm_groups", model.conformer.conv_norm_groups),
      F_F64("model.dropout_rate", model.conformer.dropout_rate),
      F_F64("model.contrastive_temperature", model.contrastive_temperature),
      F_I64("model.num_negatives", model.num_negatives),
      F_F64("model.gumbel_temperature", model.gumbel_temperature),
      F_F64("model.weight_bert", model.weight_bert),
      F_F64("model.weight_contrastive", model.weight_contrastive),
      F_F64("model.weight_w2v_mlm", model.weight_w2v_mlm),
      F_F64("model.weight_diversity", model.weight_diversity),
      F_F64("model.weight_tlm", model.weight_tlm),
      F_F64("model.weight_stm", model.weight_stm),
      F_F64("masking.text_ratio", masking.text_ratio),
      F_I64("masking.text_span", masking.text_span),
      F_F64("masking.speech_ratio", masking.speech_ratio),
      F_I64("masking.speech_span", masking.speech_span),
      F_F64("masking.paired_text_ratio", masking.paired_text_ratio),
      F_F64("masking.paired_speech_ratio", masking.paired_speech_ratio),
      F_F64("optimizer.peak_lr", optimizer.peak_lr),
      F_I64("optimizer.warmup_steps", optimizer.warmup_steps),
      F_F64("optimizer.clip_norm", optimizer.clip_norm),
      F_F64("optimizer.beta1", optimizer.beta1),
      F_F64("optimizer.beta2", optimizer.beta2),
      F_F64("optimizer.eps", optimizer.eps),
      F_BOOL("optimizer.reset_between_stages", optimizer.reset_between_stages),
      F_I64("schedule.stage1_steps", schedule.stage1_steps),
      F_I64("schedule.stage2_steps", schedule.stage2_steps),
      F_I64("schedule.stage3_steps", schedule.stage3_steps),
      F_I64("data.frames_per_token", data.frames_per_token),
      F_F64("data.noise_sigma", data.noise_sigma),
      F_U64("data.prototype_seed", data.prototype_seed),
      F_I64("data.utt_min_tokens", data.utt_min_tokens),
      F_I64("data.utt_max_tokens", data.utt_max_tokens),
      F_I64("data.markov_branching", data.markov_branching),
      F_I64("data.n_speech", data.n_speech),
      F_I64("data.n_text", data.n_text),
      F_I64("data.n_paired", data.n_paired),
      F_I64("data.n_heldout", data.n_heldout),
      F_I64("data.batch_speech", data.batch_speech),
      F_I64("data.batch_text", data.batch_text),
      F_I64("data.batch_paired", data.batch_paired),
      F_I64("data.max_frames", data.max_frames),
      F_I64("data.max_tokens", data.max_tokens),
  };
  return table;
}

#undef F_I64
#undef F_U64
#undef F_F64
#undef F_BOOL

std::string strip(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config parse_config(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = strip(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = strip(line.substr(0, eq));
    std::string value = strip(line.substr(eq + 1));
    auto it = field_table().find(key);
    if (it == field_table().end())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + " (" + key + "): " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const Config& cfg) {
  std::ostringstream os;
  for (const auto& [key, field] : field_table()) os << key << " = " << field.get(cfg) << "\n";
  return os.str();
}

std::string config_fingerprint(const ModelConfig& m) {
  Config probe;
  probe.model = m;
  std::string canon;
  for (const auto& [key, field] : field_table())
    if (key.rfind("model.", 0) == 0) canon += key + "=" + field.get(probe) + ";";
  uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace slam
