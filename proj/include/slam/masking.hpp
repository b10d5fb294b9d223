#pragma once

// Span mask samplers. Text spans are non-overlapping; speech spans are
// sampled by start positions at a rate chosen so the expected union coverage
// matches the requested ratio (overlaps allowed, clipped at the sequence
// end). Paired data uses one contiguous text span of half the tokens plus
// dense speech spans.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "slam/rng.hpp"

namespace slam {

enum class Modality { Speech, Text };

struct MaskSpec {
  Modality modality = Modality::Text;
  int64_t length = 0;               // valid length the spec was drawn for
  std::vector<int64_t> positions;   // sorted, distinct, all < length
  bool single_span = false;

  double realized_rate() const {
    return length > 0 ? static_cast<double>(positions.size()) / static_cast<double>(length) : 0.0;
  }
};

// round(ratio*T/span) non-overlapping spans of `span` tokens; short
// sequences fall back to a single (possibly clipped) span so at least one
// token is always masked.
inline MaskSpec sample_text_spans(int64_t T, double ratio, int64_t span, RngStream& rng) {
  if (T < 1) throw std::invalid_argument("sample_text_spans: need T >= 1");
  MaskSpec spec;
  spec.modality = Modality::Text;
  spec.length = T;

  int64_t n = std::llround(ratio * static_cast<double>(T) / static_cast<double>(span));
  n = std::max<int64_t>(1, n);
  if (n * span > T) n = std::max<int64_t>(1, T / span);

  if (span >= T) {
    // single clipped span
    int64_t start = rng.uniform_int(T);
    for (int64_t t = start; t < T; ++t) spec.positions.push_back(t);
    if (spec.positions.empty()) spec.positions.push_back(T - 1);
    spec.single_span = true;
    return spec;
  }

  // bijection: n sorted distinct draws from [0, T - n*span + n) map to
  // non-overlapping span starts
  auto picks = rng.sample_without_replacement(T - n * span + n, n);
  std::sort(picks.begin(), picks.end());
  for (int64_t i = 0; i < n; ++i) {
    int64_t start = picks[static_cast<size_t>(i)] + i * (span - 1);
    for (int64_t t = start; t < start + span && t < T; ++t) spec.positions.push_back(t);
  }
  std::sort(spec.positions.begin(), spec.positions.end());
  return spec;
}

// Start positions drawn without replacement at rate 1-(1-ratio)^(1/span), so
// the expected union of the (possibly overlapping) spans is about `ratio`.
inline MaskSpec sample_speech_spans(int64_t T, double ratio, int64_t span, RngStream& rng) {
  if (T < 1) throw std::invalid_argument("sample_speech_spans: need T >= 1");
  MaskSpec spec;
  spec.modality = Modality::Speech;
  spec.length = T;

  if (span >= T) {
    // saturation: the whole sequence is masked
    spec.positions.resize(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) spec.positions[static_cast<size_t>(t)] = t;
    return spec;
  }

  double start_rate = 1.0 - std::pow(1.0 - ratio, 1.0 / static_cast<double>(span));
  int64_t n_starts = std::llround(start_rate * static_cast<double>(T));
  n_starts = std::clamp<int64_t>(n_starts, ratio > 0 ? 1 : 0, T);

  auto starts = rng.sample_without_replacement(T, n_starts);
  std::vector<uint8_t> covered(static_cast<size_t>(T), 0);
  for (int64_t s : starts)
    for (int64_t t = s; t < s + span && t < T; ++t) covered[static_cast<size_t>(t)] = 1;
  for (int64_t t = 0; t < T; ++t)
    if (covered[static_cast<size_t>(t)]) spec.positions.push_back(t);
  return spec;
}

// Paired data: a single contiguous text span of round(text_ratio * T')
// tokens with uniform start, plus speech spans at the paired ratio.
inline std::pair<MaskSpec, MaskSpec> sample_paired_masks(int64_t T_lat, int64_t T_text, double speech_ratio,
                                                         int64_t speech_span, double text_ratio, RngStream& rng) {
  if (T_lat < 2 || T_text < 2) throw std::invalid_argument("sample_paired_masks: both lengths must be >= 2");
  MaskSpec speech = sample_speech_spans(T_lat, speech_ratio, speech_span, rng);

  MaskSpec text;
  text.modality = Modality::Text;
  text.length = T_text;
  text.single_span = true;
  int64_t span = std::max<int64_t>(1, std::llround(text_ratio * static_cast<double>(T_text)));
  span = std::min(span, T_text);
  int64_t start = rng.uniform_int(T_text - span + 1);
  for (int64_t t = start; t < start + span; ++t) text.positions.push_back(t);
  return {speech, text};
}

}  // namespace slam
