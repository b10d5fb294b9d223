#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "slam/nn.hpp"
#include "slam/tensor.hpp"

namespace slam {

// Padded acoustic batch, row-major [B, T, F] in 32-bit regardless of the
// compute scalar type.
struct FrameBatch {
  int64_t batch = 0, frames = 0, feat = 0;
  std::vector<float> data;
  std::vector<int64_t> lengths;

  PaddingMask mask() const { return PaddingMask::from_lengths(frames, lengths); }

  template <typename S>
  Tensor<S> tensor() const {
    std::vector<S> v(data.size());
    for (size_t i = 0; i < data.size(); ++i) v[i] = static_cast<S>(data[i]);
    return Tensor<S>::from_vector({batch, frames, feat}, std::move(v));
  }
};

// Padded token batch, row-major [B, T']; padded slots hold the PAD id.
struct TokenBatch {
  int64_t batch = 0, tokens = 0;
  std::vector<int32_t> ids;
  std::vector<int64_t> lengths;

  PaddingMask mask() const { return PaddingMask::from_lengths(tokens, lengths); }
};

struct PairedBatch {
  FrameBatch frames;
  TokenBatch tokens;  // rows correspond to frame rows

  int64_t batch() const { return frames.batch; }
};

}  // namespace slam
