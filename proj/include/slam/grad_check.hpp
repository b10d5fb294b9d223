#pragma once

// Central finite-difference verification of analytic gradients, run in
// 64-bit mode. The loss closure must be a deterministic function of the
// parameter values (fix all rng seeds and masks inside it).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "slam/params.hpp"
#include "slam/tensor.hpp"

namespace slam {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t checked = 0;
  bool pass(double tol) const { return max_rel_err < tol; }
};

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

// Checks every parameter tensor in the store, sampling up to
// `max_components` evenly strided components per tensor (all of them when the
// tensor is small). Central differences with step h.
inline GradCheckReport check_gradients(ParamStore<double>& params,
                                       const std::function<Tensor<double>()>& loss_fn,
                                       double h = 1e-5, int64_t max_components = 8) {
  params.zero_grads();
  Tensor<double> loss = loss_fn();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.count());
  for (auto& [name, t] : params.entries()) analytic.push_back(t.grad());

  GradCheckReport rep;
  size_t pi = 0;
  for (auto& [name, t] : params.entries()) {
    int64_t n = t.size();
    int64_t k = std::min<int64_t>(n, max_components);
    int64_t stride = k > 0 ? std::max<int64_t>(1, n / k) : 1;
    for (int64_t c = 0; c < k; ++c) {
      int64_t i = std::min(n - 1, c * stride);
      double saved = t.values()[static_cast<size_t>(i)];
      t.values()[static_cast<size_t>(i)] = saved + h;
      double up = loss_fn().item();
      t.values()[static_cast<size_t>(i)] = saved - h;
      double down = loss_fn().item();
      t.values()[static_cast<size_t>(i)] = saved;
      double fd = (up - down) / (2.0 * h);
      double an = analytic[pi][static_cast<size_t>(i)];
      double e = rel_err(an, fd);
      ++rep.checked;
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst_param = name + "[" + std::to_string(i) + "]";
      }
    }
    ++pi;
  }
  return rep;
}

// Single-tensor variant for checking one op in isolation: gradient of a fixed
// random linear functional of the op output with respect to the input leaf.
inline GradCheckReport check_input_gradient(Tensor<double> input,
                                            const std::function<Tensor<double>(const Tensor<double>&)>& op,
                                            uint64_t probe_seed = 7, double h = 1e-6,
                                            int64_t max_components = 64) {
  RngStream probe_rng(probe_seed);
  std::vector<double> probe;
  auto loss_of = [&](const Tensor<double>& in) {
    Tensor<double> y = op(in);
    if (probe.empty()) {
      probe.resize(static_cast<size_t>(y.size()));
      for (auto& v : probe) v = probe_rng.normal();
    }
    Tensor<double> w = Tensor<double>::from_vector(y.shape(), probe);
    return sum_all(mul(y, w));
  };

  input.zero_grad();
  Tensor<double> loss = loss_of(input);
  backward(loss);
  std::vector<double> analytic = input.grad();

  GradCheckReport rep;
  int64_t n = input.size();
  int64_t k = std::min<int64_t>(n, max_components);
  int64_t stride = k > 0 ? std::max<int64_t>(1, n / k) : 1;
  for (int64_t c = 0; c < k; ++c) {
    int64_t i = std::min(n - 1, c * stride);
    double saved = input.values()[static_cast<size_t>(i)];
    input.values()[static_cast<size_t>(i)] = saved + h;
    double up = loss_of(input).item();
    input.values()[static_cast<size_t>(i)] = saved - h;
    double down = loss_of(input).item();
    input.values()[static_cast<size_t>(i)] = saved;
    double fd = (up - down) / (2.0 * h);
    double e = rel_err(analytic[static_cast<size_t>(i)], fd);
    ++rep.checked;
    if (e > rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst_param = "input[" + std::to_string(i) + "]";
    }
  }
  return rep;
}

}  // namespace slam
