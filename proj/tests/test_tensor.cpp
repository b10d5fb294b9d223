#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slam/grad_check.hpp"
#include "slam/rng.hpp"
#include "slam/tensor.hpp"

using namespace slam;

namespace {

Tensor<double> random_leaf(Shape shape, uint64_t seed, double scl = 1.0) {
  RngStream rng(seed);
  std::vector<double> data(static_cast<size_t>(shape_size(shape)));
  for (auto& v : data) v = rng.normal() * scl;
  return Tensor<double>::leaf(std::move(shape), std::move(data));
}

// Naive sliding-window convolution, the independent oracle for conv2d_same.
std::vector<double> conv2d_oracle(const std::vector<double>& x, int64_t B, int64_t T, int64_t F, int64_t Cin,
                                  const std::vector<double>& w, int64_t kh, int64_t kw, int64_t Cout,
                                  int64_t st, int64_t sf) {
  auto pad = [](int64_t in, int64_t k, int64_t s) {
    int64_t out = (in + s - 1) / s;
    int64_t total = std::max<int64_t>(0, (out - 1) * s + k - in);
    return std::pair<int64_t, int64_t>{total / 2, out};
  };
  auto [pt, To] = pad(T, kh, st);
  auto [pf, Fo] = pad(F, kw, sf);
  std::vector<double> out(static_cast<size_t>(B * To * Fo * Cout), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t to = 0; to < To; ++to)
      for (int64_t fo = 0; fo < Fo; ++fo)
        for (int64_t co = 0; co < Cout; ++co) {
          double acc = 0.0;
          for (int64_t i = 0; i < kh; ++i)
            for (int64_t j = 0; j < kw; ++j)
              for (int64_t c = 0; c < Cin; ++c) {
                int64_t ti = to * st + i - pt, fi = fo * sf + j - pf;
                if (ti < 0 || ti >= T || fi < 0 || fi >= F) continue;
                acc += x[static_cast<size_t>(((b * T + ti) * F + fi) * Cin + c)] *
                       w[static_cast<size_t>(((i * kw + j) * Cin + c) * Cout + co)];
              }
          out[static_cast<size_t>(((b * To + to) * Fo + fo) * Cout + co)] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and forced arithmetic") {
  auto I = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
  auto A = Tensor<double>::from_vector({2, 2}, {5, 6, 7, 8});
  auto r = matmul(I, A);
  CHECK(r.values() == std::vector<double>{5, 6, 7, 8});

  auto B = Tensor<double>::from_vector({2, 2}, {1, 2, 3, 4});
  auto ones = Tensor<double>::from_vector({2, 1}, {1, 1});
  auto r2 = matmul(B, ones);
  CHECK(r2.values() == std::vector<double>{3, 7});
}

TEST_CASE("matmul rejects shape mismatch") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradient vs finite differences") {
  auto a = random_leaf({3, 4}, 11);
  auto b = random_leaf({4, 2}, 12);
  auto repa = check_input_gradient(a, [&](const Tensor<double>& x) { return matmul(x, b); });
  auto repb = check_input_gradient(b, [&](const Tensor<double>& x) { return matmul(a, x); });
  CHECK(repa.max_rel_err < 1e-6);
  CHECK(repb.max_rel_err < 1e-6);
}

TEST_CASE("batched matmul gradient") {
  auto a = random_leaf({2, 3, 4}, 21);
  auto b = random_leaf({2, 4, 5}, 22);
  auto rep = check_input_gradient(a, [&](const Tensor<double>& x) { return matmul(x, b); });
  CHECK(rep.max_rel_err < 1e-6);
  auto rep2 = check_input_gradient(b, [&](const Tensor<double>& x) { return matmul(a, x); });
  CHECK(rep2.max_rel_err < 1e-6);
}

TEST_CASE("softmax basics") {
  auto x = Tensor<double>::from_vector({4}, {0, 0, 0, 0});
  auto y = softmax_lastdim(x);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.25));

  auto z = Tensor<double>::from_vector({2}, {std::log(1.0), std::log(3.0)});
  auto p = softmax_lastdim(z);
  CHECK(p.values()[0] == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(p.values()[1] == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("softmax shift invariance and normalization") {
  RngStream rng(3);
  std::vector<double> data(24);
  for (auto& v : data) v = rng.normal() * 3.0;
  auto x = Tensor<double>::from_vector({4, 6}, data);
  for (auto& v : data) v += 17.5;
  auto xs = Tensor<double>::from_vector({4, 6}, data);
  auto y = softmax_lastdim(x), ys = softmax_lastdim(xs);
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(ys.values()[i]).epsilon(1e-6));
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int j = 0; j < 6; ++j) s += y.values()[static_cast<size_t>(r * 6 + j)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax and log_softmax gradients") {
  auto x = random_leaf({3, 5}, 31);
  auto rep = check_input_gradient(x, [](const Tensor<double>& t) { return softmax_lastdim(t); });
  CHECK(rep.max_rel_err < 1e-3);
  auto rep2 = check_input_gradient(x, [](const Tensor<double>& t) { return log_softmax_lastdim(t); });
  CHECK(rep2.max_rel_err < 1e-3);
}

TEST_CASE("group_norm statistics") {
  // constant rows normalize to zero (eps guards the zero variance)
  auto gamma = Tensor<double>::filled({8}, 1.0);
  auto beta = Tensor<double>::zeros({8});
  auto x = Tensor<double>::filled({2, 8}, 3.5);
  auto y = group_norm(x, 2, gamma, beta, 1e-5);
  for (double v : y.values()) CHECK(std::abs(v) < 1e-9);

  // random input: each group of each row has mean 0 and unit variance
  auto r = random_leaf({4, 8}, 41);
  auto yn = group_norm(r, 2, gamma, beta, 1e-10);
  for (int row = 0; row < 4; ++row)
    for (int g = 0; g < 2; ++g) {
      double mean = 0, var = 0;
      for (int j = 0; j < 4; ++j) mean += yn.values()[static_cast<size_t>(row * 8 + g * 4 + j)];
      mean /= 4;
      for (int j = 0; j < 4; ++j) {
        double t = yn.values()[static_cast<size_t>(row * 8 + g * 4 + j)] - mean;
        var += t * t;
      }
      var /= 4;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("group_norm with one group equals layer_norm") {
  auto gamma = random_leaf({6}, 51, 0.5);
  auto beta = random_leaf({6}, 52, 0.5);
  auto x = random_leaf({3, 6}, 53);
  auto a = group_norm(x, 1, gamma, beta, 1e-5);
  auto b = layer_norm(x, gamma, beta, 1e-5);
  for (size_t i = 0; i < a.values().size(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("group_norm rejects indivisible channels") {
  auto gamma = Tensor<double>::filled({6}, 1.0);
  auto beta = Tensor<double>::zeros({6});
  auto x = Tensor<double>::zeros({2, 6});
  CHECK_THROWS_AS(group_norm(x, 4, gamma, beta, 1e-5), std::invalid_argument);
}

TEST_CASE("group_norm and layer_norm gradients") {
  auto gamma = random_leaf({8}, 61, 0.3);
  auto beta = random_leaf({8}, 62, 0.3);
  auto x = random_leaf({3, 8}, 63);
  auto rep = check_input_gradient(x, [&](const Tensor<double>& t) { return group_norm(t, 2, gamma, beta, 1e-5); });
  CHECK(rep.max_rel_err < 1e-3);
  auto repg = check_input_gradient(gamma, [&](const Tensor<double>& t) { return group_norm(x, 2, t, beta, 1e-5); });
  CHECK(repg.max_rel_err < 1e-3);
  auto repb = check_input_gradient(beta, [&](const Tensor<double>& t) { return group_norm(x, 2, gamma, t, 1e-5); });
  CHECK(repb.max_rel_err < 1e-6);
}

TEST_CASE("conv2d identity kernel") {
  auto x = random_leaf({1, 5, 4, 1}, 71);
  auto w = Tensor<double>::from_vector({1, 1, 1, 1}, {1.0});
  auto y = conv2d_same(x, w, 1, 1);
  CHECK(y.shape() == Shape{1, 5, 4, 1});
  for (size_t i = 0; i < y.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d two stride-2 layers give the 4x time reduction") {
  auto x = random_leaf({1, 128, 8, 1}, 72);
  auto w1 = random_leaf({3, 3, 1, 2}, 73, 0.3);
  auto w2 = random_leaf({3, 3, 2, 2}, 74, 0.3);
  auto y = conv2d_same(conv2d_same(x, w1, 2, 2), w2, 2, 2);
  CHECK(y.dim(1) == 32);
  CHECK(y.dim(2) == 2);
}

TEST_CASE("conv2d matches the sliding-window oracle") {
  auto x = random_leaf({1, 5, 5, 2}, 75);
  auto w = random_leaf({3, 3, 2, 3}, 76, 0.5);
  auto y = conv2d_same(x, w, 1, 1);
  auto expect = conv2d_oracle(x.values(), 1, 5, 5, 2, w.values(), 3, 3, 3, 1, 1);
  REQUIRE(expect.size() == y.values().size());
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-6));

  auto ys = conv2d_same(x, w, 2, 2);
  auto expect_s = conv2d_oracle(x.values(), 1, 5, 5, 2, w.values(), 3, 3, 3, 2, 2);
  for (size_t i = 0; i < expect_s.size(); ++i)
    CHECK(ys.values()[i] == doctest::Approx(expect_s[i]).epsilon(1e-6));
}

TEST_CASE("conv2d gradient") {
  auto x = random_leaf({2, 6, 5, 2}, 81);
  auto w = random_leaf({3, 3, 2, 3}, 82, 0.4);
  auto rep = check_input_gradient(x, [&](const Tensor<double>& t) { return conv2d_same(t, w, 2, 2); });
  CHECK(rep.max_rel_err < 1e-6);
  auto repw = check_input_gradient(w, [&](const Tensor<double>& t) { return conv2d_same(x, t, 2, 2); });
  CHECK(repw.max_rel_err < 1e-6);
}

TEST_CASE("depthwise conv1d gradient") {
  auto x = random_leaf({2, 7, 4}, 91);
  auto w = random_leaf({5, 4}, 92, 0.4);
  auto rep = check_input_gradient(x, [&](const Tensor<double>& t) { return depthwise_conv1d_same(t, w); });
  CHECK(rep.max_rel_err < 1e-6);
  auto repw = check_input_gradient(w, [&](const Tensor<double>& t) { return depthwise_conv1d_same(x, t); });
  CHECK(repw.max_rel_err < 1e-6);
}

TEST_CASE("cross_entropy forced values") {
  // probability ~1 on target -> ~0
  auto sharp = Tensor<double>::from_vector({1, 3}, {100.0, 0.0, 0.0});
  CHECK(cross_entropy_mean(sharp, {0}).item() == doctest::Approx(0.0).epsilon(1e-9));

  // uniform logits over V=64 -> ln 64
  auto uniform = Tensor<double>::zeros({2, 64});
  CHECK(cross_entropy_mean(uniform, {3, 40}).item() == doctest::Approx(std::log(64.0)).epsilon(1e-9));

  // probability 0.5 on target -> ln 2
  auto half = Tensor<double>::from_vector({1, 2}, {0.0, 0.0});
  CHECK(cross_entropy_mean(half, {1}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("cross_entropy errors") {
  auto x = Tensor<double>::zeros({2, 4});
  CHECK_THROWS_AS(cross_entropy_mean(x, {0, 4}), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy_mean(Tensor<double>::zeros({0, 4}), {}), std::invalid_argument);
}

TEST_CASE("cross_entropy gradient") {
  auto x = random_leaf({4, 6}, 101);
  auto rep = check_input_gradient(x, [](const Tensor<double>& t) { return cross_entropy_mean(t, {1, 0, 5, 2}); });
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("backward computes hand derivative of sum of squares") {
  auto x = Tensor<double>::leaf({3}, {1.0, -2.0, 0.5});
  auto loss = sum_all(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));
  CHECK(x.grad()[2] == doctest::Approx(1.0));
}

TEST_CASE("backward twice on the same loss is an error") {
  auto x = Tensor<double>::leaf({2}, {1.0, 2.0});
  auto loss = sum_all(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::runtime_error);
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor<double>::leaf({2}, {1.0, 2.0});
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("gradients accumulate across separate backward passes") {
  auto x = Tensor<double>::leaf({2}, {3.0, 4.0});
  auto l1 = sum_all(x);
  auto l2 = sum_all(mul(x, x));
  backward(l1);
  backward(l2);
  CHECK(x.grad()[0] == doctest::Approx(1.0 + 6.0));
  CHECK(x.grad()[1] == doctest::Approx(1.0 + 8.0));
}

TEST_CASE("elementwise op gradients") {
  auto x = random_leaf({3, 4}, 111);
  auto y = random_leaf({3, 4}, 112);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return mul(t, y); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return add(t, y); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return sub(y, t); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return swish(t); }).max_rel_err < 1e-3);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return gelu(t); }).max_rel_err < 1e-3);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return sigmoid(t); }).max_rel_err < 1e-3);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return exp_t(t); }).max_rel_err < 1e-3);
}

TEST_CASE("log gradient and domain error") {
  auto x = Tensor<double>::leaf({3}, {0.5, 1.5, 2.5});
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return log_t(t); }).max_rel_err < 1e-3);
  auto bad = Tensor<double>::from_vector({2}, {1.0, 0.0});
  CHECK_THROWS_AS(log_t(bad), std::domain_error);
}

TEST_CASE("structural op gradients") {
  auto x = random_leaf({2, 3, 4}, 121);
  auto y = random_leaf({2, 5, 4}, 122);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return transpose(t, 1, 2); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return reshape(t, {6, 4}); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return concat(t, y, 1); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(y, [&](const Tensor<double>& t) { return concat(x, t, 1); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [](const Tensor<double>& t) { return slice(t, 1, 1, 2); }).max_rel_err < 1e-6);

  auto m = random_leaf({5, 3}, 123);
  CHECK(check_input_gradient(m, [](const Tensor<double>& t) { return gather_rows(t, {4, 0, 0, 2}); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(m, [](const Tensor<double>& t) { return mean_axis0(t); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(m, [](const Tensor<double>& t) { return sum_lastdim(t); }).max_rel_err < 1e-6);

  auto v = random_leaf({4}, 124);
  CHECK(check_input_gradient(v, [](const Tensor<double>& t) { return tile_rows(t, 3); }).max_rel_err < 1e-6);
}

TEST_CASE("broadcast add gradients") {
  auto x = random_leaf({2, 3, 4}, 131);
  auto b = random_leaf({4}, 132);
  auto pe = random_leaf({3, 4}, 133);
  CHECK(check_input_gradient(b, [&](const Tensor<double>& t) { return add_bias(x, t); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return add_bias(t, b); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(pe, [&](const Tensor<double>& t) { return add_bcast_batch(x, t); }).max_rel_err < 1e-6);
}

TEST_CASE("cosine similarity values and gradient") {
  auto a = Tensor<double>::from_vector({2, 3}, {1, 0, 0, 1, 1, 0});
  auto b = Tensor<double>::from_vector({2, 3}, {1, 0, 0, 0, 0, 1});
  auto c = cosine_similarity_rows(a, b);
  CHECK(c.values()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(c.values()[1] == doctest::Approx(0.0).epsilon(1e-9));

  auto x = random_leaf({4, 6}, 141);
  auto y = random_leaf({4, 6}, 142);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return cosine_similarity_rows(t, y); }).max_rel_err < 1e-3);
  CHECK(check_input_gradient(y, [&](const Tensor<double>& t) { return cosine_similarity_rows(x, t); }).max_rel_err < 1e-3);
}

TEST_CASE("masked_fill and replace_rows") {
  auto x = random_leaf({2, 2, 3}, 151);
  std::vector<uint8_t> flags(static_cast<size_t>(x.size()), 0);
  flags[0] = flags[5] = 1;
  auto y = masked_fill(x, flags, -9.0);
  CHECK(y.values()[0] == -9.0);
  CHECK(y.values()[5] == -9.0);
  CHECK(y.values()[1] == x.values()[1]);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return masked_fill(t, flags, -9.0); }).max_rel_err < 1e-6);

  auto m = random_leaf({3}, 152);
  std::vector<uint8_t> rows = {1, 0, 0, 1};
  auto z = replace_rows(x, rows, m);
  for (int j = 0; j < 3; ++j) {
    CHECK(z.values()[static_cast<size_t>(j)] == m.values()[static_cast<size_t>(j)]);
    CHECK(z.values()[static_cast<size_t>(9 + j)] == m.values()[static_cast<size_t>(j)]);
  }
  CHECK(check_input_gradient(m, [&](const Tensor<double>& t) { return replace_rows(x, rows, t); }).max_rel_err < 1e-6);
  CHECK(check_input_gradient(x, [&](const Tensor<double>& t) { return replace_rows(t, rows, m); }).max_rel_err < 1e-6);
}

TEST_CASE("detach cuts gradient flow") {
  auto x = Tensor<double>::leaf({2}, {1.0, 2.0});
  auto y = detach(scale(x, 3.0));
  CHECK_FALSE(y.requires_grad());
  auto loss = sum_all(mul(x, y));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(6.0));
}

TEST_CASE("shape errors are eager, no silent broadcasting") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({3, 2});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
  auto c = Tensor<double>::zeros({2, 4});
  CHECK_THROWS_AS(concat(a, c, 0), std::invalid_argument);
}

TEST_CASE("empty extents are legal") {
  auto x = Tensor<double>::zeros({1, 0, 4});
  CHECK(x.size() == 0);
  auto y = reshape(x, {0, 4});
  auto z = concat(Tensor<double>::zeros({1, 2, 4}), x, 1);
  CHECK(z.dim(1) == 2);
}

TEST_CASE("single-thread determinism: identical inputs give identical bits") {
  auto run = [] {
    RngStream rng(77);
    std::vector<double> d(60);
    for (auto& v : d) v = rng.normal();
    auto x = Tensor<double>::from_vector({5, 12}, d);
    auto w = Tensor<double>::from_vector({12, 3}, std::vector<double>(d.begin(), d.begin() + 36));
    auto y = softmax_lastdim(matmul(x, w));
    return y.values();
  };
  auto a = run(), b = run();
  CHECK(a == b);
}

TEST_CASE("a corrupted backward implementation is detected by the checker") {
  auto bad_square = [](const Tensor<double>& x) {
    std::vector<double> out(x.values());
    for (auto& v : out) v = v * v;
    return Tensor<double>::make_op(x.shape(), std::move(out), {x}, [](Node<double>& n) {
      auto& p = *n.parents[0];
      p.ensure_grad();
      // wrong on purpose: uses 3x instead of 2x
      for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * 3.0 * p.value[i];
    });
  };
  auto x = random_leaf({4}, 161);
  auto rep = check_input_gradient(x, bad_square);
  CHECK(rep.max_rel_err > 0.1);
}

TEST_CASE("backward validates loss finiteness") {
  auto x = Tensor<double>::leaf({1}, {1e308});
  auto y = mul(x, x);  // overflows to inf
  CHECK_THROWS_AS(backward(y), std::runtime_error);
}
