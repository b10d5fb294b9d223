#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slam/grad_check.hpp"
#include "slam/nn.hpp"

using namespace slam;

namespace {

Tensor<double> random_input(Shape shape, uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> data(static_cast<size_t>(shape_size(shape)));
  for (auto& v : data) v = rng.normal();
  return Tensor<double>::leaf(std::move(shape), std::move(data));
}

// Writes junk into padded positions of a copy of `base`.
std::vector<double> perturb_padded(const std::vector<double>& base, const PaddingMask& mask, int64_t d, uint64_t seed) {
  std::vector<double> out = base;
  RngStream rng(seed);
  for (int64_t b = 0; b < mask.batch_size; ++b)
    for (int64_t t = 0; t < mask.padded_len; ++t)
      if (!mask.is_valid(b, t))
        for (int64_t c = 0; c < d; ++c)
          out[static_cast<size_t>((b * mask.padded_len + t) * d + c)] = rng.normal() * 50.0;
  return out;
}

}  // namespace

TEST_CASE("sinusoidal pe: position zero alternates 0,1") {
  auto pe = sinusoidal_pe<double>(6, 8);
  for (int i = 0; i < 8; i += 2) {
    CHECK(pe.values()[static_cast<size_t>(i)] == doctest::Approx(0.0));
    CHECK(pe.values()[static_cast<size_t>(i + 1)] == doctest::Approx(1.0));
  }
}

TEST_CASE("sinusoidal pe: all entries within [-1, 1]") {
  auto pe = sinusoidal_pe<double>(128, 16);
  for (double v : pe.values()) {
    CHECK(v <= 1.0);
    CHECK(v >= -1.0);
  }
}

TEST_CASE("sinusoidal pe: direct evaluation at pos=1") {
  auto pe = sinusoidal_pe<double>(4, 4);
  CHECK(pe.values()[4] == doctest::Approx(std::sin(1.0)).epsilon(1e-9));   // pe[1,0]
  CHECK(pe.values()[5] == doctest::Approx(std::cos(1.0)).epsilon(1e-9));   // pe[1,1]
  CHECK(pe.values()[6] == doctest::Approx(std::sin(1.0 / 100.0)).epsilon(1e-9));
}

TEST_CASE("sinusoidal pe rejects odd d") {
  CHECK_THROWS_AS(sinusoidal_pe<double>(4, 5), std::invalid_argument);
}

TEST_CASE("mhsa with a single position puts weight 1 on it") {
  RngStream rng(1);
  ParamStore<double> ps;
  Mhsa<double> attn(ps, "a", rng, 8, 2);
  auto x = random_input({1, 1, 8}, 2);
  std::vector<double> weights;
  auto y = attn(x, PaddingMask::all_valid(1, 1), &weights);
  REQUIRE(weights.size() == 2);  // one per head
  CHECK(weights[0] == doctest::Approx(1.0));
  CHECK(weights[1] == doctest::Approx(1.0));
  CHECK(y.shape() == Shape{1, 1, 8});
}

TEST_CASE("mhsa weights sum to 1 over valid keys, 0 over padded") {
  RngStream rng(3);
  ParamStore<double> ps;
  int64_t d = 8, T = 6, B = 2;
  Mhsa<double> attn(ps, "a", rng, d, 2);
  auto mask = PaddingMask::from_lengths(T, {4, 6});
  auto x = random_input({B, T, d}, 4);
  std::vector<double> weights;
  attn(x, mask, &weights);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t i = 0; i < T; ++i) {
        double valid_sum = 0, invalid_sum = 0;
        for (int64_t j = 0; j < T; ++j) {
          double w = weights[static_cast<size_t>(((b * 2 + h) * T + i) * T + j)];
          (mask.is_valid(b, j) ? valid_sum : invalid_sum) += w;
        }
        CHECK(valid_sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(invalid_sum == 0.0);
      }
}

TEST_CASE("mhsa rejects mask/batch mismatch") {
  RngStream rng(5);
  ParamStore<double> ps;
  Mhsa<double> attn(ps, "a", rng, 8, 2);
  auto x = random_input({2, 4, 8}, 6);
  CHECK_THROWS_AS(attn(x, PaddingMask::all_valid(3, 4)), std::invalid_argument);
}

TEST_CASE("mhsa valid outputs are invariant to padded values") {
  RngStream rng(7);
  ParamStore<double> ps;
  int64_t d = 8, T = 5;
  Mhsa<double> attn(ps, "a", rng, d, 2);
  auto mask = PaddingMask::from_lengths(T, {3, 5});
  auto x = random_input({2, T, d}, 8);
  auto y1 = attn(x, mask);
  auto x2 = Tensor<double>::from_vector({2, T, d}, perturb_padded(x.values(), mask, d, 99));
  auto y2 = attn(x2, mask);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t t = 0; t < T; ++t)
      if (mask.is_valid(b, t))
        for (int64_t c = 0; c < d; ++c) {
          size_t i = static_cast<size_t>((b * T + t) * d + c);
          CHECK(y1.values()[i] == y2.values()[i]);
        }
}

TEST_CASE("conformer layer preserves shape") {
  RngStream rng(11);
  ParamStore<double> ps;
  ConformerSettings cs;
  cs.ffn_hidden = 16;
  cs.num_heads = 2;
  cs.conv_kernel_size = 3;
  cs.conv_norm_groups = 2;
  ConformerLayer<double> layer(ps, "c", rng, 8, cs);
  for (auto [B, T] : {std::pair<int64_t, int64_t>{1, 3}, {2, 7}, {3, 1}}) {
    auto x = random_input({B, T, 8}, 12);
    auto y = layer(x, PaddingMask::all_valid(B, T));
    CHECK(y.shape() == Shape{B, T, 8});
  }
}

TEST_CASE("conformer layer: padded positions never influence valid ones") {
  RngStream rng(13);
  ParamStore<double> ps;
  ConformerSettings cs;
  cs.ffn_hidden = 16;
  cs.num_heads = 2;
  cs.conv_kernel_size = 5;
  cs.conv_norm_groups = 2;
  int64_t d = 8, T = 9;
  ConformerLayer<double> layer(ps, "c", rng, d, cs);
  auto mask = PaddingMask::from_lengths(T, {4, 7});
  auto x = random_input({2, T, d}, 14);
  auto y1 = layer(x, mask);
  for (uint64_t trial = 0; trial < 4; ++trial) {
    auto x2 = Tensor<double>::from_vector({2, T, d}, perturb_padded(x.values(), mask, d, 100 + trial));
    auto y2 = layer(x2, mask);
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t t = 0; t < T; ++t)
        if (mask.is_valid(b, t))
          for (int64_t c = 0; c < d; ++c) {
            size_t i = static_cast<size_t>((b * T + t) * d + c);
            CHECK(y1.values()[i] == y2.values()[i]);
          }
  }
}

TEST_CASE("conformer layer is deterministic under fixed parameters") {
  RngStream rng(15);
  ParamStore<double> ps;
  ConformerSettings cs;
  cs.ffn_hidden = 16;
  cs.num_heads = 2;
  cs.conv_kernel_size = 3;
  cs.conv_norm_groups = 2;
  ConformerLayer<double> layer(ps, "c", rng, 8, cs);
  auto x = random_input({2, 5, 8}, 16);
  auto mask = PaddingMask::from_lengths(5, {5, 3});
  auto a = layer(x, mask);
  auto b = layer(x, mask);
  CHECK(a.values() == b.values());
}

TEST_CASE("conformer layer gradient check") {
  RngStream rng(17);
  ParamStore<double> ps;
  ConformerSettings cs;
  cs.ffn_hidden = 12;
  cs.num_heads = 2;
  cs.conv_kernel_size = 3;
  cs.conv_norm_groups = 2;
  int64_t d = 8;
  ConformerLayer<double> layer(ps, "c", rng, d, cs);
  auto mask = PaddingMask::from_lengths(4, {4, 3});
  auto x = random_input({2, 4, d}, 18);

  RngStream probe_rng(19);
  std::vector<double> probe(static_cast<size_t>(2 * 4 * d));
  for (auto& v : probe) v = probe_rng.normal();
  auto loss_fn = [&] {
    auto y = layer(x, mask);
    auto w = Tensor<double>::from_vector(y.shape(), probe);
    return sum_all(mul(y, w));
  };
  auto rep = check_gradients(ps, loss_fn, 1e-5, 6);
  INFO("worst: ", rep.worst_param, " err: ", rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-3);

  auto repx = check_input_gradient(x, [&](const Tensor<double>& t) { return layer(t, mask); }, 20, 1e-5, 32);
  CHECK(repx.max_rel_err < 1e-3);
}

TEST_CASE("mhsa gradient check") {
  RngStream rng(21);
  ParamStore<double> ps;
  Mhsa<double> attn(ps, "a", rng, 8, 2);
  auto mask = PaddingMask::from_lengths(4, {3, 4});
  auto x = random_input({2, 4, 8}, 22);
  RngStream probe_rng(23);
  std::vector<double> probe(static_cast<size_t>(2 * 4 * 8));
  for (auto& v : probe) v = probe_rng.normal();
  auto loss_fn = [&] {
    auto y = attn(x, mask);
    auto w = Tensor<double>::from_vector(y.shape(), probe);
    return sum_all(mul(y, w));
  };
  auto rep = check_gradients(ps, loss_fn, 1e-5, 6);
  CHECK(rep.max_rel_err < 1e-3);
}
