// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"

using namespace cdistill;
using cdtest::check_gradients;
using cdtest::random_tensor;
using cdtest::weighted_sum;

namespace {

// Plain triple loop in long double.
std::vector<long double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<long double> out(m * n, 0.0L);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t)
        out[i * n + j] += static_cast<long double>(a.at(i, t)) * static_cast<long double>(b.at(t, j));
  return out;
}

// Per-head causal attention written out directly.
std::vector<double> naive_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t T = q.dim(0), d = q.dim(1), hd = d / heads;
  std::vector<double> out(T * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<long double> s(i + 1);
      long double mx = -1e300L;
      for (std::size_t j = 0; j <= i; ++j) {
        long double dot = 0;
        for (std::size_t c = 0; c < hd; ++c) dot += static_cast<long double>(q.at(i, h * hd + c)) * k.at(j, h * hd + c);
        s[j] = dot / std::sqrt(static_cast<long double>(hd));
        mx = std::max(mx, s[j]);
      }
      long double z = 0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = 0; c < hd; ++c) {
        long double acc = 0;
        for (std::size_t j = 0; j <= i; ++j) acc += s[j] / z * v.at(j, h * hd + c);
        out[i * d + h * hd + c] = static_cast<double>(acc);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul agrees with a long-double triple loop") {
  Rng rng(1);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 5, 2}, {7, 4, 9}, {16, 33, 8}}) {
    const Tensor a = random_tensor(rng, {m, k}, 1.0, false);
    const Tensor b = random_tensor(rng, {k, n}, 1.0, false);
    const auto ref = naive_matmul(a, b);
    const Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{m, n});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.values()[i] - static_cast<double>(ref[i])) < 1e-12);
    const Tensor c2 = matmul_nt(a, transpose(b));
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c2.values()[i] == doctest::Approx(c.values()[i]).epsilon(1e-14));
  }
}

TEST_CASE("shape errors") {
  Rng rng(2);
  const Tensor a = random_tensor(rng, {2, 3});
  const Tensor b = random_tensor(rng, {2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, random_tensor(rng, {3, 2})), ShapeError);
  CHECK_THROWS_AS(add_row(a, random_tensor(rng, {2})), ShapeError);
  CHECK_THROWS_AS(causal_attention(a, a, a, 2), ShapeError);
  CHECK_THROWS_AS(row(a, 2), ShapeError);
  CHECK_THROWS_AS(slice_rows(a, 1, 3), ShapeError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST_CASE("non-finite results raise NumericalError") {
  const Tensor x = Tensor::from({2}, {1.0, std::numeric_limits<double>::max()});
  CHECK_THROWS_AS(scale(x, 10.0), NumericalError);
  CHECK_THROWS_AS(mul(x, x), NumericalError);
}

TEST_CASE("elementwise and reduction gradients") {
  Rng rng(3);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {3, 4});
  Tensor bias = random_tensor(rng, {4});
  Tensor m = random_tensor(rng, {4, 2});

  CHECK(check_gradients([&] { return weighted_sum(add(a, b)); }, {a, b}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(sub(a, b)); }, {a, b}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(mul(a, b)); }, {a, b}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(scale(a, -2.5)); }, {a}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(add_row(a, bias)); }, {a, bias}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(matmul(a, m)); }, {a, m}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(matmul_nt(a, b)); }, {a, b}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(transpose(a)); }, {a}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return mean(mul(a, a)); }, {a}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(row(a, 1)); }, {a}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(slice_rows(a, 1, 3)); }, {a}).max_rel_error < 1e-6);
  CHECK(check_gradients(
            [&] {
              const std::vector<Tensor> terms{a, b, mul(a, b)};
              return weighted_sum(add_n(terms));
            },
            {a, b})
            .max_rel_error < 1e-6);
}

TEST_CASE("nonlinear op gradients") {
  Rng rng(4);
  Tensor x = random_tensor(rng, {4, 6});
  Tensor gain = random_tensor(rng, {6});
  Tensor shift = random_tensor(rng, {6});
  CHECK(check_gradients([&] { return weighted_sum(softmax_lastdim(x)); }, {x}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(log_softmax_lastdim(x)); }, {x}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(gelu(x)); }, {x}).max_rel_error < 1e-6);
  CHECK(check_gradients([&] { return weighted_sum(layer_norm(x, gain, shift)); }, {x, gain, shift}).max_rel_error <
        1e-5);
  CHECK(check_gradients([&] { return weighted_sum(dropout(x, 0.3, 77, true)); }, {x}).max_rel_error < 1e-6);
}

TEST_CASE("embedding gradient accumulates repeated ids") {
  Rng rng(5);
  Tensor table = random_tensor(rng, {5, 3});
  const std::vector<std::int64_t> ids{1, 3, 1, 0, 1};
  CHECK(check_gradients([&] { return weighted_sum(embedding(table, ids)); }, {table}).max_rel_error < 1e-6);
  const Gradients g = backward(sum(embedding(table, ids)));
  CHECK(g.of(table)[1 * 3] == 3.0);
  CHECK(g.of(table)[2 * 3] == 0.0);
  const std::vector<std::int64_t> bad{5};
  CHECK_THROWS_AS(embedding(table, bad), ContractError);
}

TEST_CASE("causal attention matches the per-head oracle and ignores the future") {
  Rng rng(6);
  Tensor q = random_tensor(rng, {5, 8});
  Tensor k = random_tensor(rng, {5, 8});
  Tensor v = random_tensor(rng, {5, 8});
  const Tensor out = causal_attention(q, k, v, 2);
  const auto ref = naive_attention(q, k, v, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.values()[i] - ref[i]) < 1e-12);

  Tensor k2 = k.clone_leaf(false);
  Tensor v2 = v.clone_leaf(false);
  k2.mutable_values()[4 * 8 + 1] += 3.0;
  v2.mutable_values()[4 * 8 + 2] -= 2.0;
  const Tensor out2 = causal_attention(q, k2, v2, 2);
  for (std::size_t i = 0; i < 4 * 8; ++i) CHECK(out2.values()[i] == out.values()[i]);

  CHECK(check_gradients([&] { return weighted_sum(causal_attention(q, k, v, 2)); }, {q, k, v}).max_rel_error < 1e-6);
}

TEST_CASE("gelu is the exact erf form") {
  const std::vector<double> xs{-6.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.0, 2.0, 7.5};
  const Tensor y = gelu(Tensor::from({xs.size()}, xs));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const long double x = xs[i];
    const long double ref = 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L)));
    CHECK(std::abs(y.values()[i] - static_cast<double>(ref)) < 1e-15);
  }
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  const Tensor x = Tensor::from({2, 3}, {1000.0, 999.0, -1000.0, 0.1, 0.2, 0.3});
  const Tensor p = softmax_lastdim(x);
  CHECK(p.values()[0] + p.values()[1] + p.values()[2] == doctest::Approx(1.0).epsilon(1e-15));
  const Tensor lp = log_softmax_lastdim(x);
  CHECK(lp.values()[0] == doctest::Approx(-std::log1p(std::exp(-1.0))).epsilon(1e-14));
  const Tensor shifted = log_softmax_lastdim(add(x, Tensor::full({2, 3}, 42.0)));
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(shifted.values()[i] - lp.values()[i]) < 1e-12);
}

TEST_CASE("dropout") {
  Rng rng(7);
  const Tensor x = random_tensor(rng, {50, 40}, 1.0, false);
  const Tensor eval = dropout(x, 0.1, 1, false);
  CHECK(std::equal(eval.values().begin(), eval.values().end(), x.values().begin()));
  const Tensor a = dropout(x, 0.1, 9, true);
  const Tensor b = dropout(x, 0.1, 9, true);
  const Tensor c = dropout(x, 0.1, 10, true);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  CHECK_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (a.values()[i] == 0.0) {
      ++zeros;
    } else {
      CHECK(a.values()[i] == doctest::Approx(x.values()[i] / 0.9).epsilon(1e-15));
    }
  }
  CHECK(zeros > 140);
  CHECK(zeros < 260);
  CHECK_THROWS_AS(dropout(x, 1.0, 0, true), ContractError);
}

TEST_CASE("graph contracts") {
  Rng rng(8);
  Tensor w = random_tensor(rng, {3});
  const Tensor loss = sum(mul(w, w));
  const Gradients g = backward(loss);
  CHECK(g.size() == 1);
  CHECK_THROWS_AS(backward(loss), ContractError);
  CHECK_THROWS_AS(backward(mul(w, w)), ContractError);
  CHECK_THROWS_AS(mul(w, w).mutable_values(), ContractError);
  {
    NoGradGuard no_grad;
    CHECK_FALSE(mul(w, w).requires_grad());
    CHECK_FALSE(grad_enabled());
  }
  CHECK(grad_enabled());
  const Tensor frozen = random_tensor(rng, {3}, 1.0, false);
  CHECK_THROWS_AS(backward(sum(frozen)), ContractError);
}
