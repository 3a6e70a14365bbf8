// tests/test_grad.cpp

// Copyright 2026 The mert-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "doctest.h"

#include "mert/grad.hpp"

#include <cmath>
#include <random>

using namespace mert::grad;
using T = Tensor<double>;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

T param(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  return T::parameter({r, c}, randn(r * c, seed, scale));
}

// Contracts the op output with a fixed random weight so every entry matters.
T probe_loss(const T& y, std::uint64_t seed = 99) {
  return sum(mul(y, T::constant(y.shape(), randn(y.size(), seed))));
}

double check(const std::function<T()>& f, std::vector<T> params) {
  FiniteDiffOptions o;
  o.max_coordinates = 4096;
  return finite_diff_check(f, params, o).max_relative_error;
}

}  // namespace

TEST_CASE("elementwise ops with broadcasting pass finite differences") {
  const T a = param(3, 4, 1), row = param(1, 4, 2), col = param(3, 1, 3), s = param(1, 1, 4);
  for (const T& b : {param(3, 4, 5), row, col, s}) {
    CHECK(check([&] { return probe_loss(add(a, b)); }, {a, b}) < 1e-5);
    CHECK(check([&] { return probe_loss(sub(a, b)); }, {a, b}) < 1e-5);
    CHECK(check([&] { return probe_loss(mul(a, b)); }, {a, b}) < 1e-5);
  }
  CHECK(check([&] { return probe_loss(scale(a, 2.5)); }, {a}) < 1e-5);
  CHECK_THROWS_AS(add(a, param(2, 4, 6)), ShapeError);
}

TEST_CASE("matmul variants match the naive product and its gradient") {
  const T a = param(3, 5, 7), b = param(5, 2, 8), c = param(4, 5, 9);
  const T p = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(p.at(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
  CHECK(check([&] { return probe_loss(matmul(a, b)); }, {a, b}) < 1e-5);
  CHECK(check([&] { return probe_loss(matmul_nt(a, c)); }, {a, c}) < 1e-5);
  CHECK(check([&] { return probe_loss(transpose(a)); }, {a}) < 1e-5);
  CHECK_THROWS_AS(matmul(a, c), ShapeError);
}

TEST_CASE("grouped strided conv1d matches a direct loop") {
  const std::size_t L = 11, cin = 4, cout = 6, K = 3, groups = 2;
  const T x = param(L, cin, 10), w = param(cout, cin / groups * K, 11), b = param(1, cout, 12);
  Conv1dOptions o{2, 1, 2, groups};
  const T y = conv1d(x, w, b, K, o);
  const std::size_t out_frames = (L + 3 - K) / 2 + 1;
  REQUIRE(y.rows() == out_frames);
  REQUIRE(y.cols() == cout);
  const std::size_t cig = cin / groups, cog = cout / groups;
  for (std::size_t t = 0; t < out_frames; ++t)
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const std::size_t g = oc / cog;
      double s = b.at(0, oc);
      for (std::size_t ci = 0; ci < cig; ++ci)
        for (std::size_t k = 0; k < K; ++k) {
          const long pos = long(t * 2 + k) - 1;
          if (pos < 0 || pos >= long(L)) continue;
          s += w.at(oc, ci * K + k) * x.at(std::size_t(pos), g * cig + ci);
        }
      CHECK(y.at(t, oc) == doctest::Approx(s).epsilon(1e-12));
    }
  CHECK(check([&] { return probe_loss(conv1d(x, w, b, K, o)); }, {x, w, b}) < 1e-5);
  CHECK(check([&] { return probe_loss(conv1d(x, w, T(), K, o)); }, {x, w}) < 1e-5);
}

TEST_CASE("normalisation and activation gradients") {
  const T x = param(4, 6, 13), g = param(1, 6, 14), b = param(1, 6, 15);
  CHECK(check([&] { return probe_loss(layer_norm(x, g, b)); }, {x, g, b}) < 1e-5);
  CHECK(check([&] { return probe_loss(softmax(x)); }, {x}) < 1e-5);
  CHECK(check([&] { return probe_loss(log_softmax(x)); }, {x}) < 1e-5);
  CHECK(check([&] { return probe_loss(gelu(x)); }, {x}) < 1e-5);
  CHECK(check([&] { return probe_loss(normalize_rows(x)); }, {x}) < 1e-5);

  // Keep relu and log away from their kinks / domain edge.
  std::vector<double> pos = randn(24, 16);
  for (auto& v : pos) v = 0.5 + std::abs(v);
  const T p = T::parameter({4, 6}, pos);
  CHECK(check([&] { return probe_loss(log(p)); }, {p}) < 1e-5);
  std::vector<double> away = randn(24, 17);
  for (auto& v : away) v += v >= 0 ? 0.2 : -0.2;
  const T q = T::parameter({4, 6}, away);
  CHECK(check([&] { return probe_loss(relu(q)); }, {q}) < 1e-5);
}

TEST_CASE("softmax rows sum to one and layer_norm rows are standardised") {
  const T x = param(5, 7, 18, 3.0);
  const T s = softmax(x);
  const T n = layer_norm(x, T::constant({1, 7}, std::vector<double>(7, 1.0)),
                         T::constant({1, 7}, std::vector<double>(7, 0.0)));
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0, m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      total += s.at(r, c);
      m += n.at(r, c) / 7.0;
    }
    for (std::size_t c = 0; c < 7; ++c) v += (n.at(r, c) - m) * (n.at(r, c) - m) / 7.0;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("gather, select, cosine and reductions") {
  const T a = param(5, 4, 19), b = param(5, 4, 20), c = param(3, 4, 21);
  const std::vector<std::size_t> rows = {4, 0, 0, 2};
  const std::vector<std::size_t> cols = {3, 0, 1, 1, 2};
  CHECK(check([&] { return probe_loss(gather_rows(a, std::span<const std::size_t>(rows))); }, {a}) < 1e-5);
  CHECK(check([&] { return probe_loss(select_per_row(a, std::span<const std::size_t>(cols))); }, {a}) < 1e-5);
  CHECK(check([&] { return probe_loss(cosine_similarity(a, b)); }, {a, b}) < 1e-5);
  CHECK(check([&] { return probe_loss(cosine_similarity_matrix(a, c)); }, {a, c}) < 1e-5);
  CHECK(check([&] { return sum(a); }, {a}) < 1e-5);
  CHECK(check([&] { return scale(mean(a), 3.0); }, {a}) < 1e-5);
  CHECK(check([&] { return probe_loss(sum_rows(a)); }, {a}) < 1e-5);
  CHECK(check([&] { return mse(a, b); }, {a, b}) < 1e-5);

  std::vector<double> targets = randn(20, 22);
  for (auto& t : targets) t = t > 0 ? 1.0 : 0.0;
  const T y = T::constant({5, 4}, targets);
  CHECK(check([&] { return bce_with_logits(a, y); }, {a}) < 1e-5);

  const T cm = cosine_similarity_matrix(a, c);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0, na = 0.0, nc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        dot += a.at(i, k) * c.at(j, k);
        na += a.at(i, k) * a.at(i, k);
        nc += c.at(j, k) * c.at(j, k);
      }
      CHECK(cm.at(i, j) == doctest::Approx(dot / std::sqrt(na * nc)).epsilon(1e-12));
    }
}

TEST_CASE("slicing and concatenation") {
  const T a = param(5, 4, 23), b = param(2, 4, 24), c = param(5, 3, 25);
  CHECK(check([&] { return probe_loss(slice_rows(a, 1, 3)); }, {a}) < 1e-5);
  CHECK(check([&] { return probe_loss(slice_cols(a, 1, 2)); }, {a}) < 1e-5);
  const std::vector<T> rows_parts = {a, b};
  const std::vector<T> cols_parts = {a, c};
  CHECK(check([&] { return probe_loss(concat_rows<double>(rows_parts)); }, {a, b}) < 1e-5);
  CHECK(check([&] { return probe_loss(concat_cols<double>(cols_parts)); }, {a, c}) < 1e-5);
  CHECK_THROWS(slice_rows(a, 4, 2));
}

TEST_CASE("shared subexpressions accumulate gradients once per use") {
  const T x = param(2, 2, 26);
  const T y = mul(x, x);  // d/dx sum(x*x + x) = 2x + 1
  const T loss = sum(add(y, x));
  backward(loss);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.values()[i] + 1.0));
}

TEST_CASE("NoGradGuard records no graph") {
  const T x = param(2, 2, 27);
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    const T y = sum(mul(x, x));
    CHECK(y.node()->parents.empty());
  }
  CHECK(grad_enabled());
}

TEST_CASE("float instantiation agrees with double") {
  const auto vals = randn(12, 28);
  std::vector<float> fv(vals.begin(), vals.end());
  const auto xd = T::constant({3, 4}, vals);
  const auto xf = Tensor<float>::constant({3, 4}, fv);
  const auto d = softmax(xd);
  const auto f = softmax(xf);
  for (std::size_t i = 0; i < 12; ++i) CHECK(double(f.values()[i]) == doctest::Approx(d.values()[i]).epsilon(1e-5));
}
