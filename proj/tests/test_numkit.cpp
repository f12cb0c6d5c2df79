// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mamoe/rng.hpp"
#include "mamoe/tensor.hpp"

using namespace mamoe;
using namespace mamoe::numkit;

namespace {

TensorPtr<double> random_tensor(std::size_t r, std::size_t c, rng::Xoshiro256& g,
                                double lo = -1.0, double hi = 1.0) {
  auto t = make_tensor<double>(r, c);
  for (auto& v : t->data) v = lo + (hi - lo) * g.uniform();
  return t;
}

// Scalar-valued wrapper: sum(y * w) with fixed random weights, so gradient
// checks see a non-trivial upstream signal on every output entry.
TensorPtr<double> weighted_sum(Tape<double>& tape, const TensorPtr<double>& y,
                               std::uint64_t seed) {
  rng::Xoshiro256 g(seed);
  auto w = make_tensor<double>(y->rows(), y->cols());
  for (auto& v : w->data) v = -1.0 + 2.0 * g.uniform();
  return sum_all(tape, mul(tape, y, w));
}

}  // namespace

TEST_CASE("matmul matches hand multiplication") {
  Tape<double> tape;
  auto a = make_tensor<double>(2, 2, {1, 2, 3, 4});
  auto b = make_tensor<double>(2, 2, {5, 6, 7, 8});
  auto c = matmul(tape, a, b);
  CHECK(c->data == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul identity and annihilator") {
  Tape<double> tape;
  rng::Xoshiro256 g(7);
  auto x = random_tensor(2, 5, g);
  auto eye = make_tensor<double>(2, 2, {1, 0, 0, 1});
  auto zero = make_tensor<double>(2, 2);
  CHECK(matmul(tape, eye, x)->data == x->data);
  auto z = matmul(tape, zero, x);
  for (double v : z->data) CHECK(v == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
  Tape<double> tape;
  auto a = make_tensor<double>(2, 3);
  auto b = make_tensor<double>(4, 2);
  try {
    matmul(tape, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax_rows fixtures") {
  Tape<double> tape;
  auto a = make_tensor<double>(1, 2, {0, 0});
  auto pa = softmax_rows(tape, a);
  CHECK(pa->data[0] == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(pa->data[1] == Catch::Approx(0.5).epsilon(1e-14));

  auto b = make_tensor<double>(1, 2, {std::log(1.0), std::log(3.0)});
  auto pb = softmax_rows(tape, b);
  CHECK(pb->data[0] == Catch::Approx(0.25).epsilon(1e-13));
  CHECK(pb->data[1] == Catch::Approx(0.75).epsilon(1e-13));
}

TEST_CASE("softmax_rows shift invariance and row sums") {
  rng::Xoshiro256 g(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    auto x = random_tensor(3, 6, g, -50.0, 50.0);
    auto shifted = std::make_shared<Tensor<double>>(*x);
    shifted->grad.clear();
    const double c = -25.0 + 50.0 * g.uniform();
    for (std::size_t i = 0; i < shifted->rows(); ++i)
      for (std::size_t j = 0; j < shifted->cols(); ++j) shifted->at(i, j) += c;
    auto p = softmax_rows(tape, x);
    auto ps = softmax_rows(tape, shifted);
    for (std::size_t i = 0; i < p->numel(); ++i)
      CHECK(p->data[i] == Catch::Approx(ps->data[i]).margin(1e-12));
    for (std::size_t i = 0; i < p->rows(); ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < p->cols(); ++j) sum += p->at(i, j);
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("silu fixtures") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 3, {0.0, 1.0, 20.0});
  auto y = silu(tape, x);
  CHECK(y->data[0] == 0.0);
  CHECK(y->data[1] == Catch::Approx(0.731058578630005).epsilon(1e-12));
  CHECK(std::abs(y->data[2] / 20.0 - 1.0) < 1e-8);
}

TEST_CASE("topk selects largest with lowest-index tie break") {
  auto r = topk<double>(std::vector<double>{0.1, 0.5, 0.4}, 2);
  CHECK(r.indices == std::vector<int>{1, 2});
  CHECK(r.values == std::vector<double>{0.5, 0.4});

  auto tie = topk<double>(std::vector<double>{0.3, 0.3, 0.2}, 1);
  CHECK(tie.indices == std::vector<int>{0});

  auto all = topk<double>(std::vector<double>{2, 1, 3}, 3);
  CHECK(all.indices == std::vector<int>{2, 0, 1});

  CHECK_THROWS_AS(topk<double>(std::vector<double>{1.0}, 2), ArgumentError);
  CHECK_THROWS_AS(topk<double>(std::vector<double>{1.0}, 0), ArgumentError);
}

TEST_CASE("topk is pure") {
  rng::Xoshiro256 g(3);
  std::vector<double> v(16);
  for (auto& x : v) x = g.uniform();
  auto a = topk<double>(v, 5);
  auto b = topk<double>(v, 5);
  CHECK(a.indices == b.indices);
  CHECK(a.values == b.values);
}

TEST_CASE("grad_check on sum of squares") {
  auto f = [](Tape<double>& tape, const TensorPtr<double>& x) {
    return sum_all(tape, mul(tape, x, x));
  };
  Tensor<double> x0(1, 2);
  x0.data = {1.0, 2.0};
  auto report = grad_check(f, x0, 1e-5);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check on a constant function") {
  auto f = [](Tape<double>& tape, const TensorPtr<double>& x) {
    (void)x;
    auto c = make_tensor<double>(1, 1, {3.0});
    return scale(tape, c, 1.0);
  };
  Tensor<double> x0(1, 3);
  x0.data = {0.2, -0.4, 1.0};
  auto report = grad_check(f, x0, 1e-5);
  CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("softmax pick-first gradient matches the analytic Jacobian row") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 2, {0.0, 0.0});
  auto p = softmax_rows(tape, x);
  auto y = gather_elems(tape, p, {{0, 0}});
  x->zero_grad();
  tape.backward(y);
  CHECK(x->grad[0] == Catch::Approx(0.25).epsilon(1e-12));
  CHECK(x->grad[1] == Catch::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("grad_check validates eps range") {
  auto f = [](Tape<double>& tape, const TensorPtr<double>& x) { return sum_all(tape, x); };
  Tensor<double> x0(1, 1);
  CHECK_THROWS_AS(grad_check(f, x0, 1e-2), ArgumentError);
  CHECK_THROWS_AS(grad_check(f, x0, 1e-8), ArgumentError);
}

TEST_CASE("every taped primitive passes a finite-difference check") {
  rng::Xoshiro256 g(101);
  constexpr double kTol = 1e-4;

  struct Case {
    const char* name;
    std::function<TensorPtr<double>(Tape<double>&, const TensorPtr<double>&)> f;
    std::size_t rows, cols;
  };

  auto aux23 = random_tensor(2, 3, g);
  auto aux34 = random_tensor(3, 4, g);
  auto aux43 = random_tensor(4, 3, g);
  auto aux31 = random_tensor(3, 1, g, 0.5, 2.0);
  auto gain = random_tensor(1, 4, g, 0.5, 1.5);

  std::vector<Case> cases = {
      {"matmul_lhs",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, matmul(t, x, aux34), 1);
       },
       2, 3},
      {"matmul_rhs",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, matmul(t, aux23, x), 2);
       },
       3, 4},
      {"matmul_nt",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, matmul_nt(t, x, aux43), 3);
       },
       2, 3},
      {"matmul_nt_rhs",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, matmul_nt(t, aux23, x), 4);
       },
       4, 3},
      {"add",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, add(t, x, aux23), 5);
       },
       2, 3},
      {"mul",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, mul(t, x, aux23), 6);
       },
       2, 3},
      {"scale",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, scale(t, x, 2.5), 7);
       },
       2, 3},
      {"silu",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, silu(t, x), 8);
       },
       2, 4},
      {"softmax_rows",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, softmax_rows(t, x), 9);
       },
       3, 5},
      {"causal_softmax_rows",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, causal_softmax_rows(t, x), 10);
       },
       4, 4},
      {"rmsnorm_rows",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, rmsnorm_rows(t, x, gain), 11);
       },
       3, 4},
      {"rmsnorm_gain",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, rmsnorm_rows(t, aux34, x), 12);
       },
       1, 4},
      {"gather_rows",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, gather_rows(t, x, {2, 0, 2}), 13);
       },
       3, 4},
      {"scatter_rows",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, scatter_rows(t, x, {4, 1}, 6), 14);
       },
       2, 3},
      {"select_cols",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, select_cols(t, x, {3, 1}), 15);
       },
       2, 4},
      {"concat_cols",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, concat_cols(t, {x, aux23}), 16);
       },
       2, 2},
      {"row_sum",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, row_sum(t, x), 17);
       },
       3, 4},
      {"col_mean",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, col_mean(t, x), 18);
       },
       3, 4},
      {"sum_all",
       [&](Tape<double>& t, const TensorPtr<double>& x) { return sum_all(t, x); },
       3, 4},
      {"scale_rows_data",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, scale_rows(t, x, aux31), 19);
       },
       3, 4},
      {"scale_rows_weights",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, scale_rows(t, aux34, x), 20);
       },
       3, 1},
      {"div_rows_data",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, div_rows(t, x, aux31), 21);
       },
       3, 4},
      {"div_rows_denom",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, div_rows(t, aux34, x), 22);
       },
       3, 1},
      {"gather_elems",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return weighted_sum(t, gather_elems(t, x, {{0, 1}, {2, 3}, {0, 1}}), 23);
       },
       3, 4},
      {"cross_entropy_sum",
       [&](Tape<double>& t, const TensorPtr<double>& x) {
         return cross_entropy_sum(t, x, {2, -1, 0});
       },
       3, 4},
  };

  for (const auto& c : cases) {
    INFO(c.name);
    Tensor<double> x0(c.rows, c.cols);
    for (auto& v : x0.data) v = -1.0 + 2.0 * g.uniform();
    if (std::string(c.name) == "div_rows_denom")
      for (auto& v : x0.data) v = 0.5 + g.uniform();
    auto report = grad_check(c.f, x0, 1e-6);
    CHECK(report.max_rel_err < kTol);
  }
}

TEST_CASE("backward accumulates across reuse of a tensor") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 1, {3.0});
  auto y = add(tape, x, x);  // y = 2x
  x->zero_grad();
  tape.backward(y);
  CHECK(x->grad[0] == 2.0);
}

TEST_CASE("cross_entropy_sum equals hand-computed value") {
  Tape<double> tape;
  // Uniform logits over 4 classes: CE = ln 4 per supervised row.
  auto logits = make_tensor<double>(2, 4);
  auto loss = cross_entropy_sum(tape, logits, {1, 3});
  CHECK(loss->data[0] == Catch::Approx(2.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("float instantiation works end to end") {
  Tape<float> tape;
  auto a = make_tensor<float>(2, 2, {1.f, 2.f, 3.f, 4.f});
  auto b = make_tensor<float>(2, 2, {5.f, 6.f, 7.f, 8.f});
  auto c = matmul(tape, a, b);
  auto s = sum_all(tape, c);
  a->zero_grad();
  b->zero_grad();
  tape.backward(s);
  CHECK(c->data == std::vector<float>{19.f, 22.f, 43.f, 50.f});
  CHECK(a->grad[0] == 11.f);  // column sums of b
}
