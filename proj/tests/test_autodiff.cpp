#include <doctest.h>

#include <cmath>

#include "dfast/autodiff.hpp"

using namespace dfast;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("gelu is zero at the origin and odd-symmetric nearby") {
  Var<double> x(Tensor<double>({3}, {-1.3, 0.0, 1.3}));
  auto y = gelu(x);
  CHECK(y.value()[1] == 0.0);
  // tanh form: gelu(x) - gelu(-x) == x
  CHECK(y.value()[2] - y.value()[0] == doctest::Approx(1.3).epsilon(1e-12));
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  auto y = softmax(Var<double>(Tensor<double>({1, 3}, {0, 0, 0})));
  for (int i = 0; i < 3; ++i) CHECK(y.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Rng rng(7);
  auto z = softmax(Var<double>(random_tensor({5, 9}, rng, -8, 8)));
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) {
      CHECK(z.value()[r * 9 + c] >= 0.0);
      s += z.value()[r * 9 + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm maps a constant row to zeros via epsilon") {
  Var<double> x(Tensor<double>({1, 4}, {2.5, 2.5, 2.5, 2.5}));
  Var<double> g(Tensor<double>::full({4}, 1.0));
  Var<double> b(Tensor<double>::zeros({4}));
  auto y = layer_norm(x, g, b);
  for (int i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(0.0));
}

TEST_CASE("layer_norm standardizes rows when variance dominates epsilon") {
  Rng rng(11);
  Var<double> x(random_tensor({6, 16}, rng, -3, 3));
  Var<double> g(Tensor<double>::full({16}, 1.0));
  Var<double> b(Tensor<double>::zeros({16}));
  auto y = layer_norm(x, g, b);
  for (int r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 16; ++c) mean += y.value()[r * 16 + c];
    mean /= 16;
    for (int c = 0; c < 16; ++c) {
      const double d = y.value()[r * 16 + c] - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
}

TEST_CASE("backward of x*x at x=3 gives 6") {
  Var<double> x(Tensor<double>::scalar(3.0), true);
  backward(mean_all(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward of mean over four elements gives 0.25 each") {
  Var<double> x(Tensor<double>({4}, {1, 2, 3, 4}), true);
  backward(mean_all(x));
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(0.25));
}

TEST_CASE("backward rejects non-scalar losses") {
  Var<double> x(Tensor<double>({2}, {1, 2}), true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("shape mismatches report both shapes") {
  Var<double> a(Tensor<double>::zeros({2, 3}));
  Var<double> b(Tensor<double>::zeros({4, 2}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("overflowing products raise a numeric error") {
  Var<float> a(Tensor<float>::full({4, 4}, 1e30f));
  Var<float> b(Tensor<float>::full({4, 4}, 1e30f));
  CHECK_THROWS_AS(matmul(a, b), NumericError);
}

TEST_CASE("dropout contract and identity modes") {
  Rng rng(5);
  Var<double> x(random_tensor({3, 8}, rng), true);
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ContractError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, rng), ContractError);

  auto eval_out = dropout(x, 0.5, /*train=*/false, rng);
  CHECK(eval_out.value().data == x.value().data);
  auto zero_rate = dropout(x, 0.0, /*train=*/true, rng);
  CHECK(zero_rate.value().data == x.value().data);

  // inverted scaling: surviving entries are x / keep
  Rng mask_rng(99);
  auto train_out = dropout(x, 0.25, true, mask_rng);
  for (int64_t i = 0; i < x.value().numel(); ++i) {
    const double v = train_out.value()[i];
    const bool kept = v != 0.0 || x.value()[i] == 0.0;
    if (kept) CHECK(v == doctest::Approx(x.value()[i] / 0.75));
  }
}

TEST_CASE("finite_diff_check: sigmoid at zero, composite, constant") {
  auto sig = [](const Var<double>& v) { return sigmoid(v); };
  CHECK(finite_diff_check<double>(sig, Tensor<double>({1}, {0.0}), 1e-5) < 1e-6);

  Rng rng(21);
  Var<double> w(random_tensor({3, 3}, rng), false);
  Var<double> b(random_tensor({3}, rng), false);
  auto f = [&](const Var<double>& v) { return softmax(linear(v, w, b)); };
  CHECK(finite_diff_check<double>(f, random_tensor({3, 3}, rng), 1e-5) < 1e-4);

  auto constf = [](const Var<double>& v) {
    return scale(mul(v, Var<double>(Tensor<double>::zeros(v.shape()))), 0.0);
  };
  CHECK(finite_diff_check<double>(constf, random_tensor({2, 2}, rng), 1e-5) == 0.0);
}

TEST_CASE("randomized gradient checks across the op suite") {
  Rng rng(1234);
  const double step = 1e-5, tol = 1e-4;
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t m = 2 + int64_t(rng.uniform_int(3));
    const int64_t k = 2 + int64_t(rng.uniform_int(3));
    const int64_t n = 2 + int64_t(rng.uniform_int(3));

    Var<double> b2(random_tensor({k, n}, rng));
    auto f_mm = [&](const Var<double>& v) { return matmul(v, b2); };
    CHECK(finite_diff_check<double>(f_mm, random_tensor({m, k}, rng), step) < tol);

    Var<double> a2(random_tensor({m, k}, rng));
    auto f_mm_rhs = [&](const Var<double>& v) { return matmul(a2, v); };
    CHECK(finite_diff_check<double>(f_mm_rhs, random_tensor({k, n}, rng), step) < tol);

    Var<double> bias(random_tensor({n}, rng));
    auto f_addb = [&](const Var<double>& v) { return add(v, bias); };
    CHECK(finite_diff_check<double>(f_addb, random_tensor({m, n}, rng), step) < tol);
    Var<double> big(random_tensor({m, n}, rng));
    auto f_addsmall = [&](const Var<double>& v) { return add(big, v); };
    CHECK(finite_diff_check<double>(f_addsmall, random_tensor({n}, rng), step) < tol);

    Var<double> other(random_tensor({m, n}, rng));
    auto f_mul = [&](const Var<double>& v) { return mul(v, other); };
    CHECK(finite_diff_check<double>(f_mul, random_tensor({m, n}, rng), step) < tol);

    auto f_soft = [](const Var<double>& v) { return softmax(v); };
    CHECK(finite_diff_check<double>(f_soft, random_tensor({m, n}, rng, -4, 4), step) < tol);

    Var<double> gain(random_tensor({n}, rng, 0.5, 1.5));
    Var<double> shift(random_tensor({n}, rng));
    auto f_ln = [&](const Var<double>& v) { return layer_norm(v, gain, shift); };
    CHECK(finite_diff_check<double>(f_ln, random_tensor({m, n}, rng), step) < tol);

    auto f_gelu = [](const Var<double>& v) { return gelu(v); };
    CHECK(finite_diff_check<double>(f_gelu, random_tensor({m, n}, rng, -3, 3), step) < tol);

    auto f_t = [](const Var<double>& v) { return transpose(v); };
    CHECK(finite_diff_check<double>(f_t, random_tensor({m, n}, rng), step) < tol);

    auto f_perm = [](const Var<double>& v) { return permute(v, {2, 0, 1}); };
    CHECK(finite_diff_check<double>(f_perm, random_tensor({2, m, n}, rng), step) < tol);

    auto f_drop = [](const Var<double>& v) {
      Rng r(77);
      return dropout(v, 0.4, true, r);
    };
    CHECK(finite_diff_check<double>(f_drop, random_tensor({m, n}, rng), step) < tol);

    Var<double> q(random_tensor({2, m, k}, rng));
    Var<double> kk(random_tensor({2, m, k}, rng));
    auto f_attn = [&](const Var<double>& v) { return scaled_dot_attention(q, kk, v); };
    CHECK(finite_diff_check<double>(f_attn, random_tensor({2, m, n}, rng), step) < tol);
  }
}

TEST_CASE("structural ops route gradients exactly") {
  Rng rng(55);
  const double step = 1e-5, tol = 1e-4;

  auto f_slice = [](const Var<double>& v) { return slice_last(v, 1, 2); };
  CHECK(finite_diff_check<double>(f_slice, random_tensor({3, 5}, rng), step) < tol);

  Var<double> lhs(random_tensor({3, 2}, rng));
  auto f_cat = [&](const Var<double>& v) { return concat_last<double>({lhs, v}); };
  CHECK(finite_diff_check<double>(f_cat, random_tensor({3, 4}, rng), step) < tol);

  Var<double> toks(random_tensor({2, 3, 4}, rng));
  auto f_prep = [&](const Var<double>& v) { return prepend_token(toks, v); };
  CHECK(finite_diff_check<double>(f_prep, random_tensor({4}, rng), step) < tol);
  auto f_prep2 = [&](const Var<double>& v) {
    return prepend_token(v, Var<double>(Tensor<double>({4}, {1, 2, 3, 4})));
  };
  CHECK(finite_diff_check<double>(f_prep2, random_tensor({2, 3, 4}, rng), step) < tol);

  auto f_sel = [](const Var<double>& v) { return select_token(v, 0); };
  CHECK(finite_diff_check<double>(f_sel, random_tensor({2, 3, 4}, rng), step) < tol);

  auto f_meant = [](const Var<double>& v) { return mean_tokens(v); };
  CHECK(finite_diff_check<double>(f_meant, random_tensor({2, 3, 4}, rng), step) < tol);

  Var<double> e1(random_tensor({2, 4}, rng));
  auto f_stack = [&](const Var<double>& v) { return stack_tokens<double>({e1, v}); };
  CHECK(finite_diff_check<double>(f_stack, random_tensor({2, 4}, rng), step) < tol);

  auto f_gather = [](const Var<double>& v) { return gather(v, {2, 0}); };
  CHECK(finite_diff_check<double>(f_gather, random_tensor({4}, rng), step) < tol);
}

TEST_CASE("determinism: identical seeds give bitwise-identical results") {
  auto run = [] {
    Rng rng(2024);
    Tensor<double> xt(Shape{4, 6});
    for (auto& v : xt.data) v = rng.uniform(-1, 1);
    Var<double> x(xt, true);
    Tensor<double> wt({2, 6});
    for (auto& v : wt.data) v = rng.uniform(-1, 1);
    Var<double> w(std::move(wt), true);
    Rng drop_rng(3);
    auto y = dropout(gelu(linear(x, w)), 0.2, true, drop_rng);
    auto l = mean_all(mul(y, y));
    backward(l);
    return std::make_pair(l.value().data, x.grad().data);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("gradients accumulate across backward calls") {
  Var<double> x(Tensor<double>::scalar(2.0), true);
  backward(mean_all(mul(x, x)));
  backward(mean_all(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(8.0));  // 2 * (2x)
  x.zero_grad();
  backward(mean_all(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(4.0));
}
