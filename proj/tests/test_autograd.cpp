#include <doctest.h>

#include <cmath>

#include "dualpath/nn.hpp"
#include "support/gradcheck.hpp"

using namespace dualpath;
using dualpath::testing::gradcheck;
using dualpath::testing::random_tensor;
using dualpath::testing::weighted_sum;

namespace {

using V = Var<double>;
using T = Tensor<double>;

// Naive nested-loop cross-correlation, batch of one.
T naive_conv(const T& x, const T& k, const Conv2dOptions& o) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index oc = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index ho = (h + o.pad_top + o.pad_bottom - kh) / o.stride_h + 1;
  const Index wo = (w + o.pad_left + o.pad_right - kw) / o.stride_w + 1;
  T y({oc, ho, wo});
  for (Index a = 0; a < oc; ++a)
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        double acc = 0;
        for (Index ch = 0; ch < c; ++ch)
          for (Index p = 0; p < kh; ++p)
            for (Index q = 0; q < kw; ++q) {
              const Index ih = i * o.stride_h - o.pad_top + p, iw = j * o.stride_w - o.pad_left + q;
              if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
              acc += x[(ch * h + ih) * w + iw] * k[((a * c + ch) * kh + p) * kw + q];
            }
        y[(a * ho + i) * wo + j] = acc;
      }
  return y;
}

}  // namespace

TEST_CASE("tensor rejects inconsistent shapes") {
  CHECK_THROWS_AS(T({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(T({0, 2}), DimensionError);
  T t({2, 3});
  CHECK(t.size() == 6);
}

TEST_CASE("non-finite values are an error") {
  V x = V::leaf(T({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(scale(x, std::numeric_limits<double>::infinity()), NumericError);
}

TEST_CASE("conv2d examples") {
  SUBCASE("1x2 filter with right padding") {
    V x = V::constant(T({1, 1, 3}, {1, 2, 3}));
    V k = V::constant(T({1, 1, 1, 2}, {1, 1}));
    V y = conv2d(x, k, Conv2dOptions::length_pair());
    CHECK(y.shape() == Shape{1, 1, 3});
    CHECK(y.value() == T({1, 1, 3}, {3, 5, 3}));
  }
  SUBCASE("identity kernel") {
    std::mt19937_64 rng(3);
    T input = random_tensor({2, 4, 5}, rng);
    T kernel({2, 2, 1, 1}, {1, 0, 0, 1});
    V y = conv2d(V::constant(input), V::constant(kernel));
    CHECK(y.value() == input);
  }
  SUBCASE("zero input") {
    std::mt19937_64 rng(4);
    V y = conv2d(V::constant(T({3, 6, 6})), V::constant(random_tensor({4, 3, 3, 3}, rng)), Conv2dOptions::same(3));
    CHECK(y.value().array().abs().maxCoeff() == 0.0);
  }
  SUBCASE("matches naive oracle, same padding preserves extents") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 5; ++trial) {
      T x = random_tensor({3, 7, 6}, rng);
      T k3 = random_tensor({4, 3, 3, 3}, rng);
      auto o3 = Conv2dOptions::same(3);
      V y = conv2d(V::constant(x), V::constant(k3), o3);
      CHECK(y.shape() == Shape{4, 7, 6});
      CHECK((y.value().array() - naive_conv(x, k3, o3).array()).abs().maxCoeff() < 1e-12);

      T t = random_tensor({3, 1, 9}, rng);
      T k2 = random_tensor({2, 3, 1, 2}, rng);
      V z = conv2d(V::constant(t), V::constant(k2), Conv2dOptions::length_pair());
      CHECK(z.shape() == Shape{2, 1, 9});
      CHECK((z.value().array() - naive_conv(t, k2, Conv2dOptions::length_pair()).array()).abs().maxCoeff() < 1e-12);

      auto strided = Conv2dOptions::same(3, 2);
      V s = conv2d(V::constant(x), V::constant(k3), strided);
      CHECK((s.value().array() - naive_conv(x, k3, strided).array()).abs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("shape mismatch names both shapes") {
    V x = V::constant(T({2, 4, 4}));
    V k = V::constant(T({1, 3, 3, 3}));
    try {
      conv2d(x, k);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      std::string msg = e.what();
      CHECK(msg.find("[2,4,4]") != std::string::npos);
      CHECK(msg.find("[1,3,3,3]") != std::string::npos);
    }
  }
}

TEST_CASE("pool2d examples") {
  V x = V::constant(T({1, 2, 2}, {1, 2, 3, 4}));
  CHECK(pool2d(x, 2, 2, PoolKind::avg).value()[0] == doctest::Approx(2.5));
  CHECK(pool2d(x, 2, 2, PoolKind::max).value()[0] == 4.0);
  V c = V::constant(T::constant({2, 4, 6}, 1.5));
  for (PoolKind kind : {PoolKind::max, PoolKind::avg}) {
    V p = pool2d(c, 2, 3, kind);
    CHECK(p.shape() == Shape{2, 2, 2});
    CHECK((p.value().array() == 1.5).all());
  }
  CHECK_THROWS_AS(pool2d(V::constant(T({1, 3, 3})), 2, 2, PoolKind::max), DimensionError);

  SUBCASE("max-pool ties route to the lowest flat index") {
    V leaf = V::leaf(T({1, 2, 2}, {7, 7, 7, 7}));
    backward(sum(pool2d(leaf, 2, 2, PoolKind::max)));
    CHECK(leaf.grad() == T({1, 2, 2}, {1, 0, 0, 0}));
  }
}

TEST_CASE("relu examples") {
  CHECK(relu(V::constant(T({3}, {-1, 0, 2}))).value() == T({3}, {0, 0, 2}));
  CHECK(relu(V::constant(T({2}, {-3, -0.5}))).value() == T({2}, {0, 0}));
  V x = V::leaf(T({2}, {-1, 2}));
  backward(sum(relu(x)));
  CHECK(x.grad() == T({2}, {0, 1}));
  V z = V::leaf(T({1}, {0.0}));
  backward(sum(relu(z)));
  CHECK(z.grad()[0] == 0.0);
}

TEST_CASE("batchnorm examples") {
  std::mt19937_64 rng(11);
  BatchNormState<double> bn("bn", 3);
  SUBCASE("train mode normalizes per channel") {
    T input = random_tensor({8, 3, 2, 2}, rng);
    input.array() = input.array() * 3.0 + 2.0;
    V y = batchnorm(V::constant(input), bn, Mode::train);
    for (Index ch = 0; ch < 3; ++ch) {
      double m = 0, v = 0;
      for (Index i = 0; i < 8; ++i)
        for (Index s = 0; s < 4; ++s) m += y.value()[(i * 3 + ch) * 4 + s];
      m /= 32;
      for (Index i = 0; i < 8; ++i)
        for (Index s = 0; s < 4; ++s) v += std::pow(y.value()[(i * 3 + ch) * 4 + s] - m, 2);
      v /= 32;
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(v - 1.0) < 1e-4);  // epsilon shrinks the variance by ~1e-5 relative
    }
    CHECK((bn.running_var >= 0).all());
  }
  SUBCASE("eval with identity statistics") {
    T input = random_tensor({4, 3}, rng);
    V y = batchnorm(V::constant(input), bn, Mode::eval);
    CHECK((y.value().array() - input.array() / std::sqrt(1.0 + 1e-5)).abs().maxCoeff() < 1e-12);
    CHECK((y.value().array() - input.array()).abs().maxCoeff() < 1e-4);
  }
  SUBCASE("affine dominates with zero gamma") {
    bn.gamma.value.mutable_value().array().setZero();
    bn.beta.value.mutable_value().array().setConstant(5.0);
    V y = batchnorm(V::constant(random_tensor({4, 3}, rng)), bn, Mode::train);
    CHECK((y.value().array() == 5.0).all());
  }
  SUBCASE("train mode needs two samples") {
    CHECK_THROWS_AS(batchnorm(V::constant(T({1, 3})), bn, Mode::train), BatchSizeError);
    CHECK_NOTHROW(batchnorm(V::constant(T({1, 3})), bn, Mode::eval));
  }
  SUBCASE("eval is deterministic") {
    T input = random_tensor({5, 3}, rng);
    batchnorm(V::constant(random_tensor({6, 3}, rng)), bn, Mode::train);
    CHECK(batchnorm(V::constant(input), bn, Mode::eval).value() == batchnorm(V::constant(input), bn, Mode::eval).value());
  }
}

TEST_CASE("linear examples") {
  CHECK(linear(V::constant(T({1, 2}, {1, 2})), V::constant(T({2, 2}, {1, 0, 0, 1})), V::constant(T({2}, {0, 0})))
            .value() == T({1, 2}, {1, 2}));
  CHECK(linear(V::constant(T({1, 2}, {1, 1})), V::constant(T({2, 1}, {2, 3})), V::constant(T({1}, {1}))).value()[0] ==
        6.0);
  CHECK(linear(V::constant(T({3, 2})), V::constant(T({2, 2}, {4, 5, 6, 7})), V::constant(T({2}, {-1, 2}))).value() ==
        T({3, 2}, {-1, 2, -1, 2, -1, 2}));
  CHECK_THROWS_AS(linear(V::constant(T({1, 3})), V::constant(T({2, 2})), V::constant(T({2}))), DimensionError);
}

TEST_CASE("dropout examples") {
  Rng rng(1);
  std::mt19937_64 data_rng(2);
  T input = random_tensor({50}, data_rng);
  CHECK(dropout(V::constant(input), 0.0, Mode::train, rng).value() == input);
  CHECK(dropout(V::constant(input), 0.75, Mode::eval, rng).value() == input);
  CHECK_THROWS_AS(dropout(V::constant(input), 1.0, Mode::train, rng), ParameterError);

  V ones = V::constant(T::constant({100000}, 1.0));
  const double m = dropout(ones, 0.75, Mode::train, rng).value().array().mean();
  CHECK(m >= 0.95);
  CHECK(m <= 1.05);
}

TEST_CASE("softmax cross-entropy examples") {
  std::vector<int> zero{0}, two{2};
  CHECK(softmax_cross_entropy(V::constant(T({1, 2}, {0, 0})), zero).value()[0] == doctest::Approx(std::log(2.0)));
  CHECK(softmax_cross_entropy(V::constant(T({1, 2}, {100, 0})), zero).value()[0] < 1e-6);
  // 0.4076059644443803 from a 30-digit evaluation of log(e+e^2+e^3) - 3.
  CHECK(softmax_cross_entropy(V::constant(T({1, 3}, {1, 2, 3})), two).value()[0] ==
        doctest::Approx(0.4076059644443803).epsilon(1e-12));
  CHECK_THROWS_AS(softmax_cross_entropy(V::constant(T({1, 3}, {1, 2, 3})), std::vector<int>{3}), IndexError);

  std::mt19937_64 rng(9);
  T probs = softmax_rows(random_tensor({6, 5}, rng));
  for (Index r = 0; r < 6; ++r) CHECK(std::abs(probs.matrix(6).row(r).sum() - 1.0) < 1e-9);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(1);
  V x = V::leaf(random_tensor({3, 4}, rng));
  backward(sum(x));
  CHECK((x.grad().array() == 1.0).all());

  V y = V::leaf(T({2}, {1, 2}));
  backward(sum(mul(y, y)));
  CHECK(y.grad() == T({2}, {2, 4}));

  SUBCASE("second call accumulates") {
    V z = V::leaf(T({2}, {1, 2}));
    V loss = sum(mul(z, z));
    backward(loss);
    backward(loss);
    CHECK(z.grad() == T({2}, {4, 8}));
  }
  SUBCASE("non-scalar root") { CHECK_THROWS_AS(backward(mul(y, y)), UsageError); }
  SUBCASE("composite graph matches finite differences") {
    V a = V::leaf(random_tensor({3, 4}, rng));
    V b = V::leaf(random_tensor({4, 2}, rng));
    auto loss = [&] { return mean(mul(matmul(a, b), add_scalar(matmul(a, b), 0.5))); };
    CHECK(gradcheck({a, b}, loss).max_relative_error < 1e-4);
  }
}

TEST_CASE("sgd momentum examples") {
  Parameter<double> p("p", T({1}, {1.0}));
  SUBCASE("plain step") {
    backward(sum(p.value));
    sgd_momentum_step<double>({&p}, 0.1, 0.0);
    CHECK(p.value.value()[0] == doctest::Approx(0.9));
  }
  SUBCASE("two momentum steps") {
    std::vector<Parameter<double>*> params{&p};
    backward(sum(p.value));
    sgd_momentum_step(params, 1.0, 0.9);
    CHECK(p.value.value()[0] == doctest::Approx(0.0));
    zero_grad(params);
    backward(sum(p.value));
    sgd_momentum_step(params, 1.0, 0.9);
    CHECK(p.value.value()[0] == doctest::Approx(-1.9));
  }
  SUBCASE("frozen parameter is untouched") {
    p.set_frozen(true);
    backward(sum(mul(p.value, V::leaf(T({1}, {3.0})))));
    sgd_momentum_step<double>({&p}, 0.5, 0.9);
    CHECK(p.value.value()[0] == 1.0);
  }
  SUBCASE("missing gradient") { CHECK_THROWS_AS(sgd_momentum_step<double>({&p}, 0.1, 0.9), StateError); }
}

TEST_CASE("determinism of forward and update") {
  auto run = [] {
    Rng rng(77);
    Parameter<float> w("w", he_normal<float>({4, 3, 3, 3}, 27, rng));
    std::mt19937_64 data(5);
    Tensor<float> x = random_tensor({2, 3, 6, 6}, data).cast<float>();
    BatchNormState<float> bn("bn", 4);
    Var<float> out = relu(batchnorm(conv2d(Var<float>::constant(x), w.value, Conv2dOptions::same(3)), bn, Mode::train));
    backward(mean(dropout(out, 0.5, Mode::train, rng)));
    sgd_momentum_step<float>({&w}, 0.01, 0.9);
    return std::make_pair(out.value(), w.value.value());
  };
  auto first = run();
  auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}
