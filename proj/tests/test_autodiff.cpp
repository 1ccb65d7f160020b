#include <gtest/gtest.h>

#include <random>

#include "imr/autodiff.hpp"

using namespace imr::ad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST(Autodiff, ForwardExamples) {
  Tensor x = Tensor::vector({3.0});
  EXPECT_DOUBLE_EQ(mul(x, x)[0], 9.0);
  EXPECT_DOUBLE_EQ(sum(Tensor::zeros({4})).item(), 0.0);
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  EXPECT_EQ(matmul(a, b).shape(), (Shape{2, 2}));
}

TEST(Autodiff, ShapeMismatchNamesOp) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  try {
    matmul(a, b);
    FAIL();
  } catch (const imr::DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(2,3)"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({3}), Tensor::zeros({4})), imr::DimensionError);
  EXPECT_THROW(concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 2})}, 1), imr::DimensionError);
}

TEST(Autodiff, SquareGradient) {
  Tape tape;
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);
  auto g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.of(x).item(), 6.0);
}

TEST(Autodiff, SumGradientIsOnes) {
  Tape tape;
  Tensor x = Tensor::vector({1, 2, 3, 4, 5}, true);
  Tensor g = tape.backward(sum(x)).of(x);
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Autodiff, UnreachedLeafGetsZeros) {
  Tape tape;
  Tensor x = Tensor::vector({1, 2}, true);
  Tensor unused = Tensor::vector({7, 8, 9}, true);
  auto g = tape.backward(sum(x));
  EXPECT_FALSE(g.reached(unused));
  Tensor gu = g.of(unused);
  for (double v : gu.data()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, NonScalarLossIsContractError) {
  Tape tape;
  Tensor x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(tape.backward(scale(x, 2.0)), imr::ContractError);
}

TEST(Autodiff, MatmulMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a, 1e-4), 1e-5);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(matmul(a, x)); }, b, 1e-4), 1e-5);
}

TEST(Autodiff, GradCheckOfLinearFunctionIsExact) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({7}, rng);
  EXPECT_LT(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-4), 1e-10);
}

TEST(Autodiff, L2NormKnownGradient) {
  Tape tape;
  Tensor x = Tensor::vector({3.0, 4.0}, true);
  auto g = tape.backward(l2norm(x));
  EXPECT_NEAR(g.of(x)[0], 0.6, 1e-15);
  EXPECT_NEAR(g.of(x)[1], 0.8, 1e-15);
  EXPECT_LT(grad_check([](const Tensor& t) { return l2norm(t); }, Tensor::vector({3.0, 4.0})), 1e-6);
}

TEST(Autodiff, GradCheckReportsNonFiniteIndex) {
  Tensor x = Tensor::vector({1.0, 0.0});
  try {
    grad_check([](const Tensor& t) { return sum(log(t)); }, x, 1e-4);
    FAIL();
  } catch (const imr::NumericError& e) {
    SUCCEED();
  }
}

TEST(Autodiff, ReluSubgradientAtZero) {
  Tape tape;
  Tensor x = Tensor::vector({-1.0, 0.0, 2.0}, true);
  auto g = tape.backward(sum(relu(x)));
  EXPECT_EQ(g.of(x)[0], 0.0);
  EXPECT_EQ(g.of(x)[1], 0.0);
  EXPECT_EQ(g.of(x)[2], 1.0);
}

TEST(Autodiff, SigmoidStableForLargeInputs) {
  Tensor s = sigmoid(Tensor::vector({-800.0, 800.0}));
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 1.0);
}

// Every registered op passes a finite-difference check on 10 random inputs.
TEST(Autodiff, EveryOpPassesGradCheck) {
  std::mt19937_64 rng(2024);
  const double tol = 1e-4;
  using Fn = std::function<Tensor(const Tensor&)>;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor other = random_tensor({3, 4}, rng);
    Tensor row = random_tensor({4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    Tensor weights = random_tensor({3, 4}, rng);
    auto weighted = [weights](const Tensor& t) { return sum(mul(t, weights)); };
    std::vector<std::pair<std::string, std::pair<Fn, Tensor>>> cases = {
        {"add", {[&](const Tensor& t) { return weighted(add(t, other)); }, random_tensor({3, 4}, rng)}},
        {"add_broadcast", {[&](const Tensor& t) { return weighted(add(other, t)); }, random_tensor({4}, rng)}},
        {"sub", {[&](const Tensor& t) { return weighted(sub(other, t)); }, random_tensor({3, 4}, rng)}},
        {"mul", {[&](const Tensor& t) { return weighted(mul(t, other)); }, random_tensor({3, 4}, rng)}},
        {"mul_self", {[&](const Tensor& t) { return weighted(mul(t, t)); }, random_tensor({3, 4}, rng)}},
        {"div", {[&](const Tensor& t) { return weighted(div(other, t)); }, random_tensor({3, 4}, rng, 0.5, 2.0)}},
        {"div_num", {[&](const Tensor& t) { return weighted(div(t, pos)); }, random_tensor({3, 4}, rng)}},
        {"matmul", {[&](const Tensor& t) { return sum(matmul(t, transpose(other))); }, random_tensor({2, 4}, rng)}},
        {"tanh", {[&](const Tensor& t) { return weighted(tanh(t)); }, random_tensor({3, 4}, rng)}},
        {"relu", {[&](const Tensor& t) { return weighted(relu(t)); }, random_tensor({3, 4}, rng)}},
        {"sigmoid", {[&](const Tensor& t) { return weighted(sigmoid(t)); }, random_tensor({3, 4}, rng, -4, 4)}},
        {"exp", {[&](const Tensor& t) { return weighted(exp(t)); }, random_tensor({3, 4}, rng)}},
        {"log", {[&](const Tensor& t) { return weighted(log(t)); }, random_tensor({3, 4}, rng, 0.5, 2.0)}},
        {"sqrt", {[&](const Tensor& t) { return weighted(sqrt(t)); }, random_tensor({3, 4}, rng, 0.5, 2.0)}},
        {"sum", {[&](const Tensor& t) { return square(sum(t)); }, random_tensor({3, 4}, rng)}},
        {"sum_axis", {[&](const Tensor& t) { return sum(mul(sum(t, 0), row)); }, random_tensor({3, 4}, rng)}},
        {"mean", {[&](const Tensor& t) { return square(mean(t)); }, random_tensor({3, 4}, rng)}},
        {"l2norm", {[&](const Tensor& t) { return l2norm(t); }, random_tensor({3, 4}, rng)}},
        {"l1norm", {[&](const Tensor& t) { return l1norm(t); }, random_tensor({3, 4}, rng)}},
        {"row_norms", {[&](const Tensor& t) { return sum(mul(row_norms(t), Tensor::vector({1, -2, 3}))); },
                       random_tensor({3, 4}, rng)}},
        {"normalize_rows", {[&](const Tensor& t) { return weighted(normalize_rows(t)); }, random_tensor({3, 4}, rng)}},
        {"softmax", {[&](const Tensor& t) { return weighted(softmax(t)); }, random_tensor({3, 4}, rng)}},
        {"concat", {[&](const Tensor& t) { return sum(mul(concat({t, other}, 0), concat({weights, weights}, 0))); },
                    random_tensor({3, 4}, rng)}},
        {"concat_cols", {[&](const Tensor& t) { return weighted(concat({t, slice_last(other, 0, 1)}, 1)); },
                         random_tensor({3, 3}, rng)}},
        {"index", {[&](const Tensor& t) { return weighted(index_select(t, {2, 0, 2})); }, random_tensor({3, 4}, rng)}},
        {"slice", {[&](const Tensor& t) { return sum(mul(slice_last(t, 1, 2), Tensor::vector({2, -1}))); },
                   random_tensor({3, 4}, rng)}},
        {"broadcast", {[&](const Tensor& t) { return weighted(broadcast_to(t, {3, 4})); }, random_tensor({4}, rng)}},
        {"reshape", {[&](const Tensor& t) { return weighted(reshape(t, {3, 4})); }, random_tensor({12}, rng)}},
        {"transpose", {[&](const Tensor& t) { return weighted(transpose(t)); }, random_tensor({4, 3}, rng)}},
        {"bilinear_gather_coords",
         {[&](const Tensor& t) {
            Tensor grid = reshape(other, {3, 4, 1});
            return sum(mul(bilinear_gather(grid, t), Tensor({3, 1}, {1.0, -2.0, 0.5})));
          },
          Tensor({3, 2}, {0.37 + 0.1 * trial, 0.7, 2.4, 1.2, 1.6, 0.45})}},
        {"bilinear_gather_grid",
         {[&](const Tensor& t) {
            return sum(square(bilinear_gather(t, Tensor({2, 2}, {1.3, 0.2, 2.7, 1.9}))));
          },
          random_tensor({3, 4}, rng)}},
        {"avg_pool2", {[&](const Tensor& t) { return sum(mul(avg_pool2(t), Tensor({2, 1}, {1.0, -3.0}))); },
                       random_tensor({4, 2}, rng)}},
    };
    for (auto& [name, c] : cases) {
      const double err = grad_check(c.first, c.second, 1e-4);
      EXPECT_LT(err, tol) << name << " trial " << trial;
    }
  }
}

TEST(Autodiff, BackwardIsDeterministic) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({6, 5}, rng);
  Tensor b = random_tensor({5, 4}, rng);
  auto run = [&] {
    Tape tape;
    Tensor x = a.clone(true);
    Tensor loss = sum(tanh(matmul(x, b)));
    return tape.backward(loss).of(x);
  };
  Tensor g1 = run();
  Tensor g2 = run();
  for (std::size_t i = 0; i < g1.numel(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

// A tensor consumed k times accumulates the k upstream contributions.
TEST(Autodiff, GradientAccumulationMatchesSingleConsumerRewrite) {
  Tensor x0 = Tensor::vector({0.3, -1.2, 2.0});
  std::vector<double> multi(3), single(3, 0.0);
  {
    Tape tape;
    Tensor x = x0.clone(true);
    Tensor y = add(add(tanh(x), mul(x, Tensor::vector({1, 2, 3}))), scale(x, 3.0));
    auto g = tape.backward(sum(y)).of(x);
    for (int i = 0; i < 3; ++i) multi[i] = g[i];
  }
  {
    // Same graph with three distinct leaves, one consumer each.
    Tape tape;
    Tensor xa = x0.clone(true), xb = x0.clone(true), xc = x0.clone(true);
    Tensor y = add(add(tanh(xa), mul(xb, Tensor::vector({1, 2, 3}))), scale(xc, 3.0));
    auto g = tape.backward(sum(y));
    for (const Tensor* leaf : {&xa, &xb, &xc})
      for (int i = 0; i < 3; ++i) single[i] += g.of(*leaf)[i];
  }
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(multi[i], single[i]);
}

TEST(Autodiff, NoTapeMeansNoRecording) {
  Tensor x = Tensor::vector({1.0}, true);
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.grad_enabled());
  Tape tape;
  {
    NoGradGuard guard;
    Tensor z = mul(x, x);
    EXPECT_FALSE(z.grad_enabled());
  }
  EXPECT_TRUE(mul(x, x).grad_enabled());
  EXPECT_EQ(tape.size(), 1u);
}
