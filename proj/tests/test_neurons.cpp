#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace qnn;
using namespace qnn::testing;

namespace {

QuadNeuronParams random_quad(Rng& rng, std::size_t n, std::size_t k) {
  QuadNeuronParams p = QuadNeuronParams::zeros(n, k);
  p.qk = random_matrix(rng, n, k);
  for (double& l : p.lam) l = rng.normal();
  p.w = random_vector(rng, n);
  p.b = rng.normal();
  return p;
}

std::span<const double> sp(const Tensor& t) { return t.data(); }

}  // namespace

// ---------------------------------------------------------------------------
// Linear and general quadratic neurons
// ---------------------------------------------------------------------------

TEST(LinearNeuron, HandCases) {
  EXPECT_EQ(linear_forward({Tensor::vector({1, 2}), 1.0}, sp(Tensor::vector({3, 4}))), 12.0);
  EXPECT_EQ(linear_forward({Tensor({5}), 2.5}, sp(Tensor::vector({1, 2, 3, 4, 5}))), 2.5);
  EXPECT_THROW(linear_forward({Tensor({2}), 0.0}, sp(Tensor({3}))), ShapeError);
}

TEST(LinearNeuron, MatchesIndependentLoop) {
  Rng rng(64);
  const Tensor w = random_vector(rng, 64), x = random_vector(rng, 64);
  double s = 0.0;
  for (std::size_t i = 64; i-- > 0;) s += x[i] * w[i];
  EXPECT_LE(rel(linear_forward({w, 0.75}, sp(x)), s + 0.75), 1e-12);
}

TEST(GeneralQuad, HandCases) {
  EXPECT_EQ(general_quad_forward({Tensor::identity(3), Tensor({3}), 0.0}, sp(Tensor::vector({1, 2, 3}))), 14.0);
  EXPECT_EQ(general_quad_forward({Tensor::matrix({{0, 2}, {0, 0}}), Tensor({2}), 0.0}, sp(Tensor::vector({1, 1}))),
            2.0);
  EXPECT_THROW(general_quad_forward({Tensor({2, 3}), Tensor({2}), 0.0}, sp(Tensor({2}))), ShapeError);
}

TEST(GeneralQuad, NineTermExpansion) {
  Rng rng(9);
  const Tensor m = random_matrix(rng, 3, 3), w = random_vector(rng, 3), x = random_vector(rng, 3);
  const double b = rng.normal();
  const double x1 = x[0], x2 = x[1], x3 = x[2];
  const double expanded = m(0, 0) * x1 * x1 + m(0, 1) * x1 * x2 + m(0, 2) * x1 * x3 +  //
                          m(1, 0) * x2 * x1 + m(1, 1) * x2 * x2 + m(1, 2) * x2 * x3 +  //
                          m(2, 0) * x3 * x1 + m(2, 1) * x3 * x2 + m(2, 2) * x3 * x3 +  //
                          w[0] * x1 + w[1] * x2 + w[2] * x3 + b;
  EXPECT_LE(rel(general_quad_forward({m, w, b}, sp(x)), expanded), 1e-12);
}

// ---------------------------------------------------------------------------
// Efficient quadratic neuron
// ---------------------------------------------------------------------------

TEST(QuadNeuron, HandEvaluation) {
  QuadNeuronParams p = QuadNeuronParams::zeros(2, 1);
  p.qk(0, 0) = 1.0;
  p.lam[0] = 2.0;
  const QuadOutput o = quad_forward(p, sp(Tensor::vector({3, 4})));
  EXPECT_EQ(o.y, 18.0);
  EXPECT_EQ(o.f, std::vector<double>{3.0});
}

TEST(QuadNeuron, ShapeErrors) {
  QuadNeuronParams p = QuadNeuronParams::zeros(3, 2);
  EXPECT_THROW(quad_forward(p, sp(Tensor({4}))), ShapeError);
  p.lam.push_back(0.0);
  EXPECT_THROW(quad_forward(p, sp(Tensor({3}))), ShapeError);
}

TEST(QuadNeuron, ZeroLambdaIsExactlyLinear) {
  Rng rng(1);
  QuadNeuronParams p = random_quad(rng, 12, 4);
  std::fill(p.lam.begin(), p.lam.end(), 0.0);
  for (int t = 0; t < 50; ++t) {
    const Tensor x = random_vector(rng, 12);
    const QuadOutput o = quad_forward(p, sp(x));
    EXPECT_EQ(o.y, linear_forward({p.w, p.b}, sp(x)));
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(o.f[c], linear_forward({p.qk.column(c), 0.0}, sp(x)));
    }
  }
}

TEST(QuadNeuron, QuadraticPartScalesQuadratically) {
  Rng rng(2);
  QuadNeuronParams p = random_quad(rng, 8, 3);
  p.w.fill(0.0);
  p.b = 0.0;
  const Tensor x = random_vector(rng, 8);
  const double c = 3.7;
  EXPECT_LE(rel(quad_forward(p, sp(scale(x, c))).y, c * c * quad_forward(p, sp(x)).y), 1e-10);
}

TEST(QuadNeuron, ResponseIsQuadraticPart) {
  Rng rng(3);
  const QuadNeuronParams p = random_quad(rng, 6, 2);
  const Tensor x = random_vector(rng, 6);
  const double lin = linear_forward({p.w, p.b}, sp(x));
  EXPECT_NEAR(quad_response(p, sp(x)), quad_forward(p, sp(x)).y - lin, 1e-12);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

TEST(QuadBackward, ZeroLambdaReducesToLinear) {
  Rng rng(4);
  QuadNeuronParams p = random_quad(rng, 5, 2);
  std::fill(p.lam.begin(), p.lam.end(), 0.0);
  const Tensor x = random_vector(rng, 5);
  const std::vector<double> gf(2, 0.0);
  const QuadGradients g = quad_backward(p, sp(x), 1.7, gf);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(g.gx[j], 1.7 * p.w[j]);
}

TEST(QuadBackward, PureFeaturePath) {
  Rng rng(5);
  const QuadNeuronParams p = random_quad(rng, 4, 3);
  const Tensor x = random_vector(rng, 4);
  const std::vector<double> gf = {1.0, 0.0, 0.0};
  const QuadGradients g = quad_backward(p, sp(x), 0.0, gf);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(g.grads.qk(j, 0), x[j]);
    EXPECT_EQ(g.grads.qk(j, 1), 0.0);
    EXPECT_EQ(g.grads.qk(j, 2), 0.0);
    EXPECT_EQ(g.grads.w[j], 0.0);
  }
  EXPECT_EQ(g.grads.b, 0.0);
  for (double l : g.grads.lam) EXPECT_EQ(l, 0.0);
}

namespace {

// Scalar loss a*y + sum gf_i f_i; its gradient is what quad_backward returns.
double probe_loss(const QuadNeuronParams& p, const Tensor& x, double a, const std::vector<double>& gf) {
  const QuadOutput o = quad_forward(p, sp(x));
  double s = a * o.y;
  for (std::size_t i = 0; i < gf.size(); ++i) s += gf[i] * o.f[i];
  return s;
}

// Central differences at eps = 1e-5 on an O(10) loss carry ~1e-10 absolute
// roundoff, so relative error is floored at 1e-4 for near-zero gradients.
constexpr double kFdFloor = 1e-4;

double worst_fd_error(Rng& rng, std::size_t n, std::size_t k, double eps) {
  QuadNeuronParams p = random_quad(rng, n, k);
  Tensor x = random_vector(rng, n);
  const double a = rng.normal();
  std::vector<double> gf(k);
  for (double& v : gf) v = rng.normal();
  const QuadGradients g = quad_backward(p, sp(x), a, gf);

  double worst = 0.0;
  const auto check = [&](double& slot, double analytic) {
    const double orig = slot;
    slot = orig + eps;
    const double lp = probe_loss(p, x, a, gf);
    slot = orig - eps;
    const double lm = probe_loss(p, x, a, gf);
    slot = orig;
    worst = std::max(worst, relative_error(analytic, (lp - lm) / (2.0 * eps), kFdFloor));
  };
  for (std::size_t j = 0; j < n; ++j) check(p.w[j], g.grads.w[j]);
  check(p.b, g.grads.b);
  for (std::size_t c = 0; c < k; ++c) check(p.lam[c], g.grads.lam[c]);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < k; ++c) check(p.qk(j, c), g.grads.qk(j, c));
  for (std::size_t j = 0; j < n; ++j) check(x[j], g.gx[j]);
  return worst;
}

}  // namespace

TEST(QuadBackward, FiniteDifferenceN8K3) {
  Rng rng(6);
  EXPECT_LE(worst_fd_error(rng, 8, 3, 1e-5), 1e-6);
}

TEST(QuadBackwardProperty, FiniteDifference20Instances) {
  Rng rng(60);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(12);
    const std::size_t k = 1 + rng.below(n);
    ASSERT_LE(worst_fd_error(rng, n, k, 1e-5), 1e-6) << "instance " << t << " n=" << n << " k=" << k;
  }
}

// ---------------------------------------------------------------------------
// Product baseline
// ---------------------------------------------------------------------------

TEST(ProductNeuron, HandCases) {
  const ProductQuadParams p{Tensor::vector({1, 0}), Tensor::vector({1, 0}), Tensor({2}), 0.0};
  EXPECT_EQ(product_quad_forward(p, sp(Tensor::vector({3, 123}))), 9.0);
  Rng rng(7);
  const Tensor w3 = random_vector(rng, 4), x = random_vector(rng, 4);
  const ProductQuadParams z{Tensor({4}), random_vector(rng, 4), w3, 0.5};
  EXPECT_EQ(product_quad_forward(z, sp(x)), linear_forward({w3, 0.5}, sp(x)));
}

TEST(ProductNeuron, Composition) {
  Rng rng(8);
  const ProductQuadParams p{random_vector(rng, 16), random_vector(rng, 16), random_vector(rng, 16), rng.normal()};
  const Tensor x = random_vector(rng, 16);
  const double expected =
      linear_forward({p.w1, 0.0}, sp(x)) * linear_forward({p.w2, 0.0}, sp(x)) + linear_forward({p.w3, p.b}, sp(x));
  EXPECT_LE(rel(product_quad_forward(p, sp(x)), expected), 1e-12);
}

// ---------------------------------------------------------------------------
// Decomposition of a general neuron
// ---------------------------------------------------------------------------

TEST(FromGeneral, IdentityGivesSquaredNorm) {
  const Tensor w = Tensor::vector({0.5, -1.0});
  const QuadNeuronParams p = from_general(Tensor::identity(2), w, 0.25, 2);
  const Tensor x = Tensor::vector({1, 2});
  EXPECT_NEAR(quad_forward(p, sp(x)).y - linear_forward({w, 0.25}, sp(x)), 5.0, 1e-12);
}

TEST(FromGeneral, FullRankMatchesOracle6x6) {
  Rng rng(10);
  const Tensor m = random_symmetric(rng, 6), w = random_vector(rng, 6);
  const double b = rng.normal();
  const QuadNeuronParams p = from_general(m, w, b, 6);
  for (int t = 0; t < 50; ++t) {
    const Tensor x = random_vector(rng, 6);
    EXPECT_LE(rel(quad_forward(p, sp(x)).y, general_quad_forward({m, w, b}, sp(x)), 1e-12), 1e-8);
  }
}

TEST(FromGeneral, RankOneKeepsDominantDirection) {
  const Tensor m = Tensor::matrix({{10, 0}, {0, 0.1}});
  const QuadNeuronParams p = from_general(m, Tensor({2}), 0.0, 1);
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = random_vector(rng, 2);
    EXPECT_LE(rel(quad_response(p, sp(x)), 10.0 * x[0] * x[0], 1e-300), 1e-10);
  }
}

TEST(FromGeneral, LambdaStoredTimesK) {
  const QuadNeuronParams p = from_general(Tensor::matrix({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}}), Tensor({3}), 0.0, 2);
  EXPECT_EQ(p.lam, (std::vector<double>{6, 4}));
}

TEST(FromGeneral, Errors) {
  EXPECT_THROW(from_general(Tensor({2, 3}), Tensor({2}), 0.0, 1), ShapeError);
  EXPECT_THROW(from_general(Tensor::identity(2), Tensor({2}), 0.0, 3), DomainError);
}

TEST(FromGeneralProperty, OracleEquivalence50Neurons) {
  Rng rng(50);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(10);
    const Tensor m = random_matrix(rng, n, n), w = random_vector(rng, n);
    const double b = rng.normal();
    const QuadNeuronParams p = from_general(m, w, b, n);
    for (int s = 0; s < 50; ++s) {
      const Tensor x = random_vector(rng, n);
      ASSERT_LE(rel(quad_forward(p, sp(x)).y, general_quad_forward({m, w, b}, sp(x)), 1e-12), 1e-8);
    }
  }
}

namespace {

double truncation_mse(const Tensor& m, std::size_t k, const std::vector<Tensor>& xs) {
  const QuadNeuronParams p = from_general(m, Tensor({m.rows()}), 0.0, k);
  double mse = 0.0;
  for (const Tensor& x : xs) {
    const double d = quad_response(p, sp(x)) - ref_quadratic_form(m, x);
    mse += d * d;
  }
  return mse / static_cast<double>(xs.size());
}

Tensor random_semidefinite(Rng& rng, std::size_t n, double sign) {
  const Tensor a = random_matrix(rng, n, n);
  return scale(ref_matmul(transpose(a), a), sign);
}

}  // namespace

TEST(FromGeneralProperty, TruncationMseNonIncreasingForDefiniteM) {
  Rng rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 8;
    const Tensor m = random_semidefinite(rng, n, trial % 2 ? -1.0 : 1.0);
    std::vector<Tensor> xs;
    for (int s = 0; s < 400; ++s) xs.push_back(random_vector(rng, n));
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= n; ++k) {
      const double mse = truncation_mse(m, k, xs);
      ASSERT_LE(mse, prev * (1.0 + 1e-12)) << "trial " << trial << " k=" << k;
      prev = mse;
    }
    EXPECT_LE(prev, 1e-16 * frobenius(m) * frobenius(m));
  }
}

TEST(FromGeneralProperty, TruncationFrobeniusNonIncreasingForAnyM) {
  Rng rng(52);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(9);
    const Tensor m = random_symmetric(rng, n);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= n; ++k) {
      const QuadNeuronParams p = from_general(m, Tensor({n}), 0.0, k);
      std::vector<double> lam = p.lam;
      for (double& l : lam) l /= static_cast<double>(k);
      const double err = frobenius_diff(reconstruct(p.qk, lam), m);
      ASSERT_LE(err, prev + 1e-12);
      prev = err;
    }
  }
}

TEST(FromGeneralProperty, IndefiniteTruncationMseCanGrow) {
  // Dropping 2 from diag(3, 2, -1.9, -1.9) leaves a residual with a large
  // negative trace, and E[(x^T R x)^2] = 2|R|_F^2 + tr(R)^2 grows.
  const Tensor m = Tensor::matrix({{3, 0, 0, 0}, {0, 2, 0, 0}, {0, 0, -1.9, 0}, {0, 0, 0, -1.9}});
  Rng rng(53);
  std::vector<Tensor> xs;
  for (int s = 0; s < 20000; ++s) xs.push_back(random_vector(rng, 4));
  EXPECT_GT(truncation_mse(m, 2, xs), truncation_mse(m, 1, xs));
}

// ---------------------------------------------------------------------------
// Cost of one neuron
// ---------------------------------------------------------------------------

TEST(NeuronCost, Formulas) {
  EXPECT_EQ(neuron_cost(144, 9), (NeuronCost{1449, 1458}));
  EXPECT_EQ(neuron_cost(1, 1), (NeuronCost{3, 4}));
  EXPECT_THROW(neuron_cost(0, 1), DomainError);
}
