#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hybridnorm/rng.hpp"
#include "hybridnorm/tensor.hpp"
#include "hybridnorm/vecjac.hpp"
#include "oracles.hpp"

using namespace hybridnorm;

TEST(Matrix, RejectsNonFiniteAtConstruction) {
  EXPECT_THROW(Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}), DomainError);
  EXPECT_THROW(Matrix(1, 1, {std::numeric_limits<double>::infinity()}), DomainError);
  EXPECT_NO_THROW(Matrix(1, 1, {std::numeric_limits<double>::infinity()}, Matrix::Unchecked{}));
  EXPECT_THROW(Matrix(2, 2, {1.0, 2.0}), ShapeError);
}

TEST(Matrix, MatmulAgreesWithNaiveProduct) {
  Rng rng(1);
  const Matrix a = random_normal(5, 7, rng), b = random_normal(7, 3, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b), oracle::mul(a, b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(a, matmul(a, b)), oracle::mul(oracle::tr(a), oracle::mul(a, b))), 1e-11);
  EXPECT_LT(max_abs_diff(matmul_nt(a, a), oracle::mul(a, oracle::tr(a))), 1e-12);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(RmsNorm, Examples) {
  const auto ones = rms_norm(std::vector<double>{1, 1, 1, 1});
  for (double v : ones) EXPECT_DOUBLE_EQ(v, 1.0);

  const auto r = rms_norm(std::vector<double>{3, 4});
  EXPECT_NEAR(r[0], 3 * std::sqrt(2.0) / 5, 1e-15);
  EXPECT_NEAR(r[1], 4 * std::sqrt(2.0) / 5, 1e-15);

  const auto z = rms_norm(std::vector<double>{0, 0});
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
}

TEST(RmsNorm, GainAndEps) {
  NormParams p{{2.0, 0.5}, 0.0};
  const auto r = rms_norm(std::vector<double>{3, 4}, p);
  EXPECT_NEAR(r[0], 2 * 3 * std::sqrt(2.0) / 5, 1e-15);
  EXPECT_NEAR(r[1], 0.5 * 4 * std::sqrt(2.0) / 5, 1e-15);

  NormParams e = NormParams::ones(2, 1e-8);
  const auto z = rms_norm(std::vector<double>{0, 0}, e);
  EXPECT_EQ(z[0], 0.0);
  const auto y = rms_norm(std::vector<double>{3, 4}, e);
  EXPECT_NEAR(y[0], 3.0 * std::sqrt(2.0) / std::sqrt(25.0 + 2e-8), 1e-15);

  EXPECT_THROW(rms_norm(std::vector<double>{1, 2, 3}, p), ShapeError);
  EXPECT_THROW(rms_norm(std::vector<double>{1, 2}, NormParams{{1, 1}, -1.0}), DomainError);
}

TEST(RmsNorm, UnitGainRowHasNormSqrtD) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = random_normal(1, 7, rng);
    EXPECT_NEAR(frobenius_norm(rms_norm(x.row(0))), std::sqrt(7.0), 1e-12);
  }
}

TEST(RmsNorm, ScaleInvarianceAndIdempotence) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Matrix x = random_normal(1, 6, rng);
    const double c = std::exp(random_uniform(1, 1, rng, -3, 3)(0, 0));
    std::vector<double> cx(x.values());
    for (double& v : cx) v *= c;
    const auto a = rms_norm(x.row(0)), b = rms_norm(cx), aa = rms_norm(a);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      EXPECT_NEAR(a[i], aa[i], 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  const auto c = layer_norm(std::vector<double>{2.5, 2.5, 2.5}, NormParams::ones(3, 1e-8));
  for (double v : c) EXPECT_EQ(v, 0.0);
  const auto pm = layer_norm(std::vector<double>{1, -1});
  EXPECT_NEAR(pm[0], 1.0, 1e-15);
  EXPECT_NEAR(pm[1], -1.0, 1e-15);
  EXPECT_THROW(layer_norm(std::vector<double>{1}), ShapeError);
}

TEST(LayerNorm, EqualsRmsNormOfCenteredInput) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const Matrix x = random_normal(3, 6, rng, 2.0);
    const Matrix p = centering_matrix(6);
    const Matrix ln = layer_norm_rows(x);
    const Matrix rn = rms_norm_rows(oracle::mul(x, p));
    EXPECT_LT(max_abs_diff(ln, rn), 1e-12);
  }
}

TEST(Softmax, Examples) {
  const Matrix a = softmax_rows(Matrix::from_rows({{0, 0}, {std::log(2.0), 0}}));
  EXPECT_NEAR(a(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(a(0, 1), 0.5, 1e-15);
  EXPECT_NEAR(a(1, 0), 2.0 / 3, 1e-15);
  EXPECT_NEAR(a(1, 1), 1.0 / 3, 1e-15);
}

TEST(Softmax, RowsAreProbabilityVectorsAndShiftInvariant) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    Matrix m = random_normal(5, 5, rng, 10.0);
    const bool causal = t % 2 == 0;
    const Matrix a = softmax_rows(m, causal);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(a(i, j), 0.0);
        if (causal && j > i) {
          EXPECT_EQ(a(i, j), 0.0);
        }
        s += a(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      for (std::size_t j = 0; j < 5; ++j) m(i, j) += 100.0 * double(i + 1);
    }
    EXPECT_LT(max_abs_diff(softmax_rows(m, causal), a), 1e-12);
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Matrix a = softmax_rows(Matrix::from_rows({{1000, 0, -1000}}));
  EXPECT_TRUE(a.all_finite());
  EXPECT_NEAR(a(0, 0), 1.0, 1e-15);
}

TEST(SpectralNorm, Examples) {
  EXPECT_NEAR(spectral_norm(Matrix::identity(4)), 1.0, 1e-12);
  EXPECT_NEAR(spectral_norm(Matrix::diagonal(std::vector<double>{3, 1})), 3.0, 1e-12);
  Matrix a(6, 6);
  for (std::size_t i = 0; i < 6; ++i) a(i, 0) = 1.0;
  EXPECT_NEAR(spectral_norm(a), std::sqrt(6.0), 1e-12);
  EXPECT_EQ(spectral_norm(Matrix(3, 2)), 0.0);
}

TEST(SpectralNorm, MatchesJacobiOracle) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const Matrix m = random_normal(2 + t % 7, 2 + (t * 3) % 6, rng);
    const double want = oracle::singular_values(m).front();
    EXPECT_NEAR(spectral_norm(m), want, 1e-9 * want);
  }
}

TEST(SpectralNorm, ClusteredTopSingularValues) {
  Matrix m = Matrix::diagonal(std::vector<double>{1.0, 1.0 - 1e-7, 0.5});
  EXPECT_NEAR(spectral_norm(m), 1.0, 1e-12);
}

TEST(SpectralNorm, RejectsNonFinite) {
  Matrix m(1, 1, {1.0}, Matrix::Unchecked{});
  m(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(spectral_norm(m), DomainError);
}

TEST(FrobeniusNorm, Examples) {
  EXPECT_EQ(frobenius_norm(Matrix(3, 3)), 0.0);
  EXPECT_NEAR(frobenius_norm(Matrix::identity(5)), std::sqrt(5.0), 1e-15);
  Rng rng(7);
  const Matrix a = random_normal(3, 3, rng), b = random_normal(3, 3, rng);
  EXPECT_NEAR(frobenius_norm(kron(a, b)), frobenius_norm(a) * frobenius_norm(b), 1e-12);
}

TEST(MinSingularValue, Examples) {
  EXPECT_NEAR(min_singular_value(Matrix::identity(3)), 1.0, 1e-14);
  EXPECT_NEAR(min_singular_value(Matrix::diagonal(std::vector<double>{3, 1})), 1.0, 1e-14);
  EXPECT_EQ(min_singular_value(Matrix::from_rows({{1, 2}, {2, 4}})), 0.0);
}

TEST(MinSingularValue, MatchesJacobiOracle) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const Matrix m = random_normal(4, 4, rng);
    EXPECT_NEAR(min_singular_value(m), oracle::singular_values(m).back(), 1e-8);
  }
  const Matrix tall = random_normal(8, 3, rng);
  EXPECT_NEAR(min_singular_value(tall), oracle::singular_values(tall).back(), 1e-10);
}

TEST(KronNorms, SpectralAndFrobeniusAreMultiplicative) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = random_normal(3, 3, rng), b = random_normal(3, 3, rng);
    const Matrix k = kron(a, b);
    EXPECT_NEAR(spectral_norm(k), spectral_norm(a) * spectral_norm(b), 1e-9);
    EXPECT_NEAR(frobenius_norm(k), frobenius_norm(a) * frobenius_norm(b), 1e-9);
  }
}

TEST(StochasticMatrix, SpectralBelowFrobeniusBelowSqrtS) {
  Rng rng(10);
  for (int t = 0; t < 200; ++t) {
    const std::size_t s = 2 + t % 6;
    Matrix a = random_uniform(s, s, rng, 0.0, 1.0);
    for (std::size_t i = 0; i < s; ++i) {
      double sum = 0;
      for (double v : a.row(i)) sum += v;
      for (double& v : a.row(i)) v /= sum;
    }
    EXPECT_LE(spectral_norm(a), frobenius_norm(a) + 1e-12);
    EXPECT_LE(frobenius_norm(a), std::sqrt(double(s)) + 1e-12);
  }
}
