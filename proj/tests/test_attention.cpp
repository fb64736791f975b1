#include <gtest/gtest.h>

#include <cmath>

#include "hybridnorm/attention.hpp"
#include "hybridnorm/rng.hpp"
#include "oracles.hpp"
#include "reference_model.hpp"

using namespace hybridnorm;

TEST(AttnVariant, MatchesReferenceForEveryScheme) {
  Rng rng(1);
  for (auto scheme : kAllAttnSchemes) {
    for (bool causal : {false, true}) {
      const Matrix q = random_normal(5, 4, rng), k = random_normal(5, 4, rng), v = random_normal(5, 4, rng);
      EXPECT_LT(max_abs_diff(attn_variant(scheme, q, k, v, causal), reference::attention_head(scheme, q, k, v, causal)), 1e-12)
          << to_string(scheme);
    }
  }
}

TEST(AttnVariant, IdenticalValueRows) {
  Rng rng(2);
  const Matrix q = random_normal(4, 3, rng), k = random_normal(4, 3, rng);
  Matrix v(4, 3);
  for (std::size_t i = 0; i < 4; ++i) v(i, 0) = 1, v(i, 1) = -2, v(i, 2) = 0.5;
  for (auto scheme : kAllAttnSchemes) {
    if (norms_c(scheme)) continue;
    const Matrix out = attn_variant(scheme, q, k, v, true);
    const auto want = norms_v(scheme) ? rms_norm(v.row(0)) : std::vector<double>(v.row(0).begin(), v.row(0).end());
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(i, j), want[j], 1e-12);
  }
}

TEST(AttnVariant, QkvScaleInvariance) {
  Rng rng(3);
  const Matrix q = random_normal(4, 3, rng), k = random_normal(4, 3, rng), v = random_normal(4, 3, rng);
  const Matrix base = attn_variant(AttnNormScheme::QKV, q, k, v, false);
  for (double c : {0.01, 0.5, 7.0, 1e3}) {
    EXPECT_LT(max_abs_diff(attn_variant(AttnNormScheme::QKV, q * c, k * c, v * c, false), base), 1e-12);
  }
}

TEST(AttnVariant, ZeroQueryAveragesValuePrefix) {
  Rng rng(4);
  const Matrix k = random_normal(4, 2, rng), v = random_normal(4, 2, rng);
  const Matrix out = attn_variant(AttnNormScheme::Vanilla, Matrix(4, 2), k, v, true);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0;
      for (std::size_t r = 0; r <= i; ++r) m += v(r, j);
      EXPECT_NEAR(out(i, j), m / double(i + 1), 1e-14);
    }
  }
  EXPECT_THROW(attn_variant(AttnNormScheme::QK, Matrix(4, 2), Matrix(3, 2), v, false), ShapeError);
}

TEST(Mha, SingleHeadEqualsAttnVariantThenProjection) {
  Rng rng(5);
  const Matrix x = random_normal(5, 6, rng);
  MhaWeights w{random_normal(6, 6, rng), random_normal(6, 6, rng), random_normal(6, 6, rng), random_normal(6, 6, rng),
               {}, {}, {}, {}};
  for (auto scheme : kAllAttnSchemes) {
    MhaOptions o{scheme, 1, 1, {false, 1e4}, true, 0.0};
    const Matrix want =
        matmul(attn_variant(scheme, matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv), true), w.wo);
    EXPECT_LT(max_abs_diff(mha(x, w, o), want), 1e-12) << to_string(scheme);
  }
}

TEST(Mha, GroupedQueryMatchesPerHeadConcatenation) {
  Rng rng(6);
  const std::size_t s = 5, d = 8, h = 4;
  for (std::size_t kvh : {1u, 2u, 4u}) {
    const std::size_t dk = d / h;
    const Matrix x = random_normal(s, d, rng);
    MhaWeights w{random_normal(d, h * dk, rng), random_normal(d, kvh * dk, rng), random_normal(d, kvh * dk, rng),
                 random_normal(h * dk, d, rng), {}, {}, {}, {}};
    for (auto scheme : kAllAttnSchemes) {
      MhaOptions o{scheme, h, kvh, {false, 1e4}, true, 0.0};
      const Matrix q = matmul(x, w.wq), k = matmul(x, w.wk), v = matmul(x, w.wv);
      Matrix concat(s, h * dk);
      for (std::size_t j = 0; j < h; ++j) {
        const std::size_t g = j / (h / kvh);
        concat.set_block(0, j * dk,
                         reference::attention_head(scheme, q.block(0, j * dk, s, dk), k.block(0, g * dk, s, dk),
                                        v.block(0, g * dk, s, dk), true));
      }
      const Matrix out = mha(x, w, o);
      EXPECT_EQ(out.rows(), s);
      EXPECT_EQ(out.cols(), d);
      EXPECT_LT(max_abs_diff(out, oracle::mul(concat, w.wo)), 1e-12) << to_string(scheme) << " kv=" << kvh;
    }
  }
}

TEST(Mha, DivisibilityErrors) {
  const Matrix x(3, 6);
  MhaWeights w{Matrix(6, 6), Matrix(6, 6), Matrix(6, 6), Matrix(6, 6), {}, {}, {}, {}};
  EXPECT_THROW(mha(x, w, MhaOptions{AttnNormScheme::Vanilla, 4, 1, {}, true, 0.0}), ShapeError);
  EXPECT_THROW(mha(x, w, MhaOptions{AttnNormScheme::Vanilla, 3, 2, {}, true, 0.0}), ShapeError);
}

TEST(Mha, RotaryKeepsNormsAndIsRelative) {
  Rng rng(7);
  const std::size_t s = 6, d = 8;
  const Matrix x = random_normal(s, d, rng);
  MhaWeights w{random_normal(d, d, rng), random_normal(d, d, rng), random_normal(d, d, rng), Matrix::identity(d),
               {}, {}, {}, {}};
  MhaOptions on{AttnNormScheme::QK, 2, 2, {true, 100.0}, true, 0.0};
  MhaOptions off = on;
  off.rope.enabled = false;
  const Matrix a = mha(x, w, on), b = mha(x, w, off);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
  // Position 0 is unrotated, so the first row only sees itself either way.
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(a(0, j), b(0, j), 1e-12);
}

TEST(LemmaJacobians, MatchFiniteDifferences) {
  for (auto variant : kAllLemmaVariants) {
    for (auto [s, d, dk] : {std::tuple{3u, 4u, 2u}, std::tuple{5u, 8u, 4u}}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 100);
        const Matrix x = random_normal(s, d, rng);
        const AttentionWeights w = AttentionWeights::random(d, dk, rng);
        const AttnJacobians j = attn_jacobians(variant, x, w);
        for (auto id : kAllWeights) {
          const Matrix fd = oracle::fd_jacobian(
              [&](const Matrix& m) {
                AttentionWeights p = w;
                weight_for(p, id) = m;
                return lemma_attention(variant, x, p);
              },
              weight_for(const_cast<AttentionWeights&>(w), id));
          EXPECT_LE(oracle::tolerance_ratio(jacobian_for(j, id).matrix, fd, 1e-6, 1e-5), 1.0)
              << to_string(variant) << " " << to_string(id) << " seed " << seed;
        }
      }
    }
  }
}

TEST(LemmaJacobians, StructuralIdentities) {
  Rng rng(11);
  const Matrix x = random_normal(4, 5, rng);
  const AttentionWeights w = AttentionWeights::random(5, 3, rng);

  const Matrix xn = rms_norm_rows(x);
  const Matrix a = softmax_rows(matmul_nt(matmul(xn, w.wq), matmul(xn, w.wk)) * (1 / std::sqrt(3.0)));
  EXPECT_EQ(attn_jacobians_prenorm(x, w).dS_dWO.matrix, kron(matmul(a, matmul(xn, w.wv)), Matrix::identity(5)));

  const Matrix qn = rms_norm_rows(matmul(x, w.wq)), kn = rms_norm_rows(matmul(x, w.wk));
  const Matrix vn = rms_norm_rows(matmul(x, w.wv));
  const Matrix an = softmax_rows(matmul_nt(qn, kn) * (1 / std::sqrt(3.0)));
  EXPECT_EQ(attn_jacobians_qkv(x, w).dS_dWO.matrix, kron(matmul(an, vn), Matrix::identity(5)));

  const Matrix qh = rms_norm_rows(matmul(xn, w.wq)), kh = rms_norm_rows(matmul(xn, w.wk));
  const Matrix ah = softmax_rows(matmul_nt(qh, kh) * (1 / std::sqrt(3.0)));
  EXPECT_EQ(attn_jacobians_qk(x, w).dS_dWV.matrix, kron(matmul(ah, xn), w.wo.transposed()));
}

TEST(LemmaJacobians, ZeroValueWeightsKillQueryKeyGradients) {
  Rng rng(12);
  const Matrix x = random_normal(3, 4, rng);
  AttentionWeights w = AttentionWeights::random(4, 2, rng);
  w.wv = Matrix(4, 2);
  const auto j = attn_jacobians_prenorm(x, w);
  EXPECT_EQ(max_abs(j.dS_dWQ.matrix), 0.0);
  EXPECT_EQ(max_abs(j.dS_dWK.matrix), 0.0);
}

TEST(LemmaJacobians, ZeroRowPreconditions) {
  Rng rng(13);
  Matrix x = random_normal(3, 4, rng);
  const AttentionWeights w = AttentionWeights::random(4, 2, rng);
  for (double& v : x.row(2)) v = 0.0;
  EXPECT_THROW(attn_jacobians_prenorm(x, w), DomainError);
  EXPECT_THROW(attn_jacobians_qkv(x, w), DomainError);
  EXPECT_THROW(attn_jacobians_qk(x, w), DomainError);
}

TEST(Bounds, HoldOnRandomDraws) {
  for (auto variant : kAllLemmaVariants) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      Rng rng(seed + 500);
      const std::size_t s = 2 + seed % 5, d = 4 + seed % 5, dk = 2 + seed % 3;
      const Matrix x = random_normal(s, d, rng, 3.0);
      const AttentionWeights w = AttentionWeights::random(d, dk, rng, 0.7);
      const BoundReport r = gradient_bounds(variant, x, w);
      EXPECT_FALSE(r.violated()) << to_string(variant) << " seed " << seed;
      for (const auto& e : r.entries) {
        EXPECT_GE(e.slack, 0.0);
        EXPECT_LE(e.slack, 1.0);
      }
    }
  }
}

TEST(Bounds, QkvOutputBoundIsWeightIndependent) {
  Rng rng(14);
  const Matrix x = random_normal(4, 6, rng);
  const AttentionWeights w1 = AttentionWeights::random(6, 3, rng);
  AttentionWeights w2 = AttentionWeights::random(6, 3, rng, 10.0);
  const double want = 4 * std::sqrt(6.0 * 3.0);
  EXPECT_DOUBLE_EQ(analytic_bounds(LemmaVariant::QKV, x, w1).at(WeightId::O).bound, want);
  EXPECT_DOUBLE_EQ(analytic_bounds(LemmaVariant::QKV, x, w2).at(WeightId::O).bound, want);
}

TEST(Bounds, CouplingContrast) {
  Rng rng(15);
  const Matrix x = random_normal(4, 5, rng);
  const AttentionWeights w = AttentionWeights::random(5, 3, rng);
  auto qbound = [&](LemmaVariant v, const AttentionWeights& ww) {
    return analytic_bounds(v, x, ww).at(WeightId::Q).bound;
  };
  AttentionWeights wk = w;
  wk.wk *= 5.0;
  EXPECT_NEAR(qbound(LemmaVariant::PreNorm, wk) / qbound(LemmaVariant::PreNorm, w), 5.0, 1e-9);
  EXPECT_NEAR(qbound(LemmaVariant::PreQK, wk) / qbound(LemmaVariant::PreQK, w), 1.0, 1e-9);
  EXPECT_NEAR(qbound(LemmaVariant::QKV, wk) / qbound(LemmaVariant::QKV, w), 1.0, 1e-9);

  AttentionWeights wv = w;
  wv.wv *= 10.0;
  EXPECT_NEAR(qbound(LemmaVariant::PreNorm, wv) / qbound(LemmaVariant::PreNorm, w), 10.0, 1e-9);
  EXPECT_NEAR(qbound(LemmaVariant::PreQK, wv) / qbound(LemmaVariant::PreQK, w), 10.0, 1e-9);
  EXPECT_NEAR(qbound(LemmaVariant::QKV, wv) / qbound(LemmaVariant::QKV, w), 1.0, 1e-9);
}

TEST(Bounds, RankDeficientWeightMakesBoundVacuous) {
  Rng rng(16);
  const Matrix x = random_normal(3, 4, rng);
  AttentionWeights w = AttentionWeights::random(4, 2, rng);
  w.wq = Matrix(4, 2);
  for (std::size_t i = 0; i < 4; ++i) w.wq(i, 0) = 1.0;
  for (std::size_t i = 0; i < 4; ++i) w.wq(i, 1) = 1.0;
  Matrix xo = x;
  xo(1, 0) = 1, xo(1, 1) = -1, xo(1, 2) = 2, xo(1, 3) = -2;  // x W_Q = 0 on this row
  const BoundReport r = analytic_bounds(LemmaVariant::QKV, xo, w);
  EXPECT_EQ(r.sigma_min[0], 0.0);
  EXPECT_TRUE(r.at(WeightId::Q).vacuous);
  EXPECT_FALSE(r.at(WeightId::O).vacuous);
}
