#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hybridnorm/autograd.hpp"
#include "hybridnorm/rng.hpp"
#include "hybridnorm/tensor.hpp"
#include "hybridnorm/vecjac.hpp"

namespace hybridnorm {

enum class AttnNormScheme { Vanilla, QK, KV, QKV, QKC, KC, QKVC };

inline constexpr std::array<AttnNormScheme, 7> kAllAttnSchemes = {
    AttnNormScheme::Vanilla, AttnNormScheme::QK,  AttnNormScheme::KV,  AttnNormScheme::QKV,
    AttnNormScheme::QKC,     AttnNormScheme::KC,  AttnNormScheme::QKVC};

inline bool norms_q(AttnNormScheme s) {
  return s == AttnNormScheme::QK || s == AttnNormScheme::QKV || s == AttnNormScheme::QKC ||
         s == AttnNormScheme::QKVC;
}
inline bool norms_k(AttnNormScheme s) { return s != AttnNormScheme::Vanilla; }
inline bool norms_v(AttnNormScheme s) {
  return s == AttnNormScheme::KV || s == AttnNormScheme::QKV || s == AttnNormScheme::QKVC;
}
inline bool norms_c(AttnNormScheme s) {
  return s == AttnNormScheme::QKC || s == AttnNormScheme::KC || s == AttnNormScheme::QKVC;
}

inline std::string to_string(AttnNormScheme s) {
  switch (s) {
    case AttnNormScheme::Vanilla: return "vanilla";
    case AttnNormScheme::QK: return "qk";
    case AttnNormScheme::KV: return "kv";
    case AttnNormScheme::QKV: return "qkv";
    case AttnNormScheme::QKC: return "qkc";
    case AttnNormScheme::KC: return "kc";
    case AttnNormScheme::QKVC: return "qkvc";
  }
  return "?";
}

inline std::optional<AttnNormScheme> parse_attn_scheme(std::string_view name) {
  for (auto s : kAllAttnSchemes)
    if (to_string(s) == name) return s;
  return std::nullopt;
}

struct AttnGains {
  NormParams q, k, v, c;

  static AttnGains ones(std::size_t dk, double eps = 0.0) {
    const auto p = NormParams::ones(dk, eps);
    return AttnGains{p, p, p, p};
  }
};

// Single-head attention with the scheme's normalizations; output s x dk.
inline Matrix attn_variant(AttnNormScheme scheme, const Matrix& q, const Matrix& k, const Matrix& v,
                           bool causal, const AttnGains* gains = nullptr) {
  if (!q.same_shape(k) || !q.same_shape(v)) {
    throw ShapeError("attn_variant: Q, K, V must share a shape, got " + shape_str(q.rows(), q.cols()) +
                     ", " + shape_str(k.rows(), k.cols()) + ", " + shape_str(v.rows(), v.cols()));
  }
  const AttnGains g = gains ? *gains : AttnGains::ones(q.cols());
  const Matrix qn = norms_q(scheme) ? rms_norm_rows(q, g.q) : q;
  const Matrix kn = norms_k(scheme) ? rms_norm_rows(k, g.k) : k;
  const Matrix vn = norms_v(scheme) ? rms_norm_rows(v, g.v) : v;
  Matrix z = matmul_nt(qn, kn);
  z *= 1.0 / std::sqrt(double(q.cols()));
  const Matrix ctx = matmul(softmax_rows(z, causal), vn);
  return norms_c(scheme) ? rms_norm_rows(ctx, g.c) : ctx;
}

struct RopeSettings {
  bool enabled = false;
  double theta = 500000.0;
};

struct MhaOptions {
  AttnNormScheme scheme = AttnNormScheme::Vanilla;
  std::size_t heads = 1;
  std::size_t kv_heads = 1;
  RopeSettings rope;
  bool causal = true;
  double eps = 0.0;
};

inline std::size_t mha_head_dim(std::size_t d, const MhaOptions& o) {
  if (o.heads == 0 || o.kv_heads == 0) throw ShapeError("mha: head counts must be >= 1");
  if (d % o.heads != 0) {
    throw ShapeError("mha: model dim " + std::to_string(d) + " not divisible by heads " + std::to_string(o.heads));
  }
  if (o.heads % o.kv_heads != 0) {
    throw ShapeError("mha: heads " + std::to_string(o.heads) + " not divisible by kv heads " +
                     std::to_string(o.kv_heads));
  }
  return d / o.heads;
}

// Gains are 1 x width rows covering every head; absent gains are frozen at one.
struct MhaVars {
  ad::Var wq, wk, wv, wo;
  std::optional<ad::Var> q_gain, k_gain, v_gain, c_gain;
};

inline ad::Var mha(ad::Var x, const MhaVars& w, const MhaOptions& o, std::size_t seq_len,
                   std::vector<Matrix>* probs_out = nullptr) {
  ad::Tape& t = *x.tape;
  const std::size_t d = x.cols();
  const std::size_t dk = mha_head_dim(d, o);
  auto gain_or_ones = [&](const std::optional<ad::Var>& g, std::size_t width) {
    return g ? *g : t.constant(Matrix(1, width, 1.0));
  };
  ad::Var q = ad::matmul(x, w.wq);
  ad::Var k = ad::matmul(x, w.wk);
  ad::Var v = ad::matmul(x, w.wv);
  if (norms_q(o.scheme)) q = ad::rms_norm_rows(q, gain_or_ones(w.q_gain, q.cols()), o.eps, dk);
  if (norms_k(o.scheme)) k = ad::rms_norm_rows(k, gain_or_ones(w.k_gain, k.cols()), o.eps, dk);
  if (norms_v(o.scheme)) v = ad::rms_norm_rows(v, gain_or_ones(w.v_gain, v.cols()), o.eps, dk);
  if (o.rope.enabled) {
    q = ad::rope(q, dk, seq_len, o.rope.theta);
    k = ad::rope(k, dk, seq_len, o.rope.theta);
  }
  ad::Var ctx = ad::attention(q, k, v, ad::AttentionShape{o.heads, o.kv_heads, dk, seq_len, o.causal}, probs_out);
  if (norms_c(o.scheme)) ctx = ad::rms_norm_rows(ctx, gain_or_ones(w.c_gain, ctx.cols()), o.eps, dk);
  return ad::matmul(ctx, w.wo);
}

// wq: d x h*dk, wk/wv: d x kv*dk, wo: h*dk x d. Empty gains mean all-ones.
struct MhaWeights {
  Matrix wq, wk, wv, wo;
  Matrix q_gain, k_gain, v_gain, c_gain;
};

inline Matrix mha(const Matrix& x, const MhaWeights& w, const MhaOptions& o) {
  ad::Tape t;
  auto opt = [&](const Matrix& g) -> std::optional<ad::Var> {
    if (g.empty()) return std::nullopt;
    return t.constant(g);
  };
  MhaVars vars{t.constant(w.wq), t.constant(w.wk), t.constant(w.wv), t.constant(w.wo),
               opt(w.q_gain),    opt(w.k_gain),    opt(w.v_gain),    opt(w.c_gain)};
  return mha(t.constant(x), vars, o, x.rows()).value();
}

// Single-head weights of the lemma setting: W_Q, W_K, W_V are d x dk, W_O is dk x d.
struct AttentionWeights {
  Matrix wq, wk, wv, wo;
  AttnGains gains;

  std::size_t d() const { return wq.rows(); }
  std::size_t dk() const { return wq.cols(); }

  void validate() const {
    const std::size_t dd = d(), k = dk();
    auto check = [&](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
      if (m.rows() != r || m.cols() != c) {
        throw ShapeError(std::string("AttentionWeights: ") + name + " is " + shape_str(m.rows(), m.cols()) +
                         ", expected " + shape_str(r, c));
      }
    };
    check(wk, dd, k, "W_K");
    check(wv, dd, k, "W_V");
    check(wo, k, dd, "W_O");
  }

  static AttentionWeights random(std::size_t d, std::size_t dk, Rng& rng, double stddev = 1.0) {
    AttentionWeights w;
    w.wq = random_normal(d, dk, rng, stddev);
    w.wk = random_normal(d, dk, rng, stddev);
    w.wv = random_normal(d, dk, rng, stddev);
    w.wo = random_normal(dk, d, rng, stddev);
    w.gains = AttnGains::ones(dk);
    return w;
  }
};

enum class LemmaVariant { PreNorm, QKV, PreQK };

inline constexpr std::array<LemmaVariant, 3> kAllLemmaVariants = {LemmaVariant::PreNorm, LemmaVariant::QKV,
                                                                  LemmaVariant::PreQK};

inline std::string to_string(LemmaVariant v) {
  switch (v) {
    case LemmaVariant::PreNorm: return "pre";
    case LemmaVariant::QKV: return "qkv";
    case LemmaVariant::PreQK: return "pre-qk";
  }
  return "?";
}

inline std::optional<LemmaVariant> parse_lemma_variant(std::string_view name) {
  for (auto v : kAllLemmaVariants)
    if (to_string(v) == name) return v;
  return std::nullopt;
}

// The attention map S(X; W) each lemma differentiates: no mask, unit gains, eps = 0.
inline Matrix lemma_attention(LemmaVariant variant, const Matrix& x, const AttentionWeights& w) {
  w.validate();
  switch (variant) {
    case LemmaVariant::PreNorm: {
      const Matrix xn = rms_norm_rows(x);
      const Matrix a = attn_variant(AttnNormScheme::Vanilla, matmul(xn, w.wq), matmul(xn, w.wk),
                                    matmul(xn, w.wv), false);
      return matmul(a, w.wo);
    }
    case LemmaVariant::QKV:
      return matmul(attn_variant(AttnNormScheme::QKV, matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv), false),
                    w.wo);
    case LemmaVariant::PreQK: {
      const Matrix xn = rms_norm_rows(x);
      return matmul(attn_variant(AttnNormScheme::QK, matmul(xn, w.wq), matmul(xn, w.wk), matmul(xn, w.wv), false),
                    w.wo);
    }
  }
  throw DomainError("lemma_attention: unknown variant");
}

struct AttnJacobians {
  Jacobian dS_dWQ, dS_dWK, dS_dWV, dS_dWO;
};

namespace detail {

inline Matrix softmax_scores(const Matrix& q, const Matrix& k) {
  Matrix z = matmul_nt(q, k);
  z *= 1.0 / std::sqrt(double(q.cols()));
  return softmax_rows(z);
}

inline void require_nonzero_rows(const Matrix& m, const char* name) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    bool nz = false;
    for (double v : m.row(i)) nz = nz || v != 0.0;
    if (!nz) throw DomainError(std::string(name) + ": row " + std::to_string(i) + " is zero");
  }
}

inline Jacobian weight_jacobian(const Matrix& m, std::size_t s, std::size_t d, const Matrix& wshape) {
  return Jacobian(s, d, wshape.rows(), wshape.cols(), m);
}

}  // namespace detail

inline AttnJacobians attn_jacobians_prenorm(const Matrix& x, const AttentionWeights& w) {
  w.validate();
  detail::require_nonzero_rows(x, "attn_jacobians_prenorm: X");
  const std::size_t s = x.rows(), d = w.d(), dk = w.dk();
  const Matrix xn = rms_norm_rows(x);
  const Matrix q = matmul(xn, w.wq), k = matmul(xn, w.wk), v = matmul(xn, w.wv);
  const Matrix a = detail::softmax_scores(q, k);
  const Matrix ja = softmax_jacobian(a).matrix;
  const double isk = 1.0 / std::sqrt(double(dk));

  const Matrix c = kron(Matrix::identity(s), matmul(w.wo.transposed(), v.transposed()));
  const Matrix cj = matmul(c, ja);
  AttnJacobians j;
  j.dS_dWO = detail::weight_jacobian(kron(matmul(a, v), Matrix::identity(d)), s, d, w.wo);
  j.dS_dWV = detail::weight_jacobian(kron(matmul(a, xn), w.wo.transposed()), s, d, w.wv);
  j.dS_dWQ = detail::weight_jacobian(matmul(cj, kron(xn, k)) * isk, s, d, w.wq);
  j.dS_dWK = detail::weight_jacobian(matmul(matmul(cj, kron(q, xn)), commutation_matrix(d, dk)) * isk, s, d, w.wk);
  return j;
}

inline AttnJacobians attn_jacobians_qkv(const Matrix& x, const AttentionWeights& w) {
  w.validate();
  const std::size_t s = x.rows(), d = w.d(), dk = w.dk();
  const Matrix q = matmul(x, w.wq), k = matmul(x, w.wk), v = matmul(x, w.wv);
  detail::require_nonzero_rows(q, "attn_jacobians_qkv: Q");
  detail::require_nonzero_rows(k, "attn_jacobians_qkv: K");
  detail::require_nonzero_rows(v, "attn_jacobians_qkv: V");
  const Matrix qn = rms_norm_rows(q), kn = rms_norm_rows(k), vn = rms_norm_rows(v);
  const Matrix a = detail::softmax_scores(qn, kn);
  const Matrix ja = softmax_jacobian(a).matrix;
  const double isk = 1.0 / std::sqrt(double(dk));
  const Matrix x_lift = kron(x, Matrix::identity(dk));
  const Matrix is = Matrix::identity(s);

  const Matrix c = kron(is, matmul(w.wo.transposed(), vn.transposed()));
  const Matrix cj = matmul(c, ja);
  AttnJacobians j;
  j.dS_dWO = detail::weight_jacobian(kron(matmul(a, vn), Matrix::identity(d)), s, d, w.wo);
  j.dS_dWV = detail::weight_jacobian(
      matmul(matmul(kron(a, w.wo.transposed()), rownorm_jacobian(v).matrix), x_lift), s, d, w.wv);
  j.dS_dWQ = detail::weight_jacobian(
      matmul(matmul(matmul(cj, kron(is, kn)), rownorm_jacobian(q).matrix), x_lift) * isk, s, d, w.wq);
  j.dS_dWK = detail::weight_jacobian(
      matmul(matmul(matmul(matmul(cj, kron(qn, is)), commutation_matrix(s, dk)), rownorm_jacobian(k).matrix),
             x_lift) *
          isk,
      s, d, w.wk);
  return j;
}

inline AttnJacobians attn_jacobians_qk(const Matrix& x, const AttentionWeights& w) {
  w.validate();
  detail::require_nonzero_rows(x, "attn_jacobians_qk: X");
  const std::size_t s = x.rows(), d = w.d(), dk = w.dk();
  const Matrix xn = rms_norm_rows(x);
  const Matrix q = matmul(xn, w.wq), k = matmul(xn, w.wk), v = matmul(xn, w.wv);
  detail::require_nonzero_rows(q, "attn_jacobians_qk: X_N W_Q");
  detail::require_nonzero_rows(k, "attn_jacobians_qk: X_N W_K");
  const Matrix qn = rms_norm_rows(q), kn = rms_norm_rows(k);
  const Matrix a = detail::softmax_scores(qn, kn);
  const Matrix ja = softmax_jacobian(a).matrix;
  const double isk = 1.0 / std::sqrt(double(dk));
  const Matrix x_lift = kron(xn, Matrix::identity(dk));
  const Matrix is = Matrix::identity(s);

  const Matrix c = kron(is, matmul(w.wo.transposed(), v.transposed()));
  const Matrix cj = matmul(c, ja);
  AttnJacobians j;
  j.dS_dWO = detail::weight_jacobian(kron(matmul(a, v), Matrix::identity(d)), s, d, w.wo);
  j.dS_dWV = detail::weight_jacobian(kron(matmul(a, xn), w.wo.transposed()), s, d, w.wv);
  j.dS_dWQ = detail::weight_jacobian(
      matmul(matmul(matmul(cj, kron(is, kn)), rownorm_jacobian(q).matrix), x_lift) * isk, s, d, w.wq);
  j.dS_dWK = detail::weight_jacobian(
      matmul(matmul(matmul(matmul(cj, kron(qn, is)), commutation_matrix(s, dk)), rownorm_jacobian(k).matrix),
             x_lift) *
          isk,
      s, d, w.wk);
  return j;
}

inline AttnJacobians attn_jacobians(LemmaVariant variant, const Matrix& x, const AttentionWeights& w) {
  switch (variant) {
    case LemmaVariant::PreNorm: return attn_jacobians_prenorm(x, w);
    case LemmaVariant::QKV: return attn_jacobians_qkv(x, w);
    case LemmaVariant::PreQK: return attn_jacobians_qk(x, w);
  }
  throw DomainError("attn_jacobians: unknown variant");
}

enum class WeightId { Q, K, V, O };
inline constexpr std::array<WeightId, 4> kAllWeights = {WeightId::Q, WeightId::K, WeightId::V, WeightId::O};

inline std::string to_string(WeightId w) {
  switch (w) {
    case WeightId::Q: return "W_Q";
    case WeightId::K: return "W_K";
    case WeightId::V: return "W_V";
    case WeightId::O: return "W_O";
  }
  return "?";
}

inline const Jacobian& jacobian_for(const AttnJacobians& j, WeightId w) {
  switch (w) {
    case WeightId::Q: return j.dS_dWQ;
    case WeightId::K: return j.dS_dWK;
    case WeightId::V: return j.dS_dWV;
    case WeightId::O: return j.dS_dWO;
  }
  throw DomainError("jacobian_for: unknown weight");
}

inline Matrix& weight_for(AttentionWeights& w, WeightId id) {
  switch (id) {
    case WeightId::Q: return w.wq;
    case WeightId::K: return w.wk;
    case WeightId::V: return w.wv;
    case WeightId::O: return w.wo;
  }
  throw DomainError("weight_for: unknown weight");
}

// min_i |W^T x_i| / |x_i| over the rows actually fed to the projection.
inline double effective_min_gain(const Matrix& rows, const Matrix& w) {
  const Matrix p = matmul(rows, w);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const double xn = frobenius_norm(rows.row(i));
    if (xn == 0.0) continue;
    best = std::min(best, frobenius_norm(p.row(i)) / xn);
  }
  return std::isfinite(best) ? best : 0.0;
}

struct BoundEntry {
  double measured = 0.0;
  double bound = 0.0;
  double slack = 0.0;
  bool vacuous = false;
};

struct BoundReport {
  LemmaVariant variant = LemmaVariant::PreNorm;
  std::array<BoundEntry, 4> entries{};  // indexed by WeightId
  std::array<double, 3> sigma_min{};    // W_Q, W_K, W_V
  std::array<double, 3> sigma_eff{};

  const BoundEntry& at(WeightId w) const { return entries[std::size_t(w)]; }
  BoundEntry& at(WeightId w) { return entries[std::size_t(w)]; }

  bool violated() const {
    for (const auto& e : entries)
      if (!e.vacuous && e.measured > e.bound) return true;
    return false;
  }
};

// Right-hand sides of the gradient-norm bounds. Each is the proof chain
// |PQ|_F <= |P|_2 |Q|_F with |J_softmax|_2 <= 1/2, |A|_2 <= sqrt(s),
// |X_N|_F = sqrt(s d), |Q_N|_F = sqrt(s dk) and the row-norm Jacobian block
// norm sqrt(dk)/|x W|.
inline BoundReport analytic_bounds(LemmaVariant variant, const Matrix& x, const AttentionWeights& w) {
  w.validate();
  const double s = double(x.rows()), d = double(w.d()), dk = double(w.dk());
  BoundReport r;
  r.variant = variant;
  r.sigma_min = {min_singular_value(w.wq), min_singular_value(w.wk), min_singular_value(w.wv)};
  const double wq2 = spectral_norm(w.wq), wk2 = spectral_norm(w.wk), wv2 = spectral_norm(w.wv);
  const double wo2 = spectral_norm(w.wo), woF = frobenius_norm(w.wo);
  const double inf = std::numeric_limits<double>::infinity();
  auto over = [&](double num, double sigma) { return sigma > 0.0 ? num / sigma : inf; };

  switch (variant) {
    case LemmaVariant::PreNorm: {
      const double c = std::pow(s * d, 1.5) / (2.0 * std::sqrt(dk));
      r.at(WeightId::O).bound = s * d * wv2;
      r.at(WeightId::V).bound = s * std::sqrt(d) * woF;
      r.at(WeightId::Q).bound = c * wk2 * wv2 * wo2;
      r.at(WeightId::K).bound = c * wq2 * wv2 * wo2;
      const Matrix xn = rms_norm_rows(x);
      r.sigma_eff = {effective_min_gain(xn, w.wq), effective_min_gain(xn, w.wk), effective_min_gain(xn, w.wv)};
      break;
    }
    case LemmaVariant::QKV: {
      r.sigma_eff = {effective_min_gain(x, w.wq), effective_min_gain(x, w.wk), effective_min_gain(x, w.wv)};
      const double c = s * std::sqrt(s * dk) * dk / 2.0 * wo2;
      r.at(WeightId::O).bound = s * std::sqrt(d * dk);
      r.at(WeightId::V).bound = over(s * dk * wo2, r.sigma_eff[2]);
      r.at(WeightId::Q).bound = over(c, r.sigma_eff[0]);
      r.at(WeightId::K).bound = over(c, r.sigma_eff[1]);
      break;
    }
    case LemmaVariant::PreQK: {
      const Matrix xn = rms_norm_rows(x);
      r.sigma_eff = {effective_min_gain(xn, w.wq), effective_min_gain(xn, w.wk), effective_min_gain(xn, w.wv)};
      const double c = s * std::sqrt(s * d) * dk / 2.0 * wv2 * wo2;
      r.at(WeightId::O).bound = s * d * wv2;
      r.at(WeightId::V).bound = s * std::sqrt(d) * woF;
      r.at(WeightId::Q).bound = over(c, r.sigma_eff[0]);
      r.at(WeightId::K).bound = over(c, r.sigma_eff[1]);
      break;
    }
  }
  for (auto& e : r.entries) e.vacuous = !std::isfinite(e.bound);
  return r;
}

inline BoundReport gradient_bounds(LemmaVariant variant, const Matrix& x, const AttentionWeights& w) {
  BoundReport r = analytic_bounds(variant, x, w);
  const AttnJacobians j = attn_jacobians(variant, x, w);
  for (auto id : kAllWeights) {
    BoundEntry& e = r.at(id);
    e.measured = frobenius_norm(jacobian_for(j, id).matrix);
    e.slack = e.vacuous ? 0.0 : (e.bound > 0.0 ? e.measured / e.bound : 0.0);
  }
  return r;
}

}  // namespace hybridnorm
