#pragma once

// Straight-line block and model references written directly from the block
// equations, sharing nothing with the library's forward pass beyond the
// parameter containers.

#include <cmath>
#include <vector>

#include "hybridnorm/model.hpp"
#include "oracles.hpp"

namespace reference {

using hybridnorm::AttnNormScheme;
using hybridnorm::BlockKind;
using hybridnorm::LayerParams;
using hybridnorm::Matrix;
using hybridnorm::ModelConfig;

// Row-wise RMS normalization over consecutive groups of `group` columns, eps = 0.
inline Matrix norm(const Matrix& x, const Matrix& gain, std::size_t group) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t g0 = 0; g0 < x.cols(); g0 += group) {
      double ss = 0;
      for (std::size_t j = g0; j < g0 + group; ++j) ss += x(i, j) * x(i, j);
      const double r = std::sqrt(ss / double(group));
      for (std::size_t j = g0; j < g0 + group; ++j) {
        const double a = gain.empty() ? 1.0 : gain(0, j);
        out(i, j) = r > 0 ? a * x(i, j) / r : 0.0;
      }
    }
  }
  return out;
}

inline Matrix norm(const Matrix& x, const Matrix& gain) { return norm(x, gain, x.cols()); }

inline Matrix cols(const Matrix& m, std::size_t c0, std::size_t n) {
  Matrix out(m.rows(), n);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = m(i, c0 + j);
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

inline Matrix ffn(const Matrix& x, const LayerParams& p) {
  Matrix g = oracle::mul(x, p.gate);
  const Matrix u = oracle::mul(x, p.up);
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = silu(g.data()[i]) * u.data()[i];
  return oracle::mul(g, p.down);
}

inline bool has_q(AttnNormScheme s) {
  return s == AttnNormScheme::QK || s == AttnNormScheme::QKV || s == AttnNormScheme::QKC ||
         s == AttnNormScheme::QKVC;
}
inline bool has_k(AttnNormScheme s) { return s != AttnNormScheme::Vanilla; }
inline bool has_v(AttnNormScheme s) {
  return s == AttnNormScheme::KV || s == AttnNormScheme::QKV || s == AttnNormScheme::QKVC;
}
inline bool has_c(AttnNormScheme s) {
  return s == AttnNormScheme::QKC || s == AttnNormScheme::KC || s == AttnNormScheme::QKVC;
}

// Multi-head attention without rotary embedding; kv heads are shared by contiguous query-head groups.
inline Matrix mha(const ModelConfig& cfg, AttnNormScheme s, const Matrix& x, const LayerParams& p) {
  const std::size_t dk = cfg.dim / cfg.heads, group = cfg.heads / cfg.kv_heads, n = x.rows();
  Matrix q = oracle::mul(x, p.wq), k = oracle::mul(x, p.wk), v = oracle::mul(x, p.wv);
  if (has_q(s)) q = norm(q, p.q_norm, dk);
  if (has_k(s)) k = norm(k, p.k_norm, dk);
  if (has_v(s)) v = norm(v, p.v_norm, dk);
  Matrix ctx(n, cfg.dim);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Matrix qh = cols(q, h * dk, dk), kh = cols(k, (h / group) * dk, dk), vh = cols(v, (h / group) * dk, dk);
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t lim = cfg.causal ? i + 1 : n;
      double mx = -1e300;
      for (std::size_t j = 0; j < lim; ++j) {
        double z = 0;
        for (std::size_t c = 0; c < dk; ++c) z += qh(i, c) * kh(j, c);
        a(i, j) = z / std::sqrt(double(dk));
        mx = std::max(mx, a(i, j));
      }
      double sum = 0;
      for (std::size_t j = 0; j < lim; ++j) sum += (a(i, j) = std::exp(a(i, j) - mx));
      for (std::size_t j = 0; j < n; ++j) a(i, j) = j < lim ? a(i, j) / sum : 0.0;
    }
    const Matrix ch = oracle::mul(a, vh);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dk; ++c) ctx(i, h * dk + c) = ch(i, c);
  }
  if (has_c(s)) ctx = norm(ctx, p.c_norm, dk);
  return oracle::mul(ctx, p.wo);
}

// One block, written out equation by equation per placement.
inline Matrix block(const ModelConfig& cfg, hybridnorm::BlockScheme scheme, const Matrix& x, const LayerParams& p,
                    std::size_t layer) {
  const auto V = AttnNormScheme::Vanilla;
  const auto& n1 = p.attn_norm;
  const auto& n2 = p.ffn_norm;
  switch (scheme.kind) {
    case BlockKind::PostNorm: {
      const Matrix y = norm(add(mha(cfg, V, x, p), x), n1);
      return norm(add(ffn(y, p), y), n2);
    }
    case BlockKind::PreNorm: {
      const Matrix y = add(mha(cfg, V, norm(x, n1), p), x);
      return add(ffn(norm(y, n2), p), y);
    }
    case BlockKind::PreQK: {
      const Matrix y = add(mha(cfg, AttnNormScheme::QK, norm(x, n1), p), x);
      return add(ffn(norm(y, n2), p), y);
    }
    case BlockKind::HybridNorm: {
      const Matrix y = add(mha(cfg, AttnNormScheme::QKV, x, p), x);
      const Matrix ny = norm(y, n2);
      return add(ffn(ny, p), ny);
    }
    case BlockKind::MixLN: {
      const auto split = std::size_t(std::floor(cfg.mixln_split * double(cfg.layers)));
      return block(cfg, layer < split ? hybridnorm::BlockScheme::post() : hybridnorm::BlockScheme::pre(), x, p,
                   layer);
    }
    case BlockKind::PrePost: {
      const Matrix y = add(mha(cfg, V, norm(x, n1), p), x);
      const Matrix ny = norm(y, n2);
      return add(ffn(ny, p), ny);
    }
    case BlockKind::PostPre: {
      const Matrix nx = norm(x, n1);
      const Matrix y = add(mha(cfg, V, nx, p), nx);
      return add(ffn(norm(y, n2), p), y);
    }
    case BlockKind::VariantPost: {
      const Matrix y = add(mha(cfg, scheme.attn, x, p), x);
      const Matrix ny = norm(y, n2);
      return add(ffn(ny, p), ny);
    }
    case BlockKind::VariantPre: {
      const Matrix y = add(mha(cfg, scheme.attn, x, p), x);
      return add(ffn(norm(y, n2), p), y);
    }
    case BlockKind::PreVariantPost: {
      const Matrix y = add(mha(cfg, scheme.attn, norm(x, n1), p), x);
      const Matrix ny = norm(y, n2);
      return add(ffn(ny, p), ny);
    }
    case BlockKind::PreVariantPre: {
      const Matrix y = add(mha(cfg, scheme.attn, norm(x, n1), p), x);
      return add(ffn(norm(y, n2), p), y);
    }
    case BlockKind::OutputNorm: {
      const Matrix y = add(norm(mha(cfg, V, x, p), p.attn_out_norm), x);
      return add(norm(ffn(y, p), p.ffn_out_norm), y);
    }
  }
  return x;
}

// Whole model: embedding, optional embedding norm, first-block variant, blocks, final norm, head.
inline Matrix model(const ModelConfig& cfg, const hybridnorm::ModelParams& p, const std::vector<int>& tokens) {
  Matrix h(tokens.size(), cfg.dim);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t j = 0; j < cfg.dim; ++j) h(i, j) = p.embedding(std::size_t(tokens[i]), j);
  if (cfg.first_block == hybridnorm::FirstBlockVariant::EmbedNorm) h = norm(h, p.embed_norm);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    hybridnorm::BlockScheme s = cfg.scheme;
    if (l == 0 && cfg.first_block == hybridnorm::FirstBlockVariant::HybridStar)
      s = hybridnorm::BlockScheme::pre_variant_pre(AttnNormScheme::QKV);
    if (l == 0 && cfg.first_block == hybridnorm::FirstBlockVariant::FirstQKVPre)
      s = hybridnorm::BlockScheme::variant_pre(AttnNormScheme::QKV);
    h = block(cfg, s, h, p.layers[l], l);
  }
  h = norm(h, p.final_norm);
  const Matrix& head = p.head.empty() ? p.embedding : p.head;
  return oracle::mul(h, oracle::tr(head));
}

// Straight-line single-head reference.
inline Matrix attention_head(AttnNormScheme s, const Matrix& q, const Matrix& k, const Matrix& v, bool causal) {
  auto norm = [](const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double ss = 0;
      for (std::size_t j = 0; j < m.cols(); ++j) ss += m(i, j) * m(i, j);
      const double r = std::sqrt(ss / double(m.cols()));
      for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = r > 0 ? m(i, j) / r : 0.0;
    }
    return out;
  };
  const bool nq = s == AttnNormScheme::QK || s == AttnNormScheme::QKV || s == AttnNormScheme::QKC ||
                  s == AttnNormScheme::QKVC;
  const bool nk = s != AttnNormScheme::Vanilla;
  const bool nv = s == AttnNormScheme::KV || s == AttnNormScheme::QKV || s == AttnNormScheme::QKVC;
  const bool nc = s == AttnNormScheme::QKC || s == AttnNormScheme::KC || s == AttnNormScheme::QKVC;
  const Matrix qq = nq ? norm(q) : q, kk = nk ? norm(k) : k, vv = nv ? norm(v) : v;
  const std::size_t n = q.rows(), dk = q.cols();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lim = causal ? i + 1 : n;
    double mx = -1e300;
    for (std::size_t j = 0; j < lim; ++j) {
      double z = 0;
      for (std::size_t c = 0; c < dk; ++c) z += qq(i, c) * kk(j, c);
      a(i, j) = z / std::sqrt(double(dk));
      mx = std::max(mx, a(i, j));
    }
    double sum = 0;
    for (std::size_t j = 0; j < lim; ++j) sum += (a(i, j) = std::exp(a(i, j) - mx));
    for (std::size_t j = 0; j < n; ++j) a(i, j) = j < lim ? a(i, j) / sum : 0.0;
  }
  const Matrix ctx = oracle::mul(a, vv);
  return nc ? norm(ctx) : ctx;
}

// Gains drawn away from one so that misplaced or swapped gains show up.
inline void randomize_gains(hybridnorm::ModelParams& p, hybridnorm::Rng& rng) {
  hybridnorm::for_each_tensor(p, [&](const hybridnorm::TensorInfo& info, Matrix& m) {
    if (info.kind == hybridnorm::TensorKind::Gain) m = hybridnorm::random_uniform(m.rows(), m.cols(), rng, 0.5, 1.5);
  });
}

}  // namespace reference

namespace reference {

// Central-difference gradient of the batch loss with respect to every parameter entry.
inline hybridnorm::ModelParams fd_grads(const ModelConfig& cfg, const hybridnorm::ModelParams& p,
                                        const hybridnorm::Batch& batch, double h = 1e-5) {
  hybridnorm::ModelParams work = p;
  hybridnorm::ModelParams out = hybridnorm::zeros_like(p);
  std::vector<Matrix*> dst;
  hybridnorm::for_each_tensor(out, [&](const hybridnorm::TensorInfo&, Matrix& m) { dst.push_back(&m); });
  std::size_t t = 0;
  hybridnorm::for_each_tensor(work, [&](const hybridnorm::TensorInfo&, Matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      const double hi = orig + h, lo = orig - h;
      m.data()[i] = hi;
      const double fp = hybridnorm::model_loss(cfg, work, batch);
      m.data()[i] = lo;
      const double fm = hybridnorm::model_loss(cfg, work, batch);
      m.data()[i] = orig;
      dst[t]->data()[i] = (fp - fm) / (hi - lo);
    }
    ++t;
  });
  return out;
}

}  // namespace reference
