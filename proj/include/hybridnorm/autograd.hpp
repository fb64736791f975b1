#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hybridnorm/tensor.hpp"

// Minimal reverse-mode differentiation over dense matrices.
namespace hybridnorm::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Var leaf(Matrix value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var push(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                          requires_grad ? std::move(backward) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Zero-shaped if nothing reached the node.
  Matrix grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Adds g into a sub-block of the node's gradient.
  Matrix& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.tape != this) throw DomainError("Tape::backward: variable from another tape");
    const Matrix& v = value(loss);
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("Tape::backward: loss must be 1x1");
    for (auto& n : nodes_) n.grad = Matrix();
    nodes_[loss.id].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(hybridnorm::matmul(a.value(), b.value()), any_grad({a, b}),
                [a, b](Tape& t, const Matrix& g) {
                  if (t.requires_grad(a)) t.accumulate(a.id, matmul_nt(g, t.value(b)));
                  if (t.requires_grad(b)) t.accumulate(b.id, matmul_tn(t.value(a), g));
                });
}

// a b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(hybridnorm::matmul_nt(a.value(), b.value()), any_grad({a, b}),
                [a, b](Tape& t, const Matrix& g) {
                  if (t.requires_grad(a)) t.accumulate(a.id, hybridnorm::matmul(g, t.value(b)));
                  if (t.requires_grad(b)) t.accumulate(b.id, matmul_tn(g, t.value(a)));
                });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  a.value().require_same(b.value(), "ad::add");
  return t.push(a.value() + b.value(), any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  return t.push(a.value() * c, any_grad({a}), [a, c](Tape& t, const Matrix& g) { t.accumulate(a.id, g * c); });
}

inline Var hadamard(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(hybridnorm::hadamard(a.value(), b.value()), any_grad({a, b}),
                [a, b](Tape& t, const Matrix& g) {
                  if (t.requires_grad(a)) t.accumulate(a.id, hybridnorm::hadamard(g, t.value(b)));
                  if (t.requires_grad(b)) t.accumulate(b.id, hybridnorm::hadamard(g, t.value(a)));
                });
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

inline Var silu(Var a) {
  Tape& t = *a.tape;
  Matrix out(a.rows(), a.cols());
  const Matrix& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = silu(x.data()[i]);
  return t.push(std::move(out), any_grad({a}), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double sg = 1.0 / (1.0 + std::exp(-x.data()[i]));
      d.data()[i] = g.data()[i] * sg * (1.0 + x.data()[i] * (1.0 - sg));
    }
    t.accumulate(a.id, d);
  });
}

// RMS normalization over consecutive column groups of width `group`, times a
// 1 x cols gain. 0/0 maps to 0.
inline Var rms_norm_rows(Var x, Var gain, double eps, std::size_t group) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const Matrix& gv = gain.value();
  if (group == 0 || xv.cols() % group != 0) {
    throw ShapeError("ad::rms_norm_rows: width " + std::to_string(xv.cols()) +
                     " not divisible by group " + std::to_string(group));
  }
  if (gv.rows() != 1 || gv.cols() != xv.cols()) {
    throw ShapeError("ad::rms_norm_rows: gain " + shape_str(gv.rows(), gv.cols()) + " for width " +
                     std::to_string(xv.cols()));
  }
  const std::size_t groups = xv.cols() / group;
  const double n = double(group);
  Matrix u(xv.rows(), xv.cols());
  Matrix scales(xv.rows(), groups);
  Matrix denom2(xv.rows(), groups);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t c0 = gi * group;
      double ss = 0.0;
      for (std::size_t c = c0; c < c0 + group; ++c) ss += xv(r, c) * xv(r, c);
      const double d2 = ss + n * eps;
      const double s = d2 > 0.0 ? std::sqrt(n / d2) : 0.0;
      scales(r, gi) = s;
      denom2(r, gi) = d2;
      for (std::size_t c = c0; c < c0 + group; ++c) u(r, c) = xv(r, c) * s;
    }
  }
  Matrix y(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) y(r, c) = u(r, c) * gv(0, c);

  return t.push(std::move(y), any_grad({x, gain}),
                [x, gain, group, groups, u = std::move(u), scales = std::move(scales),
                 denom2 = std::move(denom2)](Tape& t, const Matrix& g) {
                  const Matrix& xv = t.value(x);
                  const Matrix& gv = t.value(gain);
                  if (t.requires_grad(gain)) {
                    Matrix dg(1, xv.cols());
                    for (std::size_t r = 0; r < xv.rows(); ++r)
                      for (std::size_t c = 0; c < xv.cols(); ++c) dg(0, c) += g(r, c) * u(r, c);
                    t.accumulate(gain.id, dg);
                  }
                  if (t.requires_grad(x)) {
                    Matrix dx(xv.rows(), xv.cols());
                    for (std::size_t r = 0; r < xv.rows(); ++r) {
                      for (std::size_t gi = 0; gi < groups; ++gi) {
                        const double s = scales(r, gi);
                        if (s == 0.0) continue;
                        const std::size_t c0 = gi * group;
                        double dot = 0.0;
                        for (std::size_t c = c0; c < c0 + group; ++c) dot += g(r, c) * gv(0, c) * xv(r, c);
                        const double k = dot / denom2(r, gi);
                        for (std::size_t c = c0; c < c0 + group; ++c)
                          dx(r, c) = s * (g(r, c) * gv(0, c) - xv(r, c) * k);
                      }
                    }
                    t.accumulate(x.id, dx);
                  }
                });
}

// Rotary encoding on interleaved pairs of each head; row r sits at position r % seq_len.
inline void rope_apply(Matrix& m, std::size_t head_dim, std::size_t seq_len, double theta, double sign) {
  const std::size_t heads = m.cols() / head_dim;
  const std::size_t half = head_dim / 2;
  std::vector<double> freq(half);
  for (std::size_t i = 0; i < half; ++i) freq[i] = std::pow(theta, -2.0 * double(i) / double(head_dim));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double pos = double(r % seq_len);
    for (std::size_t i = 0; i < half; ++i) {
      const double ang = pos * freq[i];
      const double c = std::cos(ang);
      const double s = sign * std::sin(ang);
      for (std::size_t h = 0; h < heads; ++h) {
        double& a = m(r, h * head_dim + 2 * i);
        double& b = m(r, h * head_dim + 2 * i + 1);
        const double a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

inline Var rope(Var x, std::size_t head_dim, std::size_t seq_len, double theta) {
  Tape& t = *x.tape;
  if (head_dim == 0 || head_dim % 2 != 0 || x.cols() % head_dim != 0) {
    throw ShapeError("ad::rope: head dim must be even and divide the width");
  }
  Matrix y = x.value();
  rope_apply(y, head_dim, seq_len, theta, 1.0);
  return t.push(std::move(y), any_grad({x}), [x, head_dim, seq_len, theta](Tape& t, const Matrix& g) {
    Matrix d = g;
    rope_apply(d, head_dim, seq_len, theta, -1.0);
    t.accumulate(x.id, d);
  });
}

struct AttentionShape {
  std::size_t heads = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim = 1;
  std::size_t seq_len = 1;
  bool causal = true;
};

// Multi-head scaled dot-product attention over a batch of stacked sequences.
// q: (B*s) x (h*dk); k, v: (B*s) x (kv*dk). Query head j reads KV head j / (h/kv).
// Attention probabilities are appended to probs_out (batch-major, then head) if given.
inline Var attention(Var q, Var k, Var v, AttentionShape shape, std::vector<Matrix>* probs_out = nullptr) {
  Tape& t = *q.tape;
  const auto [h, kvh, dk, s, causal] = shape;
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  if (h == 0 || kvh == 0 || h % kvh != 0) throw ShapeError("ad::attention: heads must be divisible by kv heads");
  if (qv.cols() != h * dk || kv.cols() != kvh * dk || vv.cols() != kvh * dk) {
    throw ShapeError("ad::attention: projection widths do not match head layout");
  }
  if (s == 0 || qv.rows() % s != 0 || kv.rows() != qv.rows() || vv.rows() != qv.rows()) {
    throw ShapeError("ad::attention: rows must be a whole number of sequences");
  }
  const std::size_t batch = qv.rows() / s;
  const std::size_t group = h / kvh;
  const double sc = 1.0 / std::sqrt(double(dk));

  std::vector<Matrix> probs;
  probs.reserve(batch * h);
  Matrix out(qv.rows(), h * dk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t kj = j / group;
      const Matrix qh = qv.block(b * s, j * dk, s, dk);
      const Matrix kh = kv.block(b * s, kj * dk, s, dk);
      const Matrix vh = vv.block(b * s, kj * dk, s, dk);
      Matrix sco = hybridnorm::matmul_nt(qh, kh);
      sco *= sc;
      Matrix p(s, s);
      for (std::size_t i = 0; i < s; ++i) softmax_into(sco.row(i), causal ? i + 1 : s, p.row(i));
      out.set_block(b * s, j * dk, hybridnorm::matmul(p, vh));
      probs.push_back(std::move(p));
    }
  }
  if (probs_out) probs_out->insert(probs_out->end(), probs.begin(), probs.end());

  return t.push(std::move(out), any_grad({q, k, v}),
                [q, k, v, shape, batch, group, sc, probs = std::move(probs)](Tape& t, const Matrix& g) {
                  const auto [h, kvh, dk, s, causal] = shape;
                  const Matrix& qv = t.value(q);
                  const Matrix& kv = t.value(k);
                  const Matrix& vv = t.value(v);
                  Matrix dq(qv.rows(), qv.cols());
                  Matrix dkm(kv.rows(), kv.cols());
                  Matrix dv(vv.rows(), vv.cols());
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t j = 0; j < h; ++j) {
                      const std::size_t kj = j / group;
                      const Matrix& p = probs[b * h + j];
                      const Matrix go = g.block(b * s, j * dk, s, dk);
                      const Matrix qh = qv.block(b * s, j * dk, s, dk);
                      const Matrix kh = kv.block(b * s, kj * dk, s, dk);
                      const Matrix vh = vv.block(b * s, kj * dk, s, dk);
                      dv.add_block(b * s, kj * dk, matmul_tn(p, go));
                      Matrix dp = hybridnorm::matmul_nt(go, vh);
                      Matrix ds(s, s);
                      for (std::size_t i = 0; i < s; ++i) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < s; ++c) dot += dp(i, c) * p(i, c);
                        for (std::size_t c = 0; c < s; ++c) ds(i, c) = p(i, c) * (dp(i, c) - dot) * sc;
                      }
                      dq.add_block(b * s, j * dk, hybridnorm::matmul(ds, kh));
                      dkm.add_block(b * s, kj * dk, matmul_tn(ds, qh));
                    }
                  }
                  t.accumulate(q.id, dq);
                  t.accumulate(k.id, dkm);
                  t.accumulate(v.id, dv);
                });
}

inline Var embedding(Var table, std::span<const int> tokens) {
  Tape& t = *table.tape;
  const Matrix& e = table.value();
  Matrix out(tokens.size(), e.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int tok = tokens[i];
    if (tok < 0 || std::size_t(tok) >= e.rows()) {
      throw DomainError("embedding: token id " + std::to_string(tok) + " out of range [0, " +
                        std::to_string(e.rows()) + ")");
    }
    std::copy_n(e.data() + std::size_t(tok) * e.cols(), e.cols(), out.data() + i * e.cols());
  }
  std::vector<int> ids(tokens.begin(), tokens.end());
  return t.push(std::move(out), any_grad({table}), [table, ids = std::move(ids)](Tape& t, const Matrix& g) {
    Matrix& dg = t.grad_buffer(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = dg.data() + std::size_t(ids[i]) * dg.cols();
      for (std::size_t c = 0; c < dg.cols(); ++c) dst[c] += g(i, c);
    }
  });
}

// Mean token cross-entropy, 1x1.
inline Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  if (targets.size() != z.rows()) throw ShapeError("cross_entropy: one target per row required");
  Matrix p(z.rows(), z.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const int tgt = targets[i];
    if (tgt < 0 || std::size_t(tgt) >= z.cols()) {
      throw DomainError("cross_entropy: target " + std::to_string(tgt) + " out of range");
    }
    softmax_into(z.row(i), z.cols(), p.row(i));
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.row(i)) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : z.row(i)) se += std::exp(v - mx);
    total += mx + std::log(se) - z(i, std::size_t(tgt));
  }
  const double n = double(z.rows());
  std::vector<int> tg(targets.begin(), targets.end());
  return t.push(Matrix(1, 1, total / n), any_grad({logits}),
                [logits, n, p = std::move(p), tg = std::move(tg)](Tape& t, const Matrix& g) {
                  Matrix d = p;
                  for (std::size_t i = 0; i < d.rows(); ++i) d(i, std::size_t(tg[i])) -= 1.0;
                  d *= g(0, 0) / n;
                  t.accumulate(logits.id, d);
                });
}

// sum(x .* w) for a constant w, 1x1.
inline Var weighted_sum(Var x, const Matrix& w) {
  Tape& t = *x.tape;
  x.value().require_same(w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x.value().data()[i] * w.data()[i];
  return t.push(Matrix(1, 1, s), any_grad({x}), [x, w](Tape& t, const Matrix& g) { t.accumulate(x.id, w * g(0, 0)); });
}

}  // namespace hybridnorm::ad
