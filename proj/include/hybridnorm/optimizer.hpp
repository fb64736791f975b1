#pragma once

#include <cmath>
#include <cstdint>

#include "hybridnorm/model.hpp"

namespace hybridnorm {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  bool decay_embeddings = false;
  bool decay_gains = false;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2: must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.adam_eps: must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be >= 0");
  }

  bool decays(TensorKind kind) const {
    switch (kind) {
      case TensorKind::Linear: return true;
      case TensorKind::Embedding: return decay_embeddings;
      case TensorKind::Gain: return decay_gains;
    }
    return false;
  }
};

struct OptimizerState {
  ModelParams m;
  ModelParams v;
  std::uint64_t t = 0;

  static OptimizerState zeros_for(const ModelParams& p) { return {zeros_like(p), zeros_like(p), 0}; }
};

inline double global_norm(const ModelParams& g) {
  double ss = 0.0;
  for_each_tensor(g, [&](const TensorInfo&, const Matrix& m) {
    for (double v : m.values()) ss += v * v;
  });
  return std::sqrt(ss);
}

// Scales every gradient by threshold/g when the global norm g exceeds threshold; returns g.
inline double clip_grads(ModelParams& grads, double threshold) {
  if (!(threshold > 0.0)) throw DomainError("clip_grads: threshold must be > 0");
  const double g = global_norm(grads);
  if (g > threshold) {
    const double s = threshold / g;
    for_each_tensor(grads, [&](const TensorInfo&, Matrix& m) { m *= s; });
  }
  return g;
}

// Decoupled weight decay: theta -= lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
inline void adamw_step(ModelParams& params, const ModelParams& grads, OptimizerState& state,
                       const AdamWSettings& s, double lr) {
  state.t += 1;
  const double t = double(state.t);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  std::vector<const Matrix*> gs;
  for_each_tensor(grads, [&](const TensorInfo&, const Matrix& g) { gs.push_back(&g); });
  std::vector<Matrix*> ms, vs;
  for_each_tensor(state.m, [&](const TensorInfo&, Matrix& m) { ms.push_back(&m); });
  for_each_tensor(state.v, [&](const TensorInfo&, Matrix& v) { vs.push_back(&v); });
  std::size_t i = 0;
  for_each_tensor(params, [&](const TensorInfo& info, Matrix& p) {
    if (i >= gs.size() || i >= ms.size() || i >= vs.size() || !gs[i]->same_shape(p) || !ms[i]->same_shape(p) ||
        !vs[i]->same_shape(p)) {
      throw ShapeError("adamw_step: gradient or state does not match parameter " + info.name);
    }
    const double wd = s.decays(info.kind) ? s.weight_decay : 0.0;
    double* th = p.data();
    double* m = ms[i]->data();
    double* v = vs[i]->data();
    const double* g = gs[i]->data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      th[k] -= lr * (mh / (std::sqrt(vh) + s.eps) + wd * th[k]);
    }
    ++i;
  });
  if (i != gs.size()) throw ShapeError("adamw_step: gradient set has extra tensors");
}

}  // namespace hybridnorm
