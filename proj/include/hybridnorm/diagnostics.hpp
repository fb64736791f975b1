#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <boost/rational.hpp>

#include "json.hpp"

#include "hybridnorm/attention.hpp"
#include "hybridnorm/csv.hpp"
#include "hybridnorm/model.hpp"
#include "hybridnorm/rng.hpp"

namespace hybridnorm {

// Per-layer scalars of one forward/backward pass; `divergent` marks a non-finite pass.
struct LayerProfile {
  std::vector<double> values;
  bool divergent = false;
};

inline LayerProfile divergent_profile(std::size_t layers) {
  return {std::vector<double>(layers, std::numeric_limits<double>::quiet_NaN()), true};
}

// Euclidean norm of all layer-l parameter gradients of the batch-mean loss.
inline std::vector<double> layer_grad_norms(const ModelParams& grads) {
  std::vector<double> ss(grads.layers.size(), 0.0);
  for_each_tensor(grads, [&](const TensorInfo& info, const Matrix& m) {
    if (info.layer < 0) return;
    for (double v : m.values()) ss[std::size_t(info.layer)] += v * v;
  });
  for (double& v : ss) v = std::sqrt(v);
  return ss;
}

inline LayerProfile per_layer_grad_norms(const ModelConfig& cfg, const ModelParams& p, const Batch& batch) {
  const LossAndGrads lg = loss_and_grads(cfg, p, batch);
  if (!lg.finite) return divergent_profile(cfg.layers);
  return {layer_grad_norms(lg.grads), false};
}

// Mean cosine similarity over unordered row pairs; a zero row contributes 0 to each of its pairs.
inline double mean_pairwise_cosine(const Matrix& rows) {
  const std::size_t n = rows.rows();
  if (n < 2) throw DomainError("token_cosine_similarity: needs at least two tokens");
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = frobenius_norm(rows.row(i));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) continue;
      double dot = 0.0;
      const auto a = rows.row(i), b = rows.row(j);
      for (std::size_t c = 0; c < a.size(); ++c) dot += a[c] * b[c];
      total += std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
    }
  }
  return total / (0.5 * double(n) * double(n - 1));
}

// Mean Shannon entropy of the rows of an attention matrix, with 0 log 0 = 0.
inline double mean_row_entropy(const Matrix& probs) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double h = 0.0;
    for (double a : probs.row(i))
      if (a > 0.0) h -= a * std::log(a);
    total += h;
  }
  return total / double(probs.rows());
}

// Empty when the forward pass hits a non-finite intermediate.
inline std::optional<ForwardTrace> forward_trace(const ModelConfig& cfg, const ModelParams& p, const Batch& batch) {
  check_batch(cfg, batch);
  ad::Tape t;
  const ParamVars v = bind_params(t, p, false);
  ForwardTrace trace;
  try {
    forward_tokens(cfg, v, batch.tokens, batch.seq_len, &trace);
  } catch (const DomainError&) {
    return std::nullopt;
  }
  return trace;
}


// Per layer output X^{l+1}: mean pairwise token cosine within each sequence, averaged over the batch.
inline LayerProfile token_cosine_similarity(const ModelConfig& cfg, const ModelParams& p, const Batch& batch) {
  const auto tr = forward_trace(cfg, p, batch);
  if (!tr) return divergent_profile(cfg.layers);
  LayerProfile out;
  for (const Matrix& h : tr->layer_outputs) {
    if (!h.all_finite()) {
      out.values.push_back(std::numeric_limits<double>::quiet_NaN());
      out.divergent = true;
      continue;
    }
    double sum = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) sum += mean_pairwise_cosine(h.block(b * batch.seq_len, 0, batch.seq_len, h.cols()));
    out.values.push_back(sum / double(batch.size()));
  }
  return out;
}

// Per layer: attention-row entropy averaged over rows, heads and sequences.
inline LayerProfile attention_entropy(const ModelConfig& cfg, const ModelParams& p, const Batch& batch) {
  const auto tr = forward_trace(cfg, p, batch);
  if (!tr) return divergent_profile(cfg.layers);
  LayerProfile out;
  for (const auto& layer : tr->attention) {
    double sum = 0.0;
    bool finite = true;
    for (const Matrix& a : layer) {
      finite = finite && a.all_finite();
      sum += mean_row_entropy(a);
    }
    out.values.push_back(finite ? sum / double(layer.size()) : std::numeric_limits<double>::quiet_NaN());
    out.divergent = out.divergent || !finite;
  }
  return out;
}

struct DiagnosticsRecord {
  struct Metric {
    std::string name;
    std::vector<double> values;  // one per layer
  };

  std::string run_id;
  std::string scheme;
  std::string init;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::size_t layers = 0;
  bool divergent = false;
  std::vector<Metric> metrics;

  void add(std::string name, const LayerProfile& p) {
    if (p.values.size() != layers) {
      throw ShapeError("DiagnosticsRecord: metric " + name + " has " + std::to_string(p.values.size()) +
                       " values for " + std::to_string(layers) + " layers");
    }
    metrics.push_back({std::move(name), p.values});
    divergent = divergent || p.divergent;
  }

  static std::string csv_header() { return "run_id,scheme,init,seed,step,layer,metric,value,divergent\n"; }

  // Rows are grouped by metric, then layer.
  std::string csv_rows() const {
    std::ostringstream o;
    for (const auto& m : metrics)
      for (std::size_t l = 0; l < m.values.size(); ++l)
        o << run_id << ',' << scheme << ',' << init << ',' << seed << ',' << step << ',' << l << ',' << m.name << ','
          << fmt_double(m.values[l]) << ',' << (divergent ? 1 : 0) << '\n';
    return o.str();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j{{"run_id", run_id}, {"scheme", scheme}, {"init", init}, {"seed", seed},
                             {"step", step},     {"layers", layers}, {"divergent", divergent}};
    nlohmann::ordered_json ms = nlohmann::ordered_json::object();
    for (const auto& m : metrics) {
      nlohmann::ordered_json vs = nlohmann::ordered_json::array();
      for (double v : m.values) vs.push_back(std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json());
      ms[m.name] = vs;
    }
    j["metrics"] = ms;
    return j;
  }
};

// ---- Gradient-bound sampling campaigns ----

struct CampaignDims {
  std::size_t s_min = 2, s_max = 6;
  std::size_t d_min = 4, d_max = 8;
  std::size_t dk_min = 2, dk_max = 4;

  static CampaignDims fixed(std::size_t s, std::size_t d, std::size_t dk) { return {s, s, d, d, dk, dk}; }

  void validate() const {
    if (s_min < 1 || s_min > s_max || d_min < 1 || d_min > d_max || dk_min < 1 || dk_min > dk_max) {
      throw ConfigError("bounds.dims: need 1 <= min <= max for s, d and dk");
    }
    check_jacobian_axis(s_max * d_max, "bound_campaign");
  }
};

struct CampaignTrial {
  std::size_t trial = 0;
  std::size_t s = 0, d = 0, dk = 0;
  BoundReport report;
};

// Bound ratio for W_Q when another weight is multiplied by `factor`.
struct CouplingRow {
  LemmaVariant variant = LemmaVariant::PreNorm;
  WeightId scaled = WeightId::K;
  double factor = 5.0;
  double expected = 1.0;
  double observed = 0.0;       // on trial 0
  double max_deviation = 0.0;  // over all trials
};

struct CampaignSummary {
  LemmaVariant variant = LemmaVariant::PreNorm;
  std::size_t trials = 0;
  std::size_t violations = 0;
  std::size_t vacuous = 0;
  std::array<double, 4> max_slack{};  // by WeightId
  std::vector<CampaignTrial> rows;
  std::vector<CouplingRow> coupling;

  bool passed() const { return violations == 0; }
};

inline double log_uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

inline std::size_t uniform_count(Rng& rng, std::size_t lo, std::size_t hi) { return lo + std::size_t(rng() % (hi - lo + 1)); }

struct CampaignInstance {
  Matrix x;
  AttentionWeights w;
};

inline CampaignInstance campaign_instance(std::uint64_t seed, std::size_t trial, const CampaignDims& dims,
                                          std::size_t& s, std::size_t& d, std::size_t& dk) {
  Rng rng(derive_seed(seed, trial));
  s = uniform_count(rng, dims.s_min, dims.s_max);
  d = uniform_count(rng, dims.d_min, dims.d_max);
  dk = uniform_count(rng, dims.dk_min, dims.dk_max);
  const double xs = log_uniform(rng, 0.1, 10.0);
  const double ws = log_uniform(rng, 0.25, 4.0) / std::sqrt(double(d));
  CampaignInstance inst{random_normal(s, d, rng, xs), AttentionWeights::random(d, dk, rng, ws)};
  return inst;
}

inline double expected_coupling(LemmaVariant v, WeightId scaled, double factor) {
  switch (v) {
    case LemmaVariant::PreNorm: return factor;
    case LemmaVariant::PreQK: return scaled == WeightId::V ? factor : 1.0;
    case LemmaVariant::QKV: return 1.0;
  }
  return 1.0;
}

// Random instances per trial from derive_seed(seed, trial); results do not depend on `threads`.
inline CampaignSummary bound_campaign(LemmaVariant variant, std::size_t trials, const CampaignDims& dims,
                                      std::uint64_t seed, std::size_t threads = 1, double coupling_factor = 5.0) {
  if (trials < 1) throw ConfigError("bounds.trials: must be >= 1");
  dims.validate();
  CampaignSummary out;
  out.variant = variant;
  out.trials = trials;
  out.rows.resize(trials);
  const std::array<WeightId, 2> scaled = {WeightId::K, WeightId::V};
  std::vector<std::array<double, 2>> ratios(trials);

  auto run = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < trials; i += stride) {
      CampaignTrial& row = out.rows[i];
      row.trial = i;
      const CampaignInstance inst = campaign_instance(seed, i, dims, row.s, row.d, row.dk);
      row.report = gradient_bounds(variant, inst.x, inst.w);
      const double base = row.report.at(WeightId::Q).bound;
      for (std::size_t k = 0; k < scaled.size(); ++k) {
        AttentionWeights w2 = inst.w;
        weight_for(w2, scaled[k]) *= coupling_factor;
        ratios[i][k] = analytic_bounds(variant, inst.x, w2).at(WeightId::Q).bound / base;
      }
    }
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min(threads, trials));
  if (nt == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(run, t, nt);
    for (auto& th : pool) th.join();
  }

  for (const auto& row : out.rows) {
    if (row.report.violated()) ++out.violations;
    for (auto id : kAllWeights) {
      const BoundEntry& e = row.report.at(id);
      if (e.vacuous) {
        ++out.vacuous;
        continue;
      }
      out.max_slack[std::size_t(id)] = std::max(out.max_slack[std::size_t(id)], e.slack);
    }
  }
  for (std::size_t k = 0; k < scaled.size(); ++k) {
    CouplingRow c{variant, scaled[k], coupling_factor, expected_coupling(variant, scaled[k], coupling_factor),
                  ratios[0][k], 0.0};
    for (const auto& r : ratios) {
      const double dev = std::isfinite(r[k]) ? std::abs(r[k] - c.expected) : std::numeric_limits<double>::infinity();
      c.max_deviation = std::max(c.max_deviation, dev);
    }
    out.coupling.push_back(c);
  }
  return out;
}

inline std::string campaign_csv_header() { return "variant,trial,weight,s,d,dk,measured,bound,slack,vacuous,violated\n"; }

inline std::string campaign_csv_rows(const CampaignSummary& c) {
  std::ostringstream o;
  for (const auto& row : c.rows)
    for (auto id : kAllWeights) {
      const BoundEntry& e = row.report.at(id);
      o << to_string(c.variant) << ',' << row.trial << ',' << to_string(id) << ',' << row.s << ',' << row.d << ','
        << row.dk << ',' << fmt_double(e.measured) << ',' << fmt_double(e.bound) << ',' << fmt_double(e.slack) << ','
        << (e.vacuous ? 1 : 0) << ',' << (!e.vacuous && e.measured > e.bound ? 1 : 0) << '\n';
    }
  return o.str();
}

inline std::string coupling_csv_header() { return "variant,bound,scaled,factor,expected,observed,max_deviation\n"; }

inline std::string coupling_csv_rows(const CampaignSummary& c) {
  std::ostringstream o;
  for (const auto& r : c.coupling)
    o << to_string(r.variant) << ",W_Q," << to_string(r.scaled) << ',' << fmt_double(r.factor) << ','
      << fmt_double(r.expected) << ',' << fmt_double(r.observed) << ',' << fmt_double(r.max_deviation) << '\n';
  return o.str();
}

// ---- Parameter and FLOP accounting ----

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::rational<BigInt>;

inline std::string to_string(const Rational& r) {
  return r.denominator() == 1 ? r.numerator().str() : r.numerator().str() + "/" + r.denominator().str();
}

inline double to_double(const Rational& r) {
  return static_cast<double>(r.numerator()) / static_cast<double>(r.denominator());
}

struct CostReport {
  std::string scheme;
  std::uint64_t d = 0, s = 0, L = 0;
  BigInt norm_params, main_params, norm_flops, main_flops;
  Rational param_ratio;         // norm / (main + norm)
  Rational param_ratio_approx;  // 1/(6d) or 1/(3d)
  Rational flops_ratio;         // norm / main, as tabulated
  Rational flops_ratio_closed;  // 2/(6d+s) or 4/(6d+s)

  std::string table() const {
    std::ostringstream o;
    o << "scheme            " << scheme << "\n"
      << "d, s, L           " << d << ", " << s << ", " << L << "\n"
      << "norm params       " << norm_params.str() << "\n"
      << "main params       " << main_params.str() << "\n"
      << "param ratio       " << to_string(param_ratio) << " (" << fmt_double(to_double(param_ratio)) << ", approx "
      << to_string(param_ratio_approx) << ")\n"
      << "norm flops        " << norm_flops.str() << "\n"
      << "main flops        " << main_flops.str() << "\n"
      << "flops ratio       " << to_string(flops_ratio) << " (" << fmt_double(to_double(flops_ratio)) << ")\n";
    return o.str();
  }

  static std::string csv_header() {
    return "scheme,d,s,L,norm_params,main_params,param_ratio,param_ratio_approx,norm_flops,main_flops,flops_ratio,"
           "flops_ratio_value\n";
  }

  std::string csv_row() const {
    std::ostringstream o;
    o << scheme << ',' << d << ',' << s << ',' << L << ',' << norm_params.str() << ',' << main_params.str() << ','
      << to_string(param_ratio) << ',' << to_string(param_ratio_approx) << ',' << norm_flops.str() << ','
      << main_flops.str() << ',' << to_string(flops_ratio) << ',' << fmt_double(to_double(flops_ratio)) << '\n';
    return o.str();
  }
};

// MHA + SwiGLU accounting with FFN width 8d/3, excluding embedding and output layers.
inline CostReport cost_report(BlockScheme scheme, std::uint64_t d, std::uint64_t s, std::uint64_t L) {
  if (d == 0 || s == 0 || L == 0) throw DomainError("cost_report: d, s and L must be positive");
  std::uint64_t norms_per_layer = 0;
  if (scheme == BlockScheme::pre()) norms_per_layer = 2;
  else if (scheme == BlockScheme::hybrid()) norms_per_layer = 4;
  else throw DomainError("cost_report: accounting covers the pre and hybrid schemes only");
  CostReport r;
  r.scheme = to_string(scheme);
  r.d = d, r.s = s, r.L = L;
  const BigInt D(d), S(s), Ls(L), k(norms_per_layer);
  r.norm_params = k * D * Ls;
  r.main_params = 4 * D * D * Ls + 8 * D * D * Ls;
  r.norm_flops = k * 4 * S * D * Ls;
  r.main_flops = (8 * S * D * D + 4 * S * S * D) * Ls + 16 * S * D * D * Ls;
  r.param_ratio = Rational(r.norm_params, r.main_params + r.norm_params);
  r.param_ratio_approx = Rational(BigInt(norms_per_layer), 12 * D);
  r.flops_ratio = Rational(r.norm_flops, r.main_flops);
  r.flops_ratio_closed = Rational(BigInt(norms_per_layer), 6 * D + S);
  return r;
}

// Per-layer gain and projection-weight counts of an instantiated model.
struct InstantiatedCounts {
  std::size_t norm_params = 0;
  std::size_t main_params = 0;
};

inline InstantiatedCounts count_block_parameters(const ModelParams& p) {
  InstantiatedCounts c;
  for_each_tensor(p, [&](const TensorInfo& info, const Matrix& m) {
    if (info.layer < 0) return;
    if (info.kind == TensorKind::Gain) c.norm_params += m.size();
    if (info.kind == TensorKind::Linear) c.main_params += m.size();
  });
  return c;
}

}  // namespace hybridnorm
