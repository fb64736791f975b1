#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hybridnorm/attention.hpp"
#include "hybridnorm/autograd.hpp"
#include "hybridnorm/rng.hpp"
#include "hybridnorm/tensor.hpp"

namespace hybridnorm {

enum class BlockKind {
  PostNorm,
  PreNorm,
  PreQK,
  HybridNorm,
  MixLN,
  PrePost,
  PostPre,
  VariantPost,
  VariantPre,
  PreVariantPost,
  PreVariantPre,
  OutputNorm
};

struct BlockScheme {
  BlockKind kind = BlockKind::HybridNorm;
  AttnNormScheme attn = AttnNormScheme::Vanilla;  // only for the Variant* templates

  static BlockScheme post() { return {BlockKind::PostNorm}; }
  static BlockScheme pre() { return {BlockKind::PreNorm}; }
  static BlockScheme pre_qk() { return {BlockKind::PreQK}; }
  static BlockScheme hybrid() { return {BlockKind::HybridNorm}; }
  static BlockScheme mix_ln() { return {BlockKind::MixLN}; }
  static BlockScheme pre_post() { return {BlockKind::PrePost}; }
  static BlockScheme post_pre() { return {BlockKind::PostPre}; }
  static BlockScheme output_norm() { return {BlockKind::OutputNorm}; }
  static BlockScheme variant_post(AttnNormScheme a) { return {BlockKind::VariantPost, a}; }
  static BlockScheme variant_pre(AttnNormScheme a) { return {BlockKind::VariantPre, a}; }
  static BlockScheme pre_variant_post(AttnNormScheme a) { return {BlockKind::PreVariantPost, a}; }
  static BlockScheme pre_variant_pre(AttnNormScheme a) { return {BlockKind::PreVariantPre, a}; }

  bool templated() const {
    return kind == BlockKind::VariantPost || kind == BlockKind::VariantPre || kind == BlockKind::PreVariantPost ||
           kind == BlockKind::PreVariantPre;
  }

  bool operator==(const BlockScheme& o) const { return kind == o.kind && (!templated() || attn == o.attn); }
};

inline std::string to_string(BlockScheme s) {
  const std::string a = to_string(s.attn);
  switch (s.kind) {
    case BlockKind::PostNorm: return "post";
    case BlockKind::PreNorm: return "pre";
    case BlockKind::PreQK: return "pre-qk";
    case BlockKind::HybridNorm: return "hybrid";
    case BlockKind::MixLN: return "mix-ln";
    case BlockKind::PrePost: return "pre-post";
    case BlockKind::PostPre: return "post-pre";
    case BlockKind::VariantPost: return a + "-post";
    case BlockKind::VariantPre: return a + "-pre";
    case BlockKind::PreVariantPost: return "pre-" + a + "-post";
    case BlockKind::PreVariantPre: return "pre-" + a + "-pre";
    case BlockKind::OutputNorm: return "output-norm";
  }
  return "?";
}

inline std::vector<BlockScheme> all_block_schemes() {
  std::vector<BlockScheme> out = {BlockScheme::post(),     BlockScheme::pre(),      BlockScheme::pre_qk(),
                                  BlockScheme::hybrid(),   BlockScheme::mix_ln(),   BlockScheme::pre_post(),
                                  BlockScheme::post_pre(), BlockScheme::output_norm()};
  for (auto a : kAllAttnSchemes) {
    out.push_back(BlockScheme::variant_post(a));
    out.push_back(BlockScheme::variant_pre(a));
    out.push_back(BlockScheme::pre_variant_post(a));
    out.push_back(BlockScheme::pre_variant_pre(a));
  }
  return out;
}

inline std::optional<BlockScheme> parse_block_scheme(std::string_view name) {
  for (const auto& s : all_block_schemes())
    if (to_string(s) == name) return s;
  return std::nullopt;
}

enum class FirstBlockVariant { SameAsRest, HybridStar, FirstQKVPre, EmbedNorm };

inline std::string to_string(FirstBlockVariant v) {
  switch (v) {
    case FirstBlockVariant::SameAsRest: return "same";
    case FirstBlockVariant::HybridStar: return "hybrid-star";
    case FirstBlockVariant::FirstQKVPre: return "qkv-pre";
    case FirstBlockVariant::EmbedNorm: return "embed-norm";
  }
  return "?";
}

inline std::optional<FirstBlockVariant> parse_first_block(std::string_view name) {
  for (auto v : {FirstBlockVariant::SameAsRest, FirstBlockVariant::HybridStar, FirstBlockVariant::FirstQKVPre,
                 FirstBlockVariant::EmbedNorm})
    if (to_string(v) == name) return v;
  return std::nullopt;
}

enum class InitScheme { Normal, DepthScaled, Megatron };

inline std::string to_string(InitScheme i) {
  switch (i) {
    case InitScheme::Normal: return "normal";
    case InitScheme::DepthScaled: return "depth-scaled";
    case InitScheme::Megatron: return "megatron";
  }
  return "?";
}

inline std::optional<InitScheme> parse_init_scheme(std::string_view name) {
  for (auto i : {InitScheme::Normal, InitScheme::DepthScaled, InitScheme::Megatron})
    if (to_string(i) == name) return i;
  return std::nullopt;
}

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t ffn_dim = 0;  // 0: ceil(8d/3) rounded up to a multiple of 8
  std::size_t heads = 4;
  std::size_t kv_heads = 4;
  std::size_t vocab = 256;
  std::size_t context = 64;
  BlockScheme scheme = BlockScheme::hybrid();
  FirstBlockVariant first_block = FirstBlockVariant::SameAsRest;
  InitScheme init = InitScheme::Megatron;
  bool rope = true;
  double rope_theta = 500000.0;
  bool tie_embeddings = false;
  bool causal = true;
  double mixln_split = 0.25;
  bool attn_output_norm = false;
  double norm_eps = 1e-8;
  double embed_std = 1.0;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t kv_dim() const { return kv_heads * head_dim(); }

  std::size_t ffn() const {
    if (ffn_dim) return ffn_dim;
    const std::size_t f = (8 * dim + 2) / 3;
    return (f + 7) / 8 * 8;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(layers >= 1, "model.layers: must be >= 1");
    need(dim >= 1, "model.dim: must be >= 1");
    need(heads >= 1, "model.heads: must be >= 1");
    need(kv_heads >= 1, "model.kv_heads: must be >= 1");
    need(vocab >= 1, "model.vocab: must be >= 1");
    need(context >= 1, "model.context: must be >= 1");
    need(dim % heads == 0, "model.dim: " + std::to_string(dim) + " not divisible by model.heads " +
                               std::to_string(heads));
    need(heads % kv_heads == 0, "model.kv_heads: " + std::to_string(kv_heads) + " does not divide model.heads " +
                                    std::to_string(heads));
    need(!rope || head_dim() % 2 == 0, "model.rope: head dim " + std::to_string(head_dim()) + " must be even");
    need(rope_theta > 0.0, "model.rope_theta: must be > 0");
    need(mixln_split > 0.0 && mixln_split < 1.0, "model.mixln_split: must lie in (0, 1)");
    need(norm_eps >= 0.0, "model.norm_eps: must be >= 0");
    need(embed_std > 0.0, "model.embed_std: must be > 0");
  }
};

// Which normalizations a block applies and where its residuals branch.
struct BlockRecipe {
  AttnNormScheme attn = AttnNormScheme::Vanilla;
  bool pre_attn_norm = false;          // MHA reads N1(X)
  bool attn_residual_from_norm = false;  // residual carries N1(X)
  bool post_attn_norm = false;         // Y = N1(MHA + X)
  bool attn_output_norm = false;       // Y = X + Na(MHA)
  bool pre_ffn_norm = false;           // FFN reads N2(Y)
  bool ffn_residual_from_norm = false;   // residual carries N2(Y)
  bool post_ffn_norm = false;          // X' = N2(FFN + Y)
  bool ffn_output_norm = false;        // X' = Y + Nf(FFN)

  bool has_attn_norm() const { return pre_attn_norm || post_attn_norm; }
  bool has_ffn_norm() const { return pre_ffn_norm || post_ffn_norm; }
};

inline BlockRecipe recipe_for(BlockScheme scheme, std::size_t layer, std::size_t layers, double mixln_split) {
  BlockRecipe r;
  switch (scheme.kind) {
    case BlockKind::PostNorm:
      r.post_attn_norm = r.post_ffn_norm = true;
      break;
    case BlockKind::PreNorm:
      r.pre_attn_norm = r.pre_ffn_norm = true;
      break;
    case BlockKind::PreQK:
      return recipe_for(BlockScheme::pre_variant_pre(AttnNormScheme::QK), layer, layers, mixln_split);
    case BlockKind::HybridNorm:
      return recipe_for(BlockScheme::variant_post(AttnNormScheme::QKV), layer, layers, mixln_split);
    case BlockKind::MixLN: {
      const auto split = std::size_t(std::floor(mixln_split * double(layers)));
      return recipe_for(layer < split ? BlockScheme::post() : BlockScheme::pre(), layer, layers, mixln_split);
    }
    case BlockKind::PrePost:
      r.pre_attn_norm = true;
      r.pre_ffn_norm = r.ffn_residual_from_norm = true;
      break;
    case BlockKind::PostPre:
      r.pre_attn_norm = r.attn_residual_from_norm = true;
      r.pre_ffn_norm = true;
      break;
    case BlockKind::VariantPost:
      r.attn = scheme.attn;
      r.pre_ffn_norm = r.ffn_residual_from_norm = true;
      break;
    case BlockKind::VariantPre:
      r.attn = scheme.attn;
      r.pre_ffn_norm = true;
      break;
    case BlockKind::PreVariantPost:
      r.attn = scheme.attn;
      r.pre_attn_norm = true;
      r.pre_ffn_norm = r.ffn_residual_from_norm = true;
      break;
    case BlockKind::PreVariantPre:
      r.attn = scheme.attn;
      r.pre_attn_norm = true;
      r.pre_ffn_norm = true;
      break;
    case BlockKind::OutputNorm:
      r.attn_output_norm = r.ffn_output_norm = true;
      break;
  }
  return r;
}

inline BlockRecipe recipe_for(const ModelConfig& cfg, std::size_t layer) {
  BlockRecipe r;
  if (layer == 0 && cfg.first_block == FirstBlockVariant::HybridStar) {
    r = recipe_for(BlockScheme::pre_variant_pre(AttnNormScheme::QKV), 0, cfg.layers, cfg.mixln_split);
  } else if (layer == 0 && cfg.first_block == FirstBlockVariant::FirstQKVPre) {
    r = recipe_for(BlockScheme::variant_pre(AttnNormScheme::QKV), 0, cfg.layers, cfg.mixln_split);
  } else {
    r = recipe_for(cfg.scheme, layer, cfg.layers, cfg.mixln_split);
  }
  if (cfg.attn_output_norm) r.attn_output_norm = true;
  return r;
}

// Absent tensors are empty (Matrix) or unbound (ad::Var with a null tape).
template <class T>
struct LayerSet {
  T wq, wk, wv, wo;
  T gate, up, down;
  T attn_norm, ffn_norm;
  T q_norm, k_norm, v_norm, c_norm;
  T attn_out_norm, ffn_out_norm;
};

template <class T>
struct ParamSet {
  T embedding;
  T embed_norm;
  std::vector<LayerSet<T>> layers;
  T final_norm;
  T head;  // absent under weight tying
};

using LayerParams = LayerSet<Matrix>;

struct ModelParams : ParamSet<Matrix> {
  const Matrix& output_head() const { return head.empty() ? embedding : head; }
  Matrix& output_head() { return head.empty() ? embedding : head; }
};

enum class TensorKind { Embedding, Linear, Gain };

struct TensorInfo {
  std::string name;
  int layer = -1;  // -1 for tensors outside the block stack
  TensorKind kind = TensorKind::Linear;
};

inline bool present(const Matrix& m) { return !m.empty(); }
inline bool present(const ad::Var& v) { return v.tape != nullptr; }

// Visits every present tensor in the fixed checkpoint order.
template <class P, class F>
void for_each_tensor(P& params, F&& f) {
  auto visit = [&](auto& t, std::string name, int layer, TensorKind kind) {
    if (present(t)) f(TensorInfo{std::move(name), layer, kind}, t);
  };
  visit(params.embedding, "embedding", -1, TensorKind::Embedding);
  visit(params.embed_norm, "embed_norm", -1, TensorKind::Gain);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    const int li = int(l);
    visit(p.wq, pre + "wq", li, TensorKind::Linear);
    visit(p.wk, pre + "wk", li, TensorKind::Linear);
    visit(p.wv, pre + "wv", li, TensorKind::Linear);
    visit(p.wo, pre + "wo", li, TensorKind::Linear);
    visit(p.gate, pre + "gate", li, TensorKind::Linear);
    visit(p.up, pre + "up", li, TensorKind::Linear);
    visit(p.down, pre + "down", li, TensorKind::Linear);
    visit(p.attn_norm, pre + "attn_norm", li, TensorKind::Gain);
    visit(p.ffn_norm, pre + "ffn_norm", li, TensorKind::Gain);
    visit(p.q_norm, pre + "q_norm", li, TensorKind::Gain);
    visit(p.k_norm, pre + "k_norm", li, TensorKind::Gain);
    visit(p.v_norm, pre + "v_norm", li, TensorKind::Gain);
    visit(p.c_norm, pre + "c_norm", li, TensorKind::Gain);
    visit(p.attn_out_norm, pre + "attn_out_norm", li, TensorKind::Gain);
    visit(p.ffn_out_norm, pre + "ffn_out_norm", li, TensorKind::Gain);
  }
  visit(params.final_norm, "final_norm", -1, TensorKind::Gain);
  visit(params.head, "head", -1, TensorKind::Linear);
}

// Visits matching tensors of two structurally identical parameter sets.
template <class A, class B, class F>
void for_each_tensor_pair(A& a, B& b, F&& f) {
  std::vector<decltype(&b.embedding)> bs;
  for_each_tensor(b, [&](const TensorInfo&, auto& m) { bs.push_back(&m); });
  std::size_t i = 0;
  for_each_tensor(a, [&](const TensorInfo& info, auto& m) {
    if (i >= bs.size()) throw ShapeError("for_each_tensor_pair: parameter sets differ in structure");
    f(info, m, *bs[i++]);
  });
  if (i != bs.size()) throw ShapeError("for_each_tensor_pair: parameter sets differ in structure");
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for_each_tensor(z, [](const TensorInfo&, Matrix& m) { m = Matrix(m.rows(), m.cols()); });
  return z;
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const TensorInfo&, const Matrix& m) { n += m.size(); });
  return n;
}

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.dim, f = cfg.ffn(), kvd = cfg.kv_dim(), L = cfg.layers;
  const double std_lin = 1.0 / std::sqrt(2.5 * double(d));
  ModelParams p;
  p.embedding = truncated_normal_matrix(cfg.vocab, d, rng, cfg.embed_std);
  if (cfg.first_block == FirstBlockVariant::EmbedNorm) p.embed_norm = Matrix(1, d, 1.0);
  p.layers.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    LayerParams& lp = p.layers[l];
    const BlockRecipe r = recipe_for(cfg, l);
    double out_scale = 1.0;
    if (cfg.init == InitScheme::DepthScaled) out_scale = 1.0 / std::sqrt(2.0 * double(l + 1));
    if (cfg.init == InitScheme::Megatron) out_scale = 1.0 / std::sqrt(2.0 * double(L));
    lp.wq = truncated_normal_matrix(d, d, rng, std_lin);
    lp.wk = truncated_normal_matrix(d, kvd, rng, std_lin);
    lp.wv = truncated_normal_matrix(d, kvd, rng, std_lin);
    lp.wo = truncated_normal_matrix(d, d, rng, std_lin * out_scale);
    lp.gate = truncated_normal_matrix(d, f, rng, std_lin);
    lp.up = truncated_normal_matrix(d, f, rng, std_lin);
    lp.down = truncated_normal_matrix(f, d, rng, std_lin * out_scale);
    if (r.has_attn_norm()) lp.attn_norm = Matrix(1, d, 1.0);
    if (r.has_ffn_norm()) lp.ffn_norm = Matrix(1, d, 1.0);
    if (norms_q(r.attn)) lp.q_norm = Matrix(1, d, 1.0);
    if (norms_k(r.attn)) lp.k_norm = Matrix(1, kvd, 1.0);
    if (norms_v(r.attn)) lp.v_norm = Matrix(1, kvd, 1.0);
    if (norms_c(r.attn)) lp.c_norm = Matrix(1, d, 1.0);
    if (r.attn_output_norm) {
      lp.attn_out_norm = Matrix(1, d, cfg.attn_output_norm ? 1.0 / std::sqrt(2.0 * double(L)) : 1.0);
    }
    if (r.ffn_output_norm) lp.ffn_out_norm = Matrix(1, d, 1.0);
  }
  p.final_norm = Matrix(1, d, 1.0);
  if (!cfg.tie_embeddings) p.head = truncated_normal_matrix(cfg.vocab, d, rng, std_lin);
  return p;
}

using ParamVars = ParamSet<ad::Var>;

inline ParamVars bind_params(ad::Tape& t, const ModelParams& p, bool requires_grad) {
  ParamVars v;
  v.layers.resize(p.layers.size());
  auto bind = [&](const Matrix& m, ad::Var& out) {
    if (present(m)) out = t.leaf(m, requires_grad);
  };
  bind(p.embedding, v.embedding);
  bind(p.embed_norm, v.embed_norm);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& a = p.layers[l];
    LayerSet<ad::Var>& b = v.layers[l];
    bind(a.wq, b.wq);
    bind(a.wk, b.wk);
    bind(a.wv, b.wv);
    bind(a.wo, b.wo);
    bind(a.gate, b.gate);
    bind(a.up, b.up);
    bind(a.down, b.down);
    bind(a.attn_norm, b.attn_norm);
    bind(a.ffn_norm, b.ffn_norm);
    bind(a.q_norm, b.q_norm);
    bind(a.k_norm, b.k_norm);
    bind(a.v_norm, b.v_norm);
    bind(a.c_norm, b.c_norm);
    bind(a.attn_out_norm, b.attn_out_norm);
    bind(a.ffn_out_norm, b.ffn_out_norm);
  }
  bind(p.final_norm, v.final_norm);
  bind(p.head, v.head);
  return v;
}

inline std::optional<ad::Var> opt_var(const ad::Var& v) {
  if (present(v)) return v;
  return std::nullopt;
}

inline ad::Var ffn_swiglu(ad::Var x, ad::Var gate, ad::Var up, ad::Var down) {
  return ad::matmul(ad::hadamard(ad::silu(ad::matmul(x, gate)), ad::matmul(x, up)), down);
}

inline Matrix ffn_swiglu(const Matrix& x, const Matrix& gate, const Matrix& up, const Matrix& down) {
  ad::Tape t;
  return ffn_swiglu(t.constant(x), t.constant(gate), t.constant(up), t.constant(down)).value();
}

// Per-layer record of a forward pass.
struct ForwardTrace {
  std::vector<Matrix> layer_outputs;             // (B*s) x d after each block
  std::vector<std::vector<Matrix>> attention;    // per layer: B*h matrices s x s
};

inline ad::Var norm_var(const ModelConfig& cfg, ad::Var x, ad::Var gain) {
  return ad::rms_norm_rows(x, gain, cfg.norm_eps, cfg.dim);
}

inline ad::Var block_forward(const ModelConfig& cfg, const BlockRecipe& r, const LayerSet<ad::Var>& p, ad::Var x,
                             std::size_t seq_len, std::vector<Matrix>* probs = nullptr) {
  const MhaOptions mo{r.attn, cfg.heads, cfg.kv_heads, RopeSettings{cfg.rope, cfg.rope_theta}, cfg.causal,
                      cfg.norm_eps};
  const MhaVars mv{p.wq, p.wk, p.wv, p.wo, opt_var(p.q_norm), opt_var(p.k_norm), opt_var(p.v_norm),
                   opt_var(p.c_norm)};

  const ad::Var a_in = r.pre_attn_norm ? norm_var(cfg, x, p.attn_norm) : x;
  ad::Var a = mha(a_in, mv, mo, seq_len, probs);
  if (r.attn_output_norm) a = norm_var(cfg, a, p.attn_out_norm);
  ad::Var y = ad::add(a, r.attn_residual_from_norm ? a_in : x);
  if (r.post_attn_norm) y = norm_var(cfg, y, p.attn_norm);

  const ad::Var f_in = r.pre_ffn_norm ? norm_var(cfg, y, p.ffn_norm) : y;
  ad::Var f = ffn_swiglu(f_in, p.gate, p.up, p.down);
  if (r.ffn_output_norm) f = norm_var(cfg, f, p.ffn_out_norm);
  ad::Var out = ad::add(f, r.ffn_residual_from_norm ? f_in : y);
  if (r.post_ffn_norm) out = norm_var(cfg, out, p.ffn_norm);
  return out;
}

// Runs blocks [first, layers) on a hidden state, then the final norm and head.
inline ad::Var forward_from(const ModelConfig& cfg, const ParamVars& v, ad::Var h, std::size_t first,
                            std::size_t seq_len, ForwardTrace* trace = nullptr) {
  for (std::size_t l = first; l < cfg.layers; ++l) {
    std::vector<Matrix>* probs = nullptr;
    if (trace) {
      trace->attention.emplace_back();
      probs = &trace->attention.back();
    }
    h = block_forward(cfg, recipe_for(cfg, l), v.layers[l], h, seq_len, probs);
    if (trace) trace->layer_outputs.push_back(h.value());
  }
  h = norm_var(cfg, h, v.final_norm);
  return ad::matmul_nt(h, present(v.head) ? v.head : v.embedding);
}

inline ad::Var forward_tokens(const ModelConfig& cfg, const ParamVars& v, std::span<const int> tokens,
                              std::size_t seq_len, ForwardTrace* trace = nullptr) {
  if (seq_len == 0 || tokens.size() % seq_len != 0) {
    throw ShapeError("forward: token count " + std::to_string(tokens.size()) + " is not a multiple of " +
                     std::to_string(seq_len));
  }
  if (seq_len > cfg.context) {
    throw DomainError("forward: sequence length " + std::to_string(seq_len) + " exceeds context " +
                      std::to_string(cfg.context));
  }
  ad::Var h = ad::embedding(v.embedding, tokens);
  if (cfg.first_block == FirstBlockVariant::EmbedNorm) h = norm_var(cfg, h, v.embed_norm);
  return forward_from(cfg, v, h, 0, seq_len, trace);
}

inline Matrix model_forward(const ModelConfig& cfg, const ModelParams& p, std::span<const int> tokens,
                            ForwardTrace* trace = nullptr) {
  cfg.validate();
  ad::Tape t;
  const ParamVars v = bind_params(t, p, false);
  return forward_tokens(cfg, v, tokens, tokens.size(), trace).value();
}

inline Matrix block_forward(const ModelConfig& cfg, const LayerParams& p, const Matrix& x, std::size_t layer,
                            std::vector<Matrix>* probs = nullptr) {
  ad::Tape t;
  ModelParams holder;
  holder.layers = {p};
  const ParamVars v = bind_params(t, holder, false);
  return block_forward(cfg, recipe_for(cfg, layer), v.layers[0], t.constant(x), x.rows(), probs).value();
}

// Logits from a hidden state entering block `first`; used for replay checks.
inline Matrix logits_from_hidden(const ModelConfig& cfg, const ModelParams& p, const Matrix& hidden,
                                 std::size_t first) {
  ad::Tape t;
  const ParamVars v = bind_params(t, p, false);
  return forward_from(cfg, v, t.constant(hidden), first, hidden.rows()).value();
}

// Stacked sequences of equal length.
struct Batch {
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> targets;

  std::size_t size() const { return seq_len ? tokens.size() / seq_len : 0; }
};

struct LossAndGrads {
  double loss = 0.0;
  ModelParams grads;
  bool finite = true;
};

inline double model_loss(const ModelConfig& cfg, const ModelParams& p, const Batch& batch) {
  ad::Tape t;
  const ParamVars v = bind_params(t, p, false);
  return ad::cross_entropy(forward_tokens(cfg, v, batch.tokens, batch.seq_len), batch.targets).value()(0, 0);
}

inline void check_batch(const ModelConfig& cfg, const Batch& batch) {
  if (batch.targets.size() != batch.tokens.size()) throw ShapeError("batch: one target per token required");
  if (batch.seq_len == 0 || batch.tokens.size() % batch.seq_len != 0) {
    throw ShapeError("batch: token count " + std::to_string(batch.tokens.size()) + " is not a multiple of " +
                     std::to_string(batch.seq_len));
  }
  if (batch.seq_len > cfg.context) {
    throw DomainError("batch: sequence length " + std::to_string(batch.seq_len) + " exceeds context " +
                      std::to_string(cfg.context));
  }
  for (const auto* ids : {&batch.tokens, &batch.targets}) {
    for (int id : *ids) {
      if (id < 0 || std::size_t(id) >= cfg.vocab) {
        throw DomainError("batch: token id " + std::to_string(id) + " out of range [0, " + std::to_string(cfg.vocab) +
                          ")");
      }
    }
  }
}

// Mean token cross-entropy over the batch and its exact reverse-mode gradient. Overflow anywhere in
// the pass is reported through `finite` rather than thrown.
inline LossAndGrads loss_and_grads(const ModelConfig& cfg, const ModelParams& p, const Batch& batch,
                                   ForwardTrace* trace = nullptr) {
  if (!cfg.causal) throw ConfigError("loss_and_grads: language-model loss needs a causal configuration");
  check_batch(cfg, batch);
  LossAndGrads out;
  out.grads = zeros_like(p);
  ad::Tape t;
  const ParamVars v = bind_params(t, p, true);
  try {
    const ad::Var loss =
        ad::cross_entropy(forward_tokens(cfg, v, batch.tokens, batch.seq_len, trace), batch.targets);
    out.loss = loss.value()(0, 0);
    t.backward(loss);
  } catch (const DomainError&) {
    out.loss = std::numeric_limits<double>::quiet_NaN();
    out.finite = false;
    return out;
  }
  std::vector<Matrix> grads;
  for_each_tensor(v, [&](const TensorInfo&, const ad::Var& var) { grads.push_back(t.grad(var)); });
  std::size_t i = 0;
  for_each_tensor(out.grads, [&](const TensorInfo&, Matrix& m) { m = std::move(grads[i++]); });
  out.finite = std::isfinite(out.loss);
  for_each_tensor(out.grads, [&](const TensorInfo&, const Matrix& m) { out.finite = out.finite && m.all_finite(); });
  return out;
}

inline LossAndGrads loss_and_grads(const ModelConfig& cfg, const ModelParams& p, std::span<const int> tokens,
                                   std::span<const int> targets) {
  Batch b{tokens.size(), std::vector<int>(tokens.begin(), tokens.end()),
          std::vector<int>(targets.begin(), targets.end())};
  return loss_and_grads(cfg, p, b);
}

}  // namespace hybridnorm
