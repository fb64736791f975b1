#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "hybridnorm/attention.hpp"
#include "hybridnorm/csv.hpp"
#include "hybridnorm/diagnostics.hpp"
#include "hybridnorm/model.hpp"
#include "hybridnorm/trainer.hpp"

namespace hybridnorm {

struct Dims3 {
  std::size_t s = 0, d = 0, dk = 0;
  bool operator==(const Dims3&) const = default;
};

// A block scheme plus first-block override; "hybrid-star" names the hybrid stack with the special first block.
struct SchemeArm {
  BlockScheme scheme;
  std::optional<FirstBlockVariant> first_block;

  std::string name() const {
    if (scheme == BlockScheme::hybrid() && first_block == FirstBlockVariant::HybridStar) return "hybrid-star";
    return to_string(scheme);
  }
};

inline std::optional<SchemeArm> parse_scheme_arm(std::string_view name) {
  if (name == "hybrid-star") return SchemeArm{BlockScheme::hybrid(), FirstBlockVariant::HybridStar};
  if (auto s = parse_block_scheme(name)) return SchemeArm{*s, std::nullopt};
  return std::nullopt;
}

struct GradcheckSettings {
  std::size_t seeds = 20;
  std::vector<Dims3> dims = {{3, 4, 2}, {5, 8, 4}};
  std::vector<LemmaVariant> variants = {kAllLemmaVariants.begin(), kAllLemmaVariants.end()};
  double abs_tol = 1e-6;
  double rel_tol = 1e-5;
  double step = kFiniteDiffStep;
  std::string corrupt = "none";  // negative control: "<variant>:<weight>" perturbs one analytic Jacobian
};

struct BoundsSettings {
  std::size_t trials = 100;
  std::optional<Dims3> dims;  // empty: random dims per trial
  double factor = 5.0;
};

struct ProfileSettings {
  std::vector<SchemeArm> schemes = {{BlockScheme::pre(), std::nullopt},
                                    {BlockScheme::post(), std::nullopt},
                                    {BlockScheme::hybrid(), std::nullopt}};
  std::vector<std::size_t> steps = {1, 100};
};

struct FlopsSettings {
  std::vector<BlockScheme> schemes = {BlockScheme::pre(), BlockScheme::hybrid()};
  std::uint64_t d = 1536, s = 4096, layers = 24;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  TrainConfig train;  // train.model holds the model.* keys
  GradcheckSettings gradcheck;
  BoundsSettings bounds;
  ProfileSettings profile;
  FlopsSettings flops;
};

namespace cfg {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (true) {
    const auto next = s.find(sep, at);
    out.push_back(trim(s.substr(at, next == std::string_view::npos ? std::string_view::npos : next - at)));
    if (next == std::string_view::npos) break;
    at = next + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(1, sep) : "") + parts[i];
  return out;
}

[[noreturn]] inline void bad(const std::string& key, const std::string& what, const std::string& value) {
  throw ConfigError(key + ": expected " + what + ", got '" + value + "'");
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, "a non-negative integer", v);
  return out;
}

inline double to_f64(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad(key, "a finite number", v);
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad(key, "true or false", v);
}

template <class T, class Parse>
T to_enum(const std::string& key, const std::string& v, Parse parse, const char* what) {
  if (auto e = parse(v)) return *e;
  bad(key, what, v);
}

inline Dims3 to_dims(const std::string& key, const std::string& v) {
  const auto p = split(v, 'x');
  if (p.size() != 3) bad(key, "SxDxDK", v);
  return {to_u64(key, p[0]), to_u64(key, p[1]), to_u64(key, p[2])};
}

inline std::string str(const Dims3& d) {
  return std::to_string(d.s) + "x" + std::to_string(d.d) + "x" + std::to_string(d.dk);
}

inline std::string str(bool b) { return b ? "true" : "false"; }
inline std::string str(double v) { return fmt_double(v); }
inline std::string str(std::uint64_t v) { return std::to_string(v); }

template <class T, class F>
std::string str_list(const std::vector<T>& xs, F f) {
  std::vector<std::string> parts;
  for (const auto& x : xs) parts.push_back(f(x));
  return join(parts);
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& v, F f) {
  std::vector<T> out;
  for (const auto& part : split(v, ',')) out.push_back(f(key, part));
  if (out.empty() || (out.size() == 1 && v.empty())) bad(key, "a non-empty comma-separated list", v);
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define HN_U64(k, expr)                                                                   \
  Field{k, [](RunConfig& c, const std::string& v) { expr = decltype(expr)(to_u64(k, v)); }, \
        [](const RunConfig& c) { return str(std::uint64_t(expr)); }}
#define HN_F64(k, expr) \
  Field{k, [](RunConfig& c, const std::string& v) { expr = to_f64(k, v); }, [](const RunConfig& c) { return str(expr); }}
#define HN_BOOL(k, expr) \
  Field{k, [](RunConfig& c, const std::string& v) { expr = to_bool(k, v); }, [](const RunConfig& c) { return str(expr); }}

// Every configurable key in canonical order.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      HN_U64("seed", c.seed),
      HN_U64("threads", c.threads),
      HN_U64("model.layers", c.train.model.layers),
      HN_U64("model.dim", c.train.model.dim),
      HN_U64("model.ffn_dim", c.train.model.ffn_dim),
      HN_U64("model.heads", c.train.model.heads),
      HN_U64("model.kv_heads", c.train.model.kv_heads),
      HN_U64("model.vocab", c.train.model.vocab),
      HN_U64("model.context", c.train.model.context),
      Field{"model.scheme",
            [](RunConfig& c, const std::string& v) {
              c.train.model.scheme = to_enum<BlockScheme>("model.scheme", v, parse_block_scheme, "a block scheme");
            },
            [](const RunConfig& c) { return to_string(c.train.model.scheme); }},
      Field{"model.first_block",
            [](RunConfig& c, const std::string& v) {
              c.train.model.first_block =
                  to_enum<FirstBlockVariant>("model.first_block", v, parse_first_block, "same, hybrid-star, qkv-pre or embed-norm");
            },
            [](const RunConfig& c) { return to_string(c.train.model.first_block); }},
      Field{"model.init",
            [](RunConfig& c, const std::string& v) {
              c.train.model.init = to_enum<InitScheme>("model.init", v, parse_init_scheme, "normal, depth-scaled or megatron");
            },
            [](const RunConfig& c) { return to_string(c.train.model.init); }},
      HN_BOOL("model.rope", c.train.model.rope),
      HN_F64("model.rope_theta", c.train.model.rope_theta),
      HN_BOOL("model.tie_embeddings", c.train.model.tie_embeddings),
      HN_BOOL("model.causal", c.train.model.causal),
      HN_F64("model.mixln_split", c.train.model.mixln_split),
      HN_BOOL("model.attn_output_norm", c.train.model.attn_output_norm),
      HN_F64("model.norm_eps", c.train.model.norm_eps),
      HN_F64("model.embed_std", c.train.model.embed_std),
      HN_F64("train.lr_peak", c.train.lr_peak),
      HN_F64("train.lr_min", c.train.lr_min),
      HN_U64("train.warmup", c.train.warmup),
      HN_U64("train.steps", c.train.steps),
      HN_U64("train.batch_size", c.train.batch_size),
      HN_F64("train.beta1", c.train.adam.beta1),
      HN_F64("train.beta2", c.train.adam.beta2),
      HN_F64("train.adam_eps", c.train.adam.eps),
      HN_F64("train.weight_decay", c.train.adam.weight_decay),
      HN_BOOL("train.decay_embeddings", c.train.adam.decay_embeddings),
      HN_BOOL("train.decay_gains", c.train.adam.decay_gains),
      HN_F64("train.clip", c.train.clip),
      HN_U64("train.eval_interval", c.train.eval_interval),
      HN_U64("train.eval_batches", c.train.eval_batches),
      HN_F64("train.divergence_factor", c.train.divergence_factor),
      Field{"data.kind",
            [](RunConfig& c, const std::string& v) {
              c.train.data.kind = to_enum<DatasetKind>("data.kind", v, parse_dataset_kind, "copy, modular-add or byte-text");
            },
            [](const RunConfig& c) { return to_string(c.train.data.kind); }},
      HN_U64("data.length", c.train.data.length),
      HN_U64("data.alphabet", c.train.data.alphabet),
      HN_U64("data.prefix_len", c.train.data.prefix_len),
      HN_U64("data.modulus", c.train.data.modulus),
      HN_U64("gradcheck.seeds", c.gradcheck.seeds),
      Field{"gradcheck.dims",
            [](RunConfig& c, const std::string& v) { c.gradcheck.dims = to_list<Dims3>("gradcheck.dims", v, to_dims); },
            [](const RunConfig& c) { return str_list(c.gradcheck.dims, [](const Dims3& d) { return str(d); }); }},
      Field{"gradcheck.variants",
            [](RunConfig& c, const std::string& v) {
              c.gradcheck.variants = to_list<LemmaVariant>("gradcheck.variants", v, [](const std::string& k, const std::string& x) {
                return to_enum<LemmaVariant>(k, x, parse_lemma_variant, "pre, qkv or pre-qk");
              });
            },
            [](const RunConfig& c) {
              return str_list(c.gradcheck.variants, [](LemmaVariant v) { return to_string(v); });
            }},
      HN_F64("gradcheck.abs_tol", c.gradcheck.abs_tol),
      HN_F64("gradcheck.rel_tol", c.gradcheck.rel_tol),
      HN_F64("gradcheck.step", c.gradcheck.step),
      Field{"gradcheck.corrupt", [](RunConfig& c, const std::string& v) { c.gradcheck.corrupt = v; },
            [](const RunConfig& c) { return c.gradcheck.corrupt; }},
      HN_U64("bounds.trials", c.bounds.trials),
      Field{"bounds.dims",
            [](RunConfig& c, const std::string& v) {
              c.bounds.dims = v == "random" ? std::nullopt : std::optional<Dims3>(to_dims("bounds.dims", v));
            },
            [](const RunConfig& c) { return c.bounds.dims ? str(*c.bounds.dims) : std::string("random"); }},
      HN_F64("bounds.factor", c.bounds.factor),
      Field{"profile.schemes",
            [](RunConfig& c, const std::string& v) {
              c.profile.schemes = to_list<SchemeArm>("profile.schemes", v, [](const std::string& k, const std::string& x) {
                return to_enum<SchemeArm>(k, x, parse_scheme_arm, "a block scheme or hybrid-star");
              });
            },
            [](const RunConfig& c) { return str_list(c.profile.schemes, [](const SchemeArm& a) { return a.name(); }); }},
      Field{"profile.steps",
            [](RunConfig& c, const std::string& v) {
              c.profile.steps = to_list<std::size_t>("profile.steps", v, [](const std::string& k, const std::string& x) {
                return std::size_t(to_u64(k, x));
              });
            },
            [](const RunConfig& c) {
              return str_list(c.profile.steps, [](std::size_t s) { return std::to_string(s); });
            }},
      Field{"flops.schemes",
            [](RunConfig& c, const std::string& v) {
              c.flops.schemes = to_list<BlockScheme>("flops.schemes", v, [](const std::string& k, const std::string& x) {
                return to_enum<BlockScheme>(k, x, parse_block_scheme, "pre or hybrid");
              });
            },
            [](const RunConfig& c) { return str_list(c.flops.schemes, [](BlockScheme s) { return to_string(s); }); }},
      HN_U64("flops.d", c.flops.d),
      HN_U64("flops.s", c.flops.s),
      HN_U64("flops.layers", c.flops.layers),
  };
  return all;
}

#undef HN_U64
#undef HN_F64
#undef HN_BOOL

inline const Field* find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace cfg

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Flat "key = value" lines; '#' starts a comment.
inline KeyValues parse_key_values(std::string_view text, const std::string& source) {
  KeyValues out;
  std::size_t line_no = 0;
  for (const auto& raw : cfg::split(text, '\n')) {
    ++line_no;
    const std::string line = cfg::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || cfg::trim(line.substr(0, eq)).empty()) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    out.emplace_back(cfg::trim(line.substr(0, eq)), cfg::trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::pair<std::string, std::string> parse_override(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + arg + "': expected key=value");
  return {cfg::trim(arg.substr(0, eq)), cfg::trim(arg.substr(eq + 1))};
}

// Later assignments win; `given` collects every key set explicitly.
inline void apply_key_values(RunConfig& c, const KeyValues& kvs, std::set<std::string>* given = nullptr) {
  for (const auto& [k, v] : kvs) {
    const cfg::Field* f = cfg::find_field(k);
    if (!f) throw ConfigError(k + ": unknown key");
    f->set(c, v);
    if (given) given->insert(k);
  }
}

inline std::map<std::string, std::string> resolved_config(const RunConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& f : cfg::fields()) out[f.key] = f.get(c);
  return out;
}

inline std::string to_key_values(const RunConfig& c) {
  std::ostringstream o;
  for (const auto& f : cfg::fields()) o << f.key << " = " << f.get(c) << '\n';
  return o.str();
}

inline void require_keys(const std::set<std::string>& given, const std::vector<std::string>& keys) {
  for (const auto& k : keys)
    if (!given.count(k)) throw ConfigError(k + ": required but not set");
}

}  // namespace hybridnorm
