#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hybridnorm/model.hpp"
#include "hybridnorm/optimizer.hpp"

namespace hybridnorm {

using Json = nlohmann::ordered_json;

inline Json config_to_json(const ModelConfig& c) {
  return Json{{"layers", c.layers},
              {"dim", c.dim},
              {"ffn_dim", c.ffn()},
              {"heads", c.heads},
              {"kv_heads", c.kv_heads},
              {"vocab", c.vocab},
              {"context", c.context},
              {"scheme", to_string(c.scheme)},
              {"first_block", to_string(c.first_block)},
              {"init", to_string(c.init)},
              {"rope", c.rope},
              {"rope_theta", c.rope_theta},
              {"tie_embeddings", c.tie_embeddings},
              {"causal", c.causal},
              {"mixln_split", c.mixln_split},
              {"attn_output_norm", c.attn_output_norm},
              {"norm_eps", c.norm_eps},
              {"embed_std", c.embed_std}};
}

inline ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  try {
    c.layers = j.at("layers").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.kv_heads = j.at("kv_heads").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.context = j.at("context").get<std::size_t>();
    const auto scheme = parse_block_scheme(j.at("scheme").get<std::string>());
    const auto first = parse_first_block(j.at("first_block").get<std::string>());
    const auto init = parse_init_scheme(j.at("init").get<std::string>());
    if (!scheme || !first || !init) throw FormatError("checkpoint: unknown scheme, first_block or init name");
    c.scheme = *scheme;
    c.first_block = *first;
    c.init = *init;
    c.rope = j.at("rope").get<bool>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.causal = j.at("causal").get<bool>();
    c.mixln_split = j.at("mixln_split").get<double>();
    c.attn_output_norm = j.at("attn_output_norm").get<bool>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.embed_std = j.at("embed_std").get<double>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config header: ") + e.what());
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid config: ") + e.what());
  }
  return c;
}

// Layout: 8-byte magic, uint64 LE header length, JSON header, then every tensor listed in the
// header as row-major float64 LE in header order. Parameters come in for_each_tensor order;
// optimizer moments follow as m/<name> then v/<name>.
inline constexpr char kCheckpointMagic[8] = {'H', 'N', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr const char* kCheckpointFormat = "hybridnorm-checkpoint";

struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  ModelParams params;
  std::optional<OptimizerState> optimizer;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

template <class F>
void each_payload(const ModelParams& p, const std::optional<OptimizerState>& o, F&& f) {
  for_each_tensor(p, [&](const TensorInfo& info, const Matrix& m) { f(info.name, m); });
  if (!o) return;
  for_each_tensor(o->m, [&](const TensorInfo& info, const Matrix& m) { f("m/" + info.name, m); });
  for_each_tensor(o->v, [&](const TensorInfo& info, const Matrix& m) { f("v/" + info.name, m); });
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  Json tensors = Json::array();
  detail::each_payload(ck.params, ck.optimizer, [&](const std::string& name, const Matrix& m) {
    tensors.push_back(Json{{"name", name}, {"shape", {m.rows(), m.cols()}}});
  });
  Json header{{"format", kCheckpointFormat},
              {"version", 1},
              {"config", config_to_json(ck.config)},
              {"seed", ck.seed},
              {"step", ck.step},
              {"byte_order", "little"},
              {"dtype", "float64"},
              {"tensors", tensors}};
  if (ck.optimizer) header["optimizer"] = Json{{"kind", "adamw"}, {"t", ck.optimizer->t}};
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u64(out, hs.size());
  out += hs;
  detail::each_payload(ck.params, ck.optimizer, [&](const std::string&, const Matrix& m) {
    for (double v : m.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::uint64_t hlen = detail::get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw FormatError("checkpoint: truncated header");
  Json header;
  try {
    header = Json::parse(bytes.substr(16, hlen));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  Checkpoint ck;
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> listed;
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat || header.at("version").get<int>() != 1) {
      throw FormatError("checkpoint: unsupported format or version");
    }
    ck.config = config_from_json(header.at("config"));
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.step = header.at("step").get<std::uint64_t>();
    for (const auto& t : header.at("tensors")) {
      listed.push_back({t.at("name").get<std::string>(),
                        {t.at("shape").at(0).get<std::size_t>(), t.at("shape").at(1).get<std::size_t>()}});
    }
    if (header.contains("optimizer")) {
      ck.optimizer = OptimizerState{};
      ck.optimizer->t = header.at("optimizer").at("t").get<std::uint64_t>();
    }
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }

  // The structure is rebuilt from the config; the header listing must agree with it.
  ck.params = zeros_like(init_params(ck.config, 0));
  if (ck.optimizer) {
    ck.optimizer->m = zeros_like(ck.params);
    ck.optimizer->v = zeros_like(ck.params);
  }
  std::vector<std::pair<std::string, Matrix*>> slots;
  auto collect = [&](ModelParams& p, const std::string& prefix) {
    for_each_tensor(p, [&](const TensorInfo& info, Matrix& m) { slots.push_back({prefix + info.name, &m}); });
  };
  collect(ck.params, "");
  if (ck.optimizer) {
    collect(ck.optimizer->m, "m/");
    collect(ck.optimizer->v, "v/");
  }
  if (slots.size() != listed.size()) throw FormatError("checkpoint: tensor list does not match the config");
  std::size_t at = 16 + hlen;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Matrix& m = *slots[i].second;
    if (listed[i].first != slots[i].first || listed[i].second.first != m.rows() ||
        listed[i].second.second != m.cols()) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is " + listed[i].first + " " +
                        shape_str(listed[i].second.first, listed[i].second.second) + ", expected " +
                        slots[i].first + " " + shape_str(m.rows(), m.cols()));
    }
    if (bytes.size() - at < 8 * m.size()) throw FormatError("checkpoint: truncated payload in " + slots[i].first);
    for (double& v : m.flat()) {
      v = std::bit_cast<double>(detail::get_u64(bytes, at));
      at += 8;
      if (!std::isfinite(v)) throw FormatError("checkpoint: non-finite value in " + slots[i].first);
    }
  }
  if (at != bytes.size()) throw FormatError("checkpoint: trailing bytes after payload");
  return ck;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw FormatError("write failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace hybridnorm
