#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hybridnorm/checkpoint.hpp"
#include "hybridnorm/config.hpp"
#include "hybridnorm/diagnostics.hpp"
#include "hybridnorm/trainer.hpp"

namespace hybridnorm {

inline constexpr const char* kArtifactVersion = "0.1.0";

enum ExitCode : int { kExitPass = 0, kExitViolation = 1, kExitUsage = 2 };

struct CommandOutcome {
  int exit_code = kExitPass;
  nlohmann::ordered_json details = nlohmann::ordered_json::object();
  std::vector<std::string> outputs;  // relative to the output directory
};

struct CommandContext {
  const RunConfig& config;
  std::filesystem::path out_dir;
  std::ostream& out;
  std::ostream& err;
  CommandOutcome outcome;

  void write(const std::string& name, const std::string& bytes) {
    write_file((out_dir / name).string(), bytes);
    outcome.outputs.push_back(name);
  }
};

namespace commands {

inline const std::vector<std::pair<std::string, std::string>> kCommands = {
    {"gradcheck", "compare analytic attention Jacobians with finite differences"},
    {"bounds", "sample gradient-norm bounds and the coupling contrast"},
    {"profile", "per-layer gradient norm, token cosine and attention entropy during short training"},
    {"flops", "exact parameter and FLOP accounting of normalization layers"},
    {"train", "train a toy causal language model"}};

inline std::vector<std::string> required_keys(const std::string& command) {
  if (command == "flops") return {};
  if (command == "train") {
    return {"seed",          "model.layers", "model.dim",   "model.heads",
            "model.vocab",   "model.context", "model.scheme", "train.steps"};
  }
  return {"seed"};
}

inline std::pair<LemmaVariant, WeightId> parse_corrupt(const std::string& spec) {
  const auto parts = cfg::split(spec, ':');
  if (parts.size() == 2) {
    if (auto v = parse_lemma_variant(parts[0])) {
      for (auto id : kAllWeights)
        if (to_string(id) == parts[1]) return {*v, id};
    }
  }
  throw ConfigError("gradcheck.corrupt: expected none or <variant>:<W_Q|W_K|W_V|W_O>, got '" + spec + "'");
}

inline void gradcheck(CommandContext& ctx) {
  const auto& g = ctx.config.gradcheck;
  if (g.seeds < 1) throw ConfigError("gradcheck.seeds: must be >= 1");
  if (!(g.abs_tol > 0.0) || !(g.rel_tol > 0.0)) throw ConfigError("gradcheck.abs_tol: tolerances must be > 0");
  if (!(g.step > 0.0)) throw ConfigError("gradcheck.step: must be > 0");
  for (const auto& d : g.dims) {
    if (d.s < 1 || d.d < 1 || d.dk < 1) throw ConfigError("gradcheck.dims: every extent must be >= 1");
    check_jacobian_axis(d.s * d.d, "gradcheck.dims");
    check_jacobian_axis(d.d * std::max(d.d, d.dk), "gradcheck.dims");
  }
  std::optional<std::pair<LemmaVariant, WeightId>> corrupt;
  if (g.corrupt != "none") corrupt = parse_corrupt(g.corrupt);

  std::ostringstream rows, summary;
  rows << "variant,s,d,dk,seed_index,seed,weight,max_abs_err,max_rel_err,tolerance_ratio,pass\n";
  summary << "variant,checks,failures,max_abs_err,max_rel_err,max_tolerance_ratio\n";
  std::size_t failures = 0;
  for (auto variant : g.variants) {
    std::size_t checks = 0, vfail = 0;
    double vabs = 0, vrel = 0, vratio = 0;
    for (std::size_t di = 0; di < g.dims.size(); ++di) {
      const Dims3 dims = g.dims[di];
      for (std::size_t i = 0; i < g.seeds; ++i) {
        const std::uint64_t seed = derive_seed(derive_seed(ctx.config.seed, di), i);
        Rng rng(seed);
        const Matrix x = random_normal(dims.s, dims.d, rng);
        const AttentionWeights w = AttentionWeights::random(dims.d, dims.dk, rng);
        const AttnJacobians jac = attn_jacobians(variant, x, w);
        for (auto id : kAllWeights) {
          Matrix analytic = jacobian_for(jac, id).matrix;
          if (corrupt && corrupt->first == variant && corrupt->second == id) analytic(0, 0) += 1e-3;
          AttentionWeights base = w;
          const Matrix fd = finite_diff_jacobian(
                                [&](const Matrix& m) {
                                  AttentionWeights p = w;
                                  weight_for(p, id) = m;
                                  return lemma_attention(variant, x, p);
                                },
                                weight_for(base, id), g.step)
                                .matrix;
          double abs_err = 0, rel_err = 0, ratio = 0;
          for (std::size_t k = 0; k < fd.size(); ++k) {
            const double diff = std::abs(analytic.data()[k] - fd.data()[k]);
            const double mag = std::abs(fd.data()[k]);
            abs_err = std::max(abs_err, diff);
            if (mag > 0) rel_err = std::max(rel_err, diff / mag);
            ratio = std::max(ratio, diff / std::max(g.abs_tol, g.rel_tol * mag));
          }
          const bool ok = ratio <= 1.0;
          ++checks;
          if (!ok) {
            ++vfail;
            ctx.err << "gradcheck: mismatch variant=" << to_string(variant) << " weight=" << to_string(id)
                    << " seed=" << seed << " dims=" << cfg::str(dims) << " max_abs_err=" << fmt_double(abs_err)
                    << '\n';
          }
          vabs = std::max(vabs, abs_err);
          vrel = std::max(vrel, rel_err);
          vratio = std::max(vratio, ratio);
          rows << to_string(variant) << ',' << dims.s << ',' << dims.d << ',' << dims.dk << ',' << i << ',' << seed
               << ',' << to_string(id) << ',' << fmt_double(abs_err) << ',' << fmt_double(rel_err) << ','
               << fmt_double(ratio) << ',' << (ok ? 1 : 0) << '\n';
        }
      }
    }
    failures += vfail;
    summary << to_string(variant) << ',' << checks << ',' << vfail << ',' << fmt_double(vabs) << ','
            << fmt_double(vrel) << ',' << fmt_double(vratio) << '\n';
    ctx.out << "gradcheck " << to_string(variant) << ": " << checks - vfail << "/" << checks
            << " within tolerance, max abs err " << fmt_double(vabs) << '\n';
    ctx.outcome.details[to_string(variant)] = {{"checks", checks}, {"failures", vfail}, {"max_abs_err", vabs}};
  }
  ctx.write("gradcheck.csv", rows.str());
  ctx.write("gradcheck_summary.csv", summary.str());
  ctx.outcome.exit_code = failures ? kExitViolation : kExitPass;
}

inline void bounds(CommandContext& ctx) {
  const auto& b = ctx.config.bounds;
  if (!(b.factor > 0.0)) throw ConfigError("bounds.factor: must be > 0");
  const CampaignDims dims = b.dims ? CampaignDims::fixed(b.dims->s, b.dims->d, b.dims->dk) : CampaignDims{};
  std::string trials = campaign_csv_header(), coupling = coupling_csv_header();
  std::ostringstream summary;
  summary << "variant,weight,max_slack,trials,violations,vacuous\n";
  bool ok = true;
  for (auto v : kAllLemmaVariants) {
    const CampaignSummary c = bound_campaign(v, b.trials, dims, ctx.config.seed, ctx.config.threads, b.factor);
    trials += campaign_csv_rows(c);
    coupling += coupling_csv_rows(c);
    for (auto id : kAllWeights)
      summary << to_string(v) << ',' << to_string(id) << ',' << fmt_double(c.max_slack[std::size_t(id)]) << ','
              << c.trials << ',' << c.violations << ',' << c.vacuous << '\n';
    bool coupled = true;
    for (const auto& r : c.coupling) coupled = coupled && r.max_deviation <= 1e-9 * r.expected;
    ok = ok && c.passed() && coupled;
    ctx.out << "bounds " << to_string(v) << ": " << c.violations << " violations in " << c.trials << " trials, "
            << c.vacuous << " vacuous entries, coupling " << (coupled ? "as expected" : "MISMATCH") << '\n';
    ctx.outcome.details[to_string(v)] = {{"violations", c.violations}, {"vacuous", c.vacuous}, {"coupling_ok", coupled}};
  }
  ctx.write("bounds_trials.csv", trials);
  ctx.write("bounds_summary.csv", summary.str());
  ctx.write("bounds_coupling.csv", coupling);
  ctx.outcome.exit_code = ok ? kExitPass : kExitViolation;
}

inline void profile(CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const std::set<std::size_t> wanted(rc.profile.steps.begin(), rc.profile.steps.end());
  for (std::size_t s : wanted)
    if (s < 1 || s > rc.train.steps) throw ConfigError("profile.steps: every step must lie in [1, train.steps]");
  std::ostringstream summary;
  summary << "scheme,diverged,divergence_step,steps_run,final_loss\n";
  for (const auto& arm : rc.profile.schemes) {
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    tc.model.scheme = arm.scheme;
    if (arm.first_block) tc.model.first_block = *arm.first_block;
    tc.validate();
    const std::string name = arm.name();
    std::map<std::size_t, DiagnosticsRecord> records;
    auto record = [&](std::size_t step) {
      return DiagnosticsRecord{name + "-seed" + std::to_string(rc.seed), name, to_string(tc.model.init), rc.seed,
                               step, tc.model.layers};
    };
    TrainOptions opts;
    opts.on_step = [&](std::size_t step, const ModelParams& p, const Batch& batch) {
      if (!wanted.count(step)) return;
      DiagnosticsRecord r = record(step);
      r.add("grad_norm", per_layer_grad_norms(tc.model, p, batch));
      r.add("cosine", token_cosine_similarity(tc.model, p, batch));
      r.add("entropy", attention_entropy(tc.model, p, batch));
      records.emplace(step, std::move(r));
    };
    const TrainResult res = train(tc, opts);
    const LayerProfile missing = divergent_profile(tc.model.layers);
    for (std::size_t s : wanted) {
      if (records.count(s)) continue;
      DiagnosticsRecord r = record(s);
      for (const char* m : {"grad_norm", "cosine", "entropy"}) r.add(m, missing);
      records.emplace(s, std::move(r));
    }
    std::string csv = DiagnosticsRecord::csv_header();
    nlohmann::ordered_json js = nlohmann::ordered_json::array();
    for (const auto& [step, r] : records) {
      csv += r.csv_rows();
      js.push_back(r.to_json());
    }
    ctx.write("profile_" + name + ".csv", csv);
    ctx.write("profile_" + name + ".json", js.dump(2) + "\n");
    ctx.write("profile_" + name + "_train.csv", res.log.steps_csv());
    const double final_loss = res.log.steps.empty() ? NAN : res.log.steps.back().loss;
    summary << name << ',' << (res.log.diverged ? 1 : 0) << ',' << res.log.divergence_step << ','
            << res.log.steps.size() << ',' << fmt_double(final_loss) << '\n';
    ctx.out << "profile " << name << ": "
            << (res.log.diverged ? "diverged at step " + std::to_string(res.log.divergence_step)
                                 : "completed " + std::to_string(res.log.steps.size()) + " steps")
            << '\n';
    ctx.outcome.details[name] = {{"diverged", res.log.diverged}, {"divergence_step", res.log.divergence_step}};
  }
  ctx.write("profile_summary.csv", summary.str());
}

inline void flops(CommandContext& ctx) {
  const auto& f = ctx.config.flops;
  std::string csv = CostReport::csv_header(), table;
  for (const auto& s : f.schemes) {
    CostReport r;
    try {
      r = cost_report(s, f.d, f.s, f.layers);
    } catch (const DomainError& e) {
      throw ConfigError(std::string("flops: ") + e.what());
    }
    csv += r.csv_row();
    table += r.table() + "\n";
    ctx.outcome.details[r.scheme] = {{"param_ratio", to_string(r.param_ratio)}, {"flops_ratio", to_string(r.flops_ratio)}};
  }
  ctx.out << table;
  ctx.write("flops.csv", csv);
  ctx.write("flops.txt", table);
}

inline void train_cmd(CommandContext& ctx) {
  TrainConfig tc = ctx.config.train;
  tc.seed = ctx.config.seed;
  tc.validate();
  TrainOptions opts;
  opts.checkpoint_path = (ctx.out_dir / "checkpoint.bin").string();
  const TrainResult res = train(tc, opts);
  ctx.outcome.outputs.push_back("checkpoint.bin");
  ctx.write("metrics.csv", res.log.steps_csv());
  ctx.write("eval.csv", res.log.evals_csv());
  const double final_loss = res.log.steps.empty() ? NAN : res.log.steps.back().loss;
  ctx.out << "train: " << res.log.steps.size() << " steps, final loss " << fmt_double(final_loss)
          << (res.log.diverged ? ", diverged at step " + std::to_string(res.log.divergence_step) : "") << '\n';
  ctx.outcome.details = {{"steps_run", res.log.steps.size()},
                         {"final_loss", std::isfinite(final_loss) ? nlohmann::ordered_json(final_loss) : nullptr},
                         {"diverged", res.log.diverged},
                         {"divergence_step", res.log.divergence_step}};
  ctx.outcome.exit_code = res.log.diverged ? kExitViolation : kExitPass;
}

inline void dispatch(const std::string& command, CommandContext& ctx) {
  if (command == "gradcheck") return gradcheck(ctx);
  if (command == "bounds") return bounds(ctx);
  if (command == "profile") return profile(ctx);
  if (command == "flops") return flops(ctx);
  if (command == "train") return train_cmd(ctx);
  throw ConfigError("unknown command '" + command + "'");
}

}  // namespace commands

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct CliArgs {
  std::string command;
  std::optional<std::string> config_path;
  std::optional<std::string> manifest_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out_dir;
  std::vector<std::string> overrides;
};

// Resolves the run configuration; `given` lists keys set explicitly.
inline RunConfig resolve_config(CliArgs& a, std::set<std::string>& given) {
  RunConfig rc;
  if (a.manifest_path) {
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(read_file(*a.manifest_path));
      const std::string cmd = m.at("command").get<std::string>();
      if (!a.command.empty() && a.command != cmd) {
        throw ConfigError("--manifest: manifest is for '" + cmd + "', not '" + a.command + "'");
      }
      a.command = cmd;
      KeyValues kvs;
      for (const auto& [k, v] : m.at("config").items()) kvs.emplace_back(k, v.get<std::string>());
      apply_key_values(rc, kvs, &given);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("--manifest: " + std::string(e.what()));
    } catch (const FormatError& e) {
      throw ConfigError("--manifest: " + std::string(e.what()));
    }
  }
  if (a.config_path) {
    std::string text;
    try {
      text = read_file(*a.config_path);
    } catch (const FormatError& e) {
      throw ConfigError("--config: " + std::string(e.what()));
    }
    apply_key_values(rc, parse_key_values(text, *a.config_path), &given);
  }
  if (a.seed) {
    rc.seed = *a.seed;
    given.insert("seed");
  }
  if (a.threads) {
    rc.threads = *a.threads;
    given.insert("threads");
  }
  KeyValues ov;
  for (const auto& o : a.overrides) ov.push_back(parse_override(o));
  apply_key_values(rc, ov, &given);
  if (rc.threads < 1) throw ConfigError("threads: must be >= 1");
  return rc;
}

// Exit codes: 0 all checks pass, 1 a verified property failed, 2 usage or configuration error.
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CliArgs a;
  CLI::App app{"HybridNorm numerical lab", "hybridnorm"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  std::string config_path, manifest_path;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  auto* o_config = app.add_option("--config", config_path, "key = value configuration file");
  auto* o_manifest = app.add_option("--manifest", manifest_path, "re-run the command recorded in a manifest");
  auto* o_seed = app.add_option("--seed", seed, "master seed (overrides the config)");
  auto* o_threads = app.add_option("--threads", threads, "worker threads for sampling campaigns");
  app.add_option("--out-dir", a.out_dir, "directory for outputs and the manifest")->required();
  for (const auto& [name, about] : commands::kCommands)
    app.add_subcommand(name, about)->add_option("overrides", a.overrides, "key=value overrides");

  std::vector<std::string> rev(argv.rbegin(), argv.rend() - (argv.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitPass;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (!app.get_subcommands().empty()) a.command = app.get_subcommands().front()->get_name();
  if (*o_config) a.config_path = config_path;
  if (*o_manifest) a.manifest_path = manifest_path;
  if (*o_seed) a.seed = seed;
  if (*o_threads) a.threads = threads;

  RunConfig rc;
  try {
    std::set<std::string> given;
    rc = resolve_config(a, given);
    if (a.command.empty()) throw ConfigError("a subcommand or --manifest is required");
    require_keys(given, commands::required_keys(a.command));
    std::filesystem::create_directories(a.out_dir);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: --out-dir: " << e.what() << '\n';
    return kExitUsage;
  }

  const std::string started = utc_timestamp();
  CommandContext ctx{rc, a.out_dir, out, err, {}};
  std::string failure;
  try {
    commands::dispatch(a.command, ctx);
  } catch (const ConfigError& e) {
    failure = e.what();
    ctx.outcome.exit_code = kExitUsage;
  } catch (const CapacityError& e) {
    failure = e.what();
    ctx.outcome.exit_code = kExitUsage;
  } catch (const std::exception& e) {
    failure = e.what();
    ctx.outcome.exit_code = kExitViolation;
  }
  if (!failure.empty()) err << "error: " << failure << '\n';

  nlohmann::ordered_json inputs{{"config", a.config_path ? nlohmann::ordered_json(*a.config_path) : nullptr},
                                {"manifest", a.manifest_path ? nlohmann::ordered_json(*a.manifest_path) : nullptr},
                                {"overrides", a.overrides}};
  nlohmann::ordered_json summary{{"status", ctx.outcome.exit_code == kExitPass ? "pass" : "fail"},
                                 {"exit_code", ctx.outcome.exit_code},
                                 {"details", ctx.outcome.details}};
  if (!failure.empty()) summary["error"] = failure;
  nlohmann::ordered_json manifest{{"command", a.command},
                                  {"artifact_version", kArtifactVersion},
                                  {"seed", rc.seed},
                                  {"config", resolved_config(rc)},
                                  {"inputs", inputs},
                                  {"out_dir", a.out_dir},
                                  {"outputs", ctx.outcome.outputs},
                                  {"started_at", started},
                                  {"finished_at", utc_timestamp()},
                                  {"summary", summary}};
  try {
    write_file((std::filesystem::path(a.out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    err << "error: cannot write manifest: " << e.what() << '\n';
    return kExitUsage;
  }
  return ctx.outcome.exit_code;
}

inline int run_cli(int argc, char** argv) { return run_cli(std::vector<std::string>(argv, argv + argc)); }

}  // namespace hybridnorm
