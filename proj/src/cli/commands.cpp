#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "mllmreid/experiment.hpp"
#include "mllmreid/verify.hpp"

namespace mllmreid::cli {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::string out = "mllmreid_out";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> recipe;
  std::optional<std::size_t> seeds;
};

struct Command {
  const char* name;
  const char* help;
  void (*step)(const RunConfig&, const Workspace&, ManifestEntry&);
};

constexpr Command kPipeline[] = {
    {"gen-data", "generate the source and shifted-domain datasets", gen_data},
    {"pretrain", "stage 1: train the multimodal model with the chosen recipe", pretrain},
    {"train-reid", "stage 2: fine-tune the visual encoder for retrieval", train_reid},
    {"eval", "evaluate the stage-2 encoder on the held-out split", evaluate},
    {"cross-eval", "evaluate in-domain and on the shifted domain", cross_evaluate},
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON config file (empty file: all defaults)");
  sub->add_option("--set", o.sets, "dotted-key override, e.g. train.lambda=0.5 (repeatable)");
  sub->add_option("--out", o.out, "output directory")->capture_default_str();
  sub->add_option("--seed", o.seed, "run seed (overrides the config)");
  sub->add_option("--recipe", o.recipe, "baseline|common|syncreid|full");
}

RunConfig resolve_config(const Options& o) {
  std::vector<std::string> overrides = o.sets;
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  if (o.recipe) overrides.push_back("train.recipe=" + *o.recipe);
  RunConfig cfg = parse_config(o.config ? std::optional<fs::path>(*o.config) : std::nullopt, overrides);
  cfg.resolve_paths();
  // Every typed view validates its section, so bad values fail before any work.
  (void)cfg.data();
  (void)cfg.target_data();
  (void)cfg.encoder();
  (void)cfg.lm();
  (void)cfg.pretrain();
  (void)cfg.reid();
  (void)cfg.protocol();
  return cfg;
}

void report(const std::vector<verify::CheckResult>& results) {
  std::string failed;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << std::endl;
    if (!r.passed) failed += (failed.empty() ? "" : ", ") + r.name;
  }
  if (!failed.empty()) throw InvariantError("invariant failed: " + failed);
}

void run_ablation(const RunConfig& cfg, const Workspace& ws, std::size_t seeds) {
  ManifestEntry entry("ablate", ws, cfg.doc());
  try {
    const AblationSummary s = ablate(cfg, ws, seeds, entry);
    std::cout << ablation_markdown(s);
  } catch (const std::exception& e) {
    entry.fail(exit_code_for(e), e.what());
    entry.write();
    throw;
  }
  entry.write();
}

}  // namespace

int run_command(int argc, const char* const* argv) {
  CLI::App app{"Multimodal pretraining and retrieval fine-tuning for person re-identification"};
  app.name("mllmreid");
  app.require_subcommand(1);
  Options o;
  for (const Command& c : kPipeline) add_common(app.add_subcommand(c.name, c.help), o);
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run every recipe over several seeds and summarize");
  add_common(ablate_cmd, o);
  ablate_cmd->add_option("--seeds", o.seeds, "number of seeds (default: eval.seeds)");
  add_common(app.add_subcommand("gradcheck", "finite-difference checks of every op and loss"), o);
  add_common(app.add_subcommand("selftest", "run every invariant suite"), o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  const CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  const bool verification = command == "gradcheck" || command == "selftest";
  // Verification commands only leave a manifest when asked for an output dir.
  const bool keep_manifest = !verification || sub->count("--out") > 0;
  const Workspace ws(o.out);

  RunConfig cfg;
  try {
    cfg = resolve_config(o);
  } catch (const Error& e) {
    std::cerr << "mllmreid " << command << ": " << e.what() << std::endl;
    if (keep_manifest) {
      ManifestEntry entry(command, ws, nullptr);
      entry.fail(1, e.what());
      entry.write();
    }
    return 1;
  }

  try {
    if (verification) {
      ManifestEntry entry(command, ws, cfg.doc());
      try {
        if (command == "gradcheck") {
          report({verify::gradients()});
        } else {
          report(verify::run_all());
        }
      } catch (const std::exception& e) {
        entry.fail(exit_code_for(e), e.what());
        if (keep_manifest) entry.write();
        throw;
      }
      if (keep_manifest) entry.write();
    } else if (command == "ablate") {
      run_ablation(cfg, ws, o.seeds.value_or(cfg.ablation_seeds()));
    } else {
      for (const Command& c : kPipeline)
        if (command == c.name) run_step(command, cfg, ws, c.step);
    }
  } catch (const std::exception& e) {
    std::cerr << "mllmreid " << command << ": " << e.what() << std::endl;
    return exit_code_for(e);
  }
  return 0;
}

}  // namespace mllmreid::cli
