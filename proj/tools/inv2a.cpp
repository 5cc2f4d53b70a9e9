// inv2a command-line front end over the staged experiment pipeline.
//
//   inv2a toy --out DIR                  build the toy world, datasets and a config
//   inv2a <stage> --config FILE [opts]   run every stage up to <stage>
//   inv2a run --config FILE [--dry-run]  run all enabled stages
//
// Exit codes: 0 success, 2 validation error, 3 stage failure.

#include "inv2a/harness.hpp"
#include "inv2a/toy_world.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace inv2a;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kStageFailure = 3;

struct Overrides {
  std::string config;
  std::string output_dir;
  std::string method;
  std::string metrics;
  std::vector<std::string> probes;
  std::optional<int> rounds, neighbors, beam, layer;
  std::optional<double> threshold;
  std::string sublayer;
  std::vector<double> lambdas;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  bool no_refine = false;
};

void add_run_options(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "experiment config (JSON)")->required();
  app->add_option("--output-dir", o.output_dir, "override output_dir");
  app->add_option("--method", o.method, "inv2a|naive|jailbreak|fewshot");
  app->add_option("--metrics", o.metrics, "comma list of bleu,f1,cs,exact,judge");
  app->add_option("--probe", o.probes, "diagnostic probes: entropy roundtrip similarity mi importance");
  app->add_option("--rounds", o.rounds, "filter rounds I (0..2)");
  app->add_option("--neighbors", o.neighbors, "rewrites per candidate r");
  app->add_option("--beam", o.beam, "beam width B");
  app->add_option("--threshold", o.threshold, "trigger threshold");
  app->add_option("--layer", o.layer, "noise layer");
  app->add_option("--sublayer", o.sublayer, "mlp|attention");
  app->add_option("--lambda", o.lambdas, "noise grid");
  app->add_option("--seed", o.seed, "global seed");
  app->add_flag("--no-refine", o.no_refine, "skip the dynamic filter");
  app->add_flag("--dry-run", o.dry_run, "print the stage plan and exit");
}

harness::ExperimentConfig resolve(const Overrides& o, const std::string& stage) {
  auto cfg = harness::ExperimentConfig::load(o.config);
  if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
  if (!o.method.empty()) cfg.method = harness::parse_method(o.method);
  if (!o.metrics.empty()) cfg.metrics = o.metrics;
  if (!o.probes.empty()) cfg.diagnostics.probes = o.probes;
  if (o.rounds) cfg.filter.rounds = *o.rounds;
  if (o.neighbors) cfg.filter.neighbors = *o.neighbors;
  if (o.beam) cfg.filter.beam = *o.beam;
  if (o.threshold) cfg.filter.trigger_threshold = *o.threshold;
  if (o.layer) cfg.defense.layer = *o.layer;
  if (!o.sublayer.empty()) {
    try {
      cfg.defense.sublayer = defense::parse_sublayer(o.sublayer);
    } catch (const SpecError& e) {
      throw ValidationError(e.what());
    }
  }
  if (!o.lambdas.empty()) cfg.defense.lambdas = o.lambdas;
  if (o.seed) cfg.seed = *o.seed;
  if (o.no_refine) cfg.refine = false;
  if (stage == "refine") cfg.refine = true;
  if (stage == "defend") cfg.defense.enabled = true;
  cfg.validate();
  return cfg;
}

int run_stage(const Overrides& o, const std::string& stage) {
  const auto cfg = resolve(o, stage);
  harness::RunOptions opts;
  opts.until = stage == "run" ? "" : stage;
  opts.dry_run = o.dry_run;
  const auto sum = harness::run_experiment(cfg, opts);
  std::cout << "config " << cfg.hash() << " -> " << sum.output_dir.string() << "\n";
  for (const auto& item : sum.plan) {
    const char* state = !item.enabled ? "disabled" : item.done ? "done" : o.dry_run ? "pending" : "ran";
    std::cout << "  " << item.stage << ": " << state << "\n";
  }
  const fs::path metrics = sum.output_dir / "metrics.json";
  if (!o.dry_run && fs::exists(metrics) && (stage == "run" || stage == "evaluate")) {
    std::ifstream in(metrics);
    std::cout << nlohmann::json::parse(in).at("report").dump(2) << "\n";
  }
  return kOk;
}

struct ToyOptions {
  std::string out = "toy";
  int train = 50;
  int test = 50;
  std::uint64_t seed = 7;
  std::string world;
};

int run_toy(const ToyOptions& t) {
  const fs::path out = t.out;
  fs::create_directories(out);
  const fs::path world_dir = t.world.empty() ? out / "world" : fs::path(t.world);
  const auto world = toy::load_or_build_toy_world(world_dir);
  const auto prompts = world.language.sample_prompts(t.train + t.test, t.seed);
  std::ofstream tr(out / "train.jsonl"), te(out / "test.jsonl");
  for (int i = 0; i < t.train + t.test; ++i) {
    nlohmann::json j{{"id", "toy-" + std::to_string(i)}, {"prompt", world.language.prompt_text(prompts[i])}};
    (i < t.train ? tr : te) << j.dump() << "\n";
  }
  harness::ExperimentConfig cfg;
  cfg.decoder = fs::absolute(world_dir / "lm").string();
  cfg.encoder = fs::absolute(world_dir / "encoder").string();
  cfg.train_dataset = "train.jsonl";
  cfg.test_dataset = "test.jsonl";
  cfg.sampling.max_new_tokens = 40;
  cfg.warmup.epochs = 30;
  cfg.warmup.lr = 3e-3;
  cfg.warmup.batch_size = 8;
  cfg.joint.epochs = 75;
  cfg.joint.lr = 3e-3;
  cfg.joint.batch_size = 8;
  cfg.filter.rewrite_sampling.max_new_tokens = 40;
  cfg.defense.lambdas = {0.0, 1e-2, 0.1, 0.5, 1.0};
  cfg.output_dir = "results";
  cfg.seed = t.seed;
  auto j = cfg.to_json();
  j["train_dataset"] = "train.jsonl";
  j["test_dataset"] = "test.jsonl";
  std::ofstream(out / "config.json") << j.dump(2) << "\n";
  std::cout << "toy world in " << world_dir.string() << ", config " << (out / "config.json").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"inv2a: prompt inversion from model outputs"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error");

  Overrides o;
  std::string chosen;
  for (const auto& stage : harness::stage_order()) {
    auto* sub = app.add_subcommand(stage, "run the pipeline up to the " + stage + " stage");
    add_run_options(sub, o);
    sub->callback([&chosen, stage] { chosen = stage; });
  }
  auto* run = app.add_subcommand("run", "run every enabled stage");
  add_run_options(run, o);
  run->callback([&chosen] { chosen = "run"; });

  ToyOptions t;
  auto* toy = app.add_subcommand("toy", "build the toy world, datasets and a config");
  toy->add_option("--out", t.out, "directory for datasets and config");
  toy->add_option("--world", t.world, "world directory (default OUT/world)");
  toy->add_option("--train", t.train, "training prompts");
  toy->add_option("--test", t.test, "test prompts");
  toy->add_option("--seed", t.seed, "prompt selection seed");
  toy->callback([&chosen] { chosen = "toy"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (chosen == "toy") return run_toy(t);
    return run_stage(o, chosen);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const SpecError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const ModelNotFound& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const StageError& e) {
    std::cerr << e.what() << "\n";
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageFailure;
  }
}
