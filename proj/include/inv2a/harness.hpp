#pragma once

// Dataset ingestion, attack corpora for both threat scenarios, experiment
// configuration and the staged, resumable pipeline behind the CLI.

#include "inv2a/defense.hpp"
#include "inv2a/metrics.hpp"
#include "inv2a/model_bridge.hpp"
#include "inv2a/refinement.hpp"
#include "inv2a/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace inv2a::harness {

enum class Scenario { kUser, kSystem };
Scenario parse_scenario(const std::string& s);
std::string scenario_name(Scenario s);

struct Provenance {
  std::string dataset;
  std::vector<std::uint64_t> seeds;
  bool operator==(const Provenance&) const = default;
};

struct PromptRecord {
  std::string id;
  std::string prompt;
  Scenario scenario = Scenario::kUser;
  std::vector<std::string> queries;
  std::vector<std::string> outputs;
  Provenance provenance;

  bool operator==(const PromptRecord&) const = default;
  nlohmann::json to_json() const;
};

// JSONL, one object per line with "id" and "prompt", optionally "queries" and
// "outputs". Blank lines are skipped. Errors name the 1-based line.
std::vector<PromptRecord> ingest_dataset(const std::filesystem::path& path, Scenario scenario);
void emit_dataset(const std::filesystem::path& path, const std::vector<PromptRecord>& records);
// Throws SplitError when an id occurs in both lists.
void check_disjoint_ids(const std::vector<PromptRecord>& a, const std::vector<PromptRecord>& b);

enum class Split { kTrain, kTest };

struct CorpusParams {
  bridge::SamplingParams sampling;
  int k_train = 4;  // user scenario; test split always gets one output
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
};

struct AttackCorpus {
  training::SampledCorpus corpus;
  nlohmann::json manifest;
};

// User: k (train) or 1 (test) samples of the bare prompt. System: one sample
// of prompt + " " + query per query, in query order. Records that already
// carry outputs keep them.
AttackCorpus build_attack_corpus(const std::vector<PromptRecord>& records, const bridge::CausalLM& lm,
                                 Scenario scenario, const CorpusParams& params);

struct DefenseSettings {
  bool enabled = false;
  int layer = 0;
  nn::Sublayer sublayer = nn::Sublayer::kMlp;
  std::vector<double> lambdas{0.0, 1e-2, 2.5e-2, 1e-1, 3e-1, 1.0};
  int prompts = 20;
};

struct DiagnosticsSettings {
  bool enabled = true;
  std::vector<std::string> probes{"entropy", "roundtrip", "similarity"};
  int max_pairs = 50;
};

enum class AttackMethod { kInverse, kNaive, kJailbreak, kFewShot };
AttackMethod parse_method(const std::string& s);
std::string method_name(AttackMethod m);

struct ExperimentConfig {
  std::string decoder;  // checkpoint directory or registry id
  std::string encoder;  // encoder checkpoint directory
  std::string train_dataset;
  std::string test_dataset;
  Scenario scenario = Scenario::kUser;
  bridge::SamplingParams sampling;
  int k_train = 4;
  bool include_raw = true;
  // Fresh outputs for the alignment stage instead of reusing the training corpus.
  bool align_disjoint = true;
  training::TrainConfig align = training::TrainConfig::alignment_defaults();
  training::TrainConfig warmup = training::TrainConfig::warmup_defaults();
  training::TrainConfig joint = training::TrainConfig::joint_defaults();
  AttackMethod method = AttackMethod::kInverse;
  bool refine = true;
  refine::FilterConfig filter;
  std::string metrics = "bleu,f1,cs,exact";
  DiagnosticsSettings diagnostics;
  DefenseSettings defense;
  std::string output_dir = "results";
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  // Over everything except output_dir, so a moved run keeps its identity.
  std::string hash() const;
};

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> s{"sample", "align", "invert", "attack", "refine", "evaluate", "diagnose", "defend"};
  return s;
}

struct StagePlanItem {
  std::string stage;
  bool enabled = true;
  bool done = false;  // a valid marker is already on disk
};

struct RunOptions {
  // Last stage to run; empty means every enabled stage.
  std::string until;
  bool dry_run = false;
};

struct RunSummary {
  std::vector<StagePlanItem> plan;
  std::vector<std::string> executed;
  std::vector<std::string> skipped;  // already complete
  std::filesystem::path output_dir;
};

std::vector<StagePlanItem> stage_plan(const ExperimentConfig& cfg, const RunOptions& opts);
// Runs the stages in order up to opts.until, skipping those with a valid
// marker. A failing stage writes a "failed" marker and throws StageError
// (ValidationError passes through unchanged).
RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Hex FNV-1a of a file's bytes.
std::string file_hash(const std::filesystem::path& path);

}  // namespace inv2a::harness
