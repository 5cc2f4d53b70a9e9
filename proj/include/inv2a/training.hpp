#pragma once

// Corpus sampling, contrastive alignment of the encoder, and the two-stage
// inversion training (projection warm-up, then joint fine-tuning).

#include "inv2a/model_bridge.hpp"
#include "inv2a/nn/parameters.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace inv2a::training {

struct SampleRecord {
  std::string source_id;
  std::string prompt;
  std::vector<std::string> outputs;
  std::vector<std::uint64_t> seeds;  // one per output
};

struct SampledCorpus {
  std::vector<SampleRecord> records;
  bridge::SamplingParams sampling;
  int skipped = 0;

  std::size_t output_count() const;
  nlohmann::json manifest() const;
  // Header line holds sampling params, skip count and any extra fields.
  void save_jsonl(const std::filesystem::path& path, const nlohmann::json& header_extra = nlohmann::json::object()) const;
  static SampledCorpus load_jsonl(const std::filesystem::path& path);
};

struct PromptInput {
  std::string id;
  std::string prompt;
};

// Draws k outputs per prompt. Sample j of prompt i uses seed mix(base_seed, i, j).
// A prompt whose generation throws is skipped; more than 10% skipped throws
// InvalidCorpus.
SampledCorpus sample_output_sets(const std::vector<PromptInput>& prompts, const bridge::CausalLM& lm,
                                 const bridge::SamplingParams& params, int k_per_prompt, std::uint64_t base_seed = 0);

// Reference InfoNCE over explicit embeddings, sim = inner product.
double infonce_loss(const RowVector& anchor, const std::vector<RowVector>& positives,
                    const std::vector<RowVector>& negatives, double temperature);

enum class Phase { kAlign, kWarmup, kJoint };
std::string to_string(Phase p);

struct TrainConfig {
  Phase phase = Phase::kJoint;
  double lr = 2e-4;
  int batch_size = 32;
  int epochs = 1;
  double warmup_fraction = 0.2;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  // "linear" decays to zero over the run; "constant" keeps lr fixed.
  std::string lr_schedule = "linear";
  // Alignment only.
  int n_pos = 4;
  int n_neg = 16;
  double temperature = 0.07;
  // Reinforcement only: outputs grouped into one observation.
  int outputs_per_example = 1;

  static TrainConfig alignment_defaults();
  static TrainConfig warmup_defaults();
  static TrainConfig joint_defaults();
  nn::AdamWConfig optimizer() const;
  double lr_at(long step, long total_steps) const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct ContrastiveBatch {
  std::string anchor;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
  double temperature = 0.07;
};

// Builds one batch per anchor for the given anchor order; positives come from
// the anchor's own set, negatives from other sets.
std::vector<ContrastiveBatch> build_contrastive_batches(const SampledCorpus& corpus, const TrainConfig& cfg, Rng& rng);

struct AlignReport {
  std::vector<double> epoch_loss;
  long steps = 0;
  nlohmann::json to_json() const;
};

// Contrastive alignment of the encoder on pooled output embeddings.
AlignReport align_encoder(const SampledCorpus& corpus, bridge::Encoder& enc, const TrainConfig& cfg);

// Teacher-forced mean NLL of x's tokens (plus the closing EOS) after prefix.
// Prefix positions carry no loss.
nn::Var inversion_loss(const bridge::PseudoRepresentation& prefix, std::string_view x, const bridge::CausalLM& lm);

struct CorpusSplit {
  SampledCorpus warmup;
  SampledCorpus joint;
};
// Deterministic partition by source prompt; warmup gets round(fraction * n).
CorpusSplit split_by_source(const SampledCorpus& corpus, double warmup_fraction, std::uint64_t seed);
// Throws SplitError if any prompt appears on both sides.
void check_disjoint(const SampledCorpus& a, const SampledCorpus& b);
std::string corpus_hash(const SampledCorpus& c);

struct InverseExample {
  bridge::OutputSet outputs;
  std::string prompt;
};
std::vector<InverseExample> make_examples(const SampledCorpus& corpus, int outputs_per_example);

struct StageReport {
  std::string stage;
  std::vector<double> epoch_loss;
  long steps = 0;
  std::string split_hash;
  nlohmann::json to_json() const;
};

// One pass of supervised inversion training. Only projection parameters move
// when update_encoder is false.
StageReport train_stage(const std::vector<InverseExample>& examples, bridge::InverseModel& model,
                        const TrainConfig& cfg, bool update_encoder);

struct InverseTrainReport {
  StageReport warmup;
  StageReport joint;
  nlohmann::json to_json() const;
};

// Full reinforcement: split 20/80 by source, warm up on the first part with the
// encoder frozen, then train encoder + projection on the rest. Checkpoints go
// to checkpoint_dir/{warmup,joint} when given.
InverseTrainReport train_inverse(const SampledCorpus& corpus, bridge::InverseModel& model, const TrainConfig& cfg_warmup,
                                 const TrainConfig& cfg_joint,
                                 const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);
// Same, over a split the caller already made.
InverseTrainReport train_inverse(const CorpusSplit& split, bridge::InverseModel& model, const TrainConfig& cfg_warmup,
                                 const TrainConfig& cfg_joint,
                                 const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

}  // namespace inv2a::training
