#pragma once

// A small synthetic instruction language plus the tiny decoder and encoder
// trained on it. Every end-to-end path in the toolkit can run against this
// world on a CPU in minutes.

#include "inv2a/model_bridge.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace inv2a::toy {

struct ToyPrompt {
  int task = 0;
  int adjective = 0;
  int noun = 0;
  int setting = -1;  // -1: no setting clause
};

class ToyLanguage {
 public:
  ToyLanguage();

  std::string prompt_text(const ToyPrompt& p) const;
  // A sampled reference response for the prompt (template + random fillers).
  std::string respond(const ToyPrompt& p, Rng& rng) const;
  // All prompts in a fixed enumeration order.
  std::vector<ToyPrompt> all_prompts() const;
  // Deterministic shuffled selection of n distinct prompts.
  std::vector<ToyPrompt> sample_prompts(int n, std::uint64_t seed) const;

  std::vector<std::string> vocabulary() const;
  // Groups of interchangeable words, used as the bundled synonym lexicon.
  const std::vector<std::vector<std::string>>& synonym_groups() const { return synonyms_; }

 private:
  std::vector<std::string> tasks_;
  std::vector<std::string> adjectives_;
  std::vector<std::string> nouns_;
  std::vector<std::string> settings_;
  std::vector<std::string> qualities_;
  std::vector<std::string> verbs_;
  std::vector<std::string> verb_bases_;
  std::vector<std::string> shapes_;
  std::vector<std::vector<std::string>> synonyms_;
};

struct LmTrainConfig {
  int steps = 1500;
  int batch_windows = 8;
  double lr = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
};

// Next-token training on a stream of documents packed into windows of the
// model's context length.
void train_language_model(nn::Transformer& net, const std::vector<TokenIds>& documents, const LmTrainConfig& cfg);

// Masked-token pretraining for the bidirectional encoder; masked positions
// are replaced by <unk> and predicted through the tied head.
void pretrain_encoder(nn::Transformer& net, const std::vector<TokenIds>& texts, const LmTrainConfig& cfg);

struct ToyWorldConfig {
  nn::TransformerConfig decoder{0, 48, 2, 4, 192, 64, true};
  nn::TransformerConfig encoder{0, 32, 2, 4, 128, 64, false};
  int base_steps = 600;     // generic text only
  int forward_steps = 4500;  // pairs mixed in
  int encoder_steps = 800;
  int documents = 6000;
  std::uint64_t seed = 2024;

  std::string fingerprint() const;
};

struct ToyWorld {
  ToyLanguage language;
  std::shared_ptr<bridge::TransformerLM> base_lm;  // before forward-pair training
  std::shared_ptr<bridge::TransformerLM> lm;       // the frozen target decoder
  std::shared_ptr<bridge::Encoder> encoder;
};

// Document builders over the toy language.
TokenIds pair_document(const Tokenizer& tok, const std::string& prompt, const std::string& response);
std::vector<TokenIds> generic_documents(const ToyLanguage& lang, const Tokenizer& tok, int count, Rng& rng);
std::vector<TokenIds> forward_pair_documents(const ToyLanguage& lang, const Tokenizer& tok,
                                             const std::vector<ToyPrompt>& prompts, int count, Rng& rng);

ToyWorld build_toy_world(const ToyWorldConfig& cfg = {});
// Loads a previously built world from dir when its fingerprint matches,
// otherwise builds and saves it.
ToyWorld load_or_build_toy_world(const std::filesystem::path& dir, const ToyWorldConfig& cfg = {});
// Writes a toy JSONL dataset ({"id","prompt"} per line).
void write_toy_dataset(const std::filesystem::path& path, const ToyLanguage& lang, int n, std::uint64_t seed);

}  // namespace inv2a::toy
