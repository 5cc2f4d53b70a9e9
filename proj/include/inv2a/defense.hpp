#pragma once

// Defender-side tools: Gaussian noise on decoder sublayer outputs, word-level
// output perturbations, and the forward-vs-inversion BLEU trade-off sweep.

#include "inv2a/model_bridge.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace inv2a::defense {

struct NoiseSpec {
  int layer = 0;
  nn::Sublayer sublayer = nn::Sublayer::kMlp;
  double stddev = 0.0;
  std::uint64_t seed = 0;
  // Re-seed before every forward call, so equal inputs give equal noise.
  bool pinned = false;

  nlohmann::json to_json() const;
};

// "mlp" or "attention"; anything else throws SpecError.
nn::Sublayer parse_sublayer(const std::string& name);
std::string sublayer_name(nn::Sublayer s);

// A handle over the same weights with the noise hook installed; the input
// handle is left as it was.
std::shared_ptr<bridge::TransformerLM> inject_noise(const bridge::TransformerLM& lm, const NoiseSpec& spec);

class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::vector<std::vector<std::string>> groups);
  // One synonym group per line, words separated by whitespace; '#' comments.
  static Lexicon load(const std::filesystem::path& path);
  // The lexicon shipped in resources/, or the compiled-in copy of it.
  static Lexicon bundled();

  std::vector<std::string> synonyms(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }
  std::size_t group_count() const { return groups_.size(); }

 private:
  std::vector<std::vector<std::string>> groups_;
  std::vector<std::string> words_;  // every distinct entry, sorted
};

enum class PerturbKind { kSynonymReplacement, kRandomSwap, kRandomNoise };
PerturbKind parse_perturb_kind(const std::string& name);
std::string perturb_kind_name(PerturbKind k);

struct PerturbSpec {
  PerturbKind kind = PerturbKind::kSynonymReplacement;
  double rate = 0.0;
  std::uint64_t seed = 0;
};

struct PerturbResult {
  std::string text;
  int target = 0;   // round(rate * W)
  int changed = 0;  // word positions that differ from the input
  std::vector<std::string> flags;
};

PerturbResult perturb_output_detail(const std::string& y, const PerturbSpec& spec, const Lexicon& lexicon);
std::string perturb_output(const std::string& y, const PerturbSpec& spec, const Lexicon& lexicon);

// Word positions of y as perturb_output counts them.
std::vector<std::string> perturbable_words(const std::string& y);

struct TradeoffRow {
  double lambda = 0.0;
  double forward_bleu = 0.0;
  double inversion_bleu = 0.0;
  double forward_drop = 0.0;    // relative to lambda = 0
  double inversion_drop = 0.0;
};

struct TradeoffTable {
  NoiseSpec base;
  std::vector<TradeoffRow> rows;
  double clean_inversion_bleu = 0.0;

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

// For each lambda: forward BLEU of noisy greedy outputs against clean ones,
// and inversion BLEU when the attacker sees the noisy outputs and decodes
// through the noisy model.
TradeoffTable defense_tradeoff(const std::vector<std::string>& prompts, const bridge::TransformerLM& lm,
                               const bridge::InverseModel& inverse, const std::vector<double>& lambda_grid,
                               const NoiseSpec& base, int max_new_tokens = 32);

}  // namespace inv2a::defense
