#pragma once

// Training-free post-refinement: a small beam search over rewrites of the
// observed outputs, keeping the variant whose inversion best regenerates them.

#include "inv2a/model_bridge.hpp"

#include <nlohmann/json.hpp>

#include <limits>
#include <string>
#include <vector>

namespace inv2a::refine {

inline constexpr double kNoScore = -std::numeric_limits<double>::infinity();

struct FilterConfig {
  double trigger_threshold = 0.5;  // on exp(mean token logprob)
  int rounds = 1;
  int neighbors = 3;
  int beam = 2;
  int batch_k = 0;  // > 0 also reports batched call counts
  bridge::SamplingParams rewrite_sampling{1.5, 0.9, 50, 48};
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static FilterConfig from_json(const nlohmann::json& j);
};

struct Candidate {
  bridge::OutputSet outputs;
  std::string inverted;
  double score = kNoScore;
  int round = 0;  // round it was introduced in; 0 = the original
};

struct CallCounter {
  long rewrite_calls = 0;  // forward-model rewrite generations
  long score_calls = 0;    // forward-model scoring passes for new candidates
  long initial_calls = 0;  // the trigger check
  long inverse_calls = 0;  // inverse-model decodes
  long batched_calls = 0;  // ceil(Br/k) per rewrite and per scoring wave, when batch_k > 0
  long dedup_savings = 0;  // rewrites that were already in the pool

  long accounted() const { return rewrite_calls + score_calls; }
  nlohmann::json to_json() const;
};

struct FilterState {
  int round = 0;
  std::vector<Candidate> beam;     // sorted by descending score
  std::vector<Candidate> history;  // every scored candidate, original first
  double initial_score = kNoScore;
  bool triggered = false;
  CallCounter calls;
  std::vector<std::string> flags;

  nlohmann::json to_json() const;
};

struct FilterResult {
  std::string prompt;
  FilterState state;
};

struct RewriteResult {
  std::vector<std::string> rewrites;  // r entries, duplicates kept
  bool fell_back = false;            // every rewrite was empty
};

// r sampled rewrites of y through the rewrite template.
RewriteResult expand_neighbors(const std::string& y, const bridge::CausalLM& lm, int r,
                               const bridge::SamplingParams& params, std::uint64_t seed = 0);

// Mean token log-probability of y given the prompt recovered from y_tilde.
// kNoScore when the inversion is empty.
double score_candidate(const std::string& y_tilde, const std::string& y, const bridge::InverseModel& inverse,
                       const bridge::CausalLM& lm);
// Multi-output form: the inversion of the whole candidate set scores every
// observed output; token-weighted mean over all of them.
double score_candidate(const bridge::OutputSet& y_tilde, const bridge::OutputSet& y,
                       const bridge::InverseModel& inverse, const bridge::CausalLM& lm,
                       std::string* inverted = nullptr);
// Scores y under a fixed prompt.
double score_prompt(const std::string& prompt, const bridge::OutputSet& y, const bridge::CausalLM& lm);

FilterResult dynamic_filter(const bridge::OutputSet& y, const bridge::InverseModel& inverse, const bridge::CausalLM& lm,
                            const FilterConfig& cfg);

// Fraction of states where the filter actually ran.
double trigger_rate(const std::vector<FilterState>& states);

}  // namespace inv2a::refine
