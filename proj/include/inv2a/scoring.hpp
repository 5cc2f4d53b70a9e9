#pragma once

// Teacher-forced scoring of a target continuation after a text context, in
// the decoder's prompt format [BOS] context [SEP] target. Diagnostics and the
// refinement filter both score through here.

#include "inv2a/model_bridge.hpp"

#include <string_view>
#include <vector>

namespace inv2a::bridge {

struct TokenScores {
  TokenIds target;
  std::vector<double> logprob;       // natural log of p(target_t | ...)
  std::vector<double> entropy_bits;  // full softmax entropy at each target position
  bool context_truncated = false;
  bool target_truncated = false;

  double mean_logprob() const;
  double mean_entropy_bits() const;
};

// Over-long inputs drop the oldest context tokens first, then the target tail.
// Throws EmptyInput if the target has no tokens.
TokenScores score_continuation(const CausalLM& lm, std::string_view context, std::string_view target);

// Log-softmax and base-2 entropy of one logit row.
RowVector log_softmax_row(const RowVector& logits);
double entropy_bits(const RowVector& logits);

}  // namespace inv2a::bridge
