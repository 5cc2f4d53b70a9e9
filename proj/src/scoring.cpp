#include "inv2a/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace inv2a::bridge {

double TokenScores::mean_logprob() const {
  if (logprob.empty()) return 0.0;
  return std::accumulate(logprob.begin(), logprob.end(), 0.0) / static_cast<double>(logprob.size());
}

double TokenScores::mean_entropy_bits() const {
  // Running mean: a constant sequence averages to exactly that constant.
  double m = 0.0;
  for (std::size_t i = 0; i < entropy_bits.size(); ++i) m += (entropy_bits[i] - m) / static_cast<double>(i + 1);
  return m;
}

RowVector log_softmax_row(const RowVector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

double entropy_bits(const RowVector& logits) {
  // H = log2 S - sum p (z - max) / ln 2 with S = sum exp(z - max); uniform
  // logits give log2 V with no rounding beyond log2 itself.
  const RowVector z = (logits.array() - logits.maxCoeff()).matrix();
  const RowVector e = z.array().exp().matrix();
  const double s = e.sum();
  double weighted = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (e(i) > 0.0) weighted += e(i) * z(i);
  }
  return std::max(0.0, std::log2(s) - weighted / s / std::log(2.0));
}

TokenScores score_continuation(const CausalLM& lm, std::string_view context, std::string_view target) {
  const Tokenizer& tok = lm.tokenizer();
  TokenScores out;
  out.target = tok.encode(target);
  if (out.target.empty()) throw EmptyInput("scored target is empty");
  TokenIds ctx = tok.encode(context);
  const std::size_t limit = static_cast<std::size_t>(lm.max_positions());
  // BOS + ctx + SEP + target, the last target token is never an input.
  auto need = [&] { return ctx.size() + out.target.size() + 1; };
  if (need() > limit) {
    const std::size_t drop = std::min(ctx.size(), need() - limit);
    ctx.erase(ctx.begin(), ctx.begin() + static_cast<std::ptrdiff_t>(drop));
    out.context_truncated = drop > 0;
  }
  if (need() > limit) {
    out.target.resize(limit > ctx.size() + 1 ? limit - ctx.size() - 1 : 1);
    out.target_truncated = true;
  }
  TokenIds ids{Tokenizer::kBos};
  ids.insert(ids.end(), ctx.begin(), ctx.end());
  ids.push_back(Tokenizer::kSep);
  const std::size_t first = ids.size() - 1;  // row predicting target[0]
  ids.insert(ids.end(), out.target.begin(), out.target.end() - 1);
  const Matrix logits = lm.forward_tokens(ids);
  for (std::size_t t = 0; t < out.target.size(); ++t) {
    const RowVector row = logits.row(static_cast<Eigen::Index>(first + t));
    const RowVector lp = log_softmax_row(row);
    out.logprob.push_back(lp(out.target[t]));
    out.entropy_bits.push_back(entropy_bits(row));
  }
  return out;
}

}  // namespace inv2a::bridge
