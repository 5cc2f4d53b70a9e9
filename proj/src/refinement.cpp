#include "inv2a/refinement.hpp"

#include "inv2a/scoring.hpp"
#include "inv2a/templates.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace inv2a::refine {

using nlohmann::json;

void FilterConfig::validate() const {
  if (!(trigger_threshold > 0.0 && trigger_threshold < 1.0)) throw ValidationError("trigger threshold must be in (0,1)");
  if (rounds < 0 || rounds > 2) throw ValidationError("rounds must be in [0, 2]");
  if (neighbors < 1) throw ValidationError("neighbors must be >= 1");
  if (beam < 1) throw ValidationError("beam must be >= 1");
  if (batch_k < 0) throw ValidationError("batch_k must be >= 0");
  rewrite_sampling.validate();
}

json FilterConfig::to_json() const {
  return json{{"trigger_threshold", trigger_threshold}, {"rounds", rounds},
              {"neighbors", neighbors},                 {"beam", beam},
              {"batch_k", batch_k},                     {"rewrite_sampling", rewrite_sampling.to_json()},
              {"seed", seed},                           {"score_mode", "mean-token-logprob"}};
}

FilterConfig FilterConfig::from_json(const json& j) {
  FilterConfig c;
  c.trigger_threshold = j.value("trigger_threshold", c.trigger_threshold);
  c.rounds = j.value("rounds", c.rounds);
  c.neighbors = j.value("neighbors", c.neighbors);
  c.beam = j.value("beam", c.beam);
  c.batch_k = j.value("batch_k", c.batch_k);
  if (j.contains("rewrite_sampling")) c.rewrite_sampling = bridge::SamplingParams::from_json(j.at("rewrite_sampling"));
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json CallCounter::to_json() const {
  return json{{"rewrite_calls", rewrite_calls}, {"score_calls", score_calls},     {"initial_calls", initial_calls},
              {"inverse_calls", inverse_calls}, {"batched_calls", batched_calls}, {"dedup_savings", dedup_savings},
              {"accounted", accounted()}};
}

namespace {

json candidate_json(const Candidate& c) {
  return json{{"outputs", c.outputs.outputs},
              {"inverted", c.inverted},
              {"score", std::isfinite(c.score) ? json(c.score) : json(nullptr)},
              {"round", c.round}};
}

std::string pool_key(const bridge::OutputSet& s) {
  std::string k;
  for (const auto& o : s.outputs) {
    k += o;
    k.push_back('\x1e');
  }
  return k;
}

long ceil_div(long a, long b) { return (a + b - 1) / b; }

}  // namespace

json FilterState::to_json() const {
  json b = json::array(), h = json::array();
  for (const auto& c : beam) b.push_back(candidate_json(c));
  for (const auto& c : history) h.push_back(candidate_json(c));
  return json{{"round", round},
              {"triggered", triggered},
              {"initial_score", std::isfinite(initial_score) ? json(initial_score) : json(nullptr)},
              {"beam", b},
              {"history", h},
              {"calls", calls.to_json()},
              {"flags", flags}};
}

RewriteResult expand_neighbors(const std::string& y, const bridge::CausalLM& lm, int r,
                               const bridge::SamplingParams& params, std::uint64_t seed) {
  if (y.empty()) throw EmptyInput("cannot rewrite an empty output");
  if (r < 1) throw ValidationError("r must be >= 1");
  RewriteResult out;
  const std::string prompt = templates::render_rewrite(y);
  bool any = false;
  for (int j = 0; j < r; ++j) {
    bridge::DecodeParams dp;
    dp.sampling = params;
    dp.seed = mix_seed(seed, static_cast<std::uint64_t>(j));
    auto g = bridge::respond(lm, prompt, dp);
    any = any || !g.text.empty();
    out.rewrites.push_back(std::move(g.text));
  }
  if (!any) {
    out.rewrites.assign(1, y);
    out.fell_back = true;
  }
  return out;
}

double score_prompt(const std::string& prompt, const bridge::OutputSet& y, const bridge::CausalLM& lm) {
  if (prompt.empty()) return kNoScore;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& out : y.outputs) {
    const auto s = bridge::score_continuation(lm, prompt, out);
    for (double lp : s.logprob) total += lp;
    tokens += s.logprob.size();
  }
  if (tokens == 0) throw EmptyInput("nothing to score");
  return total / static_cast<double>(tokens);
}

double score_candidate(const bridge::OutputSet& y_tilde, const bridge::OutputSet& y,
                       const bridge::InverseModel& inverse, const bridge::CausalLM& lm, std::string* inverted) {
  const std::string x = inverse.invert(y_tilde).text;
  if (inverted) *inverted = x;
  return score_prompt(x, y, lm);
}

double score_candidate(const std::string& y_tilde, const std::string& y, const bridge::InverseModel& inverse,
                       const bridge::CausalLM& lm) {
  if (y_tilde.empty() || y.empty()) throw EmptyInput("score_candidate needs nonempty texts");
  return score_candidate(bridge::OutputSet({y_tilde}), bridge::OutputSet({y}), inverse, lm);
}

FilterResult dynamic_filter(const bridge::OutputSet& y, const bridge::InverseModel& inverse, const bridge::CausalLM& lm,
                            const FilterConfig& cfg) {
  cfg.validate();
  FilterResult res;
  FilterState& st = res.state;

  Candidate original;
  original.outputs = y;
  original.inverted = inverse.invert(y).text;
  ++st.calls.inverse_calls;
  res.prompt = original.inverted;
  try {
    original.score = score_prompt(original.inverted, y, lm);
  } catch (const Error& e) {
    st.flags.push_back(std::string("initial_score_failed: ") + e.what());
    original.score = kNoScore;
  }
  ++st.calls.initial_calls;
  st.initial_score = original.score;
  st.history.push_back(original);
  st.beam.push_back(original);
  if (cfg.rounds == 0 || std::exp(original.score) >= cfg.trigger_threshold) return res;

  st.triggered = true;
  std::map<std::string, std::size_t> seen{{pool_key(y), 0}};
  const long slots = static_cast<long>(cfg.beam) * cfg.neighbors;
  for (int round = 1; round <= cfg.rounds; ++round) {
    st.round = round;
    const std::vector<Candidate> beam = st.beam;
    long new_candidates = 0;
    for (int b = 0; b < cfg.beam; ++b) {
      const Candidate& src = beam[static_cast<std::size_t>(b) % beam.size()];
      // One rewrite per output per neighbor; the neighbor candidate replaces
      // every output by its j-th rewrite.
      std::vector<std::vector<std::string>> per_output;
      const std::uint64_t slot_seed = mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(round)), static_cast<std::uint64_t>(b));
      for (std::size_t i = 0; i < src.outputs.outputs.size(); ++i) {
        auto rw = expand_neighbors(src.outputs.outputs[i], lm, cfg.neighbors, cfg.rewrite_sampling,
                                   mix_seed(slot_seed, i));
        if (rw.fell_back) st.flags.push_back("rewrite_fallback_round_" + std::to_string(round));
        per_output.push_back(std::move(rw.rewrites));
      }
      st.calls.rewrite_calls += cfg.neighbors;
      for (int j = 0; j < cfg.neighbors; ++j) {
        Candidate c;
        c.round = round;
        for (std::size_t i = 0; i < per_output.size(); ++i) {
          const auto& opts = per_output[i];
          const std::string& t = opts[static_cast<std::size_t>(j) % opts.size()];
          c.outputs.outputs.push_back(t.empty() ? src.outputs.outputs[i] : t);
        }
        const std::string key = pool_key(c.outputs);
        if (seen.count(key)) {
          ++st.calls.dedup_savings;
          continue;
        }
        seen.emplace(key, st.history.size());
        try {
          c.score = score_candidate(c.outputs, y, inverse, lm, &c.inverted);
        } catch (const Error& e) {
          st.flags.push_back(std::string("score_failed: ") + e.what());
          c.score = kNoScore;
        }
        ++st.calls.inverse_calls;
        ++st.calls.score_calls;
        ++new_candidates;
        st.history.push_back(std::move(c));
      }
    }
    if (cfg.batch_k > 0) {
      st.calls.batched_calls += ceil_div(slots, cfg.batch_k);
      if (new_candidates > 0) st.calls.batched_calls += ceil_div(new_candidates, cfg.batch_k);
    }
    // Top-B over the whole pool; ties keep the earlier candidate.
    std::vector<std::size_t> order(st.history.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return st.history[a].score > st.history[b].score; });
    st.beam.clear();
    for (std::size_t i = 0; i < order.size() && static_cast<int>(st.beam.size()) < cfg.beam; ++i) {
      st.beam.push_back(st.history[order[i]]);
    }
  }
  const Candidate& best = st.beam.front();
  if (best.score > original.score && !best.inverted.empty()) res.prompt = best.inverted;
  return res;
}

double trigger_rate(const std::vector<FilterState>& states) {
  if (states.empty()) return 0.0;
  double n = 0.0;
  for (const auto& s : states) n += s.triggered ? 1.0 : 0.0;
  return n / static_cast<double>(states.size());
}

}  // namespace inv2a::refine
