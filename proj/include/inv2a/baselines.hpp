#pragma once

// Reference attacks: naive round trip, jailbreak-string prompting and
// few-shot prompting through a completion client.

#include "inv2a/metrics.hpp"
#include "inv2a/model_bridge.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace inv2a::baselines {

// Feeds the concatenated outputs back as a plain prompt and decodes greedily.
std::string naive_roundtrip_attack(const bridge::OutputSet& y, const bridge::CausalLM& lm, int max_new_tokens = 32);

class JailbreakSuite {
 public:
  static constexpr std::string_view kSlot = "{output}";

  explicit JailbreakSuite(std::vector<std::string> templates);
  // One template per line, each containing {output} once.
  static JailbreakSuite load(const std::filesystem::path& path);
  // resources/jailbreak_strings.txt when present, else the compiled-in list.
  static JailbreakSuite bundled();
  static JailbreakSuite builtin();

  std::size_t size() const { return templates_.size(); }
  const std::vector<std::string>& templates() const { return templates_; }
  std::string render(std::size_t i, std::string_view output) const;

 private:
  std::vector<std::string> templates_;
};

struct JailbreakSample {
  std::vector<std::string> recovered;  // one per template
};

JailbreakSample jailbreak_attack(const bridge::OutputSet& y, const bridge::CausalLM& lm, const JailbreakSuite& suite,
                                 int max_new_tokens = 32);

struct MetricOracle {
  double value = 0.0;
  std::size_t index = 0;  // template that achieved it
};

struct JailbreakAggregate {
  std::vector<metrics::MetricsReport> per_string;
  metrics::MetricsReport mean;  // average over templates
  MetricOracle oracle_bleu;
  MetricOracle oracle_token_f1;
  MetricOracle oracle_exact;
  std::optional<MetricOracle> oracle_cos_sim;
  nlohmann::json to_json() const;
};

// references[i] is the true prompt of samples[i].
JailbreakAggregate aggregate_jailbreak(const std::vector<std::string>& references,
                                       const std::vector<JailbreakSample>& samples, const metrics::EvalConfig& cfg);

struct FewShotSpec {
  std::vector<std::pair<std::string, std::string>> demos;  // (output, prompt), four of them
  metrics::JudgeClient* client = nullptr;
};

std::string render_fewshot(const std::vector<std::pair<std::string, std::string>>& demos, std::string_view output);
// First line of the completion with any leading "inputN:" label removed.
std::string parse_fewshot_reply(std::string_view reply);
// nullopt when the client fails; the caller records the skip.
std::optional<std::string> fewshot_attack(const std::string& y, const FewShotSpec& spec);

}  // namespace inv2a::baselines
