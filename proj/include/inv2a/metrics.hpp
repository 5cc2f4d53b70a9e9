#pragma once

// Fidelity metrics between a true prompt and a recovered one, plus the
// YES/NO judge protocol behind a pluggable completion client.

#include "inv2a/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace inv2a {
namespace bridge {
class CausalLM;
}

namespace metrics {

// Whitespace split, then every ASCII punctuation character stands alone.
std::vector<std::string> metric_tokens(std::string_view text, bool lowercase);

// Sentence BLEU, 1-4 grams, case-sensitive. Orders >= 2 use add-one
// smoothing, (m + 1) / (c + 1); unigram precision is unsmoothed. Empty
// hypothesis scores 0.
double bleu(std::string_view reference, std::string_view hypothesis);

struct F1Result {
  double value = 0.0;
  bool both_empty = false;
};
// Multiset overlap F1 on lowercased tokens, in percent.
F1Result token_f1_detail(std::string_view reference, std::string_view hypothesis);
double token_f1(std::string_view reference, std::string_view hypothesis);

// 1 iff equal after trimming outer whitespace.
int exact_match(std::string_view reference, std::string_view hypothesis);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string name() const = 0;
  // Throws on provider failure.
  virtual RowVector embed(std::string_view text) const = 0;
};

// Local default: word unigrams/bigrams and character trigrams hashed into a
// fixed number of buckets.
class HashedNgramEmbedder : public EmbeddingProvider {
 public:
  explicit HashedNgramEmbedder(int dims = 512) : dims_(dims) {}
  std::string name() const override { return "hashed-ngram"; }
  RowVector embed(std::string_view text) const override;

 private:
  int dims_;
};

// Fixed text -> vector table, for tests and offline fixtures.
class TableEmbedder : public EmbeddingProvider {
 public:
  explicit TableEmbedder(std::vector<std::pair<std::string, RowVector>> table) : table_(std::move(table)) {}
  std::string name() const override { return "table"; }
  RowVector embed(std::string_view text) const override;

 private:
  std::vector<std::pair<std::string, RowVector>> table_;
};

// Cosine x 100; nullopt when the provider fails or a vector has zero norm.
std::optional<double> embedding_cosine(std::string_view reference, std::string_view hypothesis,
                                       const EmbeddingProvider& provider);

struct RetryPolicy {
  int max_attempts = 3;
  int backoff_ms = 200;
};

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  // Returns the raw completion; throws on transport failure.
  virtual std::string complete(const std::string& prompt) = 0;
  virtual RetryPolicy retry_policy() const { return {}; }
};

class StubJudge : public JudgeClient {
 public:
  explicit StubJudge(std::string reply) : fn_([r = std::move(reply)](const std::string&) { return r; }) {}
  explicit StubJudge(std::function<std::string(const std::string&)> fn) : fn_(std::move(fn)) {}
  std::string complete(const std::string& prompt) override {
    last_prompt_ = prompt;
    return fn_(prompt);
  }
  RetryPolicy retry_policy() const override { return {1, 0}; }
  const std::string& last_prompt() const { return last_prompt_; }

 private:
  std::function<std::string(const std::string&)> fn_;
  std::string last_prompt_;
};

// Greedy completion from a local causal LM.
class LocalLMJudge : public JudgeClient {
 public:
  LocalLMJudge(std::shared_ptr<const bridge::CausalLM> lm, int max_new_tokens = 4)
      : lm_(std::move(lm)), max_new_tokens_(max_new_tokens) {}
  std::string complete(const std::string& prompt) override;

 private:
  std::shared_ptr<const bridge::CausalLM> lm_;
  int max_new_tokens_;
};

// POSTs {"prompt": ..., "max_tokens": n} as JSON to host:port/path and reads
// "text", "completion" or choices[0].text / choices[0].message.content.
class HttpJudgeClient : public JudgeClient {
 public:
  struct Options {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string path = "/v1/completions";
    std::string model;
    std::string api_key;
    int timeout_s = 30;
    int max_tokens = 4;
    RetryPolicy retry;
  };
  explicit HttpJudgeClient(Options opts) : opts_(std::move(opts)) {}
  std::string complete(const std::string& prompt) override;
  RetryPolicy retry_policy() const override { return opts_.retry; }

 private:
  Options opts_;
};

struct JudgeVerdict {
  bool yes = false;
  bool ambiguous = false;
  bool omitted = false;  // client failed on every attempt
  std::string raw;
};

JudgeVerdict parse_judge_reply(std::string_view reply);
JudgeVerdict llm_judge(std::string_view prompt_a, std::string_view prompt_b, JudgeClient& client);

struct SampleScores {
  std::string reference;
  std::string hypothesis;
  double bleu = 0.0;
  double token_f1 = 0.0;
  int exact = 0;
  std::optional<double> cos_sim;
  std::optional<JudgeVerdict> judge;
  bool f1_both_empty = false;
};

struct MetricsReport {
  double bleu = 0.0;
  double token_f1 = 0.0;
  std::optional<double> cos_sim;
  double exact = 0.0;
  std::optional<double> llm_eval;
  int n_samples = 0;
  std::vector<std::string> flags;

  nlohmann::json to_json() const;
};

struct EvalConfig {
  bool bleu = true;
  bool token_f1 = true;
  bool exact = true;
  bool cos_sim = true;
  bool judge = false;
  const EmbeddingProvider* embedder = nullptr;  // HashedNgramEmbedder when null
  JudgeClient* judge_client = nullptr;
  std::optional<std::filesystem::path> rows_csv;
  std::optional<std::filesystem::path> rows_jsonl;

  // "bleu,f1,cs,exact[,judge]"
  static EvalConfig from_list(const std::string& list);
};

struct EvalResult {
  MetricsReport report;
  std::vector<SampleScores> rows;
};

// (reference, hypothesis) pairs; reference is the true prompt.
EvalResult evaluate_run(const std::vector<std::pair<std::string, std::string>>& pairs, const EvalConfig& cfg);

void write_rows_csv(const std::filesystem::path& path, const std::vector<SampleScores>& rows);
void write_rows_jsonl(const std::filesystem::path& path, const std::vector<SampleScores>& rows);

}  // namespace metrics
}  // namespace inv2a
