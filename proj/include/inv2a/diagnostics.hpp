#pragma once

// Measurements over frozen models: teacher-forced entropy and log-probability,
// round-trip fidelity, source-invariance similarity, k-NN mutual information
// and attention-based token importance.

#include "inv2a/model_bridge.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace inv2a::diag {

// Mean base-2 entropy per target token, teacher-forced.
double conditional_entropy(std::string_view context, std::string_view target, const bridge::CausalLM& lm);
// Mean natural-log probability per target token, teacher-forced.
double conditional_logprob(std::string_view context, std::string_view target, const bridge::CausalLM& lm);

struct RoundTrip {
  std::string output;     // y sampled from the model
  std::string recovered;  // x-hat
  double bleu = 0.0;
};

// x -> y by the forward model, then y -> x-hat either naively (y fed back as a
// prompt) or through the inverse model.
RoundTrip roundtrip_fidelity(const std::string& x, const bridge::CausalLM& lm, const bridge::InverseModel* inverse,
                             const bridge::DecodeParams& forward);
// Same, with y already observed.
RoundTrip roundtrip_from_output(const std::string& x, const std::string& y, const bridge::CausalLM& lm,
                                const bridge::InverseModel* inverse);

struct DiagnosticsReport {
  double h_x_given_y = 0.0;
  double h_y_given_x = 0.0;
  double logp_x_given_y = 0.0;
  double roundtrip_bleu = 0.0;
  int n_samples = 0;
  nlohmann::json to_json() const;
};

// (x, y) pairs scored in both directions; round trip is naive unless an
// inverse model is given.
DiagnosticsReport diagnose_pairs(const std::vector<std::pair<std::string, std::string>>& pairs,
                                 const bridge::CausalLM& lm, const bridge::InverseModel* inverse = nullptr);

enum class PoolMode { kAvg, kLast };

struct SimilarityProbe {
  PoolMode mode = PoolMode::kAvg;
  std::vector<double> per_source_mean_cosines;
  double grand_mean = 0.0;
  std::vector<std::string> excluded;  // sources with fewer than two outputs
  nlohmann::json to_json() const;
};

struct SourceOutputs {
  std::string source;
  std::vector<std::string> outputs;
};

// Maps a text to per-token representation rows.
using Representer = std::function<Matrix(const std::string&)>;
Representer raw_embedding_representer(const bridge::CausalLM& lm);
// Projected encoder states c (the raw block is left out).
Representer pseudo_representer(const bridge::InverseModel& inverse);

RowVector pool_rows(const Matrix& rows, PoolMode mode);
double cosine(const RowVector& a, const RowVector& b);

SimilarityProbe source_invariance_score(const std::vector<SourceOutputs>& sources, const Representer& rep,
                                        PoolMode mode);
// Over already pooled vectors, one list per source.
SimilarityProbe source_invariance_from_vectors(const std::vector<std::vector<RowVector>>& vectors,
                                               const std::vector<std::string>& names, PoolMode mode);

struct MIEstimate {
  double nats = 0.0;      // clipped at 0
  double raw = 0.0;       // unclipped estimate
  double jitter_eps = 0;  // > 0 if constant columns were jittered
};

// Kraskov-Stoegbauer-Grassberger estimator (first variant), max-norm,
// brute-force neighbor search.
MIEstimate knn_mutual_information(const Matrix& a, const Matrix& b, int k = 3, std::uint64_t jitter_seed = 0);

double digamma(double x);

// Nine (by default) column indices spread uniformly over the columns sorted
// by mean absolute activation.
std::vector<int> select_dimensions(const Matrix& activations, int count = 9);

struct LayerMI {
  std::vector<double> per_layer;  // mean over selected dims of I(A; L_i[:, d])
  nlohmann::json to_json() const;
};

// A = mean-pooled c for each output, L_i = decoder layer i state at the last
// prefix row when decoding from the pseudo prefix.
LayerMI layer_mutual_information(const std::vector<std::string>& outputs, const bridge::InverseModel& inverse, int k = 3,
                                 int dims = 9);

struct TokenImportance {
  std::vector<std::string> tokens;  // raw-output tokens
  std::vector<double> without_encoder;
  std::vector<double> with_encoder;
  std::vector<bool> shared;  // token also occurs in the true prompt
  std::optional<double> ratio_without;
  std::optional<double> ratio_with;
  nlohmann::json to_json() const;
};

// Mean attention on shared tokens over the mean attention of all tokens.
std::optional<double> shared_attention_ratio(const std::vector<double>& attention, const std::vector<bool>& shared);

// Attention received by each raw-output token from the row that predicts the
// first prompt token, averaged over layers and renormalized over the raw block.
// Without the encoder the prefix is the raw output alone.
TokenImportance token_importance(const bridge::OutputSet& y, const bridge::InverseModel& inverse,
                                 const bridge::CausalLM& lm, const std::string& true_prompt = "");

}  // namespace inv2a::diag
