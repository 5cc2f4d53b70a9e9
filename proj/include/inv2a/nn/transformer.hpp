#pragma once

// Pre-LayerNorm transformer stack shared by the causal decoder and the
// bidirectional encoder. Input rows are token (or arbitrary) embeddings of
// width d_model; learned absolute positions are added inside forward().

#include "inv2a/nn/autograd.hpp"
#include "inv2a/nn/parameters.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace inv2a::nn {

struct TransformerConfig {
  int vocab_size = 0;
  int d_model = 48;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 192;
  int max_positions = 64;
  bool causal = true;

  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
};

enum class Sublayer { kAttention, kMlp };

// Additive Gaussian noise on one sublayer's output activations.
struct ActivationNoise {
  int layer = 0;
  Sublayer sublayer = Sublayer::kMlp;
  double stddev = 0.0;
  Rng* rng = nullptr;
};

// Per-layer key/value rows for incremental decoding.
struct KVCache {
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  int length = 0;
};

struct ForwardOptions {
  // Absolute position of the first input row; keys already in the cache
  // occupy positions [0, position_offset).
  int position_offset = 0;
  // Explicit per-row positions (encoder segments restart at 0). Overrides
  // position_offset for the embedding lookup only.
  const std::vector<int>* positions = nullptr;
  // Overrides the default full/causal mask.
  const AttentionMask* mask = nullptr;
  KVCache* cache = nullptr;
  const ActivationNoise* noise = nullptr;
  // Receives one head-averaged attention probability matrix per layer.
  std::vector<Matrix>* attention_probs = nullptr;
  // Receives the residual stream after each block.
  std::vector<Matrix>* layer_outputs = nullptr;
};

class Transformer {
 public:
  Transformer(const TransformerConfig& config, std::uint64_t seed);

  const TransformerConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // Rows of the token embedding table.
  Var embed(std::span<const TokenId> ids) const;
  // Final-LayerNorm hidden states for the input rows.
  Var forward(const Var& inputs, const ForwardOptions& options = {}) const;
  // Tied output head: hidden * E^T.
  Var logits(const Var& hidden) const;

  const Var& token_table() const { return tok_emb_; }

  Transformer clone() const;

  void save(const std::filesystem::path& dir, const std::string& stem) const;
  static Transformer load(const std::filesystem::path& dir, const std::string& stem);

 private:
  struct Block {
    Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void register_parameters();

  TransformerConfig config_;
  Var tok_emb_;
  Var pos_emb_;
  std::vector<Block> blocks_;
  Var lnf_g_;
  Var lnf_b_;
  ParameterSet params_;
};

}  // namespace inv2a::nn
