#pragma once

// Handles over the frozen causal decoder and the trainable text encoder, the
// projection between their spaces, and the pseudo-representation plumbing
// that turns observed outputs into a vector prefix for the decoder.

#include "inv2a/common.hpp"
#include "inv2a/nn/transformer.hpp"
#include "inv2a/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace inv2a::bridge {

using Segment = std::pair<int, int>;  // [begin, end)

// Outputs are hard-truncated to this many tokens before encoding.
inline constexpr int kDefaultMaxOutputTokens = 256;

struct SamplingParams {
  double temperature = 1.5;
  double top_p = 0.9;
  int top_k = 50;
  int max_new_tokens = 256;

  static SamplingParams greedy(int max_new_tokens);
  bool is_greedy() const { return temperature <= 0.0; }
  // temperature >= 0 (0 is the greedy limit), 0 < top_p <= 1, top_k >= 0.
  void validate() const;
  nlohmann::json to_json() const;
  static SamplingParams from_json(const nlohmann::json& j);
};

struct DecodeParams {
  SamplingParams sampling = SamplingParams::greedy(48);
  std::uint64_t seed = 0;
  // Generation stops after emitting any of these.
  std::vector<TokenId> stop_tokens{Tokenizer::kEos};
};

struct Generation {
  TokenIds ids;  // generated ids, stop token excluded
  std::string text;
  bool hit_stop = false;
  bool truncated = false;  // budget or context exhausted before a stop token
};

// Incremental decoding state. push() appends input rows (embeddings) and
// returns the next-token logits after the last row.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  virtual RowVector push(const Matrix& rows) = 0;
  virtual int length() const = 0;
};

// Interface over a frozen causal language model. Inputs are always rows in
// the embedding space; token-prefix calls go through embed() first, which is
// exactly the path a vector prefix bypasses.
class CausalLM {
 public:
  virtual ~CausalLM() = default;

  virtual const Tokenizer& tokenizer() const = 0;
  virtual int vocab_size() const = 0;
  virtual int d_model() const = 0;
  virtual int layer_count() const = 0;
  virtual int max_positions() const = 0;

  virtual Matrix embed(std::span<const TokenId> ids) const = 0;
  // Logits at every row; rows occupy positions 0..L-1.
  virtual Matrix forward_embeddings(const Matrix& inputs) const = 0;
  Matrix forward_tokens(std::span<const TokenId> ids) const { return forward_embeddings(embed(ids)); }

  // Differentiable logits w.r.t. the input rows. Decoder weights never
  // receive gradients.
  virtual nn::Var forward_differentiable(const nn::Var& inputs) const;
  virtual std::unique_ptr<DecodeSession> open_session() const;
  // Head-averaged attention probabilities per layer for a full pass.
  virtual std::vector<Matrix> attention_maps(const Matrix& inputs) const;
  // Residual stream after each layer for a full pass.
  virtual std::vector<Matrix> layer_states(const Matrix& inputs) const;
};

// The real decoder: a transformer with a tied output head. Copies share the
// (const) weights; an optional activation-noise hook lives on the handle, so
// wrapping never mutates the underlying network.
class TransformerLM : public CausalLM {
 public:
  struct NoiseHook {
    int layer = 0;
    nn::Sublayer sublayer = nn::Sublayer::kMlp;
    double stddev = 0.0;
    std::uint64_t seed = 0;
    bool reseed_each_call = false;
  };

  TransformerLM(std::shared_ptr<const nn::Transformer> net, Tokenizer tokenizer);

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  int vocab_size() const override { return net_->config().vocab_size; }
  int d_model() const override { return net_->config().d_model; }
  int layer_count() const override { return net_->config().n_layers; }
  int max_positions() const override { return net_->config().max_positions; }

  Matrix embed(std::span<const TokenId> ids) const override;
  Matrix forward_embeddings(const Matrix& inputs) const override;
  nn::Var forward_differentiable(const nn::Var& inputs) const override;
  std::unique_ptr<DecodeSession> open_session() const override;
  std::vector<Matrix> attention_maps(const Matrix& inputs) const override;
  std::vector<Matrix> layer_states(const Matrix& inputs) const override;

  const nn::Transformer& net() const { return *net_; }
  std::shared_ptr<const nn::Transformer> shared_net() const { return net_; }

  // Returns a handle sharing the weights with the noise hook installed.
  TransformerLM with_noise(const NoiseHook& hook) const;
  const std::optional<NoiseHook>& noise() const { return noise_; }

  void save(const std::filesystem::path& dir) const;
  static std::shared_ptr<TransformerLM> load(const std::filesystem::path& dir);

 private:
  friend class TransformerSession;
  struct NoiseState {
    NoiseHook hook;
    Rng rng;
  };
  // Returns the noise config for one forward call, or nullopt.
  std::optional<nn::ActivationNoise> next_noise() const;

  std::shared_ptr<const nn::Transformer> net_;
  Tokenizer tokenizer_;
  std::optional<NoiseHook> noise_;
  std::shared_ptr<NoiseState> noise_state_;
};

// Resolves a checkpoint by local directory or by registry identifier under
// $INV2A_MODEL_CACHE (default ~/.cache/inv2a/models).
std::filesystem::path resolve_checkpoint(const std::string& path_or_id);
std::shared_ptr<TransformerLM> load_causal_lm(const std::string& path_or_id);

// Bidirectional text encoder producing one hidden state per token.
class Encoder {
 public:
  Encoder(nn::Transformer net, Tokenizer tokenizer, int max_len = kDefaultMaxOutputTokens);

  int d_enc() const { return net_.config().d_model; }
  int max_len() const { return max_len_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  nn::Transformer& net() { return net_; }
  const nn::Transformer& net() const { return net_; }
  nn::ParameterSet& parameters() { return net_.parameters(); }
  const nn::ParameterSet& parameters() const { return net_.parameters(); }

  // Tokenizes with hard truncation at max_len.
  TokenIds tokenize(std::string_view text, bool* truncated = nullptr) const;
  // Hidden states [ids.size() x d_enc]. positions/mask default to 0..L-1 and
  // full bidirectional attention.
  nn::Var hidden(std::span<const TokenId> ids, const std::vector<int>* positions = nullptr,
                 const nn::AttentionMask* mask = nullptr) const;
  // Mean over token states, the pooled sentence embedding.
  nn::Var pooled(std::string_view text) const;

  Encoder clone() const;
  void save(const std::filesystem::path& dir) const;
  static Encoder load(const std::filesystem::path& dir);

 private:
  nn::Transformer net_;
  Tokenizer tokenizer_;
  int max_len_;
};

struct InitSpec {
  std::string scheme = "scaled_normal";  // std 1/sqrt(d_enc), zero bias
  std::uint64_t seed = 0;
};

// Affine map from encoder width to decoder width.
class Projection {
 public:
  Projection(int d_enc, int d_model, InitSpec init);
  Projection(Matrix weight, RowVector bias, InitSpec init = {"explicit", 0});

  int d_enc() const { return static_cast<int>(weight_.rows()); }
  int d_model() const { return static_cast<int>(weight_.cols()); }
  const InitSpec& init_spec() const { return init_; }
  const nn::Var& weight() const { return weight_; }
  const nn::Var& bias() const { return bias_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  nn::Var apply(const nn::Var& h) const;

  Projection clone() const;
  // projection.bin (tensor container) + projection.json manifest.
  void save(const std::filesystem::path& dir) const;
  static Projection load(const std::filesystem::path& dir);

 private:
  void register_parameters();
  nn::Var weight_;
  nn::Var bias_;
  InitSpec init_;
  nn::ParameterSet params_;
};

struct OutputSet {
  std::vector<std::string> outputs;

  OutputSet() = default;
  explicit OutputSet(std::vector<std::string> texts) : outputs(std::move(texts)) {}
  int size() const { return static_cast<int>(outputs.size()); }
  // Joined with single spaces, the plain-text view of the whole set.
  std::string concatenated() const;
};

struct EncodedOutput {
  nn::Var hidden;  // [l x d_enc]
  TokenIds ids;
  bool truncated = false;
};

struct SemiSparseEncoding {
  nn::Var hidden;  // [sum l_i x d_enc]
  std::vector<Segment> segments;
  std::vector<bool> truncated;
};

struct PseudoRepresentation {
  nn::Var vectors;  // [L_total x d_model]
  std::vector<Segment> segments;
  bool includes_raw_prefix = false;

  int total_length() const { return static_cast<int>(vectors.rows()); }
};

EncodedOutput encode_single(std::string_view y, const Encoder& enc);
// Encodes each output independently and stacks the states; attention never
// crosses outputs, so cost is linear in the number of outputs.
SemiSparseEncoding encode_semi_sparse(const OutputSet& outputs, const Encoder& enc);
nn::Var project(const nn::Var& h, const Projection& proj);
Matrix project(const Matrix& h, const Projection& proj);

// Decoder token ids of the concatenated outputs (each truncated at 256).
TokenIds raw_output_ids(const OutputSet& outputs, const Tokenizer& tok);

// c_segments are the per-output spans of c. With include_raw the decoder's
// own embeddings of the concatenated outputs are placed before c.
PseudoRepresentation build_pseudo_prefix(const OutputSet& outputs, const nn::Var& c,
                                         const std::vector<Segment>& c_segments, const CausalLM& lm,
                                         bool include_raw);

// Autoregressive decoding from an arbitrary row prefix.
Generation generate(const CausalLM& lm, const Matrix& prefix_rows, const DecodeParams& params);
Generation decode_prompt(const PseudoRepresentation& prefix, const CausalLM& lm, const DecodeParams& params);

// Draws the next token from logits under temperature/top-k/top-p.
TokenId sample_next(const RowVector& logits, const SamplingParams& params, Rng& rng);

// [BOS] prompt [SEP], the conditioning format for token prompts.
TokenIds prompt_ids(const Tokenizer& tok, std::string_view prompt);
// Runs the decoder on a text prompt and returns its response.
Generation respond(const CausalLM& lm, std::string_view prompt, const DecodeParams& params);

// The trainable attack artifact: encoder + projection in front of the frozen
// decoder.
struct InverseModel {
  std::shared_ptr<const CausalLM> decoder;
  std::shared_ptr<Encoder> encoder;
  std::shared_ptr<Projection> projection;
  bool include_raw = true;
  DecodeParams decode{};

  PseudoRepresentation pseudo(const OutputSet& outputs) const;
  Generation invert(const OutputSet& outputs) const;
  // Deep-copies encoder and projection; the decoder stays shared.
  InverseModel clone() const;
  void save(const std::filesystem::path& dir) const;
  static InverseModel load(const std::filesystem::path& dir, std::shared_ptr<const CausalLM> decoder);
};

}  // namespace inv2a::bridge
