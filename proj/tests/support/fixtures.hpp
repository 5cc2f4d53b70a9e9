#pragma once

// Small models and stub decoders shared by the unit and acceptance tests.

#include "inv2a/model_bridge.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace inv2a::testing {

inline std::vector<std::string> tiny_words() {
  return {"the", "a", "red", "blue", "fox", "river", "runs", "sings", "in", "night", "rain", "describe",
          "write", "poem", "about", "story", "once", "upon", "time", "why", "is", "so", "happy", "rewrite", ":",
          ".", ",", "?", "cat", "old", "new", "city", "green", "castle", "draw", "of"};
}

inline Tokenizer tiny_tokenizer() { return Tokenizer(tiny_words()); }

inline nn::TransformerConfig tiny_decoder_config(const Tokenizer& tok) {
  return nn::TransformerConfig{tok.size(), 16, 2, 2, 32, 64, true};
}

inline std::shared_ptr<bridge::TransformerLM> tiny_lm(std::uint64_t seed = 11) {
  const Tokenizer tok = tiny_tokenizer();
  auto net = std::make_shared<nn::Transformer>(tiny_decoder_config(tok), seed);
  return std::make_shared<bridge::TransformerLM>(net, tok);
}

inline std::shared_ptr<bridge::Encoder> tiny_encoder(std::uint64_t seed = 12) {
  const Tokenizer tok = tiny_tokenizer();
  nn::Transformer net(nn::TransformerConfig{tok.size(), 8, 2, 2, 16, 64, false}, seed);
  return std::make_shared<bridge::Encoder>(std::move(net), tok);
}

inline bridge::InverseModel tiny_inverse(std::shared_ptr<const bridge::CausalLM> lm, std::uint64_t seed = 13) {
  bridge::InverseModel m;
  m.decoder = std::move(lm);
  m.encoder = tiny_encoder(seed);
  m.projection = std::make_shared<bridge::Projection>(m.encoder->d_enc(), m.decoder->d_model(),
                                                      bridge::InitSpec{"scaled_normal", seed});
  m.decode.sampling = bridge::SamplingParams::greedy(8);
  return m;
}

// A decoder whose logits are a fixed function of the row index and the input
// rows; embeddings are one-hot.
class StubLM : public bridge::CausalLM {
 public:
  using LogitFn = std::function<RowVector(int row, const Matrix& inputs)>;

  StubLM(Tokenizer tok, LogitFn fn, int max_positions = 64)
      : tok_(std::move(tok)), fn_(std::move(fn)), max_positions_(max_positions) {}

  const Tokenizer& tokenizer() const override { return tok_; }
  int vocab_size() const override { return tok_.size(); }
  int d_model() const override { return tok_.size(); }
  int layer_count() const override { return 1; }
  int max_positions() const override { return max_positions_; }

  Matrix embed(std::span<const TokenId> ids) const override {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), tok_.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m(static_cast<Eigen::Index>(i), ids[i]) = 1.0;
    return m;
  }

  Matrix forward_embeddings(const Matrix& inputs) const override {
    ++calls;
    Matrix out(inputs.rows(), tok_.size());
    for (Eigen::Index r = 0; r < inputs.rows(); ++r) out.row(r) = fn_(static_cast<int>(r), inputs);
    return out;
  }

  mutable long calls = 0;

 private:
  Tokenizer tok_;
  LogitFn fn_;
  int max_positions_;
};

inline std::shared_ptr<StubLM> uniform_stub(const Tokenizer& tok) {
  const int v = tok.size();
  return std::make_shared<StubLM>(tok, [v](int, const Matrix&) { return RowVector(RowVector::Zero(v)); });
}

// Every row puts all mass on one token.
inline std::shared_ptr<StubLM> one_hot_stub(const Tokenizer& tok, TokenId token) {
  const int v = tok.size();
  return std::make_shared<StubLM>(tok, [v, token](int, const Matrix&) {
    RowVector r = RowVector::Constant(v, -1e4);
    r(token) = 0.0;
    return r;
  });
}

// Id of the token at the row, read back from the one-hot input.
inline TokenId input_token(int row, const Matrix& inputs) {
  Eigen::Index best = 0;
  inputs.row(row).maxCoeff(&best);
  return static_cast<TokenId>(best);
}

}  // namespace inv2a::testing
