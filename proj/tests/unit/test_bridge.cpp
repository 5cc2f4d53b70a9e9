#include <doctest.h>

#include "inv2a/defense.hpp"
#include "inv2a/model_bridge.hpp"
#include "support/fixtures.hpp"

#include <filesystem>

using namespace inv2a;
using namespace inv2a::bridge;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kOutputs{"the red fox runs in the night .", "why is the cat so happy ?",
                                        "once upon a time the old city sings", "a blue river"};

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("semi-sparse encoding equals one masked pass") {
  auto enc = testing::tiny_encoder();
  const OutputSet set(kOutputs);
  const auto semi = encode_semi_sparse(set, *enc);
  REQUIRE(semi.segments.size() == kOutputs.size());

  TokenIds ids;
  std::vector<int> positions;
  for (const auto& y : kOutputs) {
    const auto part = enc->tokenize(y);
    for (std::size_t i = 0; i < part.size(); ++i) positions.push_back(static_cast<int>(i));
    ids.insert(ids.end(), part.begin(), part.end());
  }
  const auto mask = nn::AttentionMask::block_diagonal(semi.segments, static_cast<int>(ids.size()));
  const auto joint = enc->hidden(ids, &positions, &mask);
  CHECK(max_abs_diff(semi.hidden.value(), joint.value()) < 1e-12);

  // Each block matches its own independent encoding.
  const auto single = encode_single(kOutputs[1], *enc);
  const auto [b, e] = semi.segments[1];
  CHECK(max_abs_diff(semi.hidden.value().middleRows(b, e - b), single.hidden.value()) < 1e-12);
}

TEST_CASE("empty outputs are rejected") {
  auto enc = testing::tiny_encoder();
  CHECK_THROWS_AS(encode_single("", *enc), EmptyInput);
  CHECK_THROWS_AS(encode_semi_sparse(OutputSet({"the fox", "   "}), *enc), EmptyInput);
  CHECK_THROWS_AS(encode_semi_sparse(OutputSet{}, *enc), EmptyInput);
}

TEST_CASE("a vector prefix of token embeddings reproduces token logits") {
  auto lm = testing::tiny_lm();
  const TokenIds ids = lm->tokenizer().encode("describe the red fox in the rain");
  const Matrix by_tokens = lm->forward_tokens(ids);
  const Matrix by_rows = lm->forward_embeddings(lm->embed(ids));
  CHECK(max_abs_diff(by_tokens, by_rows) == 0.0);
}

TEST_CASE("incremental decoding matches a full pass") {
  auto lm = testing::tiny_lm();
  const TokenIds ids = lm->tokenizer().encode("the red fox runs in the night");
  const Matrix full = lm->forward_tokens(ids);
  auto session = lm->open_session();
  RowVector last = session->push(lm->embed(std::span(ids).first(3)));
  CHECK(max_abs_diff(last, full.row(2)) < 1e-10);
  for (std::size_t i = 3; i < ids.size(); ++i) {
    last = session->push(lm->embed(std::span(ids).subspan(i, 1)));
    CHECK(max_abs_diff(last, full.row(static_cast<Eigen::Index>(i))) < 1e-10);
  }
}

TEST_CASE("pseudo prefix layout with and without raw outputs") {
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  const OutputSet set({kOutputs[0], kOutputs[3]});
  inv.include_raw = false;
  const auto plain = inv.pseudo(set);
  const int l0 = static_cast<int>(lm->tokenizer().encode(kOutputs[0]).size());
  const int l1 = static_cast<int>(lm->tokenizer().encode(kOutputs[3]).size());
  CHECK(plain.total_length() == l0 + l1);
  CHECK(plain.vectors.cols() == lm->d_model());

  inv.include_raw = true;
  const auto raw = inv.pseudo(set);
  CHECK(raw.includes_raw_prefix);
  CHECK(raw.total_length() == 2 * (l0 + l1));
  const Matrix expected_raw = lm->embed(raw_output_ids(set, lm->tokenizer()));
  CHECK(max_abs_diff(raw.vectors.value().topRows(l0 + l1), expected_raw) == 0.0);
  CHECK(max_abs_diff(raw.vectors.value().bottomRows(l0 + l1), plain.vectors.value()) == 0.0);
}

TEST_CASE("projection width mismatch is a dimension error") {
  auto lm = testing::tiny_lm();
  auto enc = testing::tiny_encoder();
  Projection wrong(enc->d_enc(), lm->d_model() + 1, {"scaled_normal", 1});
  const auto semi = encode_semi_sparse(OutputSet({"the fox"}), *enc);
  CHECK_THROWS_AS(build_pseudo_prefix(OutputSet({"the fox"}), wrong.apply(semi.hidden), semi.segments, *lm, false),
                  DimensionError);
}

TEST_CASE("greedy decoding is deterministic and sampling is seed-determined") {
  auto lm = testing::tiny_lm();
  DecodeParams greedy;
  greedy.sampling = SamplingParams::greedy(10);
  const auto a = respond(*lm, "describe the fox", greedy);
  const auto b = respond(*lm, "describe the fox", greedy);
  CHECK(a.ids == b.ids);

  DecodeParams sample;
  sample.sampling = SamplingParams{};
  sample.sampling.max_new_tokens = 10;
  sample.seed = 5;
  const auto s1 = respond(*lm, "describe the fox", sample);
  const auto s2 = respond(*lm, "describe the fox", sample);
  CHECK(s1.ids == s2.ids);
}

TEST_CASE("sampling params are validated") {
  SamplingParams p;
  p.top_p = 0.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = SamplingParams{};
  p.temperature = -1.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  CHECK(SamplingParams::greedy(3).is_greedy());
}

TEST_CASE("top-k 1 sampling equals greedy") {
  Rng rng(3);
  RowVector logits(5);
  logits << 0.1, 2.0, -1.0, 1.9, 0.0;
  SamplingParams p;
  p.top_k = 1;
  for (int i = 0; i < 20; ++i) CHECK(sample_next(logits, p, rng) == 1);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const fs::path dir = fs::temp_directory_path() / "inv2a_bridge_ckpt";
  fs::remove_all(dir);
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  inv.save(dir / "inverse");
  lm->save(dir / "lm");
  auto lm2 = TransformerLM::load(dir / "lm");
  auto inv2 = InverseModel::load(dir / "inverse", lm2);
  const OutputSet set({kOutputs[0]});
  CHECK(max_abs_diff(inv.pseudo(set).vectors.value(), inv2.pseudo(set).vectors.value()) == 0.0);
  CHECK(inv.invert(set).ids == inv2.invert(set).ids);
  CHECK(inv2.include_raw == inv.include_raw);
  fs::remove_all(dir);
}

TEST_CASE("missing checkpoints raise ModelNotFound") {
  CHECK_THROWS_AS(load_causal_lm("/nonexistent/inv2a/model"), ModelNotFound);
}

TEST_CASE("the noise hook leaves the source handle untouched") {
  auto lm = testing::tiny_lm();
  const TokenIds ids = lm->tokenizer().encode("the red fox runs");
  const Matrix clean = lm->forward_tokens(ids);
  defense::NoiseSpec spec;
  spec.stddev = 0.5;
  spec.seed = 4;
  auto noisy = defense::inject_noise(*lm, spec);
  CHECK(max_abs_diff(noisy->forward_tokens(ids), clean) > 1e-6);
  CHECK(max_abs_diff(lm->forward_tokens(ids), clean) == 0.0);

  spec.stddev = 0.0;
  auto zero = defense::inject_noise(*lm, spec);
  CHECK(max_abs_diff(zero->forward_tokens(ids), clean) == 0.0);
}
