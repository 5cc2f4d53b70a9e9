#include <doctest.h>

#include "inv2a/training.hpp"
#include "support/fixtures.hpp"

#include <cmath>
#include <filesystem>

using namespace inv2a;
using namespace inv2a::training;
namespace fs = std::filesystem;

namespace {

// Brute force: mean over positives of -log(exp(s_p/t) / sum_all exp(s/t)).
double brute_infonce(const RowVector& a, const std::vector<RowVector>& pos, const std::vector<RowVector>& neg,
                     double t) {
  double total = 0.0;
  for (const auto& p : pos) {
    double denom = 0.0;
    for (const auto& c : pos) denom += std::exp(a.dot(c) / t);
    for (const auto& c : neg) denom += std::exp(a.dot(c) / t);
    total += -std::log(std::exp(a.dot(p) / t) / denom);
  }
  return total / static_cast<double>(pos.size());
}

RowVector rand_row(int d, Rng& rng, double s) {
  RowVector v(d);
  for (int i = 0; i < d; ++i) v(i) = s * standard_normal(rng);
  return v;
}

SampledCorpus toy_corpus() {
  SampledCorpus c;
  c.records = {
      {"a", "describe the red fox", {"the red fox runs", "a red fox sings", "the fox runs in the rain"}, {1, 2, 3}},
      {"b", "write a poem about the city", {"once upon a time the city", "the old city sings"}, {4, 5}},
      {"c", "why is the cat happy", {"why is the cat so happy ?", "the cat is happy ."}, {6, 7}},
      {"d", "describe the river", {"a blue river", "the river runs in the night"}, {8, 9}},
      {"e", "describe the castle", {"the green castle", "an old castle of the night"}, {10, 11}},
  };
  return c;
}

}  // namespace

TEST_CASE("infonce closed forms") {
  RowVector a(2), p(2), n(2);
  a << 1.0, 0.0;
  p << 0.0, 1.0;
  n << 0.0, -1.0;
  // Equal similarities: -log(1/2).
  CHECK(infonce_loss(a, {p}, {n}, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // s_pos = 1, s_neg = 0, t = 1: log(1 + e^-1).
  RowVector p2(2);
  p2 << 1.0, 0.0;
  CHECK(infonce_loss(a, {p2}, {p}, 1.0) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("infonce matches the double loop on random batches") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const int np = 1 + static_cast<int>(rng() % 8), nn = 1 + static_cast<int>(rng() % 64);
    const RowVector a = rand_row(6, rng, 0.3);
    std::vector<RowVector> pos, neg;
    for (int i = 0; i < np; ++i) pos.push_back(rand_row(6, rng, 0.3));
    for (int i = 0; i < nn; ++i) neg.push_back(rand_row(6, rng, 0.3));
    CHECK(std::abs(infonce_loss(a, pos, neg, 0.07) - brute_infonce(a, pos, neg, 0.07)) < 1e-9);
  }
}

TEST_CASE("infonce argument errors") {
  RowVector a = RowVector::Zero(3);
  CHECK_THROWS_AS(infonce_loss(a, {}, {a}, 0.07), InvalidBatch);
  CHECK_THROWS_AS(infonce_loss(a, {RowVector::Zero(2)}, {}, 0.07), DimensionError);
}

TEST_CASE("contrastive batches keep sources apart") {
  const auto corpus = toy_corpus();
  TrainConfig cfg = TrainConfig::alignment_defaults();
  cfg.n_pos = 2;
  cfg.n_neg = 4;
  Rng rng(1);
  const auto batches = build_contrastive_batches(corpus, cfg, rng);
  CHECK(batches.size() == corpus.output_count());
  for (const auto& b : batches) {
    const SampleRecord* own = nullptr;
    for (const auto& r : corpus.records) {
      if (std::find(r.outputs.begin(), r.outputs.end(), b.anchor) != r.outputs.end()) own = &r;
    }
    REQUIRE(own != nullptr);
    CHECK(!b.positives.empty());
    CHECK(static_cast<int>(b.negatives.size()) == cfg.n_neg);
    for (const auto& p : b.positives) {
      CHECK(p != b.anchor);
      CHECK(std::find(own->outputs.begin(), own->outputs.end(), p) != own->outputs.end());
    }
    for (const auto& n : b.negatives) CHECK(std::find(own->outputs.begin(), own->outputs.end(), n) == own->outputs.end());
  }
}

TEST_CASE("contrastive batches need two sources") {
  SampledCorpus c;
  c.records = {{"a", "x", {"the fox", "a fox"}, {1, 2}}};
  Rng rng(1);
  CHECK_THROWS_AS(build_contrastive_batches(c, TrainConfig::alignment_defaults(), rng), InvalidCorpus);
}

TEST_CASE("alignment touches only the encoder") {
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  const auto proj_before = inv.projection->parameters().snapshot();
  const auto enc_before = inv.encoder->parameters().snapshot();
  const auto dec_before = lm->net().parameters().snapshot();
  TrainConfig cfg = TrainConfig::alignment_defaults();
  cfg.lr = 1e-3;
  cfg.epochs = 2;
  cfg.n_neg = 4;
  cfg.batch_size = 4;
  const auto rep = align_encoder(toy_corpus(), *inv.encoder, cfg);
  CHECK(rep.steps > 0);
  CHECK(inv.projection->parameters().bit_identical(proj_before));
  CHECK_FALSE(inv.encoder->parameters().bit_identical(enc_before));
  CHECK(lm->net().parameters().bit_identical(dec_before));
}

TEST_CASE("alignment with zero epochs is a no-op") {
  auto enc = testing::tiny_encoder();
  const auto before = enc->parameters().snapshot();
  TrainConfig cfg = TrainConfig::alignment_defaults();
  cfg.epochs = 0;
  align_encoder(toy_corpus(), *enc, cfg);
  CHECK(enc->parameters().bit_identical(before));
}

TEST_CASE("warm-up freezes the encoder, joint moves both, decoder never moves") {
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  const auto corpus = toy_corpus();
  const auto dec_before = lm->net().parameters().snapshot();
  const auto enc_before = inv.encoder->parameters().snapshot();
  const auto proj_before = inv.projection->parameters().snapshot();
  TrainConfig w = TrainConfig::warmup_defaults(), j = TrainConfig::joint_defaults();
  w.lr = j.lr = 1e-3;
  w.batch_size = j.batch_size = 2;
  const auto split = split_by_source(corpus, 0.2, 3);
  train_stage(make_examples(split.warmup, 1), inv, w, false);
  CHECK(inv.encoder->parameters().bit_identical(enc_before));
  CHECK_FALSE(inv.projection->parameters().bit_identical(proj_before));
  const auto proj_mid = inv.projection->parameters().snapshot();
  train_stage(make_examples(split.joint, 1), inv, j, true);
  CHECK_FALSE(inv.encoder->parameters().bit_identical(enc_before));
  CHECK_FALSE(inv.projection->parameters().bit_identical(proj_mid));
  CHECK(lm->net().parameters().bit_identical(dec_before));
}

TEST_CASE("inversion loss gradient matches finite differences") {
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  const bridge::OutputSet y({"the red fox runs"});
  const std::string x = "describe the fox";
  inv.projection->parameters().set_requires_grad(true);
  nn::Var w = inv.projection->weight();
  auto loss = [&] { return inversion_loss(inv.pseudo(y), x, *lm); };
  inv.projection->parameters().zero_grad();
  nn::backward(loss());
  const Matrix analytic = w.grad();
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < w.value().size(); i += 7) {
    const double orig = w.value().data()[i];
    w.mutable_value().data()[i] = orig + h;
    const double up = loss().item();
    w.mutable_value().data()[i] = orig - h;
    const double down = loss().item();
    w.mutable_value().data()[i] = orig;
    const double num = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(num - analytic.data()[i]) / std::max(1e-8, std::abs(num) + std::abs(analytic.data()[i])));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("inversion loss argument errors") {
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  const auto prefix = inv.pseudo(bridge::OutputSet({"the fox"}));
  CHECK_THROWS_AS(inversion_loss(prefix, "", *lm), EmptyInput);
  std::string long_x;
  for (int i = 0; i < 80; ++i) long_x += "fox ";
  CHECK_THROWS_AS(inversion_loss(prefix, long_x, *lm), DimensionError);
}

TEST_CASE("source split is deterministic, disjoint and 20/80") {
  SampledCorpus c;
  for (int i = 0; i < 10; ++i) c.records.push_back({"s" + std::to_string(i), "prompt " + std::to_string(i), {"o"}, {0}});
  const auto a = split_by_source(c, 0.2, 9);
  const auto b = split_by_source(c, 0.2, 9);
  CHECK(a.warmup.records.size() == 2);
  CHECK(a.joint.records.size() == 8);
  CHECK(corpus_hash(a.warmup) == corpus_hash(b.warmup));
  CHECK_NOTHROW(check_disjoint(a.warmup, a.joint));
  CHECK_THROWS_AS(check_disjoint(a.warmup, a.warmup), SplitError);
}

TEST_CASE("corpus jsonl round trip") {
  const fs::path p = fs::temp_directory_path() / "inv2a_corpus_rt.jsonl";
  auto c = toy_corpus();
  c.skipped = 1;
  c.save_jsonl(p, {{"config_hash", "abc"}});
  const auto d = SampledCorpus::load_jsonl(p);
  CHECK(corpus_hash(c) == corpus_hash(d));
  CHECK(d.skipped == 1);
  REQUIRE(d.records.size() == c.records.size());
  CHECK(d.records[0].seeds == c.records[0].seeds);
  fs::remove(p);
}

TEST_CASE("sampling k outputs per prompt with recorded seeds") {
  auto lm = testing::tiny_lm();
  bridge::SamplingParams sp;
  sp.max_new_tokens = 6;
  const std::vector<PromptInput> prompts{{"p0", "describe the fox"}, {"p1", "write a poem about the city"}};
  const auto a = sample_output_sets(prompts, *lm, sp, 3, 17);
  const auto b = sample_output_sets(prompts, *lm, sp, 3, 17);
  CHECK(corpus_hash(a) == corpus_hash(b));
  for (const auto& r : a.records) {
    CHECK(r.outputs.size() == 3);
    CHECK(r.seeds.size() == 3);
  }
}

TEST_CASE("train config json round trip and validation") {
  TrainConfig c = TrainConfig::joint_defaults();
  c.epochs = 3;
  c.lr_schedule = "constant";
  const auto d = TrainConfig::from_json(c.to_json());
  CHECK(d.to_json() == c.to_json());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(TrainConfig::alignment_defaults().lr == doctest::Approx(1e-5));
  CHECK(TrainConfig::warmup_defaults().lr == doctest::Approx(2e-4));
  CHECK(TrainConfig::alignment_defaults().batch_size == 32);
  CHECK(TrainConfig::joint_defaults().batch_size == 16);
}
