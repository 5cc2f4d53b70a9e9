#include <doctest.h>

#include "inv2a/defense.hpp"
#include "support/fixtures.hpp"

#include <filesystem>
#include <fstream>

using namespace inv2a;
using namespace inv2a::defense;

namespace {

const std::string kSentence = "Once upon a time a small red fox, quiet and happy, ran to the old city.";

PerturbSpec spec(PerturbKind k, double rate, std::uint64_t seed) {
  PerturbSpec s;
  s.kind = k;
  s.rate = rate;
  s.seed = seed;
  return s;
}

int differing_words(const std::string& a, const std::string& b) {
  const auto wa = perturbable_words(a), wb = perturbable_words(b);
  REQUIRE(wa.size() == wb.size());
  int n = 0;
  for (std::size_t i = 0; i < wa.size(); ++i) n += wa[i] != wb[i];
  return n;
}

}  // namespace

TEST_CASE("word positions") {
  CHECK(perturbable_words("the fox, again!") == std::vector<std::string>{"the", "fox", "again"});
  CHECK(perturbable_words("it's") == std::vector<std::string>{"it's"});
}

TEST_CASE("perturbations change round(rate * W) words") {
  const auto lex = Lexicon::bundled();
  const int w = static_cast<int>(perturbable_words(kSentence).size());
  for (auto kind : {PerturbKind::kRandomSwap, PerturbKind::kRandomNoise}) {
    for (double rate : {0.1, 0.25, 0.5}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto r = perturb_output_detail(kSentence, spec(kind, rate, seed), lex);
        const int target = static_cast<int>(std::lround(rate * w));
        CHECK(r.target == target);
        CHECK(r.changed == differing_words(kSentence, r.text));
        if (r.flags.empty()) CHECK(r.changed == target);
      }
    }
  }
}

TEST_CASE("synonym replacement stays inside the lexicon") {
  const Lexicon lex({{"red", "crimson"}, {"quiet", "silent"}, {"happy", "glad"}});
  const auto r = perturb_output_detail(kSentence, spec(PerturbKind::kSynonymReplacement, 0.2, 3), lex);
  CHECK(r.target == 3);
  CHECK(r.changed == 3);
  CHECK(r.flags.empty());
  CHECK(r.text.find("crimson") != std::string::npos);

  // Only three positions have synonyms; asking for more flags exhaustion.
  const auto more = perturb_output_detail(kSentence, spec(PerturbKind::kSynonymReplacement, 0.5, 3), lex);
  CHECK(more.changed == 3);
  CHECK(more.flags == std::vector<std::string>{"synonyms_exhausted"});
}

TEST_CASE("perturbations keep punctuation and spacing") {
  const auto r = perturb_output_detail(kSentence, spec(PerturbKind::kRandomSwap, 0.5, 1), Lexicon::bundled());
  std::string a, b;
  for (char c : kSentence) {
    if (!std::isalnum(static_cast<unsigned char>(c))) a += c;
  }
  for (char c : r.text) {
    if (!std::isalnum(static_cast<unsigned char>(c))) b += c;
  }
  CHECK(a == b);
}

TEST_CASE("swap edge cases and zero rate") {
  const auto lex = Lexicon::bundled();
  const auto one = perturb_output_detail("fox", spec(PerturbKind::kRandomSwap, 1.0, 0), lex);
  CHECK(one.text == "fox");
  CHECK(one.flags == std::vector<std::string>{"too_few_words_to_swap"});
  const auto raised = perturb_output_detail("the red fox runs", spec(PerturbKind::kRandomSwap, 0.25, 2), lex);
  CHECK(raised.changed == 2);
  CHECK(raised.flags == std::vector<std::string>{"swap_count_raised_to_2"});
  CHECK(perturb_output(kSentence, spec(PerturbKind::kRandomNoise, 0.0, 0), lex) == kSentence);
  CHECK_THROWS_AS(perturb_output("...", spec(PerturbKind::kRandomNoise, 0.5, 0), lex), EmptyInput);
  CHECK_THROWS_AS(perturb_output(kSentence, spec(PerturbKind::kRandomNoise, 1.5, 0), lex), ValidationError);
}

TEST_CASE("perturbations are seed-determined") {
  const auto lex = Lexicon::bundled();
  const auto s = spec(PerturbKind::kRandomNoise, 0.3, 77);
  CHECK(perturb_output(kSentence, s, lex) == perturb_output(kSentence, s, lex));
}

TEST_CASE("lexicon files") {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "inv2a_lexicon.txt";
  {
    std::ofstream out(p);
    out << "# comment\nred crimson scarlet\n\nsmall tiny\n";
  }
  const auto lex = Lexicon::load(p);
  CHECK(lex.group_count() == 2);
  CHECK(lex.synonyms("red") == std::vector<std::string>{"crimson", "scarlet"});
  CHECK(lex.synonyms("Tiny") == std::vector<std::string>{"small"});
  CHECK(lex.synonyms("fox").empty());
  fs::remove(p);
  CHECK(Lexicon::bundled().group_count() > 10);
}

TEST_CASE("names parse or raise") {
  CHECK(parse_sublayer("mlp") == nn::Sublayer::kMlp);
  CHECK(parse_sublayer("attention") == nn::Sublayer::kAttention);
  CHECK_THROWS_AS(parse_sublayer("ffn"), SpecError);
  CHECK(parse_perturb_kind(perturb_kind_name(PerturbKind::kRandomSwap)) == PerturbKind::kRandomSwap);
  CHECK_THROWS_AS(parse_perturb_kind("shuffle"), SpecError);
}

TEST_CASE("pinned noise repeats and free noise does not") {
  auto lm = testing::tiny_lm();
  const TokenIds ids = lm->tokenizer().encode("the red fox");
  NoiseSpec s;
  s.stddev = 0.3;
  s.sublayer = nn::Sublayer::kAttention;
  s.layer = 1;
  s.pinned = true;
  auto pinned = inject_noise(*lm, s);
  CHECK((pinned->forward_tokens(ids) - pinned->forward_tokens(ids)).cwiseAbs().maxCoeff() == 0.0);
  s.pinned = false;
  auto free = inject_noise(*lm, s);
  CHECK((free->forward_tokens(ids) - free->forward_tokens(ids)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("trade-off table at zero noise") {
  auto lm = testing::tiny_lm();
  auto inv = testing::tiny_inverse(lm);
  NoiseSpec base;
  base.seed = 1;
  const auto t = defense_tradeoff({"describe the fox", "why is the cat happy"}, *lm, inv, {0.0, 0.5}, base, 6);
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0].lambda == 0.0);
  CHECK(t.rows[0].forward_bleu == doctest::Approx(100.0));
  CHECK(t.rows[0].forward_drop == doctest::Approx(0.0));
  CHECK(t.rows[0].inversion_bleu == doctest::Approx(t.clean_inversion_bleu));
  CHECK(t.to_json()["rows"].size() == 2);
}
