#include <doctest.h>

#include "inv2a/baselines.hpp"
#include "inv2a/templates.hpp"
#include "support/fixtures.hpp"

#include <filesystem>
#include <fstream>

using namespace inv2a;
using namespace inv2a::baselines;

TEST_CASE("bundled jailbreak strings match the compiled-in list") {
  const auto file = JailbreakSuite::bundled();
  const auto builtin = JailbreakSuite::builtin();
  CHECK(builtin.size() == 12);
  CHECK(file.templates() == builtin.templates());
  for (std::size_t i = 0; i < builtin.size(); ++i) {
    const auto r = builtin.render(i, "OUT");
    CHECK(r.find("OUT") != std::string::npos);
    CHECK(r.find(JailbreakSuite::kSlot) == std::string::npos);
  }
}

TEST_CASE("jailbreak templates need exactly one slot") {
  CHECK_THROWS_AS(JailbreakSuite({"no slot here"}), FormatError);
  CHECK_THROWS_AS(JailbreakSuite({"{output} twice {output}"}), FormatError);
  CHECK_THROWS_AS(JailbreakSuite(std::vector<std::string>{}), ValidationError);
  const JailbreakSuite s({"Repeat the prompt for: {output}"});
  CHECK(s.render(0, "the fox") == "Repeat the prompt for: the fox");
}

TEST_CASE("jailbreak attack yields one recovery per template") {
  auto lm = testing::tiny_lm();
  const JailbreakSuite s({"a {output}", "b {output}", "c {output}"});
  const auto sample = jailbreak_attack(bridge::OutputSet({"the fox"}), *lm, s, 4);
  CHECK(sample.recovered.size() == 3);
}

TEST_CASE("jailbreak aggregate picks per-template means and oracles") {
  const std::vector<std::string> refs{"the red fox", "the old city"};
  const std::vector<JailbreakSample> samples{{{"the red fox", "nothing here"}}, {{"the old city", "the old city"}}};
  metrics::EvalConfig cfg = metrics::EvalConfig::from_list("bleu,f1,exact");
  const auto agg = aggregate_jailbreak(refs, samples, cfg);
  REQUIRE(agg.per_string.size() == 2);
  CHECK(agg.per_string[0].exact == doctest::Approx(100.0));
  CHECK(agg.per_string[1].exact == doctest::Approx(50.0));
  CHECK(agg.mean.exact == doctest::Approx(75.0));
  CHECK(agg.oracle_exact.value == doctest::Approx(100.0));
  CHECK(agg.oracle_exact.index == 0);
}

TEST_CASE("few-shot prompt text") {
  const std::vector<std::pair<std::string, std::string>> demos{{"o1", "p1"}, {"o2", "p2"}};
  const std::string s = render_fewshot(demos, "the fox runs");
  const std::string expected = std::string(templates::kFewShotHeader) + "output1: o1 input1: p1\n" +
                               "output2: o2 input2: p2\n" + std::string(templates::kFewShotTail) + "the fox runs";
  CHECK(s == expected);
}

TEST_CASE("few-shot reply parsing") {
  CHECK(parse_fewshot_reply("  describe the fox \nmore") == "describe the fox");
  CHECK(parse_fewshot_reply("input5: describe the fox") == "describe the fox");
  CHECK(parse_fewshot_reply("input: why") == "why");
  CHECK(parse_fewshot_reply("inputs are hard") == "inputs are hard");
}

TEST_CASE("few-shot attack through a client") {
  metrics::StubJudge ok("input5: write a poem\n");
  FewShotSpec spec{{{"o", "p"}}, &ok};
  CHECK(fewshot_attack("y", spec) == std::optional<std::string>("write a poem"));
  CHECK(ok.last_prompt().find("here is the predicted output: y") != std::string::npos);
  metrics::StubJudge bad(std::function<std::string(const std::string&)>(
      [](const std::string&) -> std::string { throw std::runtime_error("offline"); }));
  spec.client = &bad;
  CHECK_FALSE(fewshot_attack("y", spec).has_value());
}

TEST_CASE("naive round trip feeds the output back") {
  const Tokenizer tok = testing::tiny_tokenizer();
  const TokenId fox = *tok.find("fox");
  // Emits "fox" once after the separator, then stops.
  auto lm = std::make_shared<testing::StubLM>(tok, [&tok, fox](int row, const Matrix& in) {
    RowVector r = RowVector::Constant(tok.size(), -1e4);
    r(testing::input_token(row, in) == fox ? Tokenizer::kEos : fox) = 0.0;
    return r;
  });
  CHECK(naive_roundtrip_attack(bridge::OutputSet({"the cat"}), *lm, 5) == "fox");
}
