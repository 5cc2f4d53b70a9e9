#include <doctest.h>

#include "inv2a/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

using namespace inv2a;
using namespace inv2a::metrics;

TEST_CASE("metric tokens split punctuation") {
  const auto t = metric_tokens("Why is the cat, so happy?", false);
  CHECK(t == std::vector<std::string>{"Why", "is", "the", "cat", ",", "so", "happy", "?"});
  CHECK(metric_tokens("ABC def", true) == std::vector<std::string>{"abc", "def"});
}

TEST_CASE("bleu n-gram count fixtures") {
  // 1..4-gram matches 5/6, 3/5, 2/4, 1/3; orders >= 2 add one to both counts.
  const double expected = 100.0 * std::pow((5.0 / 6) * (4.0 / 6) * (3.0 / 5) * (2.0 / 4), 0.25);
  CHECK(std::abs(bleu("the cat sat on the mat", "the cat sat on a mat") - expected) < 1e-6);
  // Every order matches fully; brevity penalty exp(1 - 6/3).
  CHECK(std::abs(bleu("the cat sat on the mat", "the cat sat") - 100.0 * std::exp(-1.0)) < 1e-6);
  CHECK(bleu("the cat", "dog") == 0.0);
  CHECK(bleu("the cat", "") == 0.0);
  CHECK(bleu("Red fox", "red fox") < 100.0);
}

TEST_CASE("token f1 hand count") {
  // overlap 2, |hyp| 4, |ref| 3 -> 2PR/(P+R) = 4/7
  CHECK(token_f1("the red fox", "a red fox runs") == doctest::Approx(57.142857142857).epsilon(1e-12));
  CHECK(token_f1("The Fox", "the fox") == 100.0);
  CHECK(token_f1("", "fox") == 0.0);
  const auto both = token_f1_detail("", "  ");
  CHECK(both.value == 100.0);
  CHECK(both.both_empty);
  // Multiset overlap is clipped.
  CHECK(token_f1("the the fox", "the the the") == doctest::Approx(200.0 / 3.0));
}

TEST_CASE("identities over generated strings") {
  const std::vector<std::string> words{"the", "red", "fox", "runs", ",", "Why", "?", "old", "city"};
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    std::string s;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int k = 0; k < n; ++k) s += (k ? " " : "") + words[rng() % words.size()];
    CHECK(bleu(s, s) == doctest::Approx(100.0));
    CHECK(token_f1(s, s) == 100.0);
    CHECK(exact_match(s, s) == 1);
  }
}

TEST_CASE("exact match trims only the outside") {
  CHECK(exact_match("  the fox ", "the fox") == 1);
  CHECK(exact_match("the  fox", "the fox") == 0);
  CHECK(exact_match("The fox", "the fox") == 0);
}

TEST_CASE("embedding cosine") {
  const HashedNgramEmbedder emb;
  CHECK(embedding_cosine("the red fox", "the red fox", emb).value() == doctest::Approx(100.0));
  const double near = embedding_cosine("the red fox", "the red fox runs", emb).value();
  const double far = embedding_cosine("the red fox", "why is the city", emb).value();
  CHECK(near > far);

  TableEmbedder table({{"a", RowVector::Zero(2)}});
  CHECK_FALSE(embedding_cosine("a", "a", table).has_value());
  CHECK_FALSE(embedding_cosine("a", "missing", table).has_value());
}

TEST_CASE("judge replies") {
  CHECK(parse_judge_reply("Yes.").yes);
  CHECK(parse_judge_reply("  **YES** they are").yes);
  const auto no = parse_judge_reply("no, different");
  CHECK_FALSE(no.yes);
  CHECK_FALSE(no.ambiguous);
  const auto amb = parse_judge_reply("Perhaps");
  CHECK_FALSE(amb.yes);
  CHECK(amb.ambiguous);
  CHECK(parse_judge_reply("").ambiguous);
}

TEST_CASE("judge prompt and failure accounting") {
  StubJudge stub("YES");
  const auto v = llm_judge("describe the fox", "describe a fox", stub);
  CHECK(v.yes);
  CHECK(stub.last_prompt().find("describe the fox") != std::string::npos);
  CHECK(stub.last_prompt().find("describe a fox") != std::string::npos);

  StubJudge failing(std::function<std::string(const std::string&)>(
      [](const std::string&) -> std::string { throw std::runtime_error("down"); }));
  CHECK(llm_judge("a", "b", failing).omitted);

  EvalConfig cfg = EvalConfig::from_list("bleu,judge");
  cfg.judge_client = &failing;
  const auto r = evaluate_run({{"a", "b"}, {"c", "c"}}, cfg);
  CHECK_FALSE(r.report.llm_eval.has_value());
  CHECK(r.report.flags.size() == 1);
}

TEST_CASE("evaluate_run aggregates") {
  StubJudge judge([](const std::string& p) { return p.find("Prompt B: the fox\n") != std::string::npos ? "yes" : "no"; });
  EvalConfig cfg = EvalConfig::from_list("bleu,f1,cs,exact,judge");
  cfg.judge_client = &judge;
  const auto r = evaluate_run({{"the fox", "the fox"}, {"the red fox", "a red fox runs"}}, cfg);
  CHECK(r.report.n_samples == 2);
  CHECK(r.report.exact == doctest::Approx(50.0));
  CHECK(r.report.token_f1 == doctest::Approx((100.0 + 400.0 / 7.0) / 2.0));
  REQUIRE(r.report.cos_sim.has_value());
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].bleu == doctest::Approx(100.0));
  const auto j = r.report.to_json();
  CHECK(j.contains("bleu"));
  CHECK(j.contains("exact"));
  CHECK_THROWS_AS(EvalConfig::from_list("bleu,rouge"), ValidationError);
  CHECK_THROWS_AS(evaluate_run({}, cfg), EmptyInput);
}

TEST_CASE("rows files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "inv2a_rows";
  fs::create_directories(dir);
  EvalConfig cfg;
  cfg.rows_csv = dir / "rows.csv";
  cfg.rows_jsonl = dir / "rows.jsonl";
  evaluate_run({{"the fox, again", "the \"fox\""}}, cfg);
  std::ifstream csv(dir / "rows.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header.find("reference") != std::string::npos);
  CHECK(row.find("\"the fox, again\"") != std::string::npos);
  CHECK(fs::file_size(dir / "rows.jsonl") > 0);
  fs::remove_all(dir);
}
