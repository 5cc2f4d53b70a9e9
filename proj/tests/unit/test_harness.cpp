#include <doctest.h>

#include "inv2a/harness.hpp"
#include "support/fixtures.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace inv2a;
using namespace inv2a::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("inv2a_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << "\n";
}

std::string catch_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

const std::vector<std::string> kPrompts{"describe the red fox", "write a poem about the city", "why is the cat happy",
                                        "describe the blue river", "draw the old castle", "describe the green city"};

// Tiny checkpoints and datasets for end-to-end runs.
ExperimentConfig tiny_experiment(const fs::path& dir) {
  testing::tiny_lm()->save(dir / "decoder");
  testing::tiny_encoder()->save(dir / "encoder");
  std::vector<std::string> train, test;
  for (std::size_t i = 0; i < kPrompts.size(); ++i) {
    const json j{{"id", "p" + std::to_string(i)}, {"prompt", kPrompts[i]}};
    (i < 4 ? train : test).push_back(j.dump());
  }
  write_lines(dir / "train.jsonl", train);
  write_lines(dir / "test.jsonl", test);

  ExperimentConfig c;
  c.decoder = (dir / "decoder").string();
  c.encoder = (dir / "encoder").string();
  c.train_dataset = (dir / "train.jsonl").string();
  c.test_dataset = (dir / "test.jsonl").string();
  c.sampling.max_new_tokens = 6;
  c.k_train = 2;
  for (auto* t : {&c.align, &c.warmup, &c.joint}) {
    t->epochs = 1;
    t->batch_size = 2;
    t->n_neg = 2;
  }
  c.filter.rounds = 1;
  c.filter.neighbors = 2;
  c.filter.beam = 1;
  c.filter.rewrite_sampling.max_new_tokens = 6;
  c.diagnostics.probes = {"entropy", "roundtrip"};
  c.defense.enabled = true;
  c.defense.prompts = 2;
  c.defense.lambdas = {0.0, 0.1};
  c.output_dir = (dir / "run").string();
  c.seed = 3;
  return c;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(INV2A_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("ingest a small dataset") {
  const auto d = fresh_dir("ingest");
  write_lines(d / "u.jsonl", {R"({"id": "a", "prompt": "describe the fox"})", "",
                              R"({"id": "b", "prompt": "why", "outputs": ["because"]})",
                              R"({"id": "c", "prompt": "draw the city"})"});
  const auto recs = ingest_dataset(d / "u.jsonl", Scenario::kUser);
  REQUIRE(recs.size() == 3);
  CHECK(recs[1].outputs == std::vector<std::string>{"because"});

  emit_dataset(d / "copy.jsonl", recs);
  auto copy = ingest_dataset(d / "copy.jsonl", Scenario::kUser);
  REQUIRE(copy.size() == recs.size());
  for (std::size_t i = 0; i < copy.size(); ++i) {
    CHECK(copy[i].provenance.dataset != recs[i].provenance.dataset);
    copy[i].provenance.dataset = recs[i].provenance.dataset;
  }
  CHECK(copy == recs);
}

TEST_CASE("ingest errors name the line") {
  const auto d = fresh_dir("ingest_err");
  write_lines(d / "bad.jsonl", {R"({"id": "a", "prompt": "x"})", R"({"id": "b"})"});
  const auto msg = catch_message([&] { ingest_dataset(d / "bad.jsonl", Scenario::kUser); });
  CHECK(msg.find(":2:") != std::string::npos);
  CHECK(msg.find("prompt") != std::string::npos);

  write_lines(d / "dup.jsonl", {R"({"id": "a", "prompt": "x"})", R"({"id": "a", "prompt": "y"})"});
  CHECK_THROWS_AS(ingest_dataset(d / "dup.jsonl", Scenario::kUser), ValidationError);
  write_lines(d / "junk.jsonl", {"{not json"});
  CHECK_THROWS_AS(ingest_dataset(d / "junk.jsonl", Scenario::kUser), ValidationError);
  write_lines(d / "sys.jsonl", {R"({"id": "a", "prompt": "x"})"});
  CHECK_THROWS_AS(ingest_dataset(d / "sys.jsonl", Scenario::kSystem), ValidationError);
  write_lines(d / "sys2.jsonl", {R"({"id": "a", "prompt": "x", "queries": ["q1", "q2"], "outputs": ["o"]})"});
  CHECK_THROWS_AS(ingest_dataset(d / "sys2.jsonl", Scenario::kSystem), ValidationError);
}

TEST_CASE("train and test ids must be disjoint") {
  PromptRecord a{"x", "p", Scenario::kUser, {}, {}, {}};
  PromptRecord b{"y", "q", Scenario::kUser, {}, {}, {}};
  CHECK_NOTHROW(check_disjoint_ids({a}, {b}));
  CHECK_THROWS_AS(check_disjoint_ids({a, b}, {b}), SplitError);
}

TEST_CASE("attack corpora are deterministic") {
  auto lm = testing::tiny_lm();
  std::vector<PromptRecord> recs;
  for (std::size_t i = 0; i < 3; ++i) recs.push_back({"p" + std::to_string(i), kPrompts[i], Scenario::kUser, {}, {}, {}});
  CorpusParams params;
  params.sampling.max_new_tokens = 6;
  params.k_train = 3;
  params.seed = 5;
  const auto a = build_attack_corpus(recs, *lm, Scenario::kUser, params);
  const auto b = build_attack_corpus(recs, *lm, Scenario::kUser, params);
  CHECK(training::corpus_hash(a.corpus) == training::corpus_hash(b.corpus));
  for (const auto& r : a.corpus.records) CHECK(r.outputs.size() == 3);
  params.split = Split::kTest;
  for (const auto& r : build_attack_corpus(recs, *lm, Scenario::kUser, params).corpus.records) CHECK(r.outputs.size() == 1);
}

TEST_CASE("system scenario gives one output per query") {
  auto lm = testing::tiny_lm();
  PromptRecord r{"s", "you are a poem writer", Scenario::kSystem, {}, {}, {}};
  for (int i = 0; i < 8; ++i) r.queries.push_back("describe the fox " + std::to_string(i));
  CorpusParams params;
  params.sampling.max_new_tokens = 4;
  const auto c = build_attack_corpus({r}, *lm, Scenario::kSystem, params);
  REQUIRE(c.corpus.records.size() == 1);
  CHECK(c.corpus.records[0].outputs.size() == 8);
}

TEST_CASE("config hash ignores the output directory") {
  const auto d = fresh_dir("cfg_hash");
  auto c = tiny_experiment(d);
  const auto h = c.hash();
  c.output_dir = "/elsewhere";
  CHECK(c.hash() == h);
  c.seed = 4;
  CHECK(c.hash() != h);
  CHECK(ExperimentConfig::from_json(c.to_json()).hash() == c.hash());
  json bad = c.to_json();
  bad["scenario"] = "admin";
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ValidationError);
  bad = c.to_json();
  bad["diagnostics"]["probes"] = {"entropy", "psychic"};
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ValidationError);
}

TEST_CASE("stage plan follows the method") {
  const auto d = fresh_dir("plan");
  auto c = tiny_experiment(d);
  RunOptions dry;
  dry.dry_run = true;
  auto sum = run_experiment(c, dry);
  CHECK(sum.plan.size() == stage_order().size());
  for (const auto& it : sum.plan) {
    CHECK(it.enabled);
    CHECK_FALSE(it.done);
  }
  CHECK(sum.executed.empty());
  CHECK_FALSE(fs::exists(c.output_dir));

  c.method = AttackMethod::kNaive;
  for (const auto& it : stage_plan(c, {})) {
    const bool inverse_only = it.stage == "align" || it.stage == "invert" || it.stage == "refine" || it.stage == "defend";
    CHECK(it.enabled == !inverse_only);
  }
  RunOptions until;
  until.until = "attack";
  CHECK(stage_plan(c, until).back().stage == "attack");
  until.until = "bogus";
  CHECK_THROWS_AS(stage_plan(c, until), ValidationError);
}

TEST_CASE("pipeline runs end to end and resumes") {
  const auto d = fresh_dir("pipeline");
  auto c = tiny_experiment(d);
  const auto first = run_experiment(c);
  CHECK(first.executed == stage_order());
  const fs::path out = c.output_dir;
  for (const char* f : {"corpus_train.jsonl", "corpus_test.jsonl", "corpus_align.jsonl", "attack.jsonl", "refine.jsonl", "metrics.json",
                        "rows.csv", "diagnostics.json", "defense.json", "defense.csv", "config.json"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  std::ifstream m(out / "metrics.json");
  const json metrics = json::parse(m);
  CHECK(metrics.at("config_hash") == c.hash());
  CHECK(metrics.at("seed") == c.seed);

  const auto second = run_experiment(c);
  CHECK(second.executed.empty());
  CHECK(second.skipped == stage_order());

  // A touched but identical artifact keeps its marker; a changed one reruns
  // the stage and everything after it.
  const auto attack = out / "attack.jsonl";
  fs::last_write_time(attack, fs::last_write_time(attack) + std::chrono::seconds(5));
  CHECK(run_experiment(c).executed.empty());
  std::ofstream(attack, std::ios::app) << "\n";
  const auto third = run_experiment(c);
  REQUIRE_FALSE(third.executed.empty());
  CHECK(third.executed.front() == "attack");
  CHECK(third.executed.back() == "defend");

  c.align_disjoint = false;
  c.output_dir = (d / "shared").string();
  RunOptions until;
  until.until = "align";
  run_experiment(c, until);
  CHECK_FALSE(fs::exists(d / "shared" / "corpus_align.jsonl"));
  CHECK(fs::exists(d / "shared" / "encoder_aligned"));
}

TEST_CASE("failed stages leave a failed marker") {
  const auto d = fresh_dir("failed");
  auto c = tiny_experiment(d);
  c.method = AttackMethod::kNaive;
  fs::remove(c.test_dataset);
  CHECK_THROWS_AS(run_experiment(c), ValidationError);
  std::ifstream in(fs::path(c.output_dir) / "stages" / "sample.json");
  REQUIRE(in);
  CHECK(json::parse(in).at("status") == "failed");

  auto broken = tiny_experiment(fresh_dir("failed2"));
  broken.decoder = (d / "no_such_model").string();
  CHECK_THROWS_AS(run_experiment(broken), StageError);
}

TEST_CASE("cli exit codes") {
  const auto d = fresh_dir("cli");
  auto c = tiny_experiment(d);
  c.method = AttackMethod::kNaive;
  c.diagnostics.enabled = false;
  {
    std::ofstream(d / "ok.json") << c.to_json().dump(2);
  }
  CHECK(run_cli("run --config " + (d / "ok.json").string()) == 0);
  CHECK(run_cli("run --config " + (d / "missing.json").string()) == 2);
  {
    std::ofstream(d / "bad.json") << R"({"decoder": "x", "method": "telepathy"})";
  }
  CHECK(run_cli("run --config " + (d / "bad.json").string()) == 2);
  CHECK(run_cli("frobnicate") == 2);
  c.decoder = (d / "gone").string();
  c.output_dir = (d / "run2").string();
  {
    std::ofstream(d / "gone.json") << c.to_json().dump(2);
  }
  CHECK(run_cli("run --config " + (d / "gone.json").string()) == 3);
}
