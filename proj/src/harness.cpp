#include "inv2a/harness.hpp"

#include "inv2a/baselines.hpp"
#include "inv2a/diagnostics.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace inv2a::harness {

namespace fs = std::filesystem;
using nlohmann::json;

Scenario parse_scenario(const std::string& s) {
  if (s == "user") return Scenario::kUser;
  if (s == "system") return Scenario::kSystem;
  throw ValidationError("unknown scenario '" + s + "' (user|system)");
}

std::string scenario_name(Scenario s) { return s == Scenario::kUser ? "user" : "system"; }

AttackMethod parse_method(const std::string& s) {
  if (s == "inv2a" || s == "inverse") return AttackMethod::kInverse;
  if (s == "naive") return AttackMethod::kNaive;
  if (s == "jailbreak") return AttackMethod::kJailbreak;
  if (s == "fewshot" || s == "few-shot") return AttackMethod::kFewShot;
  throw ValidationError("unknown attack method '" + s + "' (inv2a|naive|jailbreak|fewshot)");
}

std::string method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::kInverse: return "inv2a";
    case AttackMethod::kNaive: return "naive";
    case AttackMethod::kJailbreak: return "jailbreak";
    case AttackMethod::kFewShot: return "fewshot";
  }
  return "inv2a";
}

// ---------------------------------------------------------------------------
// Records

json PromptRecord::to_json() const {
  json j{{"id", id}, {"prompt", prompt}};
  if (!queries.empty()) j["queries"] = queries;
  if (!outputs.empty()) j["outputs"] = outputs;
  if (!provenance.seeds.empty()) j["seeds"] = provenance.seeds;
  return j;
}

std::vector<PromptRecord> ingest_dataset(const fs::path& path, Scenario scenario) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read dataset " + path.string());
  std::vector<PromptRecord> out;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  const std::string dataset = path.stem().string();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where + "expected a JSON object");
    if (!j.contains("id")) throw ValidationError(where + "missing \"id\"");
    if (!j.contains("prompt")) throw ValidationError(where + "missing \"prompt\"");
    PromptRecord r;
    r.scenario = scenario;
    r.provenance.dataset = dataset;
    try {
      r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      r.prompt = j.at("prompt").get<std::string>();
      if (j.contains("queries")) r.queries = j.at("queries").get<std::vector<std::string>>();
      if (j.contains("outputs")) r.outputs = j.at("outputs").get<std::vector<std::string>>();
      if (j.contains("seeds")) r.provenance.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      throw ValidationError(where + "bad field type (" + e.what() + ")");
    }
    if (r.prompt.empty()) throw ValidationError(where + "empty prompt");
    if (scenario == Scenario::kSystem) {
      if (r.queries.empty()) throw ValidationError(where + "system scenario needs \"queries\"");
      if (!r.outputs.empty() && r.outputs.size() != r.queries.size()) {
        throw ValidationError(where + "outputs must match queries one to one");
      }
    }
    if (!ids.insert(r.id).second) throw ValidationError(where + "duplicate id '" + r.id + "'");
    out.push_back(std::move(r));
  }
  return out;
}

void emit_dataset(const fs::path& path, const std::vector<PromptRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& r : records) out << r.to_json().dump() << "\n";
}

void check_disjoint_ids(const std::vector<PromptRecord>& a, const std::vector<PromptRecord>& b) {
  std::set<std::string> ids;
  for (const auto& r : a) ids.insert(r.id);
  for (const auto& r : b) {
    if (ids.count(r.id)) throw SplitError("id '" + r.id + "' is in both train and test");
  }
}

// ---------------------------------------------------------------------------
// Attack corpus

AttackCorpus build_attack_corpus(const std::vector<PromptRecord>& records, const bridge::CausalLM& lm,
                                 Scenario scenario, const CorpusParams& params) {
  params.sampling.validate();
  if (params.k_train < 1) throw ValidationError("k_train must be >= 1");
  AttackCorpus res;
  auto& corpus = res.corpus;
  corpus.sampling = params.sampling;
  int truncations = 0, provided = 0;
  json skipped_ids = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const PromptRecord& rec = records[i];
    training::SampleRecord s;
    s.source_id = rec.id;
    s.prompt = rec.prompt;
    if (!rec.outputs.empty()) {
      s.outputs = rec.outputs;
      s.seeds = rec.provenance.seeds;
      ++provided;
      corpus.records.push_back(std::move(s));
      continue;
    }
    std::vector<std::string> inputs;
    if (scenario == Scenario::kSystem) {
      if (rec.queries.empty()) throw ValidationError("record " + rec.id + " has no queries");
      for (const auto& q : rec.queries) inputs.push_back(rec.prompt + " " + q);
    } else {
      const int k = params.split == Split::kTrain ? params.k_train : 1;
      inputs.assign(static_cast<std::size_t>(k), rec.prompt);
    }
    try {
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        bridge::DecodeParams dp;
        dp.sampling = params.sampling;
        dp.seed = mix_seed(mix_seed(params.seed, i), j);
        auto g = bridge::respond(lm, inputs[j], dp);
        if (g.text.empty()) throw EmptyInput("empty generation");
        truncations += g.truncated ? 1 : 0;
        s.outputs.push_back(std::move(g.text));
        s.seeds.push_back(dp.seed);
      }
    } catch (const Error& e) {
      spdlog::warn("skipping prompt {}: {}", rec.id, e.what());
      ++corpus.skipped;
      skipped_ids.push_back(rec.id);
      continue;
    }
    corpus.records.push_back(std::move(s));
  }
  if (!records.empty() && corpus.skipped * 10 > static_cast<int>(records.size())) {
    throw InvalidCorpus("more than 10% of prompts failed to generate (" + std::to_string(corpus.skipped) + "/" +
                        std::to_string(records.size()) + ")");
  }
  res.manifest = json{{"scenario", scenario_name(scenario)},
                      {"split", params.split == Split::kTrain ? "train" : "test"},
                      {"sampling", params.sampling.to_json()},
                      {"k", params.split == Split::kTrain ? params.k_train : 1},
                      {"seed", params.seed},
                      {"records", corpus.records.size()},
                      {"outputs", corpus.output_count()},
                      {"provided", provided},
                      {"truncations", truncations},
                      {"skipped", skipped_ids}};
  return res;
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (decoder.empty()) throw ValidationError("config: decoder is required");
  if (method == AttackMethod::kInverse && encoder.empty()) throw ValidationError("config: encoder is required");
  if (train_dataset.empty() && method != AttackMethod::kNaive && method != AttackMethod::kJailbreak) {
    throw ValidationError("config: train_dataset is required");
  }
  if (test_dataset.empty()) throw ValidationError("config: test_dataset is required");
  if (k_train < 1) throw ValidationError("config: k_train must be >= 1");
  if (output_dir.empty()) throw ValidationError("config: output_dir is required");
  sampling.validate();
  align.validate();
  warmup.validate();
  joint.validate();
  filter.validate();
  (void)metrics::EvalConfig::from_list(metrics);
  if (defense.enabled && defense.lambdas.empty()) throw ValidationError("config: defense.lambdas is empty");
  for (double l : defense.lambdas) {
    if (!(l >= 0.0)) throw ValidationError("config: defense lambdas must be >= 0");
  }
  for (const auto& p : diagnostics.probes) {
    if (p != "entropy" && p != "roundtrip" && p != "similarity" && p != "mi" && p != "importance") {
      throw ValidationError("config: unknown probe '" + p + "'");
    }
  }
}

json ExperimentConfig::to_json() const {
  return json{
      {"decoder", decoder},
      {"encoder", encoder},
      {"train_dataset", train_dataset},
      {"test_dataset", test_dataset},
      {"scenario", scenario_name(scenario)},
      {"sampling", sampling.to_json()},
      {"k_train", k_train},
      {"include_raw", include_raw},
      {"align_disjoint", align_disjoint},
      {"align", align.to_json()},
      {"warmup", warmup.to_json()},
      {"joint", joint.to_json()},
      {"method", method_name(method)},
      {"refine", refine},
      {"filter", filter.to_json()},
      {"metrics", metrics},
      {"diagnostics", {{"enabled", diagnostics.enabled}, {"probes", diagnostics.probes}, {"max_pairs", diagnostics.max_pairs}}},
      {"defense",
       {{"enabled", defense.enabled},
        {"layer", defense.layer},
        {"sublayer", defense::sublayer_name(defense.sublayer)},
        {"lambdas", defense.lambdas},
        {"prompts", defense.prompts}}},
      {"output_dir", output_dir},
      {"seed", seed},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    c.decoder = j.value("decoder", c.decoder);
    c.encoder = j.value("encoder", c.encoder);
    c.train_dataset = j.value("train_dataset", c.train_dataset);
    c.test_dataset = j.value("test_dataset", c.test_dataset);
    c.scenario = parse_scenario(j.value("scenario", std::string("user")));
    if (j.contains("sampling")) c.sampling = bridge::SamplingParams::from_json(j.at("sampling"));
    c.k_train = j.value("k_train", c.k_train);
    c.include_raw = j.value("include_raw", c.include_raw);
    c.align_disjoint = j.value("align_disjoint", c.align_disjoint);
    if (j.contains("align")) c.align = training::TrainConfig::from_json(j.at("align"));
    if (j.contains("warmup")) c.warmup = training::TrainConfig::from_json(j.at("warmup"));
    if (j.contains("joint")) c.joint = training::TrainConfig::from_json(j.at("joint"));
    c.method = parse_method(j.value("method", std::string("inv2a")));
    c.refine = j.value("refine", c.refine);
    if (j.contains("filter")) c.filter = refine::FilterConfig::from_json(j.at("filter"));
    c.metrics = j.value("metrics", c.metrics);
    if (j.contains("diagnostics")) {
      const auto& d = j.at("diagnostics");
      c.diagnostics.enabled = d.value("enabled", c.diagnostics.enabled);
      c.diagnostics.probes = d.value("probes", c.diagnostics.probes);
      c.diagnostics.max_pairs = d.value("max_pairs", c.diagnostics.max_pairs);
    }
    if (j.contains("defense")) {
      const auto& d = j.at("defense");
      c.defense.enabled = d.value("enabled", c.defense.enabled);
      c.defense.layer = d.value("layer", c.defense.layer);
      c.defense.sublayer = defense::parse_sublayer(d.value("sublayer", std::string("mlp")));
      c.defense.lambdas = d.value("lambdas", c.defense.lambdas);
      c.defense.prompts = d.value("prompts", c.defense.prompts);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  } catch (const SpecError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  // Relative paths are taken from the config file's directory.
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  for (const char* key : {"decoder", "encoder", "train_dataset", "test_dataset", "output_dir"}) {
    if (!j.contains(key) || !j.at(key).is_string()) continue;
    const fs::path p = j.at(key).get<std::string>();
    if (p.empty() || p.is_absolute()) continue;
    if (std::string(key) == "decoder" && !fs::exists(base / p) && !fs::exists(p)) continue;  // a registry id
    j[key] = (base / p).lexically_normal().string();
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  return hex64(fnv1a(j.dump()));
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return hex64(fnv1a(s.str()));
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

// Files under a directory artifact, relative, sorted.
std::vector<fs::path> artifact_files(const fs::path& root, const fs::path& rel) {
  const fs::path p = root / rel;
  if (!fs::is_directory(p)) return {rel};
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  return files;
}

long long mtime_ns(const fs::path& p) {
  return static_cast<long long>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(fs::last_write_time(p).time_since_epoch()).count());
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw FormatError("cannot write " + path.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_jsonl(const fs::path& path, const json& header, const std::vector<json>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << header.dump() << "\n";
  for (const auto& r : rows) out << r.dump() << "\n";
}

std::vector<json> read_jsonl_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<json> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

void prepend_line(const fs::path& path, const std::string& line) {
  std::ifstream in(path);
  std::ostringstream s;
  s << in.rdbuf();
  in.close();
  std::ofstream out(path);
  out << line << "\n" << s.str();
}

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg) : cfg_(cfg), root_(cfg.output_dir), hash_(cfg.hash()) {}

  bool enabled(const std::string& stage) const {
    const bool inverse = cfg_.method == AttackMethod::kInverse;
    if (stage == "align" || stage == "invert") return inverse;
    if (stage == "refine") return inverse && cfg_.refine;
    if (stage == "diagnose") return cfg_.diagnostics.enabled;
    if (stage == "defend") return inverse && cfg_.defense.enabled;
    return true;
  }

  fs::path marker_path(const std::string& stage) const { return root_ / "stages" / (stage + ".json"); }

  bool marker_valid(const std::string& stage) const {
    const fs::path mp = marker_path(stage);
    if (!fs::exists(mp)) return false;
    json m;
    try {
      m = read_json(mp);
    } catch (const Error&) {
      return false;
    }
    if (m.value("status", "") != "done" || m.value("config_hash", "") != hash_) return false;
    for (const auto& [rel, info] : m.at("artifacts").items()) {
      const fs::path p = root_ / rel;
      if (!fs::exists(p)) return false;
      if (mtime_ns(p) == info.at("mtime_ns").get<long long>()) continue;
      if (file_hash(p) != info.at("hash").get<std::string>()) return false;
    }
    return true;
  }

  void write_marker(const std::string& stage, const std::vector<fs::path>& artifacts, const json& extra) {
    json arts = json::object();
    for (const auto& a : artifacts) {
      for (const auto& f : artifact_files(root_, a)) {
        const fs::path p = root_ / f;
        arts[f.generic_string()] = json{{"hash", file_hash(p)}, {"mtime_ns", mtime_ns(p)}};
      }
    }
    json m{{"stage", stage}, {"status", "done"}, {"config_hash", hash_}, {"seed", cfg_.seed}, {"artifacts", arts}};
    if (!extra.is_null()) m["summary"] = extra;
    write_json(marker_path(stage), m);
  }

  void write_failed_marker(const std::string& stage, const std::string& what) {
    write_json(marker_path(stage), json{{"stage", stage},
                                        {"status", "failed"},
                                        {"config_hash", hash_},
                                        {"seed", cfg_.seed},
                                        {"error", what}});
  }

  // A stage that reruns makes everything after it stale.
  void invalidate_after(const std::string& stage) {
    const auto& order = stage_order();
    auto it = std::find(order.begin(), order.end(), stage);
    for (++it; it != order.end(); ++it) fs::remove(marker_path(*it));
  }

  json stamp() const { return json{{"config_hash", hash_}, {"seed", cfg_.seed}}; }

  json stamped(json j) const {
    j["config_hash"] = hash_;
    j["seed"] = cfg_.seed;
    return j;
  }

  std::shared_ptr<bridge::TransformerLM> lm() {
    if (!lm_) lm_ = bridge::load_causal_lm(cfg_.decoder);
    return lm_;
  }

  std::vector<PromptRecord> records(const std::string& path) const { return ingest_dataset(path, cfg_.scenario); }

  training::SampledCorpus corpus(const std::string& name) const {
    return training::SampledCorpus::load_jsonl(root_ / (name + ".jsonl"));
  }

  bridge::InverseModel inverse() {
    auto m = bridge::InverseModel::load(root_ / "inverse", lm());
    return m;
  }

  int outputs_per_example(const training::SampledCorpus& c) const {
    if (cfg_.scenario == Scenario::kUser) return 1;
    std::size_t n = 0;
    for (const auto& r : c.records) n = std::max(n, r.outputs.size());
    return static_cast<int>(std::max<std::size_t>(n, 1));
  }

  void run_stage(const std::string& stage) {
    if (stage == "sample") return stage_sample();
    if (stage == "align") return stage_align();
    if (stage == "invert") return stage_invert();
    if (stage == "attack") return stage_attack();
    if (stage == "refine") return stage_refine();
    if (stage == "evaluate") return stage_evaluate();
    if (stage == "diagnose") return stage_diagnose();
    if (stage == "defend") return stage_defend();
    throw ValidationError("unknown stage " + stage);
  }

  void stage_sample() {
    std::vector<PromptRecord> train;
    if (!cfg_.train_dataset.empty()) train = records(cfg_.train_dataset);
    const auto test = records(cfg_.test_dataset);
    check_disjoint_ids(train, test);
    json manifest{{"train", nullptr}, {"test", nullptr}};
    std::vector<fs::path> arts;
    if (!train.empty()) {
      CorpusParams p{cfg_.sampling, cfg_.k_train, Split::kTrain, mix_seed(cfg_.seed, 1)};
      auto c = build_attack_corpus(train, *lm(), cfg_.scenario, p);
      c.corpus.save_jsonl(root_ / "corpus_train.jsonl", stamp());
      manifest["train"] = c.manifest;
      arts.emplace_back("corpus_train.jsonl");
      if (cfg_.align_disjoint && cfg_.method == AttackMethod::kInverse) {
        CorpusParams pa{cfg_.sampling, cfg_.k_train, Split::kTrain, mix_seed(cfg_.seed, 8)};
        auto ca = build_attack_corpus(train, *lm(), cfg_.scenario, pa);
        ca.corpus.save_jsonl(root_ / "corpus_align.jsonl", stamp());
        manifest["align"] = ca.manifest;
        arts.emplace_back("corpus_align.jsonl");
      }
    }
    CorpusParams p{cfg_.sampling, cfg_.k_train, Split::kTest, mix_seed(cfg_.seed, 2)};
    auto c = build_attack_corpus(test, *lm(), cfg_.scenario, p);
    c.corpus.save_jsonl(root_ / "corpus_test.jsonl", stamp());
    manifest["test"] = c.manifest;
    arts.emplace_back("corpus_test.jsonl");
    write_json(root_ / "sample_manifest.json", stamped(manifest));
    arts.emplace_back("sample_manifest.json");
    write_marker("sample", arts, json{{"test_records", c.corpus.records.size()}});
  }

  void stage_align() {
    const auto train = corpus(cfg_.align_disjoint ? "corpus_align" : "corpus_train");
    auto enc = bridge::Encoder::load(bridge::resolve_checkpoint(cfg_.encoder));
    auto acfg = cfg_.align;
    acfg.seed = mix_seed(cfg_.seed, acfg.seed + 3);
    const auto rep = training::align_encoder(train, enc, acfg);
    fs::remove_all(root_ / "encoder_aligned");
    enc.save(root_ / "encoder_aligned");
    write_json(root_ / "encoder_aligned" / "run.json", stamp());
    write_json(root_ / "align_report.json", stamped(rep.to_json()));
    write_marker("align", {"encoder_aligned", "align_report.json"}, json{{"steps", rep.steps}});
  }

  void stage_invert() {
    const auto train = corpus("corpus_train");
    bridge::InverseModel m;
    m.decoder = lm();
    m.encoder = std::make_shared<bridge::Encoder>(bridge::Encoder::load(root_ / "encoder_aligned"));
    m.projection = std::make_shared<bridge::Projection>(m.encoder->d_enc(), m.decoder->d_model(),
                                                        bridge::InitSpec{"scaled_normal", mix_seed(cfg_.seed, 4)});
    m.include_raw = cfg_.include_raw;
    auto w = cfg_.warmup, j = cfg_.joint;
    w.outputs_per_example = j.outputs_per_example = outputs_per_example(train);
    w.seed = mix_seed(cfg_.seed, w.seed + 5);
    j.seed = mix_seed(cfg_.seed, j.seed + 6);
    const auto split = training::split_by_source(train, w.warmup_fraction, mix_seed(cfg_.seed, 7));
    const auto rep = training::train_inverse(split, m, w, j);
    fs::remove_all(root_ / "inverse");
    m.save(root_ / "inverse");
    write_json(root_ / "inverse" / "run.json", stamp());
    write_json(root_ / "train_report.json", stamped(rep.to_json()));
    write_marker("invert", {"inverse", "train_report.json"}, json{{"warmup_steps", rep.warmup.steps},
                                                                  {"joint_steps", rep.joint.steps}});
  }

  std::vector<std::pair<std::string, std::string>> fewshot_demos() const {
    std::vector<std::pair<std::string, std::string>> demos;
    if (!fs::exists(root_ / "corpus_train.jsonl")) return demos;
    const auto train = corpus("corpus_train");
    for (const auto& r : train.records) {
      if (demos.size() == 4) break;
      demos.emplace_back(r.outputs.front(), r.prompt);
    }
    return demos;
  }

  void stage_attack() {
    const auto test = corpus("corpus_test");
    std::vector<json> rows;
    std::optional<bridge::InverseModel> inv;
    if (cfg_.method == AttackMethod::kInverse) inv = inverse();
    const auto suite = baselines::JailbreakSuite::bundled();
    metrics::LocalLMJudge local(lm(), 32);
    baselines::FewShotSpec fs_spec{fewshot_demos(), &local};
    int skipped = 0;
    for (const auto& r : test.records) {
      const bridge::OutputSet y(r.outputs);
      json row{{"id", r.source_id}, {"prompt", r.prompt}, {"outputs", r.outputs}};
      switch (cfg_.method) {
        case AttackMethod::kInverse: row["recovered"] = inv->invert(y).text; break;
        case AttackMethod::kNaive: row["recovered"] = baselines::naive_roundtrip_attack(y, *lm()); break;
        case AttackMethod::kJailbreak: {
          auto s = baselines::jailbreak_attack(y, *lm(), suite);
          row["recovered_all"] = s.recovered;
          row["recovered"] = s.recovered.empty() ? "" : s.recovered.front();
          break;
        }
        case AttackMethod::kFewShot: {
          auto x = baselines::fewshot_attack(y.concatenated(), fs_spec);
          if (!x) ++skipped;
          row["recovered"] = x.value_or("");
          break;
        }
      }
      rows.push_back(std::move(row));
    }
    json head = stamp();
    head["method"] = method_name(cfg_.method);
    head["skipped"] = skipped;
    write_jsonl(root_ / "attack.jsonl", head, rows);
    write_marker("attack", {"attack.jsonl"}, json{{"samples", rows.size()}});
  }

  void stage_refine() {
    const auto rows = read_jsonl_rows(root_ / "attack.jsonl");
    const auto inv = inverse();
    std::vector<json> out;
    std::vector<refine::FilterState> states;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      auto fc = cfg_.filter;
      fc.seed = mix_seed(mix_seed(cfg_.seed, fc.seed + 8), i);
      const bridge::OutputSet y(r.at("outputs").get<std::vector<std::string>>());
      auto res = refine::dynamic_filter(y, inv, *lm(), fc);
      out.push_back(json{{"id", r.at("id")},
                         {"prompt", r.at("prompt")},
                         {"recovered", res.prompt},
                         {"state", res.state.to_json()}});
      states.push_back(std::move(res.state));
    }
    json head = stamp();
    head["trigger_rate"] = refine::trigger_rate(states);
    write_jsonl(root_ / "refine.jsonl", head, out);
    write_marker("refine", {"refine.jsonl"}, json{{"trigger_rate", refine::trigger_rate(states)}});
  }

  void stage_evaluate() {
    const bool refined = enabled("refine");
    const auto rows = read_jsonl_rows(root_ / (refined ? "refine.jsonl" : "attack.jsonl"));
    auto ec = metrics::EvalConfig::from_list(cfg_.metrics);
    std::unique_ptr<metrics::LocalLMJudge> judge;
    if (ec.judge) {
      judge = std::make_unique<metrics::LocalLMJudge>(lm());
      ec.judge_client = judge.get();
    }
    json out{{"method", method_name(cfg_.method)}, {"refined", refined}};
    std::vector<fs::path> arts{"metrics.json"};
    if (cfg_.method == AttackMethod::kJailbreak) {
      std::vector<std::string> refs;
      std::vector<baselines::JailbreakSample> samples;
      for (const auto& r : rows) {
        refs.push_back(r.at("prompt").get<std::string>());
        samples.push_back({r.at("recovered_all").get<std::vector<std::string>>()});
      }
      const auto agg = baselines::aggregate_jailbreak(refs, samples, ec);
      out["report"] = agg.mean.to_json();
      out["jailbreak"] = agg.to_json();
    } else {
      std::vector<std::pair<std::string, std::string>> pairs;
      for (const auto& r : rows) pairs.emplace_back(r.at("prompt").get<std::string>(), r.at("recovered").get<std::string>());
      ec.rows_csv = root_ / "rows.csv";
      const auto res = metrics::evaluate_run(pairs, ec);
      prepend_line(root_ / "rows.csv", "# config_hash=" + hash_ + " seed=" + std::to_string(cfg_.seed));
      out["report"] = res.report.to_json();
      arts.emplace_back("rows.csv");
    }
    write_json(root_ / "metrics.json", stamped(out));
    write_marker("evaluate", arts, out["report"]);
  }

  void stage_diagnose() {
    const auto test = corpus("corpus_test");
    std::optional<bridge::InverseModel> inv;
    if (fs::exists(root_ / "inverse")) inv = inverse();
    const auto& probes = cfg_.diagnostics.probes;
    auto has = [&](const char* p) { return std::find(probes.begin(), probes.end(), p) != probes.end(); };
    json out = json::object();
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& r : test.records) {
      if (static_cast<int>(pairs.size()) >= cfg_.diagnostics.max_pairs) break;
      pairs.emplace_back(r.prompt, r.outputs.front());
    }
    if (has("entropy") || has("roundtrip")) {
      out["pairs"] = diag::diagnose_pairs(pairs, *lm(), inv ? &*inv : nullptr).to_json();
    }
    if (has("similarity") && inv && fs::exists(root_ / "corpus_train.jsonl")) {
      const auto train = corpus("corpus_train");
      std::vector<diag::SourceOutputs> sources;
      for (const auto& r : train.records) sources.push_back({r.source_id, r.outputs});
      try {
        out["similarity"] = {
            {"pseudo", diag::source_invariance_score(sources, diag::pseudo_representer(*inv), diag::PoolMode::kAvg).to_json()},
            {"raw", diag::source_invariance_score(sources, diag::raw_embedding_representer(*lm()), diag::PoolMode::kAvg)
                        .to_json()}};
      } catch (const ValidationError& e) {
        out["similarity"] = {{"skipped", e.what()}};
      }
    }
    if (has("mi") && inv) {
      std::vector<std::string> outs;
      for (const auto& r : test.records) outs.push_back(r.outputs.front());
      try {
        out["mutual_information"] = diag::layer_mutual_information(outs, *inv).to_json();
      } catch (const ValidationError& e) {
        out["mutual_information"] = {{"skipped", e.what()}};
      }
    }
    if (has("importance") && inv && !test.records.empty()) {
      const auto& r = test.records.front();
      out["token_importance"] = diag::token_importance(bridge::OutputSet(r.outputs), *inv, *lm(), r.prompt).to_json();
    }
    write_json(root_ / "diagnostics.json", stamped(out));
    write_marker("diagnose", {"diagnostics.json"}, nullptr);
  }

  void stage_defend() {
    const auto test = corpus("corpus_test");
    const auto inv = inverse();
    std::vector<std::string> prompts;
    for (const auto& r : test.records) {
      if (static_cast<int>(prompts.size()) >= cfg_.defense.prompts) break;
      prompts.push_back(r.prompt);
    }
    defense::NoiseSpec base;
    base.layer = cfg_.defense.layer;
    base.sublayer = cfg_.defense.sublayer;
    base.seed = mix_seed(cfg_.seed, 9);
    const auto table = defense::defense_tradeoff(prompts, *lm(), inv, cfg_.defense.lambdas, base);
    write_json(root_ / "defense.json", stamped(table.to_json()));
    table.write_csv(root_ / "defense.csv");
    prepend_line(root_ / "defense.csv", "# config_hash=" + hash_ + " seed=" + std::to_string(cfg_.seed));
    write_marker("defend", {"defense.json", "defense.csv"}, nullptr);
  }

 private:
  const ExperimentConfig& cfg_;
  fs::path root_;
  std::string hash_;
  std::shared_ptr<bridge::TransformerLM> lm_;
};

}  // namespace

std::vector<StagePlanItem> stage_plan(const ExperimentConfig& cfg, const RunOptions& opts) {
  const auto& order = stage_order();
  if (!opts.until.empty() && std::find(order.begin(), order.end(), opts.until) == order.end()) {
    throw ValidationError("unknown stage '" + opts.until + "'");
  }
  Pipeline p(cfg);
  std::vector<StagePlanItem> plan;
  bool stale = false;
  for (const auto& s : order) {
    StagePlanItem item{s, p.enabled(s), false};
    if (item.enabled) {
      item.done = !stale && p.marker_valid(s);
      stale = stale || !item.done;
    }
    plan.push_back(item);
    if (s == opts.until) break;
  }
  return plan;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  RunSummary sum;
  sum.output_dir = cfg.output_dir;
  sum.plan = stage_plan(cfg, opts);
  if (opts.dry_run) return sum;
  fs::create_directories(fs::path(cfg.output_dir) / "stages");
  {
    const fs::path cp = fs::path(cfg.output_dir) / "config.json";
    json j = cfg.to_json();
    j["config_hash"] = cfg.hash();
    write_json(cp, j);
  }
  Pipeline p(cfg);
  for (const auto& item : sum.plan) {
    if (!item.enabled) continue;
    if (item.done) {
      sum.skipped.push_back(item.stage);
      continue;
    }
    spdlog::info("stage {}", item.stage);
    p.invalidate_after(item.stage);
    try {
      p.run_stage(item.stage);
    } catch (const ValidationError& e) {
      p.write_failed_marker(item.stage, e.what());
      throw;
    } catch (const std::exception& e) {
      p.write_failed_marker(item.stage, e.what());
      throw StageError("stage " + item.stage + " failed: " + e.what());
    }
    sum.executed.push_back(item.stage);
  }
  return sum;
}

}  // namespace inv2a::harness
