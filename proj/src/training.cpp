#include "inv2a/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

namespace inv2a::training {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Corpus

std::size_t SampledCorpus::output_count() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.outputs.size();
  return n;
}

json SampledCorpus::manifest() const {
  return json{{"sampling", sampling.to_json()},
              {"records", records.size()},
              {"outputs", output_count()},
              {"skipped", skipped},
              {"hash", corpus_hash(*this)}};
}

void SampledCorpus::save_jsonl(const fs::path& path, const json& header_extra) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  json head{{"sampling", sampling.to_json()}, {"skipped", skipped}};
  for (auto it = header_extra.begin(); it != header_extra.end(); ++it) head[it.key()] = it.value();
  out << head.dump() << "\n";
  for (const auto& r : records) {
    out << json{{"id", r.source_id}, {"prompt", r.prompt}, {"outputs", r.outputs}, {"seeds", r.seeds}}.dump() << "\n";
  }
}

SampledCorpus SampledCorpus::load_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  SampledCorpus c;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty corpus file " + path.string());
  try {
    const auto head = json::parse(line);
    c.sampling = bridge::SamplingParams::from_json(head.at("sampling"));
    c.skipped = head.value("skipped", 0);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      SampleRecord r;
      r.source_id = j.at("id").get<std::string>();
      r.prompt = j.at("prompt").get<std::string>();
      r.outputs = j.at("outputs").get<std::vector<std::string>>();
      r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
      c.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return c;
}

SampledCorpus sample_output_sets(const std::vector<PromptInput>& prompts, const bridge::CausalLM& lm,
                                 const bridge::SamplingParams& params, int k_per_prompt, std::uint64_t base_seed) {
  if (k_per_prompt < 1) throw ValidationError("k_per_prompt must be >= 1");
  params.validate();
  SampledCorpus corpus;
  corpus.sampling = params;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SampleRecord rec;
    rec.source_id = prompts[i].id;
    rec.prompt = prompts[i].prompt;
    try {
      for (int j = 0; j < k_per_prompt; ++j) {
        bridge::DecodeParams dp;
        dp.sampling = params;
        dp.seed = mix_seed(mix_seed(base_seed, i), static_cast<std::uint64_t>(j));
        auto g = bridge::respond(lm, rec.prompt, dp);
        if (g.text.empty()) throw EmptyInput("empty generation");
        rec.outputs.push_back(std::move(g.text));
        rec.seeds.push_back(dp.seed);
      }
    } catch (const Error& e) {
      spdlog::warn("skipping prompt {}: {}", rec.source_id, e.what());
      ++corpus.skipped;
      continue;
    }
    corpus.records.push_back(std::move(rec));
  }
  if (!prompts.empty() && corpus.skipped * 10 > static_cast<int>(prompts.size())) {
    throw InvalidCorpus("more than 10% of prompts failed to generate (" + std::to_string(corpus.skipped) + "/" +
                        std::to_string(prompts.size()) + ")");
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// InfoNCE

double infonce_loss(const RowVector& anchor, const std::vector<RowVector>& positives,
                    const std::vector<RowVector>& negatives, double temperature) {
  if (positives.empty()) throw InvalidBatch("InfoNCE needs at least one positive");
  if (!(temperature > 0.0)) throw InvalidBatch("temperature must be positive");
  std::vector<double> s;
  s.reserve(positives.size() + negatives.size());
  for (const auto* group : {&positives, &negatives}) {
    for (const auto& v : *group) {
      if (v.size() != anchor.size()) throw DimensionError("embedding widths differ");
      s.push_back(anchor.dot(v) / temperature);
    }
  }
  const double mx = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (double v : s) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < positives.size(); ++i) loss += lse - s[i];
  return loss / static_cast<double>(positives.size());
}

// ---------------------------------------------------------------------------
// Config

std::string to_string(Phase p) {
  switch (p) {
    case Phase::kAlign:
      return "align";
    case Phase::kWarmup:
      return "warmup";
    default:
      return "joint";
  }
}

namespace {

Phase phase_from_string(const std::string& s) {
  if (s == "align") return Phase::kAlign;
  if (s == "warmup") return Phase::kWarmup;
  if (s == "joint") return Phase::kJoint;
  throw ValidationError("unknown phase '" + s + "'");
}

}  // namespace

TrainConfig TrainConfig::alignment_defaults() {
  TrainConfig c;
  c.phase = Phase::kAlign;
  c.lr = 1e-5;
  c.batch_size = 32;
  c.epochs = 4;
  c.weight_decay = 1e-2;
  return c;
}

TrainConfig TrainConfig::warmup_defaults() {
  TrainConfig c;
  c.phase = Phase::kWarmup;
  c.lr = 2e-4;
  c.batch_size = 16;
  c.epochs = 1;
  c.weight_decay = 1e-2;
  return c;
}

TrainConfig TrainConfig::joint_defaults() {
  TrainConfig c = warmup_defaults();
  c.phase = Phase::kJoint;
  return c;
}

nn::AdamWConfig TrainConfig::optimizer() const { return {lr, beta1, beta2, eps, weight_decay, clip_norm}; }

double TrainConfig::lr_at(long step, long total_steps) const {
  if (lr_schedule == "constant" || total_steps <= 0) return lr;
  return lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ValidationError("warmup_fraction must be in (0,1)");
  if (n_pos < 1 || n_neg < 1) throw ValidationError("n_pos and n_neg must be >= 1");
  if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
  if (outputs_per_example < 1) throw ValidationError("outputs_per_example must be >= 1");
  if (lr_schedule != "linear" && lr_schedule != "constant") throw ValidationError("lr_schedule must be linear or constant");
}

json TrainConfig::to_json() const {
  return json{{"phase", to_string(phase)},
              {"lr", lr},
              {"lr_schedule", lr_schedule},
              {"batch_size", batch_size},
              {"epochs", epochs},
              {"warmup_fraction", warmup_fraction},
              {"seed", seed},
              {"optimizer",
               {{"name", "adamw"}, {"betas", {beta1, beta2}}, {"eps", eps}, {"weight_decay", weight_decay},
                {"clip_norm", clip_norm}}},
              {"n_pos", n_pos},
              {"n_neg", n_neg},
              {"temperature", temperature},
              {"outputs_per_example", outputs_per_example}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("phase")) c.phase = phase_from_string(j.at("phase").get<std::string>());
  c = [&] {
    switch (c.phase) {
      case Phase::kAlign:
        return alignment_defaults();
      case Phase::kWarmup:
        return warmup_defaults();
      default:
        return joint_defaults();
    }
  }();
  c.lr = j.value("lr", c.lr);
  c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.contains("betas")) {
      c.beta1 = o.at("betas").at(0).get<double>();
      c.beta2 = o.at("betas").at(1).get<double>();
    }
    c.eps = o.value("eps", c.eps);
    c.weight_decay = o.value("weight_decay", c.weight_decay);
    c.clip_norm = o.value("clip_norm", c.clip_norm);
  }
  c.n_pos = j.value("n_pos", c.n_pos);
  c.n_neg = j.value("n_neg", c.n_neg);
  c.temperature = j.value("temperature", c.temperature);
  c.outputs_per_example = j.value("outputs_per_example", c.outputs_per_example);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Alignment

namespace {

struct AnchorRef {
  std::size_t record;
  std::size_t output;
};

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng() % (n - i))]);
  idx.resize(k);
  return idx;
}

std::vector<AnchorRef> anchor_refs(const SampledCorpus& corpus) {
  std::set<std::string> sources;
  for (const auto& r : corpus.records) sources.insert(r.prompt);
  if (sources.size() < 2) throw InvalidCorpus("alignment needs at least two source sets");
  std::vector<AnchorRef> refs;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    if (corpus.records[i].outputs.size() < 2) continue;
    for (std::size_t j = 0; j < corpus.records[i].outputs.size(); ++j) refs.push_back({i, j});
  }
  if (refs.empty()) throw InvalidCorpus("alignment needs a source set with at least two outputs");
  return refs;
}

ContrastiveBatch make_batch(const SampledCorpus& corpus, const AnchorRef& a, const std::vector<AnchorRef>& chunk,
                            const TrainConfig& cfg, Rng& rng) {
  const auto& rec = corpus.records[a.record];
  ContrastiveBatch b;
  b.temperature = cfg.temperature;
  b.anchor = rec.outputs[a.output];
  std::vector<std::size_t> others;
  for (std::size_t j = 0; j < rec.outputs.size(); ++j) {
    if (j != a.output) others.push_back(j);
  }
  for (std::size_t k : sample_without_replacement(others.size(), static_cast<std::size_t>(cfg.n_pos), rng)) {
    b.positives.push_back(rec.outputs[others[k]]);
  }
  // In-batch negatives first, topped up from the whole corpus.
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  std::set<std::size_t> seen;
  for (const auto& c : chunk) {
    if (corpus.records[c.record].prompt == rec.prompt || !seen.insert(c.record).second) continue;
    for (std::size_t j = 0; j < corpus.records[c.record].outputs.size(); ++j) pool.emplace_back(c.record, j);
  }
  if (static_cast<int>(pool.size()) < cfg.n_neg) {
    for (std::size_t r = 0; r < corpus.records.size(); ++r) {
      if (corpus.records[r].prompt == rec.prompt || seen.count(r)) continue;
      for (std::size_t j = 0; j < corpus.records[r].outputs.size(); ++j) pool.emplace_back(r, j);
    }
  }
  for (std::size_t k : sample_without_replacement(pool.size(), static_cast<std::size_t>(cfg.n_neg), rng)) {
    b.negatives.push_back(corpus.records[pool[k].first].outputs[pool[k].second]);
  }
  return b;
}

std::vector<ContrastiveBatch> epoch_batches(const SampledCorpus& corpus, std::vector<AnchorRef> refs,
                                            const TrainConfig& cfg, Rng& rng) {
  shuffle_in_place(refs, rng);
  std::vector<ContrastiveBatch> out;
  out.reserve(refs.size());
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0; start < refs.size(); start += bs) {
    const std::vector<AnchorRef> chunk(refs.begin() + static_cast<std::ptrdiff_t>(start),
                                       refs.begin() + static_cast<std::ptrdiff_t>(std::min(refs.size(), start + bs)));
    for (const auto& a : chunk) out.push_back(make_batch(corpus, a, chunk, cfg, rng));
  }
  return out;
}

}  // namespace

std::vector<ContrastiveBatch> build_contrastive_batches(const SampledCorpus& corpus, const TrainConfig& cfg, Rng& rng) {
  return epoch_batches(corpus, anchor_refs(corpus), cfg, rng);
}

json AlignReport::to_json() const { return json{{"epoch_loss", epoch_loss}, {"steps", steps}}; }

AlignReport align_encoder(const SampledCorpus& corpus, bridge::Encoder& enc, const TrainConfig& cfg) {
  cfg.validate();
  AlignReport report;
  const auto refs = anchor_refs(corpus);
  if (cfg.epochs == 0) return report;
  auto& params = enc.parameters();
  params.set_requires_grad(true);
  nn::AdamW opt(params.vars(), cfg.optimizer());
  Rng rng(mix_seed(cfg.seed, 0xa11));
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long total_steps = static_cast<long>((refs.size() + bs - 1) / bs) * cfg.epochs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = epoch_batches(corpus, refs, cfg, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < batches.size(); start += bs) {
      const std::size_t end = std::min(batches.size(), start + bs);
      std::unordered_map<std::string, nn::Var> pooled;
      auto embed = [&](const std::string& t) -> nn::Var {
        auto it = pooled.find(t);
        if (it != pooled.end()) return it->second;
        return pooled.emplace(t, enc.pooled(t)).first->second;
      };
      std::vector<nn::Var> losses;
      for (std::size_t i = start; i < end; ++i) {
        const auto& b = batches[i];
        std::vector<nn::Var> cand;
        for (const auto& t : b.positives) cand.push_back(embed(t));
        for (const auto& t : b.negatives) cand.push_back(embed(t));
        losses.push_back(nn::infonce(embed(b.anchor), nn::concat_rows(cand), static_cast<int>(b.positives.size()),
                                     b.temperature));
      }
      nn::Var loss = nn::scale(nn::sum_scalars(losses), 1.0 / static_cast<double>(losses.size()));
      total += loss.item() * static_cast<double>(losses.size());
      nn::backward(loss);
      opt.set_lr(cfg.lr_at(report.steps, total_steps));
      opt.step();
      ++report.steps;
    }
    report.epoch_loss.push_back(total / static_cast<double>(batches.size()));
  }
  params.set_requires_grad(false);
  return report;
}

// ---------------------------------------------------------------------------
// Reinforcement

nn::Var inversion_loss(const bridge::PseudoRepresentation& prefix, std::string_view x, const bridge::CausalLM& lm) {
  const TokenIds ids = lm.tokenizer().encode(x);
  if (ids.empty()) throw EmptyInput("inversion target is empty");
  const int p = prefix.total_length();
  if (p < 1) throw DimensionError("inversion needs a nonempty prefix");
  const int t = static_cast<int>(ids.size());
  if (p + t > lm.max_positions()) {
    throw DimensionError("prefix + target length " + std::to_string(p + t) + " exceeds context " +
                         std::to_string(lm.max_positions()));
  }
  const nn::Var rows = nn::concat_rows(std::vector<nn::Var>{prefix.vectors, nn::constant(lm.embed(ids))});
  TokenIds targets(static_cast<std::size_t>(p + t), -1);
  for (int i = 0; i < t; ++i) targets[static_cast<std::size_t>(p - 1 + i)] = ids[static_cast<std::size_t>(i)];
  targets.back() = Tokenizer::kEos;
  return nn::cross_entropy(lm.forward_differentiable(rows), targets);
}

CorpusSplit split_by_source(const SampledCorpus& corpus, double warmup_fraction, std::uint64_t seed) {
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw SplitError("warmup fraction must be in (0,1)");
  std::vector<std::string> prompts;
  std::set<std::string> seen;
  for (const auto& r : corpus.records) {
    if (seen.insert(r.prompt).second) prompts.push_back(r.prompt);
  }
  std::sort(prompts.begin(), prompts.end());
  Rng rng(mix_seed(seed, 0x5e11));
  shuffle_in_place(prompts, rng);
  std::size_t n_warm = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(prompts.size())));
  if (prompts.size() >= 2) n_warm = std::clamp<std::size_t>(n_warm, 1, prompts.size() - 1);
  const std::set<std::string> warm(prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n_warm));
  CorpusSplit split;
  split.warmup.sampling = split.joint.sampling = corpus.sampling;
  for (const auto& r : corpus.records) (warm.count(r.prompt) ? split.warmup : split.joint).records.push_back(r);
  return split;
}

void check_disjoint(const SampledCorpus& a, const SampledCorpus& b) {
  std::set<std::string> pa;
  for (const auto& r : a.records) pa.insert(r.prompt);
  for (const auto& r : b.records) {
    if (pa.count(r.prompt)) throw SplitError("prompt appears in both splits: " + r.prompt);
  }
}

std::string corpus_hash(const SampledCorpus& c) {
  std::uint64_t h = fnv1a("corpus");
  for (const auto& r : c.records) {
    h = fnv1a(r.source_id, h);
    h = fnv1a(std::string_view("\x1f", 1), h);
    h = fnv1a(r.prompt, h);
    for (const auto& o : r.outputs) {
      h = fnv1a(std::string_view("\x1e", 1), h);
      h = fnv1a(o, h);
    }
    h = fnv1a(std::string_view("\x1d", 1), h);
  }
  return hex64(h);
}

std::vector<InverseExample> make_examples(const SampledCorpus& corpus, int outputs_per_example) {
  if (outputs_per_example < 1) throw ValidationError("outputs_per_example must be >= 1");
  std::vector<InverseExample> out;
  const std::size_t n = static_cast<std::size_t>(outputs_per_example);
  for (const auto& r : corpus.records) {
    for (std::size_t start = 0; start + n <= r.outputs.size(); start += n) {
      std::vector<std::string> group(r.outputs.begin() + static_cast<std::ptrdiff_t>(start),
                                     r.outputs.begin() + static_cast<std::ptrdiff_t>(start + n));
      out.push_back({bridge::OutputSet(std::move(group)), r.prompt});
    }
  }
  return out;
}

json StageReport::to_json() const {
  return json{{"stage", stage}, {"epoch_loss", epoch_loss}, {"steps", steps}, {"split_hash", split_hash}};
}

json InverseTrainReport::to_json() const { return json{{"warmup", warmup.to_json()}, {"joint", joint.to_json()}}; }

StageReport train_stage(const std::vector<InverseExample>& examples, bridge::InverseModel& model,
                        const TrainConfig& cfg, bool update_encoder) {
  cfg.validate();
  StageReport report;
  report.stage = update_encoder ? "joint" : "warmup";
  if (cfg.epochs == 0 || examples.empty()) return report;
  model.encoder->parameters().set_requires_grad(update_encoder);
  model.projection->parameters().set_requires_grad(true);
  std::vector<nn::Var> vars = model.projection->parameters().vars();
  if (update_encoder) {
    const auto ev = model.encoder->parameters().vars();
    vars.insert(vars.end(), ev.begin(), ev.end());
  }
  nn::AdamW opt(vars, cfg.optimizer());
  Rng rng(mix_seed(cfg.seed, update_encoder ? 0x701e : 0x3a53));
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long total_steps = static_cast<long>((order.size() + bs - 1) / bs) * cfg.epochs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = examples[order[i]];
        nn::Var loss = inversion_loss(model.pseudo(ex.outputs), ex.prompt, *model.decoder);
        total += loss.item();
        nn::backward(nn::scale(loss, w));
      }
      opt.set_lr(cfg.lr_at(report.steps, total_steps));
      opt.step();
      ++report.steps;
    }
    report.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  model.encoder->parameters().set_requires_grad(false);
  model.projection->parameters().set_requires_grad(false);
  return report;
}

InverseTrainReport train_inverse(const SampledCorpus& corpus, bridge::InverseModel& model, const TrainConfig& cfg_warmup,
                                 const TrainConfig& cfg_joint, const std::optional<fs::path>& checkpoint_dir) {
  return train_inverse(split_by_source(corpus, cfg_warmup.warmup_fraction, cfg_warmup.seed), model, cfg_warmup,
                       cfg_joint, checkpoint_dir);
}

InverseTrainReport train_inverse(const CorpusSplit& split, bridge::InverseModel& model, const TrainConfig& cfg_warmup,
                                 const TrainConfig& cfg_joint, const std::optional<fs::path>& checkpoint_dir) {
  check_disjoint(split.warmup, split.joint);
  InverseTrainReport report;
  report.warmup = train_stage(make_examples(split.warmup, cfg_warmup.outputs_per_example), model, cfg_warmup, false);
  report.warmup.split_hash = corpus_hash(split.warmup);
  if (checkpoint_dir) model.save(*checkpoint_dir / "warmup");
  report.joint = train_stage(make_examples(split.joint, cfg_joint.outputs_per_example), model, cfg_joint, true);
  report.joint.split_hash = corpus_hash(split.joint);
  if (checkpoint_dir) model.save(*checkpoint_dir / "joint");
  return report;
}

}  // namespace inv2a::training
