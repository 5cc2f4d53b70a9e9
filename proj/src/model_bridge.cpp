#include "inv2a/model_bridge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

namespace inv2a::bridge {

namespace fs = std::filesystem;

SamplingParams SamplingParams::greedy(int max_new_tokens) {
  SamplingParams p;
  p.temperature = 0.0;
  p.top_p = 1.0;
  p.top_k = 0;
  p.max_new_tokens = max_new_tokens;
  return p;
}

void SamplingParams::validate() const {
  if (!(temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ValidationError("top_p must be in (0, 1]");
  if (top_k < 0) throw ValidationError("top_k must be >= 0");
  if (max_new_tokens < 1) throw ValidationError("max_new_tokens must be >= 1");
}

nlohmann::json SamplingParams::to_json() const {
  return {{"temperature", temperature}, {"top_p", top_p}, {"top_k", top_k}, {"max_new_tokens", max_new_tokens}};
}

SamplingParams SamplingParams::from_json(const nlohmann::json& j) {
  SamplingParams p;
  p.temperature = j.value("temperature", p.temperature);
  p.top_p = j.value("top_p", p.top_p);
  p.top_k = j.value("top_k", p.top_k);
  p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
  return p;
}

// ---------------------------------------------------------------------------
// CausalLM defaults

nn::Var CausalLM::forward_differentiable(const nn::Var&) const {
  throw SpecError("this language model handle is not differentiable");
}

namespace {

class RecomputeSession : public DecodeSession {
 public:
  explicit RecomputeSession(const CausalLM& lm) : lm_(lm) {}
  RowVector push(const Matrix& rows) override {
    Matrix grown(rows_.rows() + rows.rows(), rows.cols());
    if (rows_.rows() > 0) grown.topRows(rows_.rows()) = rows_;
    grown.bottomRows(rows.rows()) = rows;
    rows_ = std::move(grown);
    Matrix logits = lm_.forward_embeddings(rows_);
    return logits.row(logits.rows() - 1);
  }
  int length() const override { return static_cast<int>(rows_.rows()); }

 private:
  const CausalLM& lm_;
  Matrix rows_;
};

}  // namespace

std::unique_ptr<DecodeSession> CausalLM::open_session() const { return std::make_unique<RecomputeSession>(*this); }

std::vector<Matrix> CausalLM::attention_maps(const Matrix&) const {
  throw SpecError("this language model handle does not expose attention");
}

std::vector<Matrix> CausalLM::layer_states(const Matrix&) const {
  throw SpecError("this language model handle does not expose hidden states");
}

// ---------------------------------------------------------------------------
// TransformerLM

TransformerLM::TransformerLM(std::shared_ptr<const nn::Transformer> net, Tokenizer tokenizer)
    : net_(std::move(net)), tokenizer_(std::move(tokenizer)) {
  if (!net_->config().causal) throw SpecError("TransformerLM requires a causal network");
  if (net_->config().vocab_size != tokenizer_.size()) throw DimensionError("tokenizer size != model vocab");
}

std::optional<nn::ActivationNoise> TransformerLM::next_noise() const {
  if (!noise_ || noise_->stddev == 0.0) return std::nullopt;
  if (noise_->reseed_each_call) noise_state_->rng.seed(noise_->seed);
  nn::ActivationNoise n;
  n.layer = noise_->layer;
  n.sublayer = noise_->sublayer;
  n.stddev = noise_->stddev;
  n.rng = &noise_state_->rng;
  return n;
}

Matrix TransformerLM::embed(std::span<const TokenId> ids) const { return net_->embed(ids).value(); }

Matrix TransformerLM::forward_embeddings(const Matrix& inputs) const {
  auto noise = next_noise();
  nn::ForwardOptions opts;
  if (noise) opts.noise = &*noise;
  return net_->logits(net_->forward(nn::constant(inputs), opts)).value();
}

nn::Var TransformerLM::forward_differentiable(const nn::Var& inputs) const {
  auto noise = next_noise();
  nn::ForwardOptions opts;
  if (noise) opts.noise = &*noise;
  return net_->logits(net_->forward(inputs, opts));
}

class TransformerSession : public DecodeSession {
 public:
  explicit TransformerSession(const TransformerLM& lm) : lm_(lm) {}
  RowVector push(const Matrix& rows) override {
    auto noise = lm_.next_noise();
    nn::ForwardOptions opts;
    opts.position_offset = cache_.length;
    opts.cache = &cache_;
    if (noise) opts.noise = &*noise;
    nn::Var hidden = lm_.net_->forward(nn::constant(rows), opts);
    nn::Var last = nn::slice_rows(hidden, hidden.rows() - 1, 1);
    return lm_.net_->logits(last).value().row(0);
  }
  int length() const override { return cache_.length; }

 private:
  const TransformerLM& lm_;
  nn::KVCache cache_;
};

std::unique_ptr<DecodeSession> TransformerLM::open_session() const { return std::make_unique<TransformerSession>(*this); }

std::vector<Matrix> TransformerLM::attention_maps(const Matrix& inputs) const {
  auto noise = next_noise();
  nn::ForwardOptions opts;
  std::vector<Matrix> maps;
  opts.attention_probs = &maps;
  if (noise) opts.noise = &*noise;
  net_->forward(nn::constant(inputs), opts);
  return maps;
}

std::vector<Matrix> TransformerLM::layer_states(const Matrix& inputs) const {
  auto noise = next_noise();
  nn::ForwardOptions opts;
  std::vector<Matrix> states;
  opts.layer_outputs = &states;
  if (noise) opts.noise = &*noise;
  net_->forward(nn::constant(inputs), opts);
  return states;
}

TransformerLM TransformerLM::with_noise(const NoiseHook& hook) const {
  if (hook.layer < 0 || hook.layer >= layer_count()) throw SpecError("noise layer index out of range");
  if (!(hook.stddev >= 0.0)) throw SpecError("noise stddev must be >= 0");
  TransformerLM copy(net_, tokenizer_);
  copy.noise_ = hook;
  copy.noise_state_ = std::make_shared<NoiseState>(NoiseState{hook, Rng(hook.seed)});
  return copy;
}

void TransformerLM::save(const fs::path& dir) const {
  net_->save(dir, "lm");
  std::ofstream(dir / "tokenizer.json") << tokenizer_.to_json().dump() << "\n";
}

std::shared_ptr<TransformerLM> TransformerLM::load(const fs::path& dir) {
  std::ifstream tok(dir / "tokenizer.json");
  if (!tok) throw ModelNotFound("no tokenizer.json in " + dir.string());
  auto net = std::make_shared<nn::Transformer>(nn::Transformer::load(dir, "lm"));
  net->parameters().set_requires_grad(false);
  return std::make_shared<TransformerLM>(std::move(net), Tokenizer::from_json(nlohmann::json::parse(tok)));
}

fs::path resolve_checkpoint(const std::string& path_or_id) {
  if (fs::is_directory(path_or_id)) return fs::path(path_or_id);
  fs::path root;
  if (const char* env = std::getenv("INV2A_MODEL_CACHE"); env && *env) {
    root = env;
  } else if (const char* home = std::getenv("HOME"); home && *home) {
    root = fs::path(home) / ".cache" / "inv2a" / "models";
  } else {
    throw ModelNotFound("checkpoint '" + path_or_id + "' not found and no model cache configured");
  }
  const fs::path candidate = root / path_or_id;
  if (!fs::is_directory(candidate)) {
    throw ModelNotFound("checkpoint '" + path_or_id + "' not found locally or in " + root.string());
  }
  return candidate;
}

std::shared_ptr<TransformerLM> load_causal_lm(const std::string& path_or_id) {
  return TransformerLM::load(resolve_checkpoint(path_or_id));
}

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(nn::Transformer net, Tokenizer tokenizer, int max_len)
    : net_(std::move(net)), tokenizer_(std::move(tokenizer)), max_len_(max_len) {
  if (net_.config().causal) throw SpecError("Encoder requires a bidirectional network");
  if (net_.config().vocab_size != tokenizer_.size()) throw DimensionError("tokenizer size != encoder vocab");
  if (max_len_ < 1) throw SpecError("encoder max_len must be >= 1");
}

TokenIds Encoder::tokenize(std::string_view text, bool* truncated) const {
  TokenIds ids = tokenizer_.encode(text);
  const auto cap = static_cast<std::size_t>(std::min(max_len_, net_.config().max_positions));
  const bool cut = ids.size() > cap;
  if (cut) ids.resize(cap);
  if (truncated) *truncated = cut;
  return ids;
}

nn::Var Encoder::hidden(std::span<const TokenId> ids, const std::vector<int>* positions,
                        const nn::AttentionMask* mask) const {
  nn::ForwardOptions opts;
  opts.positions = positions;
  opts.mask = mask;
  return net_.forward(net_.embed(ids), opts);
}

nn::Var Encoder::pooled(std::string_view text) const {
  TokenIds ids = tokenize(text);
  if (ids.empty()) throw EmptyInput("cannot pool an empty text");
  return nn::mean_rows(hidden(ids));
}

Encoder Encoder::clone() const { return Encoder(net_.clone(), tokenizer_, max_len_); }

void Encoder::save(const fs::path& dir) const {
  net_.save(dir, "encoder");
  std::ofstream(dir / "tokenizer.json") << tokenizer_.to_json().dump() << "\n";
  std::ofstream(dir / "encoder.json") << nlohmann::json{{"max_len", max_len_}}.dump(2) << "\n";
}

Encoder Encoder::load(const fs::path& dir) {
  std::ifstream tok(dir / "tokenizer.json");
  std::ifstream meta(dir / "encoder.json");
  if (!tok || !meta) throw ModelNotFound("incomplete encoder checkpoint in " + dir.string());
  const auto m = nlohmann::json::parse(meta);
  return Encoder(nn::Transformer::load(dir, "encoder"), Tokenizer::from_json(nlohmann::json::parse(tok)),
                 m.at("max_len").get<int>());
}

// ---------------------------------------------------------------------------
// Projection

Projection::Projection(int d_enc, int d_model, InitSpec init) : init_(std::move(init)) {
  if (d_enc < 1 || d_model < 1) throw DimensionError("projection widths must be positive");
  if (init_.scheme != "scaled_normal" && init_.scheme != "zeros") throw SpecError("unknown init scheme " + init_.scheme);
  Matrix w = Matrix::Zero(d_enc, d_model);
  if (init_.scheme == "scaled_normal") {
    Rng rng(init_.seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d_enc));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * standard_normal(rng);
  }
  weight_ = nn::Var(std::move(w), true);
  bias_ = nn::Var(Matrix::Zero(1, d_model), true);
  register_parameters();
}

Projection::Projection(Matrix weight, RowVector bias, InitSpec init) : init_(std::move(init)) {
  if (bias.cols() != weight.cols()) throw DimensionError("projection bias width != weight columns");
  weight_ = nn::Var(std::move(weight), true);
  bias_ = nn::Var(Matrix(bias), true);
  register_parameters();
}

void Projection::register_parameters() {
  params_ = nn::ParameterSet{};
  params_.add("weight", weight_);
  params_.add("bias", bias_);
}

nn::Var Projection::apply(const nn::Var& h) const {
  if (h.cols() != d_enc()) {
    throw DimensionError("projection expects width " + std::to_string(d_enc()) + ", got " + std::to_string(h.cols()));
  }
  return nn::add_row(nn::matmul(h, weight_), bias_);
}

Projection Projection::clone() const {
  Projection p(weight_.value(), bias_.value().row(0), init_);
  p.weight_.set_requires_grad(weight_.requires_grad());
  p.bias_.set_requires_grad(bias_.requires_grad());
  return p;
}

void Projection::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nn::write_tensors(dir / "projection.bin", params_.to_map());
  nlohmann::json manifest{{"d_enc", d_enc()},
                          {"d_model", d_model()},
                          {"init_spec", {{"scheme", init_.scheme}, {"seed", init_.seed}}},
                          {"seed", init_.seed}};
  std::ofstream(dir / "projection.json") << manifest.dump(2) << "\n";
}

Projection Projection::load(const fs::path& dir) {
  std::ifstream in(dir / "projection.json");
  if (!in) throw ModelNotFound("no projection.json in " + dir.string());
  const auto m = nlohmann::json::parse(in);
  InitSpec init{m.at("init_spec").at("scheme").get<std::string>(), m.at("init_spec").at("seed").get<std::uint64_t>()};
  Projection p(m.at("d_enc").get<int>(), m.at("d_model").get<int>(), InitSpec{"zeros", 0});
  p.init_ = init;
  p.params_.load_map(nn::read_tensors(dir / "projection.bin"));
  return p;
}

// ---------------------------------------------------------------------------
// Encoding and prefix construction

std::string OutputSet::concatenated() const {
  std::string out;
  for (const auto& y : outputs) {
    if (!out.empty()) out.push_back(' ');
    out += y;
  }
  return out;
}

EncodedOutput encode_single(std::string_view y, const Encoder& enc) {
  EncodedOutput out;
  out.ids = enc.tokenize(y, &out.truncated);
  if (out.ids.empty()) throw EmptyInput("output is empty after tokenization");
  out.hidden = enc.hidden(out.ids);
  return out;
}

SemiSparseEncoding encode_semi_sparse(const OutputSet& outputs, const Encoder& enc) {
  if (outputs.size() < 1) throw EmptyInput("output set is empty");
  SemiSparseEncoding out;
  std::vector<nn::Var> parts;
  int at = 0;
  for (int i = 0; i < outputs.size(); ++i) {
    EncodedOutput e;
    try {
      e = encode_single(outputs.outputs[static_cast<std::size_t>(i)], enc);
    } catch (const EmptyInput&) {
      throw EmptyInput("output " + std::to_string(i) + " is empty after tokenization");
    }
    const int len = static_cast<int>(e.ids.size());
    out.segments.emplace_back(at, at + len);
    out.truncated.push_back(e.truncated);
    at += len;
    parts.push_back(std::move(e.hidden));
  }
  out.hidden = nn::concat_rows(parts);
  return out;
}

nn::Var project(const nn::Var& h, const Projection& proj) { return proj.apply(h); }

Matrix project(const Matrix& h, const Projection& proj) { return proj.apply(nn::constant(h)).value(); }

TokenIds raw_output_ids(const OutputSet& outputs, const Tokenizer& tok) {
  TokenIds ids;
  for (const auto& y : outputs.outputs) {
    TokenIds part = tok.encode(y);
    if (part.size() > static_cast<std::size_t>(kDefaultMaxOutputTokens)) part.resize(kDefaultMaxOutputTokens);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

PseudoRepresentation build_pseudo_prefix(const OutputSet& outputs, const nn::Var& c,
                                         const std::vector<Segment>& c_segments, const CausalLM& lm,
                                         bool include_raw) {
  if (c.cols() != lm.d_model()) throw DimensionError("pseudo-representation width != decoder d_model");
  PseudoRepresentation out;
  out.includes_raw_prefix = include_raw;
  if (!include_raw) {
    out.vectors = c;
    out.segments = c_segments;
    return out;
  }
  const TokenIds raw = raw_output_ids(outputs, lm.tokenizer());
  if (raw.empty()) throw EmptyInput("raw outputs are empty after tokenization");
  const int offset = static_cast<int>(raw.size());
  std::vector<nn::Var> parts{nn::constant(lm.embed(raw)), c};
  out.vectors = nn::concat_rows(parts);
  out.segments.emplace_back(0, offset);
  for (auto [b, e] : c_segments) out.segments.emplace_back(b + offset, e + offset);
  return out;
}

TokenId sample_next(const RowVector& logits, const SamplingParams& params, Rng& rng) {
  const Eigen::Index v = logits.cols();
  if (params.is_greedy()) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<TokenId>(best);
  }
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits(a) > logits(b); });
  std::size_t keep = order.size();
  if (params.top_k > 0) keep = std::min<std::size_t>(keep, static_cast<std::size_t>(params.top_k));
  std::vector<double> probs(keep);
  const double top = logits(order[0]) / params.temperature;
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    probs[i] = std::exp(logits(order[i]) / params.temperature - top);
    total += probs[i];
  }
  // Nucleus: smallest prefix of the sorted distribution reaching top_p.
  double cumulative = 0.0;
  std::size_t nucleus = keep;
  for (std::size_t i = 0; i < keep; ++i) {
    cumulative += probs[i] / total;
    if (cumulative >= params.top_p) {
      nucleus = i + 1;
      break;
    }
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < nucleus; ++i) mass += probs[i];
  double u = uniform01(rng) * mass;
  for (std::size_t i = 0; i < nucleus; ++i) {
    u -= probs[i];
    if (u < 0.0) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[nucleus - 1]);
}

Generation generate(const CausalLM& lm, const Matrix& prefix_rows, const DecodeParams& params) {
  if (prefix_rows.rows() < 1) throw EmptyInput("decoding prefix is empty");
  params.sampling.validate();
  Generation g;
  if (prefix_rows.rows() >= lm.max_positions()) {
    g.truncated = true;
    return g;
  }
  Rng rng(params.seed);
  auto session = lm.open_session();
  RowVector logits = session->push(prefix_rows);
  for (int step = 0; step < params.sampling.max_new_tokens; ++step) {
    const TokenId next = sample_next(logits, params.sampling, rng);
    if (std::find(params.stop_tokens.begin(), params.stop_tokens.end(), next) != params.stop_tokens.end()) {
      g.hit_stop = true;
      break;
    }
    g.ids.push_back(next);
    if (step + 1 == params.sampling.max_new_tokens) break;
    if (session->length() >= lm.max_positions()) break;
    logits = session->push(lm.embed(std::span<const TokenId>(&next, 1)));
  }
  g.truncated = !g.hit_stop;
  g.text = lm.tokenizer().decode(g.ids);
  return g;
}

Generation decode_prompt(const PseudoRepresentation& prefix, const CausalLM& lm, const DecodeParams& params) {
  if (!prefix.vectors.defined() || prefix.vectors.rows() == 0) throw EmptyInput("pseudo-representation is empty");
  return generate(lm, prefix.vectors.value(), params);
}

TokenIds prompt_ids(const Tokenizer& tok, std::string_view prompt) {
  TokenIds ids{Tokenizer::kBos};
  TokenIds body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Tokenizer::kSep);
  return ids;
}

Generation respond(const CausalLM& lm, std::string_view prompt, const DecodeParams& params) {
  TokenIds ids = prompt_ids(lm.tokenizer(), prompt);
  // Keep the tail of over-long prompts so the response still has room; the
  // response reserve is capped at half the context.
  const int reserve = std::min(params.sampling.max_new_tokens, lm.max_positions() / 2);
  const auto budget = static_cast<std::size_t>(std::max(2, lm.max_positions() - reserve));
  if (ids.size() > budget && budget >= 2) {
    TokenIds tail(ids.end() - static_cast<long>(budget - 1), ids.end());
    tail.insert(tail.begin(), Tokenizer::kBos);
    ids = std::move(tail);
  }
  return generate(lm, lm.embed(ids), params);
}

// ---------------------------------------------------------------------------
// InverseModel

PseudoRepresentation InverseModel::pseudo(const OutputSet& outputs) const {
  SemiSparseEncoding enc = encode_semi_sparse(outputs, *encoder);
  nn::Var c = project(enc.hidden, *projection);
  return build_pseudo_prefix(outputs, c, enc.segments, *decoder, include_raw);
}

Generation InverseModel::invert(const OutputSet& outputs) const {
  return decode_prompt(pseudo(outputs), *decoder, decode);
}

InverseModel InverseModel::clone() const {
  InverseModel m = *this;
  m.encoder = std::make_shared<Encoder>(encoder->clone());
  m.projection = std::make_shared<Projection>(projection->clone());
  return m;
}

void InverseModel::save(const fs::path& dir) const {
  fs::create_directories(dir);
  encoder->save(dir / "encoder");
  projection->save(dir / "projection");
  nlohmann::json meta{{"include_raw", include_raw},
                      {"decode", {{"sampling", decode.sampling.to_json()}, {"seed", decode.seed}}}};
  std::ofstream(dir / "inverse.json") << meta.dump(2) << "\n";
}

InverseModel InverseModel::load(const fs::path& dir, std::shared_ptr<const CausalLM> decoder) {
  std::ifstream in(dir / "inverse.json");
  if (!in) throw ModelNotFound("no inverse.json in " + dir.string());
  const auto meta = nlohmann::json::parse(in);
  InverseModel m;
  m.decoder = std::move(decoder);
  m.encoder = std::make_shared<Encoder>(Encoder::load(dir / "encoder"));
  m.projection = std::make_shared<Projection>(Projection::load(dir / "projection"));
  m.include_raw = meta.at("include_raw").get<bool>();
  m.decode.sampling = SamplingParams::from_json(meta.at("decode").at("sampling"));
  m.decode.seed = meta.at("decode").at("seed").get<std::uint64_t>();
  if (m.projection->d_enc() != m.encoder->d_enc() || m.projection->d_model() != m.decoder->d_model()) {
    throw DimensionError("inverse checkpoint widths do not match the decoder");
  }
  return m;
}

}  // namespace inv2a::bridge
