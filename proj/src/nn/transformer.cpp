#include "inv2a/nn/transformer.hpp"

#include <cmath>
#include <fstream>

namespace inv2a::nn {

nlohmann::json TransformerConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model},   {"n_layers", n_layers},
          {"n_heads", n_heads},       {"d_ff", d_ff},         {"max_positions", max_positions},
          {"causal", causal}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.causal = j.at("causal").get<bool>();
  return c;
}

namespace {

Var normal_param(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * standard_normal(rng);
  return Var(std::move(m), true);
}

Var constant_param(Eigen::Index rows, Eigen::Index cols, double value) {
  return Var(Matrix::Constant(rows, cols, value), true);
}

}  // namespace

Transformer::Transformer(const TransformerConfig& config, std::uint64_t seed) : config_(config) {
  if (config.vocab_size <= 0 || config.d_model <= 0 || config.n_layers <= 0 || config.max_positions <= 0) {
    throw SpecError("transformer config has non-positive sizes");
  }
  if (config.d_model % config.n_heads != 0) throw SpecError("d_model must be divisible by n_heads");
  Rng rng(seed);
  const int d = config.d_model;
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
  tok_emb_ = normal_param(config.vocab_size, d, std_base, rng);
  pos_emb_ = normal_param(config.max_positions, d, std_base, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    Block b;
    b.ln1_g = constant_param(1, d, 1.0);
    b.ln1_b = constant_param(1, d, 0.0);
    b.wq = normal_param(d, d, std_base, rng);
    b.bq = constant_param(1, d, 0.0);
    b.wk = normal_param(d, d, std_base, rng);
    b.bk = constant_param(1, d, 0.0);
    b.wv = normal_param(d, d, std_base, rng);
    b.bv = constant_param(1, d, 0.0);
    b.wo = normal_param(d, d, std_resid, rng);
    b.bo = constant_param(1, d, 0.0);
    b.ln2_g = constant_param(1, d, 1.0);
    b.ln2_b = constant_param(1, d, 0.0);
    b.w1 = normal_param(d, config.d_ff, std_base, rng);
    b.b1 = constant_param(1, config.d_ff, 0.0);
    b.w2 = normal_param(config.d_ff, d, std_resid, rng);
    b.b2 = constant_param(1, d, 0.0);
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = constant_param(1, d, 1.0);
  lnf_b_ = constant_param(1, d, 0.0);
  register_parameters();
}

void Transformer::register_parameters() {
  params_ = ParameterSet{};
  params_.add("tok_emb", tok_emb_);
  params_.add("pos_emb", pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    auto& b = blocks_[l];
    params_.add(p + "ln1_g", b.ln1_g);
    params_.add(p + "ln1_b", b.ln1_b);
    params_.add(p + "wq", b.wq);
    params_.add(p + "bq", b.bq);
    params_.add(p + "wk", b.wk);
    params_.add(p + "bk", b.bk);
    params_.add(p + "wv", b.wv);
    params_.add(p + "bv", b.bv);
    params_.add(p + "wo", b.wo);
    params_.add(p + "bo", b.bo);
    params_.add(p + "ln2_g", b.ln2_g);
    params_.add(p + "ln2_b", b.ln2_b);
    params_.add(p + "w1", b.w1);
    params_.add(p + "b1", b.b1);
    params_.add(p + "w2", b.w2);
    params_.add(p + "b2", b.b2);
  }
  params_.add("lnf_g", lnf_g_);
  params_.add("lnf_b", lnf_b_);
}

Var Transformer::embed(std::span<const TokenId> ids) const { return embedding(tok_emb_, ids); }

Var Transformer::forward(const Var& inputs, const ForwardOptions& options) const {
  const Eigen::Index n = inputs.rows();
  if (inputs.cols() != config_.d_model) throw DimensionError("transformer input width != d_model");
  std::vector<TokenId> pos(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int p = options.positions ? (*options.positions)[static_cast<std::size_t>(i)]
                                    : options.position_offset + static_cast<int>(i);
    if (p < 0 || p >= config_.max_positions) throw DimensionError("position exceeds max_positions");
    pos[static_cast<std::size_t>(i)] = p;
  }
  Var x = add(inputs, embedding(pos_emb_, pos));

  AttentionMask default_mask = config_.causal ? AttentionMask::causal() : AttentionMask::full();
  const AttentionMask& mask = options.mask ? *options.mask : default_mask;
  KVCache* cache = options.cache;
  if (cache && cache->keys.empty()) {
    cache->keys.resize(blocks_.size());
    cache->values.resize(blocks_.size());
  }
  const int query_offset = cache ? cache->length : 0;
  if (options.attention_probs) options.attention_probs->clear();
  if (options.layer_outputs) options.layer_outputs->clear();

  auto maybe_noise = [&](Var out, int layer, Sublayer which) {
    const ActivationNoise* nz = options.noise;
    if (!nz || nz->layer != layer || nz->sublayer != which || nz->stddev == 0.0) return out;
    Matrix noise(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = nz->stddev * standard_normal(*nz->rng);
    return add_constant(out, noise);
  };

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    Var h = layer_norm(x, b.ln1_g, b.ln1_b);
    Var q = add_row(matmul(h, b.wq), b.bq);
    Var k = add_row(matmul(h, b.wk), b.bk);
    Var v = add_row(matmul(h, b.wv), b.bv);
    if (cache) {
      // Cached decoding is inference-only, so past keys enter as constants.
      Matrix& ck = cache->keys[l];
      Matrix& cv = cache->values[l];
      Matrix nk(ck.rows() + k.rows(), k.cols());
      Matrix nv(cv.rows() + v.rows(), v.cols());
      if (ck.rows() > 0) {
        nk.topRows(ck.rows()) = ck;
        nv.topRows(cv.rows()) = cv;
      }
      nk.bottomRows(k.rows()) = k.value();
      nv.bottomRows(v.rows()) = v.value();
      ck = nk;
      cv = nv;
      k = constant(std::move(nk));
      v = constant(std::move(nv));
    }
    Matrix probs;
    Var a = attention(q, k, v, config_.n_heads, mask, query_offset,
                      options.attention_probs ? &probs : nullptr);
    if (options.attention_probs) options.attention_probs->push_back(std::move(probs));
    a = add_row(matmul(a, b.wo), b.bo);
    a = maybe_noise(a, static_cast<int>(l), Sublayer::kAttention);
    x = add(x, a);

    Var m = layer_norm(x, b.ln2_g, b.ln2_b);
    m = gelu(add_row(matmul(m, b.w1), b.b1));
    m = add_row(matmul(m, b.w2), b.b2);
    m = maybe_noise(m, static_cast<int>(l), Sublayer::kMlp);
    x = add(x, m);
    if (options.layer_outputs) options.layer_outputs->push_back(x.value());
  }
  if (cache) cache->length += static_cast<int>(n);
  return layer_norm(x, lnf_g_, lnf_b_);
}

Var Transformer::logits(const Var& hidden) const { return matmul_nt(hidden, tok_emb_); }

Transformer Transformer::clone() const {
  Transformer copy = *this;
  // Rebind every leaf to fresh storage so the copy shares nothing.
  auto fresh = [](Var& v) { v = Var(v.value(), v.requires_grad()); };
  fresh(copy.tok_emb_);
  fresh(copy.pos_emb_);
  for (auto& b : copy.blocks_) {
    for (Var* v : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_g,
                   &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
      fresh(*v);
    }
  }
  fresh(copy.lnf_g_);
  fresh(copy.lnf_b_);
  copy.register_parameters();
  return copy;
}

void Transformer::save(const std::filesystem::path& dir, const std::string& stem) const {
  std::filesystem::create_directories(dir);
  std::ofstream cfg(dir / (stem + ".config.json"));
  cfg << config_.to_json().dump(2) << "\n";
  write_tensors(dir / (stem + ".weights.bin"), params_.to_map());
}

Transformer Transformer::load(const std::filesystem::path& dir, const std::string& stem) {
  const auto cfg_path = dir / (stem + ".config.json");
  std::ifstream cfg(cfg_path);
  if (!cfg) throw ModelNotFound("missing " + cfg_path.string());
  Transformer t(TransformerConfig::from_json(nlohmann::json::parse(cfg)), 0);
  t.params_.load_map(read_tensors(dir / (stem + ".weights.bin")));
  return t;
}

}  // namespace inv2a::nn
