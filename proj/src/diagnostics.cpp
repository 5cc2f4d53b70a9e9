#include "inv2a/diagnostics.hpp"

#include "inv2a/metrics.hpp"
#include "inv2a/scoring.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>

namespace inv2a::diag {

using nlohmann::json;

double conditional_entropy(std::string_view context, std::string_view target, const bridge::CausalLM& lm) {
  return bridge::score_continuation(lm, context, target).mean_entropy_bits();
}

double conditional_logprob(std::string_view context, std::string_view target, const bridge::CausalLM& lm) {
  return bridge::score_continuation(lm, context, target).mean_logprob();
}

RoundTrip roundtrip_from_output(const std::string& x, const std::string& y, const bridge::CausalLM& lm,
                                const bridge::InverseModel* inverse) {
  RoundTrip rt;
  rt.output = y;
  if (inverse) {
    rt.recovered = inverse->invert(bridge::OutputSet({y})).text;
  } else {
    bridge::DecodeParams dp;
    dp.sampling = bridge::SamplingParams::greedy(lm.max_positions() / 2);
    rt.recovered = bridge::respond(lm, y, dp).text;
  }
  rt.bleu = metrics::bleu(x, rt.recovered);
  return rt;
}

RoundTrip roundtrip_fidelity(const std::string& x, const bridge::CausalLM& lm, const bridge::InverseModel* inverse,
                             const bridge::DecodeParams& forward) {
  return roundtrip_from_output(x, bridge::respond(lm, x, forward).text, lm, inverse);
}

json DiagnosticsReport::to_json() const {
  return json{{"h_x_given_y", h_x_given_y},
              {"h_y_given_x", h_y_given_x},
              {"logp_x_given_y", logp_x_given_y},
              {"roundtrip_bleu", roundtrip_bleu},
              {"n_samples", n_samples}};
}

DiagnosticsReport diagnose_pairs(const std::vector<std::pair<std::string, std::string>>& pairs,
                                 const bridge::CausalLM& lm, const bridge::InverseModel* inverse) {
  if (pairs.empty()) throw EmptyInput("no pairs to diagnose");
  DiagnosticsReport r;
  for (const auto& [x, y] : pairs) {
    const auto inv = bridge::score_continuation(lm, y, x);
    r.h_x_given_y += inv.mean_entropy_bits();
    r.logp_x_given_y += inv.mean_logprob();
    r.h_y_given_x += conditional_entropy(x, y, lm);
    r.roundtrip_bleu += roundtrip_from_output(x, y, lm, inverse).bleu;
  }
  const double n = static_cast<double>(pairs.size());
  r.h_x_given_y /= n;
  r.h_y_given_x /= n;
  r.logp_x_given_y /= n;
  r.roundtrip_bleu /= n;
  r.n_samples = static_cast<int>(pairs.size());
  return r;
}

// ---------------------------------------------------------------------------
// Source invariance

json SimilarityProbe::to_json() const {
  return json{{"mode", mode == PoolMode::kAvg ? "avg" : "last"},
              {"per_source_mean_cosines", per_source_mean_cosines},
              {"grand_mean", grand_mean},
              {"excluded", excluded}};
}

Representer raw_embedding_representer(const bridge::CausalLM& lm) {
  return [&lm](const std::string& text) {
    const TokenIds ids = lm.tokenizer().encode(text);
    if (ids.empty()) throw EmptyInput("cannot represent empty text");
    return lm.embed(ids);
  };
}

Representer pseudo_representer(const bridge::InverseModel& inverse) {
  return [&inverse](const std::string& text) {
    const auto p = inverse.pseudo(bridge::OutputSet({text}));
    const int begin = p.segments.front().first;
    const int end = p.segments.back().second;
    return Matrix(p.vectors.value().middleRows(begin, end - begin));
  };
}

RowVector pool_rows(const Matrix& rows, PoolMode mode) {
  if (rows.rows() == 0) throw EmptyInput("cannot pool zero rows");
  if (mode == PoolMode::kLast) return rows.row(rows.rows() - 1);
  return rows.colwise().mean();
}

double cosine(const RowVector& a, const RowVector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

SimilarityProbe source_invariance_from_vectors(const std::vector<std::vector<RowVector>>& vectors,
                                               const std::vector<std::string>& names, PoolMode mode) {
  SimilarityProbe probe;
  probe.mode = mode;
  for (std::size_t s = 0; s < vectors.size(); ++s) {
    const auto& v = vectors[s];
    if (v.size() < 2) {
      probe.excluded.push_back(s < names.size() ? names[s] : std::to_string(s));
      continue;
    }
    double sum = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t j = i + 1; j < v.size(); ++j) {
        sum += cosine(v[i], v[j]);
        ++count;
      }
    }
    probe.per_source_mean_cosines.push_back(sum / count);
  }
  if (probe.per_source_mean_cosines.size() < 2) throw ValidationError("source invariance needs at least two sources");
  probe.grand_mean = std::accumulate(probe.per_source_mean_cosines.begin(), probe.per_source_mean_cosines.end(), 0.0) /
                     static_cast<double>(probe.per_source_mean_cosines.size());
  return probe;
}

SimilarityProbe source_invariance_score(const std::vector<SourceOutputs>& sources, const Representer& rep,
                                        PoolMode mode) {
  std::vector<std::vector<RowVector>> vecs;
  std::vector<std::string> names;
  for (const auto& s : sources) {
    names.push_back(s.source);
    auto& list = vecs.emplace_back();
    for (const auto& o : s.outputs) list.push_back(pool_rows(rep(o), mode));
  }
  return source_invariance_from_vectors(vecs, names, mode);
}

// ---------------------------------------------------------------------------
// Mutual information

double digamma(double x) { return boost::math::digamma(x); }

namespace {

Matrix jitter_constant_columns(const Matrix& m, std::uint64_t seed, double* eps_out) {
  Matrix out = m;
  Rng rng(seed);
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double lo = m.col(c).minCoeff(), hi = m.col(c).maxCoeff();
    if (hi > lo) continue;
    const double eps = 1e-10 * std::max(1.0, std::abs(lo));
    *eps_out = std::max(*eps_out, eps);
    for (Eigen::Index r = 0; r < m.rows(); ++r) out(r, c) += eps * standard_normal(rng);
  }
  return out;
}

double max_norm_distance(const Matrix& m, Eigen::Index i, Eigen::Index j) {
  return (m.row(i) - m.row(j)).cwiseAbs().maxCoeff();
}

}  // namespace

MIEstimate knn_mutual_information(const Matrix& a_in, const Matrix& b_in, int k, std::uint64_t jitter_seed) {
  if (k < 1) throw ValidationError("k must be >= 1");
  if (a_in.rows() != b_in.rows()) throw DimensionError("sample counts differ");
  const Eigen::Index n = a_in.rows();
  if (n < 3 * k) throw ValidationError("need at least 3k samples");
  MIEstimate est;
  const Matrix a = jitter_constant_columns(a_in, mix_seed(jitter_seed, 1), &est.jitter_eps);
  const Matrix b = jitter_constant_columns(b_in, mix_seed(jitter_seed, 2), &est.jitter_eps);
  std::vector<double> da(static_cast<std::size_t>(n)), db(static_cast<std::size_t>(n)), dz(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto u = static_cast<std::size_t>(j);
      if (j == i) {
        dz[u] = std::numeric_limits<double>::infinity();
        da[u] = db[u] = std::numeric_limits<double>::infinity();
        continue;
      }
      da[u] = max_norm_distance(a, i, j);
      db[u] = max_norm_distance(b, i, j);
      dz[u] = std::max(da[u], db[u]);
    }
    std::vector<double> sorted = dz;
    std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
    const double eps = sorted[static_cast<std::size_t>(k - 1)];
    int nx = 0, ny = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      nx += da[static_cast<std::size_t>(j)] < eps;
      ny += db[static_cast<std::size_t>(j)] < eps;
    }
    acc += digamma(nx + 1.0) + digamma(ny + 1.0);
  }
  est.raw = digamma(static_cast<double>(k)) + digamma(static_cast<double>(n)) - acc / static_cast<double>(n);
  est.nats = std::max(0.0, est.raw);
  return est;
}

std::vector<int> select_dimensions(const Matrix& activations, int count) {
  const int d = static_cast<int>(activations.cols());
  std::vector<int> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  const RowVector level = activations.cwiseAbs().colwise().mean();
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return level(x) > level(y); });
  if (count >= d) return order;
  std::vector<int> out;
  for (int i = 0; i < count; ++i) {
    const int pos = count == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(i) * (d - 1) / (count - 1)));
    out.push_back(order[static_cast<std::size_t>(pos)]);
  }
  return out;
}

json LayerMI::to_json() const { return json{{"per_layer_nats", per_layer}}; }

LayerMI layer_mutual_information(const std::vector<std::string>& outputs, const bridge::InverseModel& inverse, int k,
                                 int dims) {
  const std::size_t n = outputs.size();
  if (n == 0) throw EmptyInput("no outputs for layer MI");
  const int layers = inverse.decoder->layer_count();
  Matrix a(static_cast<Eigen::Index>(n), inverse.decoder->d_model());
  std::vector<Matrix> l(static_cast<std::size_t>(layers), Matrix(static_cast<Eigen::Index>(n), inverse.decoder->d_model()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = inverse.pseudo(bridge::OutputSet({outputs[i]}));
    const Matrix rows = p.vectors.value();
    const int begin = p.segments.front().first;
    const int end = p.segments.back().second;
    a.row(static_cast<Eigen::Index>(i)) = rows.middleRows(begin, end - begin).colwise().mean();
    const auto states = inverse.decoder->layer_states(rows);
    for (int li = 0; li < layers; ++li) {
      l[static_cast<std::size_t>(li)].row(static_cast<Eigen::Index>(i)) =
          states[static_cast<std::size_t>(li)].row(rows.rows() - 1);
    }
  }
  LayerMI out;
  for (int li = 0; li < layers; ++li) {
    const Matrix& m = l[static_cast<std::size_t>(li)];
    double sum = 0.0;
    const auto sel = select_dimensions(m, dims);
    for (int d : sel) sum += knn_mutual_information(a, Matrix(m.col(d)), k, static_cast<std::uint64_t>(li * 131 + d)).nats;
    out.per_layer.push_back(sum / static_cast<double>(sel.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token importance

json TokenImportance::to_json() const {
  return json{{"tokens", tokens},
              {"without_encoder", without_encoder},
              {"with_encoder", with_encoder},
              {"shared", shared},
              {"ratio_without", ratio_without ? json(*ratio_without) : json(nullptr)},
              {"ratio_with", ratio_with ? json(*ratio_with) : json(nullptr)}};
}

std::optional<double> shared_attention_ratio(const std::vector<double>& attention, const std::vector<bool>& shared) {
  if (attention.empty() || attention.size() != shared.size()) return std::nullopt;
  double all = 0.0, sh = 0.0;
  int n_sh = 0;
  for (std::size_t i = 0; i < attention.size(); ++i) {
    all += attention[i];
    if (shared[i]) {
      sh += attention[i];
      ++n_sh;
    }
  }
  if (n_sh == 0 || all == 0.0) return std::nullopt;
  return (sh / n_sh) / (all / static_cast<double>(attention.size()));
}

namespace {

std::vector<double> raw_block_attention(const std::vector<Matrix>& maps, int raw_len) {
  std::vector<double> att(static_cast<std::size_t>(raw_len), 0.0);
  if (maps.empty()) return att;
  for (const auto& m : maps) {
    const Eigen::Index q = m.rows() - 1;
    for (int j = 0; j < raw_len; ++j) att[static_cast<std::size_t>(j)] += m(q, j);
  }
  double total = std::accumulate(att.begin(), att.end(), 0.0);
  if (total > 0.0) {
    for (double& v : att) v /= total;
  }
  return att;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

TokenImportance token_importance(const bridge::OutputSet& y, const bridge::InverseModel& inverse,
                                 const bridge::CausalLM& lm, const std::string& true_prompt) {
  TokenImportance ti;
  const TokenIds raw = bridge::raw_output_ids(y, lm.tokenizer());
  if (raw.empty()) throw EmptyInput("no raw-output tokens");
  const int l = static_cast<int>(raw.size());
  std::set<std::string> prompt_words;
  for (const auto& w : metrics::metric_tokens(true_prompt, true)) {
    if (!(w.size() == 1 && std::ispunct(static_cast<unsigned char>(w[0])))) prompt_words.insert(w);
  }
  for (TokenId id : raw) {
    ti.tokens.push_back(lm.tokenizer().word(id));
    ti.shared.push_back(prompt_words.count(lower(ti.tokens.back())) > 0);
  }
  ti.without_encoder = raw_block_attention(lm.attention_maps(lm.embed(raw)), l);
  ti.ratio_without = shared_attention_ratio(ti.without_encoder, ti.shared);
  if (inverse.include_raw) {
    const auto p = inverse.pseudo(y);
    ti.with_encoder = raw_block_attention(lm.attention_maps(p.vectors.value()), l);
    ti.ratio_with = shared_attention_ratio(ti.with_encoder, ti.shared);
  }
  return ti;
}

}  // namespace inv2a::diag
