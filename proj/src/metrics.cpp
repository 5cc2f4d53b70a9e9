#include "inv2a/metrics.hpp"

#include "inv2a/model_bridge.hpp"
#include "inv2a/templates.hpp"

#include <fmt/format.h>
#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace inv2a::metrics {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> metric_tokens(std::string_view text, bool lowercase) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      cur.push_back(lowercase && c < 128 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  return out;
}

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, int> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<Ngram, int> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[Ngram(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

double bleu(std::string_view reference, std::string_view hypothesis) {
  const auto ref = metric_tokens(reference, false);
  const auto hyp = metric_tokens(hypothesis, false);
  if (hyp.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngram_counts(hyp, n);
    const auto r = ngram_counts(ref, n);
    int matched = 0;
    for (const auto& [g, c] : h) {
      auto it = r.find(g);
      if (it != r.end()) matched += std::min(c, it->second);
    }
    const int total = hyp.size() >= n ? static_cast<int>(hyp.size() - n + 1) : 0;
    double p;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = static_cast<double>(matched) / total;
    } else {
      p = (matched + 1.0) / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(hyp.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

F1Result token_f1_detail(std::string_view reference, std::string_view hypothesis) {
  const auto ref = metric_tokens(reference, true);
  const auto hyp = metric_tokens(hypothesis, true);
  if (ref.empty() && hyp.empty()) return {100.0, true};
  if (ref.empty() || hyp.empty()) return {0.0, false};
  std::map<std::string, int> rc;
  for (const auto& t : ref) ++rc[t];
  int overlap = 0;
  for (const auto& t : hyp) {
    auto it = rc.find(t);
    if (it != rc.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return {200.0 * overlap / static_cast<double>(ref.size() + hyp.size()), false};
}

double token_f1(std::string_view reference, std::string_view hypothesis) {
  return token_f1_detail(reference, hypothesis).value;
}

int exact_match(std::string_view reference, std::string_view hypothesis) {
  return trim(reference) == trim(hypothesis) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Embeddings

RowVector HashedNgramEmbedder::embed(std::string_view text) const {
  RowVector v = RowVector::Zero(dims_);
  const auto toks = metric_tokens(text, true);
  auto bump = [&](std::string_view key, double w) {
    v(static_cast<Eigen::Index>(fnv1a(key) % static_cast<std::uint64_t>(dims_))) += w;
  };
  for (std::size_t i = 0; i < toks.size(); ++i) {
    bump("w:" + toks[i], 1.0);
    if (i + 1 < toks.size()) bump("b:" + toks[i] + " " + toks[i + 1], 0.5);
    const std::string padded = "#" + toks[i] + "#";
    for (std::size_t j = 0; j + 3 <= padded.size(); ++j) bump("c:" + padded.substr(j, 3), 0.25);
  }
  return v;
}

RowVector TableEmbedder::embed(std::string_view text) const {
  for (const auto& [k, vec] : table_) {
    if (k == text) return vec;
  }
  throw Error("no embedding for text");
}

std::optional<double> embedding_cosine(std::string_view reference, std::string_view hypothesis,
                                       const EmbeddingProvider& provider) {
  try {
    const RowVector a = provider.embed(reference);
    const RowVector b = provider.embed(hypothesis);
    if (a.size() != b.size()) return std::nullopt;
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return 100.0 * a.dot(b) / (na * nb);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Judge

std::string LocalLMJudge::complete(const std::string& prompt) {
  bridge::DecodeParams dp;
  dp.sampling = bridge::SamplingParams::greedy(max_new_tokens_);
  return bridge::respond(*lm_, prompt, dp).text;
}

std::string HttpJudgeClient::complete(const std::string& prompt) {
  httplib::Client cli(opts_.host, opts_.port);
  cli.set_connection_timeout(opts_.timeout_s, 0);
  cli.set_read_timeout(opts_.timeout_s, 0);
  httplib::Headers headers;
  if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);
  json body{{"prompt", prompt}, {"max_tokens", opts_.max_tokens}, {"temperature", 0}};
  if (!opts_.model.empty()) body["model"] = opts_.model;
  auto res = cli.Post(opts_.path, headers, body.dump(), "application/json");
  if (!res) throw Error("judge request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw Error("judge returned HTTP " + std::to_string(res->status));
  const auto j = json::parse(res->body, nullptr, false);
  if (j.is_discarded()) throw FormatError("judge reply is not JSON");
  if (j.contains("text")) return j["text"].get<std::string>();
  if (j.contains("completion")) return j["completion"].get<std::string>();
  if (j.contains("choices") && !j["choices"].empty()) {
    const auto& c = j["choices"][0];
    if (c.contains("text")) return c["text"].get<std::string>();
    if (c.contains("message")) return c["message"].value("content", "");
  }
  throw FormatError("judge reply has no completion text");
}

JudgeVerdict parse_judge_reply(std::string_view reply) {
  JudgeVerdict v;
  v.raw = std::string(reply);
  std::string word;
  for (char c : reply) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    } else if (!word.empty()) {
      break;
    }
  }
  if (word == "YES") {
    v.yes = true;
  } else if (word != "NO") {
    v.ambiguous = true;
  }
  return v;
}

JudgeVerdict llm_judge(std::string_view prompt_a, std::string_view prompt_b, JudgeClient& client) {
  const std::string prompt = templates::render_judge(prompt_a, prompt_b);
  const RetryPolicy policy = client.retry_policy();
  for (int attempt = 0; attempt < std::max(1, policy.max_attempts); ++attempt) {
    try {
      return parse_judge_reply(client.complete(prompt));
    } catch (const std::exception&) {
      if (attempt + 1 < policy.max_attempts && policy.backoff_ms > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(policy.backoff_ms << attempt));
      }
    }
  }
  JudgeVerdict v;
  v.omitted = true;
  return v;
}

// ---------------------------------------------------------------------------
// Runs

json MetricsReport::to_json() const {
  json j{{"bleu", bleu}, {"token_f1", token_f1}, {"exact", exact}, {"n_samples", n_samples}, {"flags", flags}};
  j["cos_sim"] = cos_sim ? json(*cos_sim) : json(nullptr);
  j["llm_eval"] = llm_eval ? json(*llm_eval) : json(nullptr);
  return j;
}

EvalConfig EvalConfig::from_list(const std::string& list) {
  EvalConfig c;
  c.bleu = c.token_f1 = c.exact = c.cos_sim = c.judge = false;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t(trim(item));
    if (t == "bleu") c.bleu = true;
    else if (t == "f1" || t == "token_f1") c.token_f1 = true;
    else if (t == "cs" || t == "cos_sim") c.cos_sim = true;
    else if (t == "exact") c.exact = true;
    else if (t == "judge") c.judge = true;
    else if (!t.empty()) throw ValidationError("unknown metric '" + t + "'");
  }
  return c;
}

EvalResult evaluate_run(const std::vector<std::pair<std::string, std::string>>& pairs, const EvalConfig& cfg) {
  if (pairs.empty()) throw EmptyInput("evaluate_run needs at least one pair");
  const HashedNgramEmbedder fallback;
  const EmbeddingProvider& embedder = cfg.embedder ? *cfg.embedder : fallback;
  EvalResult out;
  double s_bleu = 0, s_f1 = 0, s_exact = 0, s_cos = 0, s_judge = 0;
  int n_cos = 0, n_judge = 0, n_empty = 0, n_ambiguous = 0;
  bool cos_failed = false, judge_failed = false;
  for (const auto& [ref, hyp] : pairs) {
    SampleScores row;
    row.reference = ref;
    row.hypothesis = hyp;
    if (cfg.bleu) row.bleu = bleu(ref, hyp);
    if (cfg.token_f1) {
      const auto f = token_f1_detail(ref, hyp);
      row.token_f1 = f.value;
      row.f1_both_empty = f.both_empty;
      n_empty += f.both_empty;
    }
    if (cfg.exact) row.exact = exact_match(ref, hyp);
    if (cfg.cos_sim) {
      row.cos_sim = embedding_cosine(ref, hyp, embedder);
      if (row.cos_sim) {
        s_cos += *row.cos_sim;
        ++n_cos;
      } else {
        cos_failed = true;
      }
    }
    if (cfg.judge && cfg.judge_client) {
      row.judge = llm_judge(ref, hyp, *cfg.judge_client);
      if (row.judge->omitted) {
        judge_failed = true;
      } else {
        s_judge += row.judge->yes ? 100.0 : 0.0;
        ++n_judge;
        n_ambiguous += row.judge->ambiguous;
      }
    }
    s_bleu += row.bleu;
    s_f1 += row.token_f1;
    s_exact += row.exact;
    out.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(pairs.size());
  auto& rep = out.report;
  rep.n_samples = static_cast<int>(pairs.size());
  rep.bleu = s_bleu / n;
  rep.token_f1 = s_f1 / n;
  rep.exact = 100.0 * s_exact / n;
  if (cfg.cos_sim) {
    if (n_cos > 0) rep.cos_sim = s_cos / n_cos;
    if (cos_failed) rep.flags.push_back("cos_sim_provider_failed_on_" + std::to_string(pairs.size() - static_cast<std::size_t>(n_cos)));
  }
  if (cfg.judge) {
    if (!cfg.judge_client) rep.flags.push_back("judge_not_configured");
    if (n_judge > 0) rep.llm_eval = s_judge / n_judge;
    if (judge_failed) rep.flags.push_back("judge_omitted_on_" + std::to_string(pairs.size() - static_cast<std::size_t>(n_judge)));
    if (n_ambiguous > 0) rep.flags.push_back("judge_ambiguous_" + std::to_string(n_ambiguous));
  }
  if (n_empty > 0) rep.flags.push_back("token_f1_both_empty_" + std::to_string(n_empty));
  if (cfg.rows_csv) write_rows_csv(*cfg.rows_csv, out.rows);
  if (cfg.rows_jsonl) write_rows_jsonl(*cfg.rows_jsonl, out.rows);
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string judge_label(const SampleScores& r) {
  if (!r.judge) return "";
  if (r.judge->omitted) return "omitted";
  return r.judge->yes ? "YES" : "NO";
}

}  // namespace

void write_rows_csv(const fs::path& path, const std::vector<SampleScores>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "index,reference,hypothesis,bleu,token_f1,exact,cos_sim,judge\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << i << ',' << csv_field(r.reference) << ',' << csv_field(r.hypothesis) << ',' << fmt::format("{:.6f}", r.bleu)
        << ',' << fmt::format("{:.6f}", r.token_f1) << ',' << r.exact << ','
        << (r.cos_sim ? fmt::format("{:.6f}", *r.cos_sim) : "") << ',' << judge_label(r) << '\n';
  }
}

void write_rows_jsonl(const fs::path& path, const std::vector<SampleScores>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    json j{{"index", i},       {"reference", r.reference}, {"hypothesis", r.hypothesis}, {"bleu", r.bleu},
           {"token_f1", r.token_f1}, {"exact", r.exact}};
    j["cos_sim"] = r.cos_sim ? json(*r.cos_sim) : json(nullptr);
    if (r.judge) j["judge"] = {{"label", judge_label(r)}, {"ambiguous", r.judge->ambiguous}, {"raw", r.judge->raw}};
    out << j.dump() << '\n';
  }
}

}  // namespace inv2a::metrics
