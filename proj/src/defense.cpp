#include "inv2a/defense.hpp"

#include "inv2a/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace inv2a::defense {

namespace fs = std::filesystem;
using nlohmann::json;

json NoiseSpec::to_json() const {
  return json{{"layer", layer}, {"sublayer", sublayer_name(sublayer)}, {"lambda", stddev}, {"seed", seed}, {"pinned", pinned}};
}

nn::Sublayer parse_sublayer(const std::string& name) {
  if (name == "mlp") return nn::Sublayer::kMlp;
  if (name == "attention" || name == "attn") return nn::Sublayer::kAttention;
  throw SpecError("unknown sublayer '" + name + "' (expected mlp or attention)");
}

std::string sublayer_name(nn::Sublayer s) { return s == nn::Sublayer::kMlp ? "mlp" : "attention"; }

std::shared_ptr<bridge::TransformerLM> inject_noise(const bridge::TransformerLM& lm, const NoiseSpec& spec) {
  bridge::TransformerLM::NoiseHook hook;
  hook.layer = spec.layer;
  hook.sublayer = spec.sublayer;
  hook.stddev = spec.stddev;
  hook.seed = spec.seed;
  hook.reseed_each_call = spec.pinned;
  return std::make_shared<bridge::TransformerLM>(lm.with_noise(hook));
}

// ---------------------------------------------------------------------------
// Lexicon

namespace {

// Keep in sync with resources/lexicon.txt.
constexpr const char* kBundledLexicon = R"(# synonym groups, one per line
red crimson
blue azure
green emerald
small tiny little
big large huge
old ancient
quiet silent
bright shiny
quick fast swift
calm peaceful
strong mighty
gentle kind
curious eager
proud noble
lonely alone
happy joyful glad
wild fierce
warm cozy
sings hums
dances spins
sleeps rests
wanders roams
glows shines
waits lingers
sing hum
dance spin
sleep rest
wander roam
glow shine
wait linger
circle ring
square box
line stroke
curve arc
friend companion
begin start
end finish
make create
show display
write compose
tell narrate
story tale
picture image
answer reply
question query
explain describe
help assist
)";

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::vector<std::string>> parse_groups(std::istream& in) {
  std::vector<std::vector<std::string>> groups;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::vector<std::string> g;
    for (std::string w; ss >> w;) g.push_back(w);
    if (g.size() >= 2) groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace

Lexicon::Lexicon(std::vector<std::vector<std::string>> groups) : groups_(std::move(groups)) {
  std::set<std::string> all;
  for (const auto& g : groups_) all.insert(g.begin(), g.end());
  words_.assign(all.begin(), all.end());
}

Lexicon Lexicon::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read lexicon " + path.string());
  return Lexicon(parse_groups(in));
}

Lexicon Lexicon::bundled() {
  const fs::path file = fs::path(INV2A_RESOURCE_DIR) / "lexicon.txt";
  if (fs::exists(file)) return load(file);
  std::istringstream in(kBundledLexicon);
  return Lexicon(parse_groups(in));
}

std::vector<std::string> Lexicon::synonyms(const std::string& word) const {
  const std::string w = lower(word);
  std::vector<std::string> out;
  for (const auto& g : groups_) {
    if (std::find(g.begin(), g.end(), w) == g.end()) continue;
    for (const auto& s : g) {
      if (s != w && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation

PerturbKind parse_perturb_kind(const std::string& name) {
  if (name == "synonym_replacement" || name == "sr") return PerturbKind::kSynonymReplacement;
  if (name == "random_swap" || name == "swap") return PerturbKind::kRandomSwap;
  if (name == "random_noise" || name == "noise") return PerturbKind::kRandomNoise;
  throw SpecError("unknown perturbation '" + name + "'");
}

std::string perturb_kind_name(PerturbKind k) {
  switch (k) {
    case PerturbKind::kSynonymReplacement:
      return "synonym_replacement";
    case PerturbKind::kRandomSwap:
      return "random_swap";
    default:
      return "random_noise";
  }
}

namespace {

struct Piece {
  std::string text;
  bool word = false;
};

// Words are maximal alphanumeric/apostrophe runs; everything else is kept as
// separate pieces so the text can be rebuilt exactly.
std::vector<Piece> pieces(const std::string& y) {
  std::vector<Piece> out;
  for (std::size_t i = 0; i < y.size();) {
    const unsigned char c = static_cast<unsigned char>(y[i]);
    const bool w = std::isalnum(c) || c == '\'' || c >= 128;
    std::size_t j = i;
    while (j < y.size()) {
      const unsigned char d = static_cast<unsigned char>(y[j]);
      if ((std::isalnum(d) || d == '\'' || d >= 128) != w) break;
      ++j;
    }
    out.push_back({y.substr(i, j - i), w});
    i = j;
  }
  return out;
}

std::string match_case(const std::string& like, std::string word) {
  if (!like.empty() && std::isupper(static_cast<unsigned char>(like[0])) && !word.empty()) {
    word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
  }
  return word;
}

std::vector<std::size_t> sample_positions(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng() % (n - i))]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<std::string> perturbable_words(const std::string& y) {
  std::vector<std::string> out;
  for (auto& p : pieces(y)) {
    if (p.word) out.push_back(std::move(p.text));
  }
  return out;
}

PerturbResult perturb_output_detail(const std::string& y, const PerturbSpec& spec, const Lexicon& lexicon) {
  if (spec.rate < 0.0 || spec.rate > 1.0) throw ValidationError("perturbation rate must be in [0,1]");
  PerturbResult res;
  auto parts = pieces(y);
  std::vector<std::size_t> word_at;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].word) word_at.push_back(i);
  }
  const std::size_t w = word_at.size();
  if (w == 0) throw EmptyInput("perturb_output needs at least one word");
  res.target = static_cast<int>(std::lround(spec.rate * static_cast<double>(w)));
  res.text = y;
  if (res.target == 0) return res;
  Rng rng(mix_seed(spec.seed, 0x9e7));
  std::vector<std::string> words;
  for (std::size_t i : word_at) words.push_back(parts[i].text);
  std::vector<std::string> out = words;
  const std::size_t m = static_cast<std::size_t>(res.target);

  switch (spec.kind) {
    case PerturbKind::kSynonymReplacement: {
      // Visit positions in random order; positions without synonyms are
      // skipped in favor of the next one.
      std::vector<std::size_t> shuffled(w);
      for (std::size_t i = 0; i < w; ++i) shuffled[i] = i;
      shuffle_in_place(shuffled, rng);
      std::size_t done = 0;
      for (std::size_t pos : shuffled) {
        if (done == m) break;
        const auto syn = lexicon.synonyms(words[pos]);
        if (syn.empty()) continue;
        out[pos] = match_case(words[pos], syn[static_cast<std::size_t>(rng() % syn.size())]);
        ++done;
      }
      if (done < m) res.flags.push_back("synonyms_exhausted");
      break;
    }
    case PerturbKind::kRandomSwap: {
      std::size_t k = m;
      if (w < 2) {
        res.flags.push_back("too_few_words_to_swap");
        break;
      }
      if (k == 1) {
        k = 2;
        res.flags.push_back("swap_count_raised_to_2");
      }
      // Rotate the chosen words one step; retry position sets that would
      // leave a word in place because of duplicates.
      for (int attempt = 0; attempt < 32; ++attempt) {
        const auto pos = sample_positions(w, k, rng);
        std::vector<std::string> trial = words;
        for (std::size_t i = 0; i < k; ++i) trial[pos[i]] = words[pos[(i + 1) % k]];
        std::size_t diff = 0;
        for (std::size_t i = 0; i < w; ++i) diff += trial[i] != words[i];
        out = std::move(trial);
        if (diff == k) break;
      }
      break;
    }
    case PerturbKind::kRandomNoise: {
      if (lexicon.words().empty()) throw ValidationError("random noise needs a nonempty lexicon");
      for (std::size_t pos : sample_positions(w, m, rng)) {
        std::string repl;
        for (int attempt = 0; attempt < 64; ++attempt) {
          repl = lexicon.words()[static_cast<std::size_t>(rng() % lexicon.words().size())];
          if (lower(repl) != lower(words[pos])) break;
        }
        out[pos] = match_case(words[pos], repl);
      }
      break;
    }
  }
  for (std::size_t i = 0; i < w; ++i) {
    parts[word_at[i]].text = out[i];
    res.changed += out[i] != words[i];
  }
  std::string text;
  for (const auto& p : parts) text += p.text;
  res.text = std::move(text);
  if (spec.kind != PerturbKind::kSynonymReplacement && res.changed != static_cast<int>(m) &&
      !(spec.kind == PerturbKind::kRandomSwap && m == 1)) {
    res.flags.push_back("changed_" + std::to_string(res.changed) + "_of_" + std::to_string(m));
  }
  return res;
}

std::string perturb_output(const std::string& y, const PerturbSpec& spec, const Lexicon& lexicon) {
  return perturb_output_detail(y, spec, lexicon).text;
}

// ---------------------------------------------------------------------------
// Trade-off

json TradeoffTable::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"lambda", r.lambda},
                      {"forward_bleu", r.forward_bleu},
                      {"inversion_bleu", r.inversion_bleu},
                      {"forward_drop", r.forward_drop},
                      {"inversion_drop", r.inversion_drop}});
  }
  return json{{"noise", base.to_json()}, {"clean_inversion_bleu", clean_inversion_bleu}, {"rows", rows_j}};
}

void TradeoffTable::write_csv(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "lambda,forward_bleu,inversion_bleu,forward_drop,inversion_drop\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f}\n", r.lambda, r.forward_bleu, r.inversion_bleu, r.forward_drop,
                       r.inversion_drop);
  }
}

TradeoffTable defense_tradeoff(const std::vector<std::string>& prompts, const bridge::TransformerLM& lm,
                               const bridge::InverseModel& inverse, const std::vector<double>& lambda_grid,
                               const NoiseSpec& base, int max_new_tokens) {
  if (lambda_grid.empty()) throw ValidationError("lambda grid is empty");
  if (prompts.empty()) throw EmptyInput("no prompts for the trade-off sweep");
  TradeoffTable table;
  table.base = base;
  bridge::DecodeParams dp;
  dp.sampling = bridge::SamplingParams::greedy(max_new_tokens);

  std::vector<std::string> clean;
  for (const auto& x : prompts) clean.push_back(bridge::respond(lm, x, dp).text);
  auto inversion_bleu = [&](const std::vector<std::string>& outputs, std::shared_ptr<const bridge::CausalLM> decoder) {
    bridge::InverseModel attacked = inverse;
    attacked.decoder = std::move(decoder);
    double sum = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const std::string y = outputs[i].empty() ? std::string(".") : outputs[i];
      sum += metrics::bleu(prompts[i], attacked.invert(bridge::OutputSet({y})).text);
    }
    return sum / static_cast<double>(prompts.size());
  };
  table.clean_inversion_bleu = inversion_bleu(clean, std::make_shared<bridge::TransformerLM>(lm));

  for (double lambda : lambda_grid) {
    TradeoffRow row;
    row.lambda = lambda;
    NoiseSpec spec = base;
    spec.stddev = lambda;
    auto noisy = inject_noise(lm, spec);
    std::vector<std::string> outs;
    double fwd = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      outs.push_back(bridge::respond(*noisy, prompts[i], dp).text);
      fwd += clean[i].empty() && outs.back().empty() ? 100.0 : metrics::bleu(clean[i], outs.back());
    }
    row.forward_bleu = fwd / static_cast<double>(prompts.size());
    row.inversion_bleu = inversion_bleu(outs, noisy);
    row.forward_drop = (100.0 - row.forward_bleu) / 100.0;
    row.inversion_drop =
        table.clean_inversion_bleu > 0.0 ? (table.clean_inversion_bleu - row.inversion_bleu) / table.clean_inversion_bleu : 0.0;
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace inv2a::defense
