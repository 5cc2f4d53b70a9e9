#include "inv2a/toy_world.hpp"

#include "inv2a/templates.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace inv2a::toy {

namespace fs = std::filesystem;

namespace {

// Linear warmup over the first 5% of steps, then cosine decay to 10%.
double scheduled_lr(double peak, int step, int total) {
  const int warm = std::max(1, total / 20);
  if (step < warm) return peak * (step + 1) / warm;
  const double t = static_cast<double>(step - warm) / std::max(1, total - warm);
  return peak * (0.1 + 0.45 * (1.0 + std::cos(3.14159265358979323846 * t)));
}

const std::string& pick(const std::vector<std::string>& items, Rng& rng) {
  return items[static_cast<std::size_t>(rng() % items.size())];
}

std::string normalize(const std::string& text) {
  // Canonical spacing: punctuation attached exactly as the tokenizer decodes it.
  std::vector<std::string> words = Tokenizer::split(text);
  Tokenizer local(words);
  return local.decode(local.encode(text));
}

}  // namespace

ToyLanguage::ToyLanguage()
    : tasks_{"describe", "write a poem about", "tell a story about", "list facts about", "explain how to draw",
             "ask a question about"},
      adjectives_{"red", "blue", "green", "small", "big", "old", "quiet", "bright"},
      nouns_{"fox", "river", "castle", "robot", "garden", "ship", "forest", "city", "dragon", "lamp", "cat", "mountain"},
      settings_{"morning", "winter", "night", "rain", "summer"},
      qualities_{"quick", "calm", "strong", "gentle", "curious", "proud", "lonely", "happy", "wild", "warm"},
      verbs_{"sings", "dances", "sleeps", "wanders", "glows", "waits"},
      verb_bases_{"sing", "dance", "sleep", "wander", "glow", "wait"},
      shapes_{"circle", "square", "line", "curve"},
      synonyms_{{"red", "crimson"},    {"blue", "azure"},      {"green", "emerald"}, {"small", "tiny"},
                {"big", "large"},      {"old", "ancient"},     {"quiet", "silent"},  {"bright", "shiny"},
                {"quick", "fast"},     {"calm", "peaceful"},   {"strong", "mighty"}, {"gentle", "kind"},
                {"curious", "eager"},  {"proud", "noble"},     {"lonely", "alone"},  {"happy", "joyful"},
                {"wild", "fierce"},    {"warm", "cozy"},       {"sings", "hums"},    {"dances", "spins"},
                {"sleeps", "rests"},   {"wanders", "roams"},   {"glows", "shines"},  {"waits", "lingers"},
                {"sing", "hum"},       {"dance", "spin"},      {"sleep", "rest"},    {"wander", "roam"},
                {"glow", "shine"},     {"wait", "linger"},     {"circle", "ring"},   {"square", "box"},
                {"line", "stroke"},    {"curve", "arc"},       {"friend", "companion"}} {}

std::string ToyLanguage::prompt_text(const ToyPrompt& p) const {
  std::string s = tasks_.at(static_cast<std::size_t>(p.task)) + " the " + adjectives_.at(static_cast<std::size_t>(p.adjective)) +
                  " " + nouns_.at(static_cast<std::size_t>(p.noun));
  if (p.setting >= 0) s += " in the " + settings_.at(static_cast<std::size_t>(p.setting));
  return s;
}

std::string ToyLanguage::respond(const ToyPrompt& p, Rng& rng) const {
  // Surface variation: content words occasionally swap to a synonym.
  auto variant = [&](const std::string& w) -> std::string {
    if (uniform01(rng) >= 0.2) return w;
    for (const auto& g : synonyms_) {
      if (g.front() == w) return g.back();
    }
    return w;
  };
  const std::string adj = variant(adjectives_.at(static_cast<std::size_t>(p.adjective)));
  const std::string& noun = nouns_.at(static_cast<std::size_t>(p.noun));
  const std::string q1 = variant(pick(qualities_, rng));
  std::string q2 = pick(qualities_, rng);
  while (q2 == q1) q2 = pick(qualities_, rng);
  q2 = variant(q2);
  const std::size_t vi = static_cast<std::size_t>(rng() % verbs_.size());
  const std::string verb = variant(verbs_[vi]);
  const std::string verb_base = variant(verb_bases_[vi]);
  const std::string where = p.setting >= 0 ? " in the " + settings_.at(static_cast<std::size_t>(p.setting)) : "";
  std::string s;
  switch (p.task) {
    case 0:
      s = "the " + adj + " " + noun + " is " + q1 + " and " + q2 + where + " .";
      break;
    case 1:
      s = "oh " + adj + " " + noun + where + " , you " + verb_base + " so " + q1 + " , my " + q2 + " " + variant("friend") + " .";
      break;
    case 2:
      s = "once upon a time a " + adj + " " + noun + " " + verb + where + " , and it was " + q1 + " .";
      break;
    case 3:
      s = "facts : a " + adj + " " + noun + " is " + q1 + " ; it can " + verb_base + where + " .";
      break;
    case 4:
      s = "to draw a " + adj + " " + noun + where + " , start with a " + variant(pick(shapes_, rng)) +
          " , then make it " + q1 + " .";
      break;
    default:
      s = "why is the " + adj + " " + noun + " so " + q1 + where + " ?";
      break;
  }
  return normalize(s);
}

std::vector<ToyPrompt> ToyLanguage::all_prompts() const {
  std::vector<ToyPrompt> out;
  for (int t = 0; t < static_cast<int>(tasks_.size()); ++t) {
    for (int a = 0; a < static_cast<int>(adjectives_.size()); ++a) {
      for (int n = 0; n < static_cast<int>(nouns_.size()); ++n) {
        for (int s = -1; s < static_cast<int>(settings_.size()); ++s) out.push_back({t, a, n, s});
      }
    }
  }
  return out;
}

std::vector<ToyPrompt> ToyLanguage::sample_prompts(int n, std::uint64_t seed) const {
  auto all = all_prompts();
  Rng rng(seed);
  for (std::size_t i = all.size() - 1; i > 0; --i) std::swap(all[i], all[static_cast<std::size_t>(rng() % (i + 1))]);
  if (n > static_cast<int>(all.size())) throw ValidationError("not enough distinct toy prompts");
  all.resize(static_cast<std::size_t>(n));
  return all;
}

std::vector<std::string> ToyLanguage::vocabulary() const {
  std::set<std::string> words;
  auto add_text = [&](const std::string& t) {
    for (auto& w : Tokenizer::split(t)) words.insert(std::move(w));
  };
  for (const auto* list : {&tasks_, &adjectives_, &nouns_, &settings_, &qualities_, &verbs_, &verb_bases_, &shapes_}) {
    for (const auto& w : *list) add_text(w);
  }
  for (const auto& g : synonyms_) {
    for (const auto& w : g) add_text(w);
  }
  add_text("the in is and oh you so my friend once upon a time it was facts : ; can to draw , start with then make why ? .");
  add_text(std::string(templates::kRewritePrefix));
  return {words.begin(), words.end()};
}

// ---------------------------------------------------------------------------
// Training loops

void train_language_model(nn::Transformer& net, const std::vector<TokenIds>& documents, const LmTrainConfig& cfg) {
  if (documents.empty() || cfg.steps <= 0) return;
  const int ctx = net.config().max_positions;
  TokenIds stream;
  for (const auto& d : documents) stream.insert(stream.end(), d.begin(), d.end());
  if (static_cast<int>(stream.size()) < ctx + 1) throw ValidationError("not enough text to fill one window");
  net.parameters().set_requires_grad(true);
  nn::AdamW opt(net.parameters().vars(), nn::AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, 1.0});
  Rng rng(cfg.seed);
  const std::size_t span = stream.size() - static_cast<std::size_t>(ctx);
  for (int step = 0; step < cfg.steps; ++step) {
    opt.set_lr(scheduled_lr(cfg.lr, step, cfg.steps));
    for (int b = 0; b < cfg.batch_windows; ++b) {
      const std::size_t start = static_cast<std::size_t>(rng() % span);
      std::span<const TokenId> input(stream.data() + start, static_cast<std::size_t>(ctx));
      std::span<const TokenId> target(stream.data() + start + 1, static_cast<std::size_t>(ctx));
      nn::Var logits = net.logits(net.forward(net.embed(input)));
      nn::Var loss = nn::scale(nn::cross_entropy(logits, target), 1.0 / cfg.batch_windows);
      nn::backward(loss);
    }
    opt.step();
  }
  net.parameters().set_requires_grad(false);
}

void pretrain_encoder(nn::Transformer& net, const std::vector<TokenIds>& texts, const LmTrainConfig& cfg) {
  if (texts.empty() || cfg.steps <= 0) return;
  net.parameters().set_requires_grad(true);
  nn::AdamW opt(net.parameters().vars(), nn::AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, 1.0});
  Rng rng(cfg.seed);
  for (int step = 0; step < cfg.steps; ++step) {
    opt.set_lr(scheduled_lr(cfg.lr, step, cfg.steps));
    for (int b = 0; b < cfg.batch_windows; ++b) {
      const TokenIds& ids = texts[static_cast<std::size_t>(rng() % texts.size())];
      if (ids.empty()) continue;
      TokenIds input = ids;
      TokenIds target(ids.size(), -1);
      bool any = false;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (uniform01(rng) < 0.15) {
          input[i] = Tokenizer::kUnk;
          target[i] = ids[i];
          any = true;
        }
      }
      if (!any) {
        const std::size_t i = static_cast<std::size_t>(rng() % ids.size());
        input[i] = Tokenizer::kUnk;
        target[i] = ids[i];
      }
      nn::Var logits = net.logits(net.forward(net.embed(input)));
      nn::backward(nn::scale(nn::cross_entropy(logits, target), 1.0 / cfg.batch_windows));
    }
    opt.step();
  }
  net.parameters().set_requires_grad(false);
}

// ---------------------------------------------------------------------------
// Documents

TokenIds pair_document(const Tokenizer& tok, const std::string& prompt, const std::string& response) {
  TokenIds ids = bridge::prompt_ids(tok, prompt);
  TokenIds body = tok.encode(response);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Tokenizer::kEos);
  return ids;
}

namespace {

TokenIds plain_document(const Tokenizer& tok, const std::string& text) {
  TokenIds ids{Tokenizer::kBos};
  TokenIds body = tok.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Tokenizer::kEos);
  return ids;
}

}  // namespace

std::vector<TokenIds> generic_documents(const ToyLanguage& lang, const Tokenizer& tok, int count, Rng& rng) {
  const auto prompts = lang.all_prompts();
  std::vector<TokenIds> docs;
  docs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const ToyPrompt& p = prompts[static_cast<std::size_t>(rng() % prompts.size())];
    const double u = uniform01(rng);
    if (u < 0.35) {
      docs.push_back(plain_document(tok, lang.prompt_text(p)));
    } else if (u < 0.65) {
      docs.push_back(plain_document(tok, lang.respond(p, rng)));
    } else if (u < 0.8) {
      // A rewrite of an instruction repeats it.
      const std::string x = lang.prompt_text(p);
      docs.push_back(pair_document(tok, templates::render_rewrite(x), x));
    } else {
      // Rewrite demonstrations: two responses to one prompt are paraphrases.
      const std::string a = lang.respond(p, rng);
      const std::string b = lang.respond(p, rng);
      docs.push_back(pair_document(tok, templates::render_rewrite(a), b));
    }
  }
  return docs;
}

std::vector<TokenIds> forward_pair_documents(const ToyLanguage& lang, const Tokenizer& tok,
                                             const std::vector<ToyPrompt>& prompts, int count, Rng& rng) {
  std::vector<TokenIds> docs;
  docs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const ToyPrompt& p = prompts[static_cast<std::size_t>(rng() % prompts.size())];
    docs.push_back(pair_document(tok, lang.prompt_text(p), lang.respond(p, rng)));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// World construction

std::string ToyWorldConfig::fingerprint() const {
  std::ostringstream s;
  s << "toy-world-v2 dec=" << decoder.to_json().dump() << " enc=" << encoder.to_json().dump() << " base=" << base_steps
    << " fwd=" << forward_steps << " encsteps=" << encoder_steps << " docs=" << documents << " seed=" << seed;
  return s.str();
}

ToyWorld build_toy_world(const ToyWorldConfig& cfg) {
  ToyWorld world;
  const Tokenizer tok(world.language.vocabulary());
  Rng rng(cfg.seed);

  nn::TransformerConfig dcfg = cfg.decoder;
  dcfg.vocab_size = tok.size();
  dcfg.causal = true;
  auto net = std::make_shared<nn::Transformer>(dcfg, mix_seed(cfg.seed, 1));

  const auto generic = generic_documents(world.language, tok, cfg.documents, rng);
  train_language_model(*net, generic, LmTrainConfig{cfg.base_steps, 8, 3e-3, 0.0, mix_seed(cfg.seed, 2)});
  world.base_lm = std::make_shared<bridge::TransformerLM>(std::make_shared<nn::Transformer>(net->clone()), tok);

  auto mixed = generic_documents(world.language, tok, cfg.documents / 3, rng);
  auto pairs = forward_pair_documents(world.language, tok, world.language.all_prompts(), cfg.documents, rng);
  mixed.insert(mixed.end(), pairs.begin(), pairs.end());
  shuffle_in_place(mixed, rng);
  train_language_model(*net, mixed, LmTrainConfig{cfg.forward_steps, 8, 4e-3, 0.0, mix_seed(cfg.seed, 3)});
  world.lm = std::make_shared<bridge::TransformerLM>(net, tok);

  nn::TransformerConfig ecfg = cfg.encoder;
  ecfg.vocab_size = tok.size();
  ecfg.causal = false;
  nn::Transformer enc(ecfg, mix_seed(cfg.seed, 4));
  std::vector<TokenIds> texts;
  const auto prompts = world.language.all_prompts();
  for (int i = 0; i < cfg.documents; ++i) {
    const ToyPrompt& p = prompts[static_cast<std::size_t>(rng() % prompts.size())];
    texts.push_back(tok.encode(i % 4 == 0 ? world.language.prompt_text(p) : world.language.respond(p, rng)));
  }
  pretrain_encoder(enc, texts, LmTrainConfig{cfg.encoder_steps, 8, 3e-3, 0.0, mix_seed(cfg.seed, 5)});
  world.encoder = std::make_shared<bridge::Encoder>(std::move(enc), tok);
  return world;
}

ToyWorld load_or_build_toy_world(const fs::path& dir, const ToyWorldConfig& cfg) {
  const std::string fp = cfg.fingerprint();
  {
    std::ifstream in(dir / "fingerprint.txt");
    std::string stored;
    if (in && std::getline(in, stored) && stored == fp) {
      ToyWorld world;
      world.base_lm = bridge::TransformerLM::load(dir / "base_lm");
      world.lm = bridge::TransformerLM::load(dir / "lm");
      world.encoder = std::make_shared<bridge::Encoder>(bridge::Encoder::load(dir / "encoder"));
      return world;
    }
  }
  ToyWorld world = build_toy_world(cfg);
  // Build into a sibling directory and swap it in, so a half-written world
  // is never picked up.
  const fs::path tmp = dir.string() + ".tmp" + std::to_string(std::random_device{}());
  fs::create_directories(tmp);
  world.base_lm->save(tmp / "base_lm");
  world.lm->save(tmp / "lm");
  world.encoder->save(tmp / "encoder");
  std::ofstream(tmp / "fingerprint.txt") << fp << "\n";
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir.parent_path(), ec);
  fs::rename(tmp, dir, ec);
  if (ec) fs::remove_all(tmp, ec);
  return world;
}

void write_toy_dataset(const fs::path& path, const ToyLanguage& lang, int n, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  const auto prompts = lang.sample_prompts(n, seed);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    nlohmann::json row{{"id", "toy-" + std::to_string(i)}, {"prompt", lang.prompt_text(prompts[i])}};
    out << row.dump() << "\n";
  }
}

}  // namespace inv2a::toy
