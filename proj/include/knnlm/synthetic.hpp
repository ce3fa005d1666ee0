#pragma once

// Seeded text generators for tests and offline experiments.
//
// wiki_like_corpus: encyclopedia-style articles about a fixed population of
// entities. Each entity owns a handful of facts (country, year, role,
// associate) that recur across its own article and other articles, mixed
// with Zipf-distributed filler sentences. Validation articles restate the
// same facts in new orderings and with fresh filler, so memorized contexts
// from training are useful at test time.
//
// memorization_corpus: a repeated random cycle over the vocabulary, so each
// word has exactly one successor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "knnlm/error.hpp"

namespace knnlm::synthetic {

struct WikiOptions {
  std::size_t entities = 80;
  std::size_t countries = 30;
  std::size_t years = 120;
  std::size_t roles = 40;
  std::size_t filler_words = 600;
  double zipf_s = 1.1;
  std::size_t train_tokens = 30000;
  std::size_t valid_tokens = 5000;
  std::uint64_t seed = 0;
};

struct TextSplits {
  std::string train;
  std::string valid;
};

namespace detail {

struct Entity {
  std::size_t country, year, role, associate;
};

class ArticleWriter {
 public:
  ArticleWriter(const WikiOptions& o, const std::vector<Entity>& ents, std::uint64_t seed)
      : o_(o), ents_(ents), rng_(seed) {
    std::vector<double> w(o.filler_words);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / std::pow(double(i + 1), o.zipf_s);
    zipf_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }

  /// Appends articles until `target` tokens have been written.
  std::string write(std::size_t target) {
    std::vector<std::string> toks;
    std::uniform_int_distribution<std::size_t> pick(0, ents_.size() - 1);
    while (toks.size() < target) article(pick(rng_), toks);
    toks.resize(target);
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      out += toks[i];
      out += (toks[i] == "." && i + 1 < toks.size() && toks[i + 1] == "=") ? '\n' : ' ';
    }
    if (!out.empty()) out.back() = '\n';
    return out;
  }

 private:
  static std::string ent(std::size_t e) { return "ent" + std::to_string(e); }

  void fact(std::size_t e, std::size_t which, std::vector<std::string>& t) {
    const Entity& x = ents_[e];
    auto push = [&](std::initializer_list<std::string> w) { t.insert(t.end(), w); };
    switch (which) {
      case 0:
        push({ent(e), "was", "born", "in", "country" + std::to_string(x.country), "."});
        break;
      case 1:
        push({ent(e), "was", "active", "from", std::to_string(1800 + x.year), "."});
        break;
      case 2:
        push({ent(e), "is", "known", "as", "a", "role" + std::to_string(x.role), "."});
        break;
      default:
        push({ent(e), "worked", "with", ent(x.associate), ",", "a",
              "role" + std::to_string(ents_[x.associate].role), "from", "country" +
              std::to_string(ents_[x.associate].country), "."});
    }
  }

  void filler(std::vector<std::string>& t) {
    std::uniform_int_distribution<std::size_t> len(4, 14);
    std::size_t n = len(rng_);
    for (std::size_t i = 0; i < n; ++i) t.push_back("w" + std::to_string(zipf_(rng_)));
    t.push_back(".");
  }

  void article(std::size_t e, std::vector<std::string>& t) {
    t.insert(t.end(), {"=", ent(e), "="});
    std::vector<std::size_t> facts{0, 1, 2, 3};
    std::shuffle(facts.begin(), facts.end(), rng_);
    std::bernoulli_distribution coin(0.5);
    for (auto f : facts) {
      if (coin(rng_)) filler(t);
      fact(e, f, t);
    }
    filler(t);
  }

  const WikiOptions& o_;
  const std::vector<Entity>& ents_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> zipf_;
};

}  // namespace detail

inline TextSplits wiki_like_corpus(const WikiOptions& o) {
  if (o.entities < 2 || o.countries < 1 || o.years < 1 || o.roles < 1 || o.filler_words < 1)
    fail_usage("wiki_like_corpus: empty pools");
  std::mt19937_64 rng(o.seed);
  std::vector<detail::Entity> ents(o.entities);
  for (std::size_t e = 0; e < ents.size(); ++e) {
    ents[e] = {rng() % o.countries, rng() % o.years, rng() % o.roles, rng() % o.entities};
    if (ents[e].associate == e) ents[e].associate = (e + 1) % o.entities;
  }
  TextSplits s;
  s.train = detail::ArticleWriter(o, ents, o.seed ^ 0x7472u).write(o.train_tokens);
  s.valid = detail::ArticleWriter(o, ents, o.seed ^ 0x76616cu).write(o.valid_tokens);
  return s;
}

inline std::string memorization_corpus(std::size_t tokens, std::size_t vocab, std::uint64_t seed) {
  if (vocab < 2) fail_usage("memorization_corpus: vocab must be >= 2");
  std::vector<std::size_t> cycle(vocab);
  for (std::size_t i = 0; i < vocab; ++i) cycle[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(cycle.begin(), cycle.end(), rng);
  std::string out;
  for (std::size_t i = 0; i < tokens; ++i) {
    out += "m" + std::to_string(cycle[i % vocab]);
    out += (i + 1) % vocab == 0 ? '\n' : ' ';
  }
  return out;
}

}  // namespace knnlm::synthetic
