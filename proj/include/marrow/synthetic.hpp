#pragma once

// Synthetic vocabulary-mismatch retrieval task.
//
// Each of `concepts` topics has a document word "w<i>" and a query-side
// synonym "s<i>". Documents mix a few concepts with filler words; a query
// restates some of its positive document's concepts, swapping each for the
// synonym with probability `synonym_prob`. Exact-match lexical scoring only
// sees the unswapped words, while a trained encoder can learn the pairing.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "marrow/corpus.hpp"
#include "marrow/error.hpp"
#include "marrow/eval.hpp"

namespace marrow {

struct SyntheticConfig {
  std::size_t docs = 5000;
  std::size_t train_queries = 500;
  std::size_t eval_queries = 200;
  std::size_t concepts = 100;
  std::size_t concepts_per_doc = 4;
  std::size_t filler_words = 400;  // filler vocabulary size
  std::size_t filler_per_doc = 4;
  std::size_t concepts_per_query = 3;
  std::size_t filler_per_query = 1;
  double synonym_prob = 0.7;
  std::uint64_t seed = 0;

  void validate() const {
    if (docs < 2 || concepts < concepts_per_doc || concepts_per_doc < concepts_per_query || concepts_per_query < 1)
      throw ConfigError("synthetic: need docs ≥ 2 and concepts ≥ concepts_per_doc ≥ concepts_per_query ≥ 1");
    if (train_queries + eval_queries > docs) throw ConfigError("synthetic: more queries than documents");
    if (filler_words < 1 && (filler_per_doc > 0 || filler_per_query > 0))
      throw ConfigError("synthetic: filler words requested with an empty filler vocabulary");
    if (!(synonym_prob >= 0.0 && synonym_prob <= 1.0)) throw ConfigError("synthetic: synonym_prob must be in [0,1]");
  }
};

struct SyntheticData {
  TextStore corpus;
  TextStore queries;  // train queries first, then eval queries
  Qrels train_qrels, eval_qrels;
};

inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> filler(0, cfg.filler_words ? cfg.filler_words - 1 : 0);
  std::bernoulli_distribution swap(cfg.synonym_prob);
  std::vector<std::size_t> concept_ids(cfg.concepts);
  for (std::size_t i = 0; i < cfg.concepts; ++i) concept_ids[i] = i;

  SyntheticData out;
  std::vector<std::vector<std::size_t>> doc_concepts(cfg.docs);
  const std::size_t width = std::to_string(cfg.docs - 1).size();
  auto doc_id = [&](std::size_t i) {
    std::string s = std::to_string(i);
    return "D" + std::string(width - s.size(), '0') + s;
  };
  for (std::size_t d = 0; d < cfg.docs; ++d) {
    // partial shuffle picks distinct concepts
    for (std::size_t i = 0; i < cfg.concepts_per_doc; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cfg.concepts - 1);
      std::swap(concept_ids[i], concept_ids[pick(rng)]);
    }
    doc_concepts[d].assign(concept_ids.begin(), concept_ids.begin() + static_cast<std::ptrdiff_t>(cfg.concepts_per_doc));
    std::vector<std::string> words;
    for (auto c : doc_concepts[d]) words.push_back("w" + std::to_string(c));
    for (std::size_t i = 0; i < cfg.filler_per_doc; ++i) words.push_back("f" + std::to_string(filler(rng)));
    std::shuffle(words.begin(), words.end(), rng);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    out.corpus.add(doc_id(d), text);
  }

  std::vector<std::size_t> positives(cfg.docs);
  for (std::size_t i = 0; i < cfg.docs; ++i) positives[i] = i;
  std::shuffle(positives.begin(), positives.end(), rng);
  const std::size_t total = cfg.train_queries + cfg.eval_queries;
  for (std::size_t q = 0; q < total; ++q) {
    const std::size_t d = positives[q];
    auto concepts = doc_concepts[d];
    std::shuffle(concepts.begin(), concepts.end(), rng);
    std::vector<std::string> words;
    for (std::size_t i = 0; i < cfg.concepts_per_query; ++i)
      words.push_back((swap(rng) ? "s" : "w") + std::to_string(concepts[i]));
    for (std::size_t i = 0; i < cfg.filler_per_query; ++i) words.push_back("f" + std::to_string(filler(rng)));
    std::shuffle(words.begin(), words.end(), rng);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    const bool train = q < cfg.train_queries;
    const std::string qid = (train ? "T" : "E") + std::to_string(train ? q : q - cfg.train_queries);
    out.queries.add(qid, text);
    (train ? out.train_qrels : out.eval_qrels).judgments[qid][doc_id(d)] = 1;
  }
  return out;
}

}  // namespace marrow
