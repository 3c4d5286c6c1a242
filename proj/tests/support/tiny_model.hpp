#pragma once

// Small models and toy retrieval tasks shared by the training tests.

#include <random>
#include <string>
#include <vector>

#include "marrow/model.hpp"
#include "marrow/retriever.hpp"

namespace marrow::testing {

inline ModelConfig tiny_config(HeadKind head = HeadKind::none, std::size_t lora_rank = 0, std::size_t vocab = 40) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq_len = 16;
  c.lora_rank = lora_rank;
  c.lora_alpha = 4.0;
  c.head = head;
  return c;
}

// Weights with larger-than-default magnitude so every path matters numerically.
inline ModelWeights<float> spread_weights(const ModelConfig& c, std::uint64_t seed) {
  auto w = init_weights(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<float> dist(0.0f, 0.3f);
  w.for_each([&](const std::string& name, Tensor<float>& t) {
    const bool gain = name.find("norm") != std::string::npos;
    for (auto& v : t.values()) v = gain ? 1.0f + dist(rng) : dist(rng);
  });
  return w;
}

inline TokenSequence seq(std::vector<TokenId> ids) { return TokenSequence{std::move(ids), false}; }

/// Toy task: document i is three tokens from its own band and query i
/// repeats two of them. Hard negatives are distractors built from the
/// third tokens of neighbouring bands, so they never coincide with another
/// query's positive.
struct ToyTask {
  TokenLookup queries, docs;
  std::vector<TrainingExample> examples;
};

inline ToyTask toy_task(std::size_t n, std::uint64_t seed) {
  ToyTask t;
  std::mt19937_64 rng(seed);
  auto base = [](std::size_t i) { return static_cast<TokenId>(3 + 3 * i); };
  for (std::size_t i = 0; i < n; ++i) {
    t.docs["d" + std::to_string(i)] = seq({base(i), static_cast<TokenId>(base(i) + 1), static_cast<TokenId>(base(i) + 2)});
    t.docs["x" + std::to_string(i)] =
        seq({static_cast<TokenId>(base(i) + 2), static_cast<TokenId>(base((i + 1) % n) + 2)});
    t.queries["q" + std::to_string(i)] = seq({static_cast<TokenId>(base(i) + 1), base(i)});
  }
  for (std::size_t i = 0; i < n; ++i) {
    TrainingExample ex{"q" + std::to_string(i), "d" + std::to_string(i), {}};
    for (std::size_t j = 0; j < n; ++j) ex.negatives.push_back("x" + std::to_string(j));
    std::shuffle(ex.negatives.begin(), ex.negatives.end(), rng);
    t.examples.push_back(ex);
  }
  return t;
}

}  // namespace marrow::testing
