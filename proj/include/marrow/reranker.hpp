#pragma once

// Pointwise reranker: "query : {Q} document : {D}</s>" scored by the linear
// head, trained contrastively against each query's own negatives only.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "marrow/checkpoint.hpp"
#include "marrow/error.hpp"
#include "marrow/model.hpp"
#include "marrow/optim.hpp"
#include "marrow/parallel.hpp"
#include "marrow/ranking.hpp"
#include "marrow/retriever.hpp"
#include "marrow/text.hpp"
#include "marrow/training.hpp"

namespace marrow {

/// Template words; build_vocab should be given these as required tokens.
inline const std::vector<std::string>& template_tokens() {
  static const std::vector<std::string> tokens = {"query", ":", "document"};
  return tokens;
}

/// Truncates the document side first. If the markers, the query and </s>
/// alone exceed max_len, the template is cut after max_len − 1 tokens.
inline TokenSequence format_rerank_input(const TokenSequence& query, const TokenSequence& doc, const Vocabulary& vocab,
                                         std::size_t max_len) {
  if (max_len < 4) throw ContractError("format_rerank_input: max_len must be at least 4");
  const TokenId q_marker = vocab.id("query"), colon = vocab.id(":"), d_marker = vocab.id("document");
  TokenSequence out;
  out.truncated = query.truncated || doc.truncated;
  const std::size_t fixed = 4 + 1;  // markers + </s>
  if (fixed + query.size() <= max_len) {
    const std::size_t room = max_len - fixed - query.size();
    out.ids = {q_marker, colon};
    out.ids.insert(out.ids.end(), query.ids.begin(), query.ids.end());
    out.ids.push_back(d_marker);
    out.ids.push_back(colon);
    const std::size_t keep = std::min(room, doc.size());
    out.ids.insert(out.ids.end(), doc.ids.begin(), doc.ids.begin() + static_cast<std::ptrdiff_t>(keep));
    out.truncated = out.truncated || keep < doc.size();
  } else {
    std::vector<TokenId> full = {q_marker, colon};
    full.insert(full.end(), query.ids.begin(), query.ids.end());
    full.push_back(d_marker);
    full.push_back(colon);
    full.insert(full.end(), doc.ids.begin(), doc.ids.end());
    out.ids.assign(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(max_len - 1));
    out.truncated = true;
  }
  out.ids.push_back(kEosId);
  return out;
}

inline TokenSequence format_rerank_input(std::string_view query, std::string_view doc, const Vocabulary& vocab,
                                         std::size_t max_len) {
  const std::size_t unbounded = std::max<std::size_t>(1, query.size() + doc.size());
  return format_rerank_input(tokenize(query, vocab, unbounded), tokenize(doc, vocab, unbounded), vocab, max_len);
}

inline float score_pair(const TokenSequence& query, const TokenSequence& doc, const ModelWeights<float>& w,
                        const LoraAdapters<float>* lora, const Vocabulary& vocab, std::size_t max_len) {
  return score_head(w, lora, format_rerank_input(query, doc, vocab, max_len));
}

inline float score_pair(const TokenSequence& query, const TokenSequence& doc, const ModelCheckpoint& ckpt,
                        std::size_t max_len) {
  return score_pair(query, doc, ckpt.weights, ckpt.lora(), ckpt.vocab, max_len);
}

/// Scores [N×(1+m)] with the positive in column 0: mean over queries of
/// −log softmax(row/τ)[0].
template <typename T>
Var<T> reranker_loss(Var<T> scores, double temperature) {
  detail::require_matrix(scores, "reranker_loss");
  if (scores.shape()[1] < 2) throw ContractError("reranker_loss: need at least one negative per query");
  std::vector<std::size_t> positives(scores.shape()[0], 0);
  return contrastive_loss(scores, positives, temperature);
}

/// Rescores the first k candidates (in parallel) and sorts them by (score
/// desc, id asc). With keep_tail, the remaining candidates follow in
/// retriever order with scores rewritten to descend below the block, so
/// the output stays a valid score-ordered run.
inline std::vector<Hit> rerank(const std::vector<Hit>& candidates, std::size_t k,
                               const std::function<double(const std::string&)>& score, bool keep_tail = true) {
  if (candidates.empty()) return {};
  k = std::min(k, candidates.size());
  std::vector<Hit> block(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));
  parallel_for(block.size(), [&](std::size_t i) { block[i].score = score(block[i].doc_id); });
  std::sort(block.begin(), block.end(), ranks_before);
  if (keep_tail) {
    double floor = block.empty() ? 0.0 : block.back().score;
    for (std::size_t i = k; i < candidates.size(); ++i) {
      floor -= 1.0;
      block.push_back({candidates[i].doc_id, floor});
    }
  }
  return block;
}

inline std::vector<Hit> rerank(const TokenSequence& query, const std::vector<Hit>& candidates, std::size_t k,
                               const ModelCheckpoint& ckpt, const TokenLookup& docs, std::size_t max_len,
                               bool keep_tail = true) {
  return rerank(
      candidates, k,
      [&](const std::string& id) { return static_cast<double>(score_pair(query, lookup(docs, id, "document"), ckpt, max_len)); },
      keep_tail);
}

struct RerankerTrainConfig {
  std::size_t batch_size = 8;  // queries per step
  std::size_t negatives = 7;  // m per query
  std::size_t epochs = 1;
  double temperature = 1.0;
  std::size_t max_len = 256;
  AdamConfig adam;
  std::uint64_t seed = 0;
  Trainable mode = Trainable::all;
  std::size_t max_steps = 0;
  std::function<void(std::size_t epoch, const TrainLog&)> on_epoch;
};

/// Loss and gradient for groups of (1 positive + m negatives) formatted inputs.
template <typename T>
StepResult<T> reranker_step(const ModelWeights<T>& w, const std::type_identity_t<LoraAdapters<T>>* lora,
                            Trainable mode, const std::vector<TokenSequence>& inputs, std::size_t group,
                            double temperature) {
  if (group < 2 || inputs.size() % group != 0) throw ContractError("reranker_step: inputs must form whole groups");
  const std::size_t queries = inputs.size() / group;
  LossFn<T> loss = [queries, group, temperature](Tape<T>&, std::span<const Var<T>> out) {
    std::vector<Var<T>> rows;
    for (const auto& s : out) rows.push_back(reshape(s, Shape{1, 1}));
    Var<T> column = concat_rows(std::span<const Var<T>>(rows));
    return reranker_loss(reshape(column, Shape{queries, group}), temperature);
  };
  return cached_step(w, lora, mode, inputs, OutputKind::score, loss);
}

inline TrainLog train_reranker(ModelWeights<float>& weights, LoraAdapters<float>* lora, const RerankerTrainConfig& cfg,
                               std::span<const TrainingExample> examples, const TokenLookup& queries,
                               const TokenLookup& docs, const Vocabulary& vocab) {
  if (examples.empty()) throw DataError("train_reranker: empty training set");
  if (cfg.batch_size < 1 || cfg.negatives < 1) throw ConfigError("reranker batch_size and negatives must be positive");
  if (weights.config.head != HeadKind::scalar) throw ConfigError("train_reranker: model has no scalar head");
  std::vector<std::string> corpus_ids;
  for (const auto& [id, seq] : docs) corpus_ids.push_back(id);
  std::sort(corpus_ids.begin(), corpus_ids.end());
  std::mt19937_64 rng(cfg.seed);
  AdamW opt(cfg.adam);
  auto params = trainable_tensors(weights, lora, cfg.mode);
  TrainLog log;
  const std::size_t group = 1 + cfg.negatives;
  std::vector<std::size_t> order(examples.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps && log.losses.size() >= cfg.max_steps) return log;
      std::vector<TrainingExample> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        chunk.push_back(examples[order[i]]);
      auto batch = assemble_batch(chunk, cfg.negatives, corpus_ids, rng, &log.padded_examples);
      std::vector<TokenSequence> inputs;
      for (std::size_t i = 0; i < batch.candidate_ids.size(); ++i) {
        const auto& q = lookup(queries, batch.query_ids[i / group], "query");
        inputs.push_back(format_rerank_input(q, lookup(docs, batch.candidate_ids[i], "document"), vocab, cfg.max_len));
      }
      StepResult<float> step;
      try {
        step = reranker_step(weights, lora, cfg.mode, inputs, group, cfg.temperature);
      } catch (const NumericError& e) {
        throw NumericError("reranker training diverged at step " + std::to_string(log.losses.size() + 1) + ": " +
                           e.what());
      }
      opt.step(params, step.grads);
      log.losses.push_back(step.loss);
    }
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1, log);
  }
  return log;
}

}  // namespace marrow
