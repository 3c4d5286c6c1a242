#pragma once

// Bi-encoder training: batches with hard and in-batch negatives, InfoNCE,
// the optimizer loop, and hard-negative mining from earlier runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "marrow/error.hpp"
#include "marrow/eval.hpp"
#include "marrow/io.hpp"
#include "marrow/model.hpp"
#include "marrow/optim.hpp"
#include "marrow/training.hpp"

namespace marrow {

struct TrainingExample {
  std::string qid;
  std::string positive;
  std::vector<std::string> negatives;
  bool operator==(const TrainingExample&) const = default;
};

struct TrainBatch {
  std::vector<std::string> query_ids;
  std::vector<std::string> candidate_ids;  // per query: positive, then m negatives
  std::vector<std::size_t> positives;  // positives[i] == i·(1+m)
  std::size_t negatives_per_query = 0;  // m

  /// Every query is scored against all candidates but its own positive.
  std::size_t effective_negatives() const { return candidate_ids.size() - 1; }
};

/// Picks m hard negatives per example without replacement. Examples with
/// fewer than m are padded by resampling their own negatives (or, if they
/// have none, random corpus documents other than the positive); each padded
/// example increments `padded`.
inline TrainBatch assemble_batch(std::span<const TrainingExample> examples, std::size_t m,
                                 std::span<const std::string> corpus_ids, std::mt19937_64& rng,
                                 std::size_t* padded = nullptr) {
  if (examples.empty()) throw ContractError("assemble_batch: no examples");
  TrainBatch batch;
  batch.negatives_per_query = m;
  for (const auto& ex : examples) {
    batch.query_ids.push_back(ex.qid);
    batch.positives.push_back(batch.candidate_ids.size());
    batch.candidate_ids.push_back(ex.positive);
    std::vector<std::string> pool = ex.negatives;
    if (pool.size() >= m) {
      // partial Fisher–Yates: the first m entries become the sample
      for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
        batch.candidate_ids.push_back(pool[i]);
      }
      continue;
    }
    if (padded) ++*padded;
    if (pool.empty()) {
      for (const auto& id : corpus_ids)
        if (id != ex.positive) pool.push_back(id);
      if (pool.empty()) throw DataError("assemble_batch: no negatives available for query " + ex.qid);
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < m; ++i) batch.candidate_ids.push_back(i < pool.size() ? pool[i] : pool[pick(rng)]);
  }
  return batch;
}

/// InfoNCE over a [B×C] similarity matrix: −mean_i log softmax(sim_i/τ)[positive_i].
template <typename T>
Var<T> infonce_loss(Var<T> sim, std::span<const std::size_t> positives, double temperature) {
  return contrastive_loss(sim, positives, temperature);
}

using TokenLookup = std::unordered_map<std::string, TokenSequence>;

inline const TokenSequence& lookup(const TokenLookup& table, const std::string& id, const char* what) {
  auto it = table.find(id);
  if (it == table.end()) throw DataError(std::string("unknown ") + what + " id '" + id + "'");
  return it->second;
}

struct TrainLog {
  std::vector<double> losses;  // one per optimizer step
  std::size_t padded_examples = 0;
};

struct RetrieverTrainConfig {
  std::size_t batch_size = 8;  // B queries per step
  std::size_t negatives = 7;  // m hard negatives per query
  std::size_t epochs = 1;
  double temperature = 0.05;
  AdamConfig adam;
  std::uint64_t seed = 0;
  Trainable mode = Trainable::all;
  std::size_t max_steps = 0;  // 0 = no cap
  std::function<void(std::size_t epoch, const TrainLog&)> on_epoch;  // optional progress hook
};

/// One InfoNCE loss evaluation and gradient for a batch; queries and
/// candidates are encoded on separate tapes.
template <typename T>
StepResult<T> retriever_step(const ModelWeights<T>& w, const std::type_identity_t<LoraAdapters<T>>* lora,
                             Trainable mode, const std::vector<TokenSequence>& queries,
                             const std::vector<TokenSequence>& candidates, std::span<const std::size_t> positives,
                             double temperature) {
  const std::size_t b = queries.size();
  std::vector<TokenSequence> inputs = queries;
  inputs.insert(inputs.end(), candidates.begin(), candidates.end());
  std::vector<std::size_t> pos(positives.begin(), positives.end());
  LossFn<T> loss = [b, pos, temperature](Tape<T>&, std::span<const Var<T>> out) {
    Var<T> q = concat_rows(out.subspan(0, b));
    Var<T> d = concat_rows(out.subspan(b));
    return infonce_loss(matmul_nt(q, d), pos, temperature);
  };
  return cached_step(w, lora, mode, inputs, OutputKind::embedding, loss);
}

/// Shuffles examples each epoch (seeded), steps over consecutive batches,
/// and applies AdamW to the tensors selected by `mode`.
inline TrainLog train_retriever(ModelWeights<float>& weights, LoraAdapters<float>* lora,
                                const RetrieverTrainConfig& cfg, std::span<const TrainingExample> examples,
                                const TokenLookup& queries, const TokenLookup& docs) {
  if (examples.empty()) throw DataError("train_retriever: empty training set");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::vector<std::string> corpus_ids;
  for (const auto& [id, seq] : docs) corpus_ids.push_back(id);
  std::sort(corpus_ids.begin(), corpus_ids.end());
  std::mt19937_64 rng(cfg.seed);
  AdamW opt(cfg.adam);
  auto params = trainable_tensors(weights, lora, cfg.mode);
  TrainLog log;
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
      std::vector<TokenSequence> q, c;
      for (const auto& id : batch.query_ids) q.push_back(lookup(queries, id, "query"));
      for (const auto& id : batch.candidate_ids) c.push_back(lookup(docs, id, "document"));
      StepResult<float> step;
      try {
        step = retriever_step(weights, lora, cfg.mode, q, c, batch.positives, cfg.temperature);
      } catch (const NumericError& e) {
        throw NumericError("retriever training diverged at step " + std::to_string(log.losses.size() + 1) + ": " +
                           e.what());
      }
      opt.step(params, step.grads);
      log.losses.push_back(step.loss);
    }
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1, log);
  }
  return log;
}

// ---- files ----

/// JSONL lines {"qid": ..., "pos": [...], "neg": [...]}; one example per line
/// using its first positive.
inline std::vector<TrainingExample> parse_training_set(std::string_view text, const std::string& origin = "dataset") {
  std::vector<TrainingExample> out;
  detail::for_each_line(text, [&](std::string_view line, std::size_t no) {
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) return;
    const std::string where = origin + ":" + std::to_string(no);
    try {
      const auto j = nlohmann::json::parse(line);
      auto as_id = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
      TrainingExample ex;
      ex.qid = as_id(j.at("qid"));
      const auto& pos = j.at("pos");
      if (!pos.is_array() || pos.empty()) throw DataError(where + ": example needs at least one positive");
      ex.positive = as_id(pos[0]);
      std::set<std::string> seen;
      for (const auto& n : j.at("neg")) {
        auto id = as_id(n);
        if (id == ex.positive) throw DataError(where + ": positive listed among negatives");
        if (!seen.insert(id).second) throw DataError(where + ": duplicate negative '" + id + "'");
        ex.negatives.push_back(std::move(id));
      }
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  });
  return out;
}

inline std::string format_training_set(std::span<const TrainingExample> examples) {
  std::string out;
  for (const auto& ex : examples) {
    nlohmann::json j = {{"qid", ex.qid}, {"pos", {ex.positive}}, {"neg", ex.negatives}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string format_loss_curve(const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, losses[i]);
    out += buf;
  }
  return out;
}

// ---- hard-negative mining ----

struct MiningConfig {
  std::size_t depth = 100;  // candidates come from each run's top `depth`
  std::size_t count = 16;  // m negatives per query
  std::vector<double> blend;  // per-run weights; empty = equal
  std::uint64_t seed = 0;
};

struct MiningStats {
  std::size_t mined = 0;
  std::size_t skipped_no_positive = 0;
  std::size_t skipped_no_negatives = 0;
  std::size_t short_queries = 0;  // fewer than m candidates existed
};

/// Splits m across sources in proportion to the weights (largest remainder,
/// ties to the earlier source).
inline std::vector<std::size_t> blend_quotas(std::size_t m, const std::vector<double>& weights) {
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0)) throw ConfigError("blend weights must be nonnegative");
    total += w;
  }
  if (!(total > 0)) throw ConfigError("blend weights must not all be zero");
  std::vector<std::size_t> quota(weights.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(m) * weights[i] / total;
    quota[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < m; ++i, ++assigned) ++quota[rem[i % rem.size()].second];
  return quota;
}

/// Per judged query (in id order): the positive is its highest-graded
/// document (ties by id); negatives are sampled uniformly from each run's
/// top `depth`, excluding every document judged relevant, with per-run
/// quotas from the blend. A source that runs short is topped up from the
/// union of all sources.
inline std::vector<TrainingExample> mine_hard_negatives(const std::vector<const Run*>& runs, const Qrels& qrels,
                                                        const MiningConfig& cfg, MiningStats* stats = nullptr) {
  if (runs.empty()) throw ContractError("mining needs at least one run");
  if (cfg.count < 1) throw ConfigError("mining count must be at least 1");
  if (cfg.depth < cfg.count) throw ConfigError("mining depth must be at least the negative count");
  std::vector<double> blend = cfg.blend.empty() ? std::vector<double>(runs.size(), 1.0) : cfg.blend;
  if (blend.size() != runs.size()) {
    throw ConfigError("blend has " + std::to_string(blend.size()) + " weights for " + std::to_string(runs.size()) +
                      " runs");
  }
  const auto quotas = blend_quotas(cfg.count, blend);
  MiningStats local;
  MiningStats& st = stats ? *stats : local;
  std::mt19937_64 rng(cfg.seed);
  std::vector<TrainingExample> out;
  for (const auto& [qid, judged] : qrels.judgments) {
    std::string positive;
    int best = 0;
    for (const auto& [doc, grade] : judged) {
      if (grade > best) {  // map order gives the smallest id among ties
        best = grade;
        positive = doc;
      }
    }
    if (best == 0) {
      ++st.skipped_no_positive;
      continue;
    }
    std::vector<std::vector<std::string>> pools(runs.size());
    std::set<std::string> union_set;
    for (std::size_t r = 0; r < runs.size(); ++r) {
      auto it = runs[r]->queries.find(qid);
      if (it == runs[r]->queries.end()) continue;
      for (std::size_t i = 0; i < it->second.size() && i < cfg.depth; ++i) {
        const auto& doc = it->second[i].doc_id;
        if (qrels.grade(qid, doc) > 0) continue;
        pools[r].push_back(doc);
        union_set.insert(doc);
      }
    }
    if (union_set.empty()) {
      ++st.skipped_no_negatives;
      continue;
    }
    TrainingExample ex{qid, positive, {}};
    std::unordered_set<std::string> chosen;
    std::size_t shortfall = 0;
    for (std::size_t r = 0; r < runs.size(); ++r) {
      std::vector<std::string> avail;
      for (const auto& d : pools[r])
        if (!chosen.count(d)) avail.push_back(d);
      std::shuffle(avail.begin(), avail.end(), rng);
      const std::size_t take = std::min(quotas[r], avail.size());
      for (std::size_t i = 0; i < take; ++i) {
        chosen.insert(avail[i]);
        ex.negatives.push_back(avail[i]);
      }
      shortfall += quotas[r] - take;
    }
    if (shortfall > 0) {
      std::vector<std::string> rest;
      for (const auto& d : union_set)
        if (!chosen.count(d)) rest.push_back(d);
      std::shuffle(rest.begin(), rest.end(), rng);
      for (std::size_t i = 0; i < shortfall && i < rest.size(); ++i) ex.negatives.push_back(rest[i]);
    }
    if (ex.negatives.size() < cfg.count) ++st.short_queries;
    ++st.mined;
    out.push_back(std::move(ex));
  }
  return out;
}

/// A pseudo-run listing, for each judged query, the positives of every other
/// query in seeded random order. Mined as a negative source it stops a model
/// from scoring documents by whether they were ever a training positive.
inline Run other_positives_run(const Qrels& qrels, std::uint64_t seed) {
  std::vector<std::string> positives;
  for (const auto& [qid, judged] : qrels.judgments) {
    int best = 0;
    std::string positive;
    for (const auto& [doc, grade] : judged) {
      if (grade > best) {
        best = grade;
        positive = doc;
      }
    }
    if (best > 0) positives.push_back(positive);
  }
  std::sort(positives.begin(), positives.end());
  positives.erase(std::unique(positives.begin(), positives.end()), positives.end());
  std::mt19937_64 rng(seed);
  Run run;
  run.tag = "positives";
  for (const auto& [qid, judged] : qrels.judgments) {
    std::vector<std::string> others;
    for (const auto& d : positives)
      if (!judged.count(d)) others.push_back(d);
    std::shuffle(others.begin(), others.end(), rng);
    auto& list = run.queries[qid];
    for (std::size_t i = 0; i < others.size(); ++i)
      list.push_back({others[i], static_cast<double>(others.size() - i), i + 1});
  }
  return run;
}

}  // namespace marrow
