#pragma once

// Typed pipeline configuration resolved from Settings. Every knob has a
// default; document mode is the one place where a choice is mandatory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "marrow/config.hpp"
#include "marrow/corpus.hpp"
#include "marrow/error.hpp"
#include "marrow/eval.hpp"
#include "marrow/model.hpp"
#include "marrow/optim.hpp"
#include "marrow/synthetic.hpp"

namespace marrow {

enum class DocStrategy { whole, maxp };

struct ModelSection {
  ModelConfig model;  // vocab_size is filled in from the vocabulary
  AdamConfig adam;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  std::size_t negatives = 7;
  double temperature = 0.05;
  bool lora = false;  // adapter fine-tuning instead of full
  std::size_t lora_rank = 4;  // also used by the LoRA ablation
  double lora_alpha = 8.0;
  std::uint64_t seed = 0;
};

struct MiningSection {
  std::vector<std::string> sources;  // bm25, dense, positives (other queries' positives)
  std::vector<double> blend;  // empty = equal
  std::size_t depth = 100;
  std::size_t count = 7;
};

struct PipelineConfig {
  // data
  std::string corpus, queries, train_qrels, eval_qrels;
  std::optional<CorpusFormat> format;
  std::filesystem::path workdir = "work";

  bool document_mode = false;
  DocStrategy doc_strategy = DocStrategy::whole;
  std::uint64_t seed = 0;
  std::vector<std::string> metrics;

  std::size_t vocab_cap = 8192;
  std::size_t query_max_len = 32;

  ModelSection retriever, reranker;
  std::size_t reranker_max_len = 64;
  bool reranker_from_retriever = false;

  MiningSection mine_retriever, mine_reranker;
  std::uint64_t mining_seed = 0;

  double bm25_k1 = 0.9, bm25_b = 0.4;
  std::size_t retrieve_depth = 1000;
  std::size_t rerank_depth = 200;
  std::string rerank_source = "dense";
  bool keep_tail = true;

  std::size_t maxp_window = 0, maxp_stride = 0;

  std::vector<std::size_t> length_train, length_eval;
  double ablation_lora_lr = 0.0;

  SyntheticConfig synthetic;
  std::filesystem::path synthetic_out = "data";

  static PipelineConfig from_settings(const Settings& s);
  nlohmann::json to_json() const;
};

namespace detail {

inline ModelSection read_model_section(const Settings& s, const std::string& sec, const ModelSection& d) {
  ModelSection m = d;
  auto& c = m.model;
  c.d_model = s.get_size(sec + ".d_model", c.d_model);
  c.n_layers = s.get_size(sec + ".n_layers", c.n_layers);
  c.n_heads = s.get_size(sec + ".n_heads", c.n_heads);
  c.d_ff = s.get_size(sec + ".d_ff", c.d_ff);
  c.max_seq_len = s.get_size(sec + ".max_seq_len", c.max_seq_len);
  c.rope_theta = s.get_double(sec + ".rope_theta", c.rope_theta);
  m.adam.lr = s.get_double(sec + ".lr", m.adam.lr);
  m.adam.weight_decay = s.get_double(sec + ".weight_decay", m.adam.weight_decay);
  m.adam.clip_norm = s.get_double(sec + ".clip_norm", m.adam.clip_norm);
  m.epochs = s.get_size(sec + ".epochs", m.epochs);
  m.batch_size = s.get_size(sec + ".batch_size", m.batch_size);
  m.negatives = s.get_size(sec + ".negatives", m.negatives);
  m.temperature = s.get_double(sec + ".temperature", m.temperature);
  m.seed = s.get_seed(sec + ".seed", m.seed);
  const auto ft = s.get(sec + ".finetune", m.lora ? "lora" : "full");
  if (ft != "full" && ft != "lora") throw ConfigError(sec + ".finetune must be 'full' or 'lora', got '" + ft + "'");
  m.lora = ft == "lora";
  m.lora_rank = s.get_size(sec + ".lora_rank", m.lora_rank);
  m.lora_alpha = s.get_double(sec + ".lora_alpha", m.lora_alpha);
  if (m.lora_rank == 0 || !(m.lora_alpha > 0)) throw ConfigError(sec + ": lora_rank and lora_alpha must be positive");
  c.lora_rank = m.lora ? m.lora_rank : 0;
  c.lora_alpha = m.lora_alpha;
  if (m.batch_size < 1 || m.negatives < 1) throw ConfigError(sec + ": batch_size and negatives must be positive");
  if (!(m.temperature > 0)) throw ConfigError(sec + ".temperature must be positive");
  if (!(m.adam.lr >= 0)) throw ConfigError(sec + ".lr must be non-negative");
  c.vocab_size = kReservedTokens + 1;  // placeholder for validation
  c.validate();
  return m;
}

inline MiningSection read_mining(const Settings& s, const std::string& target, std::vector<std::string> sources,
                                 std::size_t depth, std::size_t count) {
  MiningSection m;
  m.sources = s.get_list("mining." + target + "_sources", sources);
  m.blend = s.get_doubles("mining." + target + "_blend", {});
  m.depth = s.get_size("mining." + target + "_depth", depth);
  m.count = s.get_size("mining." + target + "_count", count);
  if (m.sources.empty()) throw ConfigError("mining." + target + "_sources is empty");
  for (const auto& src : m.sources)
    if (src != "bm25" && src != "dense" && src != "positives")
      throw ConfigError("mining source '" + src + "' must be bm25, dense or positives");
  if (!m.blend.empty() && m.blend.size() != m.sources.size())
    throw ConfigError("mining." + target + "_blend needs one weight per source");
  if (m.count < 1 || m.depth < m.count) throw ConfigError("mining." + target + ": need depth ≥ count ≥ 1");
  return m;
}

inline nlohmann::json model_section_json(const ModelSection& m) {
  auto j = m.model.to_json();
  j.erase("vocab_size");
  j["lr"] = m.adam.lr;
  j["weight_decay"] = m.adam.weight_decay;
  j["clip_norm"] = m.adam.clip_norm;
  j["epochs"] = m.epochs;
  j["batch_size"] = m.batch_size;
  j["negatives"] = m.negatives;
  j["temperature"] = m.temperature;
  j["finetune"] = m.lora ? "lora" : "full";
  j["lora_rank"] = m.lora_rank;
  j["seed"] = m.seed;
  return j;
}

}  // namespace detail

inline PipelineConfig PipelineConfig::from_settings(const Settings& s) {
  PipelineConfig c;
  c.corpus = s.get("data.corpus", "");
  c.queries = s.get("data.queries", "");
  c.train_qrels = s.get("data.train_qrels", "");
  c.eval_qrels = s.get("data.eval_qrels", "");
  const auto fmt = s.get("data.format", "auto");
  if (fmt == "tsv") c.format = CorpusFormat::tsv;
  else if (fmt == "jsonl") c.format = CorpusFormat::jsonl;
  else if (fmt != "auto") throw ConfigError("data.format must be auto, tsv or jsonl");

  c.workdir = s.get("run.workdir", "work");
  c.seed = s.get_seed("run.seed", 0);
  const auto mode = s.get("run.mode", "passage");
  if (mode != "passage" && mode != "document") throw ConfigError("run.mode must be 'passage' or 'document'");
  c.document_mode = mode == "document";
  if (c.document_mode) {
    if (!s.has("run.doc_strategy"))
      throw ConfigError("document mode needs run.doc_strategy = whole | maxp (no default)");
    const auto strat = s.get("run.doc_strategy", "");
    if (strat != "whole" && strat != "maxp") throw ConfigError("run.doc_strategy must be 'whole' or 'maxp'");
    c.doc_strategy = strat == "maxp" ? DocStrategy::maxp : DocStrategy::whole;
  } else if (s.has("run.doc_strategy")) {
    s.get("run.doc_strategy", "");  // accepted, irrelevant for passages
  }
  c.metrics = s.get_list("eval.metrics", c.document_mode ? std::vector<std::string>{"mrr@100", "ndcg@10"}
                                                         : std::vector<std::string>{"mrr@10", "recall@1000", "ndcg@10"});
  parse_metrics([&] {
    std::string all;
    for (const auto& m : c.metrics) all += m + ",";
    return all;
  }());

  c.vocab_cap = s.get_size("tokenizer.vocab_cap", c.vocab_cap);
  c.query_max_len = s.get_size("tokenizer.query_max_len", c.query_max_len);
  if (c.query_max_len < 1) throw ConfigError("tokenizer.query_max_len must be positive");

  ModelSection rdef;
  rdef.model.max_seq_len = 128;
  rdef.adam.lr = 1e-3;
  rdef.seed = c.seed;
  c.retriever = detail::read_model_section(s, "retriever", rdef);

  ModelSection kdef;
  kdef.model.max_seq_len = 64;
  kdef.model.head = HeadKind::scalar;
  kdef.adam.lr = 3e-4;
  kdef.temperature = 1.0;
  kdef.epochs = 10;
  kdef.seed = c.seed + 1;
  c.reranker = detail::read_model_section(s, "reranker", kdef);
  c.reranker.model.head = HeadKind::scalar;
  c.reranker_max_len = s.get_size("reranker.max_len", c.reranker.model.max_seq_len);
  if (c.reranker_max_len < 4 || c.reranker_max_len > c.reranker.model.max_seq_len)
    throw ConfigError("reranker.max_len must lie in [4, reranker.max_seq_len]");
  const auto init = s.get("reranker.init", "random");
  if (init != "random" && init != "retriever") throw ConfigError("reranker.init must be 'random' or 'retriever'");
  c.reranker_from_retriever = init == "retriever";

  c.mine_retriever = detail::read_mining(s, "retriever", {"bm25"}, 100, c.retriever.negatives);
  c.mine_reranker = detail::read_mining(s, "reranker", {"dense", "bm25"}, 100, c.reranker.negatives);
  c.mining_seed = s.get_seed("mining.seed", c.seed + 2);

  c.bm25_k1 = s.get_double("bm25.k1", c.bm25_k1);
  c.bm25_b = s.get_double("bm25.b", c.bm25_b);
  c.retrieve_depth = s.get_size("retrieve.depth", c.retrieve_depth);
  c.rerank_depth = s.get_size("rerank.depth", c.document_mode ? 100 : 200);
  c.rerank_source = s.get("rerank.source", "dense");
  c.keep_tail = s.get_bool("rerank.keep_tail", true);
  if (c.retrieve_depth < 1) throw ConfigError("retrieve.depth must be positive");
  if (c.rerank_depth < 1 || c.rerank_depth > c.retrieve_depth)
    throw ConfigError("rerank.depth (" + std::to_string(c.rerank_depth) + ") must lie in [1, retrieve.depth = " +
                      std::to_string(c.retrieve_depth) + "]");
  if (c.rerank_source != "dense" && c.rerank_source != "bm25") throw ConfigError("rerank.source must be dense or bm25");

  c.maxp_window = s.get_size("maxp.window", c.retriever.model.max_seq_len - 1);
  c.maxp_stride = s.get_size("maxp.stride", std::max<std::size_t>(1, c.maxp_window / 2));
  if (c.maxp_window < 1 || c.maxp_window > c.retriever.model.max_seq_len - 1)
    throw ConfigError("maxp.window must lie in [1, retriever.max_seq_len − 1]");
  if (c.maxp_stride < 1 || c.maxp_stride > c.maxp_window) throw ConfigError("maxp.stride must lie in [1, maxp.window]");

  c.ablation_lora_lr = s.get_double("ablation.lora_lr", 3.0 * c.retriever.adam.lr);
  if (!(c.ablation_lora_lr >= 0)) throw ConfigError("ablation.lora_lr must be non-negative");
  c.length_train = s.get_sizes("ablation.train_lengths", {16, 32});
  c.length_eval = s.get_sizes("ablation.eval_lengths", {8, 16, 32, 64});
  for (auto l : c.length_train)
    if (l < 4) throw ConfigError("ablation lengths must be at least 4");
  for (auto l : c.length_eval)
    if (l < 4) throw ConfigError("ablation lengths must be at least 4");

  auto& g = c.synthetic;
  g.docs = s.get_size("synthetic.docs", g.docs);
  g.train_queries = s.get_size("synthetic.train_queries", g.train_queries);
  g.eval_queries = s.get_size("synthetic.eval_queries", g.eval_queries);
  g.concepts = s.get_size("synthetic.concepts", g.concepts);
  g.concepts_per_doc = s.get_size("synthetic.concepts_per_doc", g.concepts_per_doc);
  g.filler_words = s.get_size("synthetic.filler_words", g.filler_words);
  g.filler_per_doc = s.get_size("synthetic.filler_per_doc", g.filler_per_doc);
  g.concepts_per_query = s.get_size("synthetic.concepts_per_query", g.concepts_per_query);
  g.filler_per_query = s.get_size("synthetic.filler_per_query", g.filler_per_query);
  g.synonym_prob = s.get_double("synthetic.synonym_prob", g.synonym_prob);
  g.seed = s.get_seed("synthetic.seed", c.seed);
  c.synthetic_out = s.get("synthetic.out", "data");
  g.validate();
  return c;
}

inline nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json j;
  j["data"] = {{"corpus", corpus},
               {"queries", queries},
               {"train_qrels", train_qrels},
               {"eval_qrels", eval_qrels},
               {"format", !format ? "auto" : *format == CorpusFormat::tsv ? "tsv" : "jsonl"}};
  j["run"] = {{"seed", seed},
              {"mode", document_mode ? "document" : "passage"},
              {"doc_strategy", doc_strategy == DocStrategy::maxp ? "maxp" : "whole"}};
  j["eval"] = {{"metrics", metrics}};
  j["tokenizer"] = {{"vocab_cap", vocab_cap}, {"query_max_len", query_max_len}};
  j["retriever"] = detail::model_section_json(retriever);
  j["reranker"] = detail::model_section_json(reranker);
  j["reranker"]["max_len"] = reranker_max_len;
  j["reranker"]["init"] = reranker_from_retriever ? "retriever" : "random";
  auto mining = [](const MiningSection& m) {
    return nlohmann::json{{"sources", m.sources}, {"blend", m.blend}, {"depth", m.depth}, {"count", m.count}};
  };
  j["mining"] = {{"retriever", mining(mine_retriever)}, {"reranker", mining(mine_reranker)}, {"seed", mining_seed}};
  j["bm25"] = {{"k1", bm25_k1}, {"b", bm25_b}};
  j["retrieve"] = {{"depth", retrieve_depth}};
  j["rerank"] = {{"depth", rerank_depth}, {"source", rerank_source}, {"keep_tail", keep_tail}};
  j["maxp"] = {{"window", maxp_window}, {"stride", maxp_stride}};
  j["ablation"] = {{"train_lengths", length_train}, {"eval_lengths", length_eval}, {"lora_lr", ablation_lora_lr}};
  return j;
}

}  // namespace marrow
