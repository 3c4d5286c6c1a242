#pragma once

// Pipeline stages over a working directory. Each stage reads artifacts of
// earlier stages, writes its own, and records a manifest (input/output
// hashes, seed, config snapshot) under manifests/. A stage whose upstream
// manifest is missing refuses to run.
//
// Layout:
//   corpus.tsv queries.tsv qrels.{train,eval}.txt   ingest
//   vocab.json                                      build-vocab
//   bm25.idx runs/bm25.{train,eval}.run             bm25
//   train/{retriever,reranker}.jsonl                mine
//   models/retriever.ckpt logs/retriever_loss.csv   train-retriever
//   embeddings/docs.jsonl                           encode
//   index/flat.idx                                  index
//   runs/dense.{train,eval}.run                     retrieve
//   models/reranker.ckpt logs/reranker_loss.csv     train-reranker
//   runs/rerank.eval.run                            rerank
//   reports/eval.tsv reports/per_query.tsv          eval

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "marrow/bm25.hpp"
#include "marrow/checkpoint.hpp"
#include "marrow/corpus.hpp"
#include "marrow/error.hpp"
#include "marrow/eval.hpp"
#include "marrow/flat_index.hpp"
#include "marrow/io.hpp"
#include "marrow/model.hpp"
#include "marrow/parallel.hpp"
#include "marrow/pipeline_config.hpp"
#include "marrow/ranking.hpp"
#include "marrow/reranker.hpp"
#include "marrow/retriever.hpp"
#include "marrow/synthetic.hpp"
#include "marrow/text.hpp"

namespace marrow {

/// Stages in pipeline order, as accepted by Pipeline::run_stage.
inline const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> s = {"ingest",          "build-vocab",    "bm25",   "mine-retriever",
                                             "train-retriever", "encode",         "index",  "retrieve",
                                             "mine-reranker",   "train-reranker", "rerank", "eval"};
  return s;
}

namespace detail {

inline std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Embedding rows as JSONL with %.9g components (round-trips float32).
inline std::string embeddings_jsonl(const std::vector<std::string>& ids, const std::vector<Embedding>& rows) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += "{\"id\":" + nlohmann::json(ids[i]).dump() + ",\"vector\":[";
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      if (j) out += ',';
      out += format_float(rows[i][j]);
    }
    out += "]}\n";
  }
  return out;
}

inline std::string format_fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string segment_id(const std::string& doc, std::size_t k) { return doc + "#" + std::to_string(k); }

inline std::string segment_doc(const std::string& seg) {
  const auto pos = seg.rfind('#');
  if (pos == std::string::npos) throw DataError("segment id '" + seg + "' lacks a #<n> suffix");
  return seg.substr(0, pos);
}

/// Document scores as the max over their segments' scores, ranked and cut.
inline std::vector<Hit> maxp_aggregate(const std::vector<Hit>& segment_hits, std::size_t depth) {
  std::unordered_map<std::string, double> best;
  for (const auto& h : segment_hits) {
    auto doc = segment_doc(h.doc_id);
    auto it = best.find(doc);
    if (it == best.end()) best.emplace(std::move(doc), h.score);
    else it->second = std::max(it->second, h.score);
  }
  std::vector<Hit> docs;
  docs.reserve(best.size());
  for (auto& [id, s] : best) docs.push_back({id, s});
  sort_and_cut(docs, depth);
  return docs;
}

inline std::map<std::string, std::vector<std::pair<std::string, double>>> to_ranked(
    const std::vector<std::string>& qids, const std::vector<std::vector<Hit>>& hits) {
  std::map<std::string, std::vector<std::pair<std::string, double>>> out;
  for (std::size_t i = 0; i < qids.size(); ++i) {
    auto& list = out[qids[i]];
    for (const auto& h : hits[i]) list.emplace_back(h.doc_id, h.score);
  }
  return out;
}

inline std::vector<Hit> run_hits(const Run& run, const std::string& qid) {
  std::vector<Hit> out;
  auto it = run.queries.find(qid);
  if (it == run.queries.end()) return out;
  for (const auto& e : it->second) out.push_back({e.doc_id, e.score});
  return out;
}

}  // namespace detail

class Pipeline;

/// Tracks what a stage read and wrote; finish() writes its manifest.
class StageRecord {
 public:
  StageRecord(const Pipeline& p, std::string stage);

  /// Reads a workdir-relative artifact and records its hash.
  std::string read(const std::string& rel);
  /// Reads an external file (given by path as configured).
  std::string read_external(const std::string& path);
  void write(const std::string& rel, const std::string& bytes);
  const std::string& stage() const { return stage_; }
  void note(const std::string& key, nlohmann::json value) { stats_[key] = std::move(value); }
  void finish();

 private:
  const Pipeline& p_;
  std::string stage_;
  nlohmann::json inputs_ = nlohmann::json::object(), outputs_ = nlohmann::json::object(),
                 stats_ = nlohmann::json::object();
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg, std::ostream& out = std::cout, std::ostream& log = std::cerr)
      : cfg_(std::move(cfg)), out_(out), log_(log) {}

  const PipelineConfig& config() const { return cfg_; }
  std::filesystem::path path(const std::string& rel) const { return cfg_.workdir / rel; }

  void run_stage(const std::string& stage) {
    if (stage == "ingest") ingest();
    else if (stage == "build-vocab") build_vocab();
    else if (stage == "bm25") bm25();
    else if (stage == "mine-retriever") mine("retriever");
    else if (stage == "mine-reranker") mine("reranker");
    else if (stage == "train-retriever") train_retriever_stage();
    else if (stage == "encode") encode();
    else if (stage == "index") index();
    else if (stage == "retrieve") retrieve();
    else if (stage == "train-reranker") train_reranker_stage();
    else if (stage == "rerank") rerank_stage();
    else if (stage == "eval") evaluate();
    else if (stage == "doc-compare") doc_compare();
    else if (stage == "ablation-lora") ablation_lora();
    else if (stage == "ablation-length") ablation_length();
    else throw ConfigError("unknown stage '" + stage + "'");
  }

  void run_all() {
    for (const auto& s : pipeline_stages()) run_stage(s);
  }

  // ---- stages ----

  void ingest() {
    StageRecord rec(*this, "ingest");
    if (cfg_.corpus.empty() || cfg_.queries.empty()) throw ConfigError("ingest needs data.corpus and data.queries");
    const auto corpus_bytes = rec.read_external(cfg_.corpus);
    const auto queries_bytes = rec.read_external(cfg_.queries);
    auto parse = [&](const std::string& bytes, const std::string& origin) {
      const auto f = cfg_.format.value_or(detect_format(origin));
      return f == CorpusFormat::jsonl ? parse_jsonl_store(bytes, origin) : parse_tsv_store(bytes, origin);
    };
    const TextStore corpus = parse(corpus_bytes, cfg_.corpus);
    const TextStore queries = parse(queries_bytes, cfg_.queries);
    if (corpus.empty()) throw DataError(cfg_.corpus + ": corpus is empty");
    rec.write("corpus.tsv", corpus.to_tsv());
    rec.write("queries.tsv", queries.to_tsv());
    auto qrels_file = [&](const std::string& src, const std::string& rel) {
      if (src.empty()) {
        std::filesystem::remove(path(rel));  // no stale qrels from an earlier ingest
        return;
      }
      const auto q = parse_qrels(rec.read_external(src), src);
      std::size_t unknown_docs = 0;
      for (const auto& [qid, docs] : q.judgments) {
        if (!queries.contains(qid)) throw DataError(src + ": judged query '" + qid + "' has no text in " + cfg_.queries);
        for (const auto& [doc, g] : docs) unknown_docs += corpus.contains(doc) ? 0 : 1;
      }
      if (unknown_docs) log_ << "warning: " << src << " judges " << unknown_docs << " documents absent from the corpus\n";
      rec.write(rel, format_qrels(q));
      rec.note(rel + " queries", q.judgments.size());
    };
    qrels_file(cfg_.train_qrels, "qrels.train.txt");
    qrels_file(cfg_.eval_qrels, "qrels.eval.txt");

    const auto stats = token_length_stats(corpus);
    rec.write("reports/doc_lengths.csv", format_length_cdf(stats));
    rec.note("documents", corpus.size());
    rec.note("queries", queries.size());
    rec.note("doc_length", {{"mean", stats.mean}, {"p50", stats.p50}, {"p90", stats.p90}, {"p99", stats.p99},
                            {"max", stats.max}});
    rec.finish();
    char buf[160];
    std::snprintf(buf, sizeof buf, "ingest: %zu documents, %zu queries; doc length p50 %zu p90 %zu p99 %zu max %zu\n",
                  corpus.size(), queries.size(), stats.p50, stats.p90, stats.p99, stats.max);
    out_ << buf;
  }

  void build_vocab() {
    StageRecord rec(*this, "build-vocab");
    require("build-vocab", "ingest");
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    const auto queries = parse_tsv_store(rec.read("queries.tsv"), "queries.tsv");
    std::vector<std::string> texts = corpus.texts();
    for (const auto& [id, t] : queries.entries()) texts.push_back(t);
    const Vocabulary vocab = marrow::build_vocab(texts, cfg_.vocab_cap, template_tokens());
    rec.write("vocab.json", vocab.to_json().dump() + "\n");
    rec.note("size", vocab.size());
    rec.finish();
    out_ << "build-vocab: " << vocab.size() << " tokens\n";
  }

  void bm25() {
    StageRecord rec(*this, "bm25");
    require("bm25", "build-vocab");
    const auto vocab = load_vocab(rec);
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    const auto queries = parse_tsv_store(rec.read("queries.tsv"), "queries.tsv");
    std::vector<std::pair<std::string, TokenSequence>> docs;
    for (const auto& [id, text] : corpus.entries())
      docs.emplace_back(id, tokenize(text, vocab, std::numeric_limits<std::size_t>::max()));
    const auto idx = InvertedIndex::build(docs);
    rec.write("bm25.idx", idx.serialize());
    std::vector<std::string> sorted_ids;
    for (const auto& [id, t] : corpus.entries()) sorted_ids.push_back(id);
    std::sort(sorted_ids.begin(), sorted_ids.end());
    const Bm25Params params{cfg_.bm25_k1, cfg_.bm25_b};
    // Documents sharing no term score 0 and follow in id order, so every
    // list has min(depth, corpus size) entries like the dense runs.
    auto search = [&](const std::vector<std::string>& qids, std::size_t depth) {
      std::vector<std::vector<Hit>> hits(qids.size());
      parallel_for(qids.size(), [&](std::size_t i) {
        const auto q = tokenize(queries.text(qids[i]), vocab, cfg_.query_max_len);
        hits[i] = idx.search(q, depth, params);
        const std::size_t want = std::min(depth, sorted_ids.size());
        if (hits[i].size() < want) {
          std::unordered_set<std::string> seen;
          for (const auto& h : hits[i]) seen.insert(h.doc_id);
          for (const auto& id : sorted_ids) {
            if (hits[i].size() == want) break;
            if (!seen.count(id)) hits[i].push_back({id, 0.0});
          }
        }
      });
      return make_run(detail::to_ranked(qids, hits), "bm25");
    };
    write_split_runs(rec, "bm25", search);
    rec.finish();
  }

  void mine(const std::string& target) {
    const std::string stage = "mine-" + target;
    StageRecord rec(*this, stage);
    const MiningSection& m = target == "retriever" ? cfg_.mine_retriever : cfg_.mine_reranker;
    require(stage, "ingest");
    const auto qrels = load_qrels_split(rec, "train");
    std::vector<Run> runs;
    for (const auto& src : m.sources) {
      if (src == "positives") {
        runs.push_back(other_positives_run(qrels, cfg_.mining_seed + 10));
        continue;
      }
      require(stage, src == "bm25" ? "bm25" : "retrieve");
      const std::string rel = "runs/" + src + ".train.run";
      if (!std::filesystem::exists(path(rel)))
        throw DependencyError(stage + " needs " + rel + "; it is written when training qrels are configured");
      runs.push_back(parse_run(rec.read(rel), rel));
    }
    std::vector<const Run*> ptrs;
    for (const auto& r : runs) ptrs.push_back(&r);
    MiningConfig mc;
    mc.depth = m.depth;
    mc.count = m.count;
    mc.blend = m.blend;
    mc.seed = cfg_.mining_seed + (target == "retriever" ? 0 : 1);
    MiningStats st;
    const auto examples = mine_hard_negatives(ptrs, qrels, mc, &st);
    if (examples.empty()) throw DataError(stage + ": no training examples could be mined");
    rec.write("train/" + target + ".jsonl", format_training_set(examples));
    rec.note("examples", st.mined);
    rec.note("skipped_no_positive", st.skipped_no_positive);
    rec.note("skipped_no_negatives", st.skipped_no_negatives);
    rec.note("short_queries", st.short_queries);
    rec.finish();
    out_ << stage << ": " << st.mined << " examples (" << st.skipped_no_positive << " without a positive, "
         << st.skipped_no_negatives << " without negatives, " << st.short_queries << " short)\n";
  }

  void train_retriever_stage() {
    StageRecord rec(*this, "train-retriever");
    require("train-retriever", "mine-retriever");
    const auto vocab = load_vocab(rec);
    const auto examples = parse_training_set(rec.read("train/retriever.jsonl"), "train/retriever.jsonl");
    const auto docs = retriever_doc_lookup(rec, vocab);
    const auto queries = query_lookup(rec, vocab);
    auto result = fit_retriever(cfg_.retriever, cfg_.retriever.lora, vocab, examples, queries, docs, "retriever");
    rec.write("models/retriever.ckpt", serialize_checkpoint(result.ckpt));
    rec.write("logs/retriever_loss.csv", format_loss_curve(result.log.losses));
    note_training(rec, result.log);
    rec.finish();
  }

  void encode() {
    StageRecord rec(*this, "encode");
    require("encode", "train-retriever");
    const auto ckpt = deserialize_checkpoint(rec.read("models/retriever.ckpt"), "models/retriever.ckpt");
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    const auto strategy = cfg_.document_mode ? cfg_.doc_strategy : DocStrategy::whole;
    auto [ids, rows] = encode_corpus(ckpt, corpus, strategy);
    rec.write("embeddings/docs.jsonl", detail::embeddings_jsonl(ids, rows));
    rec.note("vectors", ids.size());
    rec.note("strategy", strategy == DocStrategy::maxp ? "maxp" : "whole");
    rec.finish();
    out_ << "encode: " << ids.size() << " vectors\n";
  }

  void index() {
    StageRecord rec(*this, "index");
    require("index", "encode");
    const auto idx = FlatIndex::from_jsonl(rec.read("embeddings/docs.jsonl"), "embeddings/docs.jsonl");
    rec.write("index/flat.idx", idx.serialize());
    rec.note("vectors", idx.size());
    rec.note("dim", idx.dim());
    rec.finish();
    out_ << "index: " << idx.size() << " vectors of dim " << idx.dim() << "\n";
  }

  void retrieve() {
    StageRecord rec(*this, "retrieve");
    require("retrieve", "index");
    const auto ckpt = deserialize_checkpoint(rec.read("models/retriever.ckpt"), "models/retriever.ckpt");
    const auto idx = FlatIndex::deserialize(rec.read("index/flat.idx"), "index/flat.idx");
    const auto queries = parse_tsv_store(rec.read("queries.tsv"), "queries.tsv");
    const bool maxp = cfg_.document_mode && cfg_.doc_strategy == DocStrategy::maxp;
    auto search = [&](const std::vector<std::string>& qids, std::size_t depth) {
      return dense_search(ckpt, idx, queries, qids, depth, maxp);
    };
    write_split_runs(rec, "dense", search);
    rec.finish();
  }

  void train_reranker_stage() {
    StageRecord rec(*this, "train-reranker");
    require("train-reranker", "mine-reranker");
    const auto vocab = load_vocab(rec);
    const auto examples = parse_training_set(rec.read("train/reranker.jsonl"), "train/reranker.jsonl");
    const auto docs = reranker_doc_lookup(rec, vocab);
    const auto queries = query_lookup(rec, vocab);
    std::optional<ModelCheckpoint> init;
    if (cfg_.reranker_from_retriever) {
      require("train-reranker", "train-retriever");
      init = deserialize_checkpoint(rec.read("models/retriever.ckpt"), "models/retriever.ckpt");
    }
    auto result = fit_reranker(cfg_.reranker, cfg_.reranker_max_len, vocab, examples, queries, docs,
                               init ? &*init : nullptr);
    rec.write("models/reranker.ckpt", serialize_checkpoint(result.ckpt));
    rec.write("logs/reranker_loss.csv", format_loss_curve(result.log.losses));
    note_training(rec, result.log);
    rec.finish();
  }

  void rerank_stage() {
    StageRecord rec(*this, "rerank");
    require("rerank", "train-reranker");
    require("rerank", cfg_.rerank_source == "dense" ? "retrieve" : "bm25");
    const auto ckpt = deserialize_checkpoint(rec.read("models/reranker.ckpt"), "models/reranker.ckpt");
    const std::string src = "runs/" + cfg_.rerank_source + ".eval.run";
    if (!std::filesystem::exists(path(src))) throw DependencyError("rerank needs " + src + " (configure data.eval_qrels)");
    const auto candidates = parse_run(rec.read(src), src);
    const auto docs = reranker_doc_lookup(rec, ckpt.vocab);
    const auto queries = query_lookup(rec, ckpt.vocab);
    const Run run = rerank_run(ckpt, candidates, queries, docs, cfg_.rerank_depth, cfg_.reranker_max_len);
    rec.write("runs/rerank.eval.run", format_run(run));
    rec.note("queries", run.queries.size());
    rec.note("depth", cfg_.rerank_depth);
    rec.finish();
    out_ << "rerank: " << run.queries.size() << " queries, top " << cfg_.rerank_depth << " rescored\n";
  }

  void evaluate() {
    StageRecord rec(*this, "eval");
    require("eval", "ingest");
    const auto qrels = load_qrels_split(rec, "eval");
    std::vector<MetricSpec> metrics;
    for (const auto& m : cfg_.metrics) metrics.push_back(MetricSpec::parse(m));
    std::string table = "run\tmetric\tvalue\tqueries\texcluded\n", per_query = "run\tqid\tmetric\tvalue\n";
    std::size_t found = 0;
    for (const std::string name : {"bm25", "dense", "rerank", "doc_whole", "doc_maxp"}) {
      const std::string rel = "runs/" + name + ".eval.run";
      if (!std::filesystem::exists(path(rel))) continue;
      ++found;
      const auto report = evaluate_run(parse_run(rec.read(rel), rel), qrels, metrics);
      for (std::size_t i = 0; i < report.names.size(); ++i) {
        const auto& r = report.results[i];
        table += name + "\t" + report.names[i] + "\t" + detail::format_fixed(r.mean) + "\t" +
                 std::to_string(r.per_query.size()) + "\t" + std::to_string(r.excluded) + "\n";
        for (const auto& [qid, v] : r.per_query) per_query += name + "\t" + qid + "\t" + report.names[i] + "\t" +
                                                              detail::format_float(v) + "\n";
        rec.note(name + " " + report.names[i], r.mean);
      }
    }
    if (!found) throw DependencyError("eval found no runs; run `marrow bm25` or `marrow retrieve` first");
    rec.write("reports/eval.tsv", table);
    rec.write("reports/per_query.tsv", per_query);
    rec.finish();
    out_ << table;
  }

  /// Whole-truncate vs MaxP dense retrieval with the trained retriever.
  void doc_compare() {
    StageRecord rec(*this, "doc-compare");
    require("doc-compare", "train-retriever");
    const auto ckpt = deserialize_checkpoint(rec.read("models/retriever.ckpt"), "models/retriever.ckpt");
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    const auto queries = parse_tsv_store(rec.read("queries.tsv"), "queries.tsv");
    const auto qrels = load_qrels_split(rec, "eval");
    const auto qids = judged_ids(qrels);
    std::vector<MetricSpec> metrics;
    for (const auto& m : cfg_.metrics) metrics.push_back(MetricSpec::parse(m));
    std::string table = "strategy\tmetric\tvalue\n";
    for (auto strategy : {DocStrategy::whole, DocStrategy::maxp}) {
      const std::string name = strategy == DocStrategy::whole ? "doc_whole" : "doc_maxp";
      auto [ids, rows] = encode_corpus(ckpt, corpus, strategy);
      const auto idx = FlatIndex::build(ckpt.weights.config.d_model, ids, rows);
      const Run run = dense_search(ckpt, idx, queries, qids, cfg_.retrieve_depth, strategy == DocStrategy::maxp);
      rec.write("runs/" + name + ".eval.run", format_run(run));
      rec.note(name + " vectors", ids.size());
      const auto report = evaluate_run(run, qrels, metrics);
      for (std::size_t i = 0; i < report.names.size(); ++i)
        table += name.substr(4) + "\t" + report.names[i] + "\t" + detail::format_fixed(report.results[i].mean) + "\n";
    }
    rec.write("reports/doc_compare.tsv", table);
    rec.finish();
    out_ << table;
  }

  /// Full fine-tuning vs LoRA on the same mined data and seed; only the
  /// learning rate differs (ablation.lora_lr).
  void ablation_lora() {
    StageRecord rec(*this, "ablation-lora");
    require("ablation-lora", "mine-retriever");
    const auto vocab = load_vocab(rec);
    const auto examples = parse_training_set(rec.read("train/retriever.jsonl"), "train/retriever.jsonl");
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    const auto queries_store = parse_tsv_store(rec.read("queries.tsv"), "queries.tsv");
    const auto docs = retriever_doc_lookup(rec, vocab);
    const auto queries = query_lookup(rec, vocab);
    const auto train_qrels = load_qrels_split(rec, "train");
    const bool has_dev = std::filesystem::exists(path("qrels.eval.txt"));
    const Qrels dev_qrels = has_dev ? load_qrels_split(rec, "eval") : Qrels{};
    const MetricSpec mrr{MetricKind::mrr, 10};
    std::string table =
        "variant\ttrainable_params\ttotal_params\ttrainable_fraction\tinitial_loss\tfinal_loss\tloss_reduction\t"
        "train_mrr@10\tdev_mrr@10\n";
    for (bool lora : {false, true}) {
      const std::string name = lora ? "lora" : "full";
      ModelSection section = cfg_.retriever;
      if (lora) section.adam.lr = cfg_.ablation_lora_lr;  // adapters conventionally train at a higher rate
      auto result = fit_retriever(section, lora, vocab, examples, queries, docs, "ablation " + name);
      rec.write("logs/ablation_" + name + "_loss.csv", format_loss_curve(result.log.losses));
      const std::size_t base = parameter_count(result.ckpt.weights);
      const std::size_t trainable = lora ? parameter_count(*result.ckpt.adapters) : base;
      const std::size_t total = base + (lora ? trainable : 0);
      auto [ids, rows] = encode_corpus(result.ckpt, corpus, DocStrategy::whole);
      const auto idx = FlatIndex::build(result.ckpt.weights.config.d_model, ids, rows);
      auto score = [&](const Qrels& q) {
        if (q.judgments.empty()) return std::string("NA");
        const Run run = dense_search(result.ckpt, idx, queries_store, judged_ids(q), 10, false);
        return detail::format_fixed(evaluate_run(run, q, {mrr}).results[0].mean);
      };
      const double first = result.log.losses.front(), last = final_loss(result.log.losses);
      table += name + "\t" + std::to_string(trainable) + "\t" + std::to_string(total) + "\t" +
               detail::format_fixed(static_cast<double>(trainable) / static_cast<double>(base)) + "\t" +
               detail::format_fixed(first) + "\t" + detail::format_fixed(last) + "\t" +
               detail::format_fixed(1.0 - last / first) + "\t" + score(train_qrels) + "\t" + score(dev_qrels) + "\n";
    }
    rec.write("reports/ablation_lora.tsv", table);
    rec.finish();
    out_ << table;
  }

  /// Reranker train-length × eval-length grid over the retriever's eval run.
  void ablation_length() {
    StageRecord rec(*this, "ablation-length");
    require("ablation-length", "mine-reranker");
    require("ablation-length", "retrieve");
    const auto vocab = load_vocab(rec);
    const auto examples = parse_training_set(rec.read("train/reranker.jsonl"), "train/reranker.jsonl");
    const auto candidates = parse_run(rec.read("runs/dense.eval.run"), "runs/dense.eval.run");
    const auto qrels = load_qrels_split(rec, "eval");
    const auto queries = query_lookup(rec, vocab);
    const auto docs = reranker_doc_lookup(rec, vocab);
    const auto metric = MetricSpec::parse(cfg_.metrics.front());
    std::size_t longest = 0;
    for (auto l : cfg_.length_train) longest = std::max(longest, l);
    for (auto l : cfg_.length_eval) longest = std::max(longest, l);
    ModelSection section = cfg_.reranker;
    section.model.max_seq_len = std::max(section.model.max_seq_len, longest);

    std::string grid = "train_len";
    for (auto le : cfg_.length_eval) grid += "," + std::to_string(le);
    grid += "\n";
    std::string long_form = "train_len,eval_len," + metric.name() + "\n";
    nlohmann::json trend = nlohmann::json::object();
    for (auto lt : cfg_.length_train) {
      auto result = fit_reranker(section, lt, vocab, examples, queries, docs, nullptr);
      grid += std::to_string(lt);
      std::vector<double> row;
      for (auto le : cfg_.length_eval) {
        const Run run = rerank_run(result.ckpt, candidates, queries, docs, cfg_.rerank_depth, le);
        const double v = evaluate_run(run, qrels, {metric}).results[0].mean;
        row.push_back(v);
        grid += "," + detail::format_fixed(v);
        long_form += std::to_string(lt) + "," + std::to_string(le) + "," + detail::format_fixed(v) + "\n";
      }
      grid += "\n";
      const bool monotone = std::is_sorted(row.begin(), row.end());
      trend[std::to_string(lt)] = monotone;
      out_ << "train length " << lt << ": " << metric.name() << " "
           << (monotone ? "non-decreasing" : "not monotone") << " in eval length\n";
    }
    rec.write("reports/length_grid.csv", grid);
    rec.write("reports/length_grid_long.csv", long_form);
    rec.note("non_decreasing", trend);
    rec.finish();
    out_ << grid;
  }

  // ---- building blocks (public for tests) ----

  struct Fitted {
    ModelCheckpoint ckpt;
    TrainLog log;
  };

  Fitted fit_retriever(const ModelSection& s, bool lora, const Vocabulary& vocab,
                       const std::vector<TrainingExample>& examples, const TokenLookup& queries,
                       const TokenLookup& docs, const std::string& label) const {
    ModelConfig mc = s.model;
    mc.vocab_size = vocab.size();
    mc.head = HeadKind::none;
    mc.lora_rank = lora ? s.lora_rank : 0;
    Fitted f{{init_weights(mc, s.seed), std::nullopt, vocab}, {}};
    if (lora) f.ckpt.adapters = init_lora(mc, s.seed);
    RetrieverTrainConfig tc;
    tc.batch_size = s.batch_size;
    tc.negatives = s.negatives;
    tc.epochs = s.epochs;
    tc.temperature = s.temperature;
    tc.adam = s.adam;
    tc.seed = s.seed + 100;
    tc.mode = lora ? Trainable::adapters : Trainable::all;
    tc.on_epoch = progress(label);
    f.log = train_retriever(f.ckpt.weights, f.ckpt.adapters ? &*f.ckpt.adapters : nullptr, tc, examples, queries, docs);
    return f;
  }

  /// `init`, when given, supplies every base tensor (its adapters merged in);
  /// the scalar head starts from the usual random init.
  Fitted fit_reranker(const ModelSection& s, std::size_t max_len, const Vocabulary& vocab,
                      const std::vector<TrainingExample>& examples, const TokenLookup& queries, const TokenLookup& docs,
                      const ModelCheckpoint* init) const {
    ModelConfig mc = s.model;
    mc.vocab_size = vocab.size();
    mc.head = HeadKind::scalar;
    mc.lora_rank = s.lora ? s.lora_rank : 0;
    mc.max_seq_len = std::max(mc.max_seq_len, max_len);
    Fitted f{{init_weights(mc, s.seed), std::nullopt, vocab}, {}};
    if (init) {
      const auto& src = init->weights.config;
      if (src.d_model != mc.d_model || src.n_layers != mc.n_layers || src.n_heads != mc.n_heads ||
          src.d_ff != mc.d_ff || !(init->vocab == vocab)) {
        throw ConfigError("reranker.init = retriever needs matching dimensions and vocabulary");
      }
      const auto base = init->adapters ? merge_lora(init->weights, *init->adapters) : init->weights;
      f.ckpt.weights.tok_embeddings = base.tok_embeddings;
      f.ckpt.weights.layers = base.layers;
      f.ckpt.weights.final_norm = base.final_norm;
    }
    if (s.lora) f.ckpt.adapters = init_lora(mc, s.seed);
    RerankerTrainConfig tc;
    tc.batch_size = s.batch_size;
    tc.negatives = s.negatives;
    tc.epochs = s.epochs;
    tc.temperature = s.temperature;
    tc.max_len = max_len;
    tc.adam = s.adam;
    tc.seed = s.seed + 100;
    tc.mode = s.lora ? Trainable::adapters : Trainable::all;
    tc.on_epoch = progress("reranker L=" + std::to_string(max_len));
    f.log = train_reranker(f.ckpt.weights, f.ckpt.adapters ? &*f.ckpt.adapters : nullptr, tc, examples, queries,
                           docs, vocab);
    return f;
  }

  /// One embedding per document (whole) or per segment (maxp, ids "doc#k").
  std::pair<std::vector<std::string>, std::vector<Embedding>> encode_corpus(const ModelCheckpoint& ckpt,
                                                                           const TextStore& corpus,
                                                                           DocStrategy strategy) const {
    const std::size_t window = ckpt.weights.config.max_seq_len - 1;
    std::vector<std::string> ids;
    std::vector<TokenSequence> inputs;
    for (const auto& [id, text] : corpus.entries()) {
      if (strategy == DocStrategy::whole) {
        ids.push_back(id);
        inputs.push_back(tokenize(text, ckpt.vocab, window));
        continue;
      }
      const auto full = tokenize(text, ckpt.vocab, std::numeric_limits<std::size_t>::max());
      const auto segs = segment_maxp(full, std::min(cfg_.maxp_window, window), std::min(cfg_.maxp_stride, window));
      for (std::size_t k = 0; k < segs.size(); ++k) {
        ids.push_back(detail::segment_id(id, k));
        inputs.push_back(segs[k]);
      }
    }
    std::vector<Embedding> rows(inputs.size());
    parallel_for(inputs.size(), [&](std::size_t i) { rows[i] = encode_text(ckpt.weights, ckpt.lora(), inputs[i]); });
    return {std::move(ids), std::move(rows)};
  }

  Run dense_search(const ModelCheckpoint& ckpt, const FlatIndex& idx, const TextStore& queries,
                   const std::vector<std::string>& qids, std::size_t depth, bool maxp) const {
    std::vector<std::vector<Hit>> hits(qids.size());
    parallel_for(qids.size(), [&](std::size_t i) {
      const auto q = tokenize(queries.text(qids[i]), ckpt.vocab, cfg_.query_max_len);
      const auto e = encode_text(ckpt.weights, ckpt.lora(), q);
      // MaxP ranks documents by their best segment, so every segment is scored
      hits[i] = maxp ? detail::maxp_aggregate(idx.search(e, idx.size()), depth) : idx.search(e, depth);
    });
    return make_run(detail::to_ranked(qids, hits), "dense");
  }

  Run rerank_run(const ModelCheckpoint& ckpt, const Run& candidates, const TokenLookup& queries,
                 const TokenLookup& docs, std::size_t depth, std::size_t max_len) const {
    std::map<std::string, std::vector<std::pair<std::string, double>>> ranked;
    for (const auto& [qid, entries] : candidates.queries) {
      const auto hits = rerank(lookup(queries, qid, "query"), detail::run_hits(candidates, qid), depth, ckpt, docs,
                               max_len, cfg_.keep_tail);
      auto& list = ranked[qid];
      for (const auto& h : hits) list.emplace_back(h.doc_id, h.score);
    }
    return make_run(ranked, "rerank");
  }

 private:
  friend class StageRecord;

  void require(const std::string& stage, const std::string& upstream) const {
    if (!std::filesystem::exists(path("manifests/" + upstream + ".json"))) {
      const std::string command =
          upstream.rfind("mine-", 0) == 0 ? "mine --target " + upstream.substr(5) : upstream;
      throw DependencyError(stage + " needs the output of stage '" + upstream + "' in " + cfg_.workdir.string() +
                            "; run `marrow " + command + "` first");
    }
  }

  Vocabulary load_vocab(StageRecord& rec) const {
    require(rec.stage(), "build-vocab");
    try {
      return Vocabulary::from_json(nlohmann::json::parse(rec.read("vocab.json")));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path("vocab.json").string() + ": " + e.what());
    }
  }

  Qrels load_qrels_split(StageRecord& rec, const std::string& split) const {
    const std::string rel = "qrels." + split + ".txt";
    if (!std::filesystem::exists(path(rel)))
      throw ConfigError("no " + split + " qrels in the workdir; set data." + split + "_qrels and rerun ingest");
    return parse_qrels(rec.read(rel), rel);
  }

  static std::vector<std::string> judged_ids(const Qrels& q) {
    std::vector<std::string> ids;
    for (const auto& [qid, d] : q.judgments) ids.push_back(qid);
    return ids;
  }

  TokenLookup query_lookup(StageRecord& rec, const Vocabulary& vocab) const {
    const auto queries = parse_tsv_store(rec.read("queries.tsv"), "queries.tsv");
    TokenLookup out;
    for (const auto& [id, text] : queries.entries()) out.emplace(id, tokenize(text, vocab, cfg_.query_max_len));
    return out;
  }

  /// Retriever training sees the leading window of each document.
  TokenLookup retriever_doc_lookup(StageRecord& rec, const Vocabulary& vocab) const {
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    TokenLookup out;
    for (const auto& [id, text] : corpus.entries())
      out.emplace(id, tokenize(text, vocab, cfg_.retriever.model.max_seq_len - 1));
    return out;
  }

  /// Full documents; the reranker template truncates them to fit.
  TokenLookup reranker_doc_lookup(StageRecord& rec, const Vocabulary& vocab) const {
    const auto corpus = parse_tsv_store(rec.read("corpus.tsv"), "corpus.tsv");
    TokenLookup out;
    for (const auto& [id, text] : corpus.entries())
      out.emplace(id, tokenize(text, vocab, std::numeric_limits<std::size_t>::max()));
    return out;
  }

  /// Writes runs/<name>.train.run (depth = deepest mining depth) and
  /// runs/<name>.eval.run (retrieve depth) for whichever qrels exist.
  void write_split_runs(StageRecord& rec, const std::string& name,
                        const std::function<Run(const std::vector<std::string>&, std::size_t)>& search) const {
    const std::size_t train_depth = std::max(cfg_.mine_retriever.depth, cfg_.mine_reranker.depth);
    for (const auto& [split, depth] : {std::pair<std::string, std::size_t>{"train", train_depth},
                                       std::pair<std::string, std::size_t>{"eval", cfg_.retrieve_depth}}) {
      if (!std::filesystem::exists(path("qrels." + split + ".txt"))) continue;
      const auto qids = judged_ids(load_qrels_split(rec, split));
      const Run run = search(qids, depth);
      rec.write("runs/" + name + "." + split + ".run", format_run(run));
      rec.note(split + " queries", qids.size());
      out_ << name << ": " << split << " run, " << qids.size() << " queries at depth " << depth << "\n";
    }
  }

  /// Mean of the last tenth of the steps (at least one), to smooth batch noise.
  static double final_loss(const std::vector<double>& losses) {
    const std::size_t n = std::max<std::size_t>(1, losses.size() / 10);
    double s = 0;
    for (std::size_t i = losses.size() - n; i < losses.size(); ++i) s += losses[i];
    return s / static_cast<double>(n);
  }

  std::function<void(std::size_t, const TrainLog&)> progress(const std::string& label) const {
    return [this, label](std::size_t epoch, const TrainLog& log) {
      log_ << label << ": epoch " << epoch << ", " << log.losses.size() << " steps, loss "
           << detail::format_fixed(log.losses.empty() ? 0.0 : log.losses.back()) << "\n";
    };
  }

  void note_training(StageRecord& rec, const TrainLog& log) const {
    rec.note("steps", log.losses.size());
    rec.note("padded_examples", log.padded_examples);
    if (!log.losses.empty()) {
      rec.note("initial_loss", log.losses.front());
      rec.note("final_loss", final_loss(log.losses));
    }
    if (log.padded_examples)
      log_ << "warning: " << log.padded_examples << " training examples had fewer negatives than requested\n";
  }

  PipelineConfig cfg_;
  std::ostream& out_;
  std::ostream& log_;
};

inline StageRecord::StageRecord(const Pipeline& p, std::string stage) : p_(p), stage_(std::move(stage)) {}

inline std::string StageRecord::read(const std::string& rel) {
  const auto full = p_.path(rel);
  if (!std::filesystem::exists(full)) throw DependencyError(stage_ + " needs " + full.string() + ", which is missing");
  auto bytes = read_file(full);
  inputs_[rel] = hex64(fnv1a64(bytes));
  return bytes;
}

inline std::string StageRecord::read_external(const std::string& path) {
  auto bytes = read_file(path);
  inputs_[path] = hex64(fnv1a64(bytes));
  return bytes;
}

inline void StageRecord::write(const std::string& rel, const std::string& bytes) {
  write_file(p_.path(rel), bytes);
  outputs_[rel] = hex64(fnv1a64(bytes));
}

inline void StageRecord::finish() {
  nlohmann::json m = {{"stage", stage_},     {"seed", p_.config().seed}, {"config", p_.config().to_json()},
                      {"inputs", inputs_},   {"outputs", outputs_},      {"stats", stats_}};
  write_file(p_.path("manifests/" + stage_ + ".json"), m.dump(2) + "\n");
}

/// Writes the synthetic task as corpus.tsv, queries.tsv, qrels.train.txt and
/// qrels.eval.txt under `dir`.
inline void write_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& dir) {
  const auto data = generate_synthetic(cfg);
  write_file(dir / "corpus.tsv", data.corpus.to_tsv());
  write_file(dir / "queries.tsv", data.queries.to_tsv());
  write_file(dir / "qrels.train.txt", format_qrels(data.train_qrels));
  write_file(dir / "qrels.eval.txt", format_qrels(data.eval_qrels));
}

}  // namespace marrow
