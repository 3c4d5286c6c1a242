#pragma once

// TREC run/qrels files and the ranking metrics MRR@k, Recall@k, nDCG@k.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "marrow/error.hpp"
#include "marrow/io.hpp"

namespace marrow {

/// (query, doc) → grade. Ordered maps keep every report deterministic.
struct Qrels {
  std::map<std::string, std::map<std::string, int>> judgments;

  int grade(const std::string& qid, const std::string& doc) const {
    auto q = judgments.find(qid);
    if (q == judgments.end()) return 0;
    auto d = q->second.find(doc);
    return d == q->second.end() ? 0 : d->second;
  }
  bool operator==(const Qrels&) const = default;
};

struct RunEntry {
  std::string doc_id;
  double score = 0.0;
  std::size_t rank = 0;
  bool operator==(const RunEntry&) const = default;
};

struct Run {
  std::string tag = "marrow";
  std::map<std::string, std::vector<RunEntry>> queries;  // entries in rank order
  bool operator==(const Run&) const = default;
};

namespace detail {

inline std::vector<std::string_view> fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename F>
void for_each_line(std::string_view text, F&& f) {
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    f(text.substr(pos, end - pos), line_no);
    pos = end + 1;
  }
}

inline long long parse_int(std::string_view s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(std::string(s), &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": expected an integer, got '" + std::string(s) + "'");
  }
}

inline double parse_double(std::string_view s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(s), &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument("bad number");
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": expected a finite number, got '" + std::string(s) + "'");
  }
}

}  // namespace detail

/// Lines `qid 0 docid rel`; blank lines are ignored.
inline Qrels parse_qrels(std::string_view text, const std::string& origin = "qrels") {
  Qrels q;
  detail::for_each_line(text, [&](std::string_view line, std::size_t no) {
    auto f = detail::fields(line);
    if (f.empty()) return;
    const std::string where = origin + ":" + std::to_string(no);
    if (f.size() != 4) throw DataError(where + ": expected 4 fields 'qid 0 docid rel', got " + std::to_string(f.size()));
    const long long rel = detail::parse_int(f[3], where);
    if (rel < 0) throw DataError(where + ": negative relevance grade");
    auto [it, inserted] = q.judgments[std::string(f[0])].emplace(std::string(f[2]), static_cast<int>(rel));
    if (!inserted) throw DataError(where + ": duplicate judgment for " + std::string(f[0]) + "/" + std::string(f[2]));
  });
  return q;
}

inline std::string format_qrels(const Qrels& q) {
  std::string out;
  for (const auto& [qid, docs] : q.judgments)
    for (const auto& [doc, rel] : docs) out += qid + " 0 " + doc + " " + std::to_string(rel) + "\n";
  return out;
}

/// Lines `qid Q0 docid rank score tag`, validated per query: ranks 1..n,
/// scores non-increasing with rank, no repeated document.
inline Run parse_run(std::string_view text, const std::string& origin = "run") {
  struct Row {
    RunEntry entry;
    std::size_t line;
  };
  std::map<std::string, std::vector<Row>> rows;
  Run run;
  bool tagged = false;
  detail::for_each_line(text, [&](std::string_view line, std::size_t no) {
    auto f = detail::fields(line);
    if (f.empty()) return;
    const std::string where = origin + ":" + std::to_string(no);
    if (f.size() != 6) {
      throw DataError(where + ": expected 6 fields 'qid Q0 docid rank score tag', got " + std::to_string(f.size()));
    }
    const long long rank = detail::parse_int(f[3], where);
    if (rank < 1) throw DataError(where + ": rank must be at least 1");
    const double score = detail::parse_double(f[4], where);
    if (!tagged) {
      run.tag = std::string(f[5]);
      tagged = true;
    }
    rows[std::string(f[0])].push_back({{std::string(f[2]), score, static_cast<std::size_t>(rank)}, no});
  });
  for (auto& [qid, list] : rows) {
    std::stable_sort(list.begin(), list.end(), [](const Row& a, const Row& b) { return a.entry.rank < b.entry.rank; });
    std::set<std::string> seen;
    auto& out = run.queries[qid];
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto& r = list[i];
      const std::string where = origin + ":" + std::to_string(r.line);
      if (r.entry.rank != i + 1) {
        throw DataError(where + ": ranks for query " + qid + " are not contiguous (expected " + std::to_string(i + 1) +
                        ", got " + std::to_string(r.entry.rank) + ")");
      }
      if (i > 0 && r.entry.score > list[i - 1].entry.score) {
        throw DataError(where + ": score increases with rank for query " + qid);
      }
      if (!seen.insert(r.entry.doc_id).second) {
        throw DataError(where + ": document " + r.entry.doc_id + " repeated for query " + qid);
      }
      out.push_back(r.entry);
    }
  }
  return run;
}

/// Six-decimal scores, one line per entry, queries in id order.
inline std::string format_run(const Run& run) {
  std::string out;
  char buf[64];
  for (const auto& [qid, entries] : run.queries)
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof buf, "%.6f", e.score);
      out += qid + " Q0 " + e.doc_id + " " + std::to_string(e.rank) + " " + buf + " " + run.tag + "\n";
    }
  return out;
}

inline Qrels load_qrels(const std::filesystem::path& p) { return parse_qrels(read_file(p), p.string()); }
inline Run load_run(const std::filesystem::path& p) { return parse_run(read_file(p), p.string()); }
inline void save_run(const std::filesystem::path& p, const Run& run) { write_file(p, format_run(run)); }

/// Builds a run from ranked (doc, score) lists, assigning ranks 1..n.
inline Run make_run(const std::map<std::string, std::vector<std::pair<std::string, double>>>& ranked,
                    std::string tag = "marrow") {
  Run run;
  run.tag = std::move(tag);
  for (const auto& [qid, list] : ranked) {
    auto& out = run.queries[qid];
    for (std::size_t i = 0; i < list.size(); ++i) out.push_back({list[i].first, list[i].second, i + 1});
  }
  return run;
}

// ---- metrics ----

enum class Gain { linear, exponential };

struct EvalOptions {
  int rel_threshold = 1;  // binary metrics count grade >= threshold as relevant
  Gain gain = Gain::linear;
};

struct MetricResult {
  double mean = 0.0;
  std::map<std::string, double> per_query;  // evaluated queries only
  std::size_t excluded = 0;  // queries with nothing to find
};

namespace detail {

inline const std::vector<RunEntry>* entries_for(const Run& run, const std::string& qid) {
  auto it = run.queries.find(qid);
  return it == run.queries.end() ? nullptr : &it->second;
}

inline void finish(MetricResult& r) {
  double total = 0;
  for (const auto& [q, v] : r.per_query) total += v;
  r.mean = r.per_query.empty() ? 0.0 : total / static_cast<double>(r.per_query.size());
}

inline void require_k(std::size_t k) {
  if (k < 1) throw ContractError("metric cutoff k must be at least 1");
}

}  // namespace detail

/// Reciprocal rank of the first relevant document in the top k. Every qrels
/// query with at least one relevant document is averaged; queries absent
/// from the run score 0.
inline MetricResult mrr_at_k(const Run& run, const Qrels& qrels, std::size_t k, const EvalOptions& opt = {}) {
  detail::require_k(k);
  MetricResult r;
  for (const auto& [qid, docs] : qrels.judgments) {
    const bool any = std::any_of(docs.begin(), docs.end(), [&](const auto& d) { return d.second >= opt.rel_threshold; });
    if (!any) {
      ++r.excluded;
      continue;
    }
    double rr = 0.0;
    if (const auto* entries = detail::entries_for(run, qid)) {
      for (std::size_t i = 0; i < entries->size() && i < k; ++i) {
        if (qrels.grade(qid, (*entries)[i].doc_id) >= opt.rel_threshold) {
          rr = 1.0 / static_cast<double>(i + 1);
          break;
        }
      }
    }
    r.per_query[qid] = rr;
  }
  detail::finish(r);
  return r;
}

inline MetricResult recall_at_k(const Run& run, const Qrels& qrels, std::size_t k, const EvalOptions& opt = {}) {
  detail::require_k(k);
  MetricResult r;
  for (const auto& [qid, docs] : qrels.judgments) {
    std::size_t relevant = 0;
    for (const auto& [doc, grade] : docs) relevant += grade >= opt.rel_threshold;
    if (relevant == 0) {
      ++r.excluded;
      continue;
    }
    std::size_t found = 0;
    if (const auto* entries = detail::entries_for(run, qid)) {
      for (std::size_t i = 0; i < entries->size() && i < k; ++i)
        found += qrels.grade(qid, (*entries)[i].doc_id) >= opt.rel_threshold;
    }
    r.per_query[qid] = static_cast<double>(found) / static_cast<double>(relevant);
  }
  detail::finish(r);
  return r;
}

inline MetricResult ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k, const EvalOptions& opt = {}) {
  detail::require_k(k);
  auto gain = [&](int grade) {
    if (grade <= 0) return 0.0;
    return opt.gain == Gain::linear ? static_cast<double>(grade) : std::exp2(static_cast<double>(grade)) - 1.0;
  };
  MetricResult r;
  for (const auto& [qid, docs] : qrels.judgments) {
    std::vector<int> grades;
    for (const auto& [doc, grade] : docs) grades.push_back(grade);
    std::sort(grades.rbegin(), grades.rend());
    double ideal = 0;
    for (std::size_t i = 0; i < grades.size() && i < k; ++i) ideal += gain(grades[i]) / std::log2(static_cast<double>(i) + 2.0);
    if (ideal <= 0) {
      ++r.excluded;
      continue;
    }
    double dcg = 0;
    if (const auto* entries = detail::entries_for(run, qid)) {
      for (std::size_t i = 0; i < entries->size() && i < k; ++i)
        dcg += gain(qrels.grade(qid, (*entries)[i].doc_id)) / std::log2(static_cast<double>(i) + 2.0);
    }
    r.per_query[qid] = dcg / ideal;
  }
  detail::finish(r);
  return r;
}

enum class MetricKind { mrr, recall, ndcg };

struct MetricSpec {
  MetricKind kind;
  std::size_t k;

  std::string name() const {
    const char* base = kind == MetricKind::mrr ? "MRR" : kind == MetricKind::recall ? "R" : "nDCG";
    return std::string(base) + "@" + std::to_string(k);
  }

  /// Accepts e.g. "mrr@10", "recall@1000", "ndcg@10" (case-insensitive).
  static MetricSpec parse(std::string_view text) {
    std::string s(text);
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    const auto at = s.find('@');
    if (at == std::string::npos) throw ConfigError("metric '" + std::string(text) + "' needs a cutoff, e.g. mrr@10");
    const std::string base = s.substr(0, at);
    MetricKind kind;
    if (base == "mrr") kind = MetricKind::mrr;
    else if (base == "recall" || base == "r") kind = MetricKind::recall;
    else if (base == "ndcg") kind = MetricKind::ndcg;
    else throw ConfigError("unknown metric '" + std::string(text) + "'");
    long long k = 0;
    try {
      k = std::stoll(s.substr(at + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad cutoff in metric '" + std::string(text) + "'");
    }
    if (k < 1) throw ConfigError("metric cutoff must be at least 1 in '" + std::string(text) + "'");
    return {kind, static_cast<std::size_t>(k)};
  }
};

inline std::vector<MetricSpec> parse_metrics(std::string_view list) {
  std::vector<MetricSpec> out;
  std::string item;
  for (char c : std::string(list) + ",") {
    if (c == ',' || c == ' ') {
      if (!item.empty()) out.push_back(MetricSpec::parse(item));
      item.clear();
    } else {
      item += c;
    }
  }
  if (out.empty()) throw ConfigError("no metrics requested");
  return out;
}

struct MetricReport {
  std::vector<std::string> names;
  std::vector<MetricResult> results;

  double value(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return results[i].mean;
    throw ContractError("metric " + name + " not in report");
  }

  /// `metric<TAB>value<TAB>queries<TAB>excluded`
  std::string aggregate_tsv() const {
    std::string out = "metric\tvalue\tqueries\texcluded\n";
    char buf[64];
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.6f", results[i].mean);
      out += names[i] + "\t" + buf + "\t" + std::to_string(results[i].per_query.size()) + "\t" +
             std::to_string(results[i].excluded) + "\n";
    }
    return out;
  }

  /// `qid<TAB>metric<TAB>value`, one row per evaluated query and metric.
  std::string per_query_tsv() const {
    std::string out = "qid\tmetric\tvalue\n";
    char buf[64];
    for (std::size_t i = 0; i < names.size(); ++i)
      for (const auto& [qid, v] : results[i].per_query) {
        std::snprintf(buf, sizeof buf, "%.9f", v);
        out += qid + "\t" + names[i] + "\t" + buf + "\n";
      }
    return out;
  }
};

inline MetricReport evaluate_run(const Run& run, const Qrels& qrels, const std::vector<MetricSpec>& metrics,
                                 const EvalOptions& opt = {}) {
  const bool overlap = std::any_of(run.queries.begin(), run.queries.end(),
                                   [&](const auto& q) { return qrels.judgments.count(q.first) > 0; });
  if (!overlap) {
    throw DataError("run and qrels share no query ids (" + std::to_string(run.queries.size()) + " run queries, " +
                    std::to_string(qrels.judgments.size()) + " judged queries); wrong file?");
  }
  MetricReport report;
  for (const auto& m : metrics) {
    report.names.push_back(m.name());
    switch (m.kind) {
      case MetricKind::mrr: report.results.push_back(mrr_at_k(run, qrels, m.k, opt)); break;
      case MetricKind::recall: report.results.push_back(recall_at_k(run, qrels, m.k, opt)); break;
      case MetricKind::ndcg: report.results.push_back(ndcg_at_k(run, qrels, m.k, opt)); break;
    }
  }
  return report;
}

}  // namespace marrow
