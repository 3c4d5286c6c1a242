#pragma once

// Document and query stores read from TSV or JSONL, plus length statistics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "marrow/error.hpp"
#include "marrow/eval.hpp"
#include "marrow/io.hpp"
#include "marrow/text.hpp"

namespace marrow {

enum class CorpusFormat { tsv, jsonl };

/// Id-addressable texts in file order.
class TextStore {
 public:
  void add(std::string id, std::string text, const std::string& where = {}) {
    if (id.empty()) throw DataError(where + (where.empty() ? "" : ": ") + "empty id");
    auto [it, inserted] = index_.emplace(id, entries_.size());
    if (!inserted) throw DataError(where + (where.empty() ? "" : ": ") + "duplicate id '" + id + "'");
    entries_.emplace_back(std::move(id), std::move(text));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }
  const std::string& text(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("unknown id '" + id + "'");
    return entries_[it->second].second;
  }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  /// Canonical TSV form (tabs and newlines inside texts become spaces).
  std::string to_tsv() const {
    std::string out;
    for (const auto& [id, text] : entries_) {
      std::string clean = text;
      std::replace(clean.begin(), clean.end(), '\t', ' ');
      std::replace(clean.begin(), clean.end(), '\n', ' ');
      std::replace(clean.begin(), clean.end(), '\r', ' ');
      out += id + "\t" + clean + "\n";
    }
    return out;
  }

  bool operator==(const TextStore& other) const { return entries_ == other.entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// `id<TAB>text` per line. The text may be empty but the tab is required.
inline TextStore parse_tsv_store(std::string_view content, const std::string& origin) {
  TextStore store;
  detail::for_each_line(content, [&](std::string_view line, std::size_t no) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) return;
    const std::string where = origin + ":" + std::to_string(no);
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw DataError(where + ": expected id<TAB>text");
    store.add(std::string(line.substr(0, tab)), std::string(line.substr(tab + 1)), where);
  });
  return store;
}

/// {"id": ..., "contents": ...} per line; numeric ids are accepted.
inline TextStore parse_jsonl_store(std::string_view content, const std::string& origin) {
  TextStore store;
  detail::for_each_line(content, [&](std::string_view line, std::size_t no) {
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) return;
    const std::string where = origin + ":" + std::to_string(no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("contents") || !j["contents"].is_string()) {
      throw DataError(where + ": expected {\"id\":..., \"contents\":\"...\"}");
    }
    const auto& id = j["id"];
    store.add(id.is_string() ? id.get<std::string>() : id.dump(), j["contents"].get<std::string>(), where);
  });
  return store;
}

inline CorpusFormat detect_format(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".json") return CorpusFormat::jsonl;
  return CorpusFormat::tsv;
}

inline TextStore load_store(const std::filesystem::path& path, std::optional<CorpusFormat> format = std::nullopt) {
  const auto content = read_file(path);
  const auto f = format.value_or(detect_format(path));
  return f == CorpusFormat::jsonl ? parse_jsonl_store(content, path.string()) : parse_tsv_store(content, path.string());
}

struct LengthStats {
  std::size_t count = 0;
  double mean = 0;
  std::size_t min = 0, p50 = 0, p90 = 0, p99 = 0, max = 0;
  std::vector<std::pair<std::size_t, double>> cdf;  // (length, fraction of docs with length ≤ it)
};

/// Nearest-rank percentile: the smallest length covering at least p of the docs.
inline std::size_t nearest_rank(const std::vector<std::size_t>& sorted, double p) {
  if (sorted.empty()) return 0;
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(sorted.size())));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

inline LengthStats length_stats(std::vector<std::size_t> lengths) {
  LengthStats s;
  s.count = lengths.size();
  if (lengths.empty()) return s;
  std::sort(lengths.begin(), lengths.end());
  double total = 0;
  for (auto l : lengths) total += static_cast<double>(l);
  s.mean = total / static_cast<double>(lengths.size());
  s.min = lengths.front();
  s.max = lengths.back();
  s.p50 = nearest_rank(lengths, 0.5);
  s.p90 = nearest_rank(lengths, 0.9);
  s.p99 = nearest_rank(lengths, 0.99);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (i + 1 == lengths.size() || lengths[i + 1] != lengths[i])
      s.cdf.emplace_back(lengths[i], static_cast<double>(i + 1) / static_cast<double>(lengths.size()));
  }
  return s;
}

inline LengthStats token_length_stats(const TextStore& store) {
  std::vector<std::size_t> lengths;
  for (const auto& [id, text] : store.entries()) lengths.push_back(split_words(text).size());
  return length_stats(std::move(lengths));
}

inline std::string format_length_cdf(const LengthStats& s) {
  std::string out = "length,cdf\n";
  char buf[64];
  for (const auto& [len, frac] : s.cdf) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", len, frac);
    out += buf;
  }
  return out;
}

}  // namespace marrow
