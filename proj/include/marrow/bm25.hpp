#pragma once

// BM25 over an inverted index on the shared tokenizer.
//
// Index file layout (little-endian):
//   "MRWBM25\0"  u32 version
//   u64 N  f64 avg_len
//   N × { str doc_id, u32 length }               str = u32 size + bytes
//   u32 T  T × { i32 term, u32 df, u64 offset, u64 nbytes }
//   postings blob: per term, df × { varint doc_gap, varint tf }

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <tuple>
#include <unordered_set>
#include <utility>
#include <vector>

#include "marrow/error.hpp"
#include "marrow/io.hpp"
#include "marrow/ranking.hpp"
#include "marrow/text.hpp"

namespace marrow {

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct Posting {
  std::uint32_t doc = 0;  // index into doc_ids
  std::uint32_t tf = 0;
  bool operator==(const Posting&) const = default;
};

class InvertedIndex {
 public:
  InvertedIndex() = default;

  /// Postings skip <pad>, <unk> and </s>; document length counts every token.
  static InvertedIndex build(const std::vector<std::pair<std::string, TokenSequence>>& docs) {
    if (docs.empty()) throw DataError("cannot index an empty corpus");
    InvertedIndex idx;
    std::unordered_set<std::string> seen;
    std::uint64_t total = 0;
    for (std::uint32_t d = 0; d < docs.size(); ++d) {
      const auto& [id, tokens] = docs[d];
      if (!seen.insert(id).second) throw DataError("duplicate document id '" + id + "'");
      idx.doc_ids_.push_back(id);
      idx.lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
      total += tokens.size();
      std::vector<TokenId> terms;
      for (TokenId t : tokens.ids)
        if (t >= static_cast<TokenId>(kReservedTokens)) terms.push_back(t);
      std::sort(terms.begin(), terms.end());
      for (std::size_t i = 0; i < terms.size();) {
        std::size_t j = i;
        while (j < terms.size() && terms[j] == terms[i]) ++j;
        const auto term = static_cast<std::size_t>(terms[i]);
        if (term >= idx.postings_.size()) idx.postings_.resize(term + 1);
        idx.postings_[term].push_back({d, static_cast<std::uint32_t>(j - i)});
        i = j;
      }
    }
    idx.avg_len_ = static_cast<double>(total) / static_cast<double>(docs.size());
    return idx;
  }

  std::size_t size() const noexcept { return doc_ids_.size(); }
  double average_length() const noexcept { return avg_len_; }
  const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }
  const std::vector<std::uint32_t>& lengths() const noexcept { return lengths_; }

  const std::vector<Posting>& postings(TokenId term) const {
    static const std::vector<Posting> empty;
    if (term < 0 || static_cast<std::size_t>(term) >= postings_.size()) return empty;
    return postings_[static_cast<std::size_t>(term)];
  }

  double idf(TokenId term) const {
    const double df = static_cast<double>(postings(term).size());
    const double n = static_cast<double>(size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
  }

  /// Top-k documents by BM25 over the distinct query terms; only documents
  /// sharing at least one term are returned.
  std::vector<Hit> search(const TokenSequence& query, std::size_t k, const Bm25Params& p = {}) const {
    if (k < 1) throw ContractError("bm25 search: k must be at least 1");
    std::vector<TokenId> terms;
    for (TokenId t : query.ids)
      if (t >= static_cast<TokenId>(kReservedTokens)) terms.push_back(t);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    std::vector<double> scores(size(), 0.0);
    std::vector<char> matched(size(), 0);
    for (TokenId t : terms) {
      const auto& list = postings(t);
      if (list.empty()) continue;
      const double w = idf(t);
      for (const auto& post : list) {
        const double tf = post.tf;
        const double norm = p.k1 * (1.0 - p.b + p.b * lengths_[post.doc] / avg_len_);
        scores[post.doc] += w * tf * (p.k1 + 1.0) / (tf + norm);
        matched[post.doc] = 1;
      }
    }
    std::vector<Hit> hits;
    for (std::size_t d = 0; d < size(); ++d)
      if (matched[d]) hits.push_back({doc_ids_[d], scores[d]});
    sort_and_cut(hits, k);
    return hits;
  }

  std::string serialize() const {
    ByteWriter w;
    w.put_bytes("MRWBM25\0", 8);
    w.put<std::uint32_t>(1);
    w.put<std::uint64_t>(size());
    w.put<double>(avg_len_);
    for (std::size_t d = 0; d < size(); ++d) {
      w.put_string(doc_ids_[d]);
      w.put<std::uint32_t>(lengths_[d]);
    }
    ByteWriter blob;
    std::vector<std::tuple<TokenId, std::uint32_t, std::uint64_t, std::uint64_t>> table;
    for (std::size_t t = 0; t < postings_.size(); ++t) {
      if (postings_[t].empty()) continue;
      const std::uint64_t offset = blob.bytes().size();
      std::uint32_t prev = 0;
      for (std::size_t i = 0; i < postings_[t].size(); ++i) {
        const auto& post = postings_[t][i];
        blob.put_varint(i == 0 ? post.doc : post.doc - prev);
        blob.put_varint(post.tf);
        prev = post.doc;
      }
      table.emplace_back(static_cast<TokenId>(t), static_cast<std::uint32_t>(postings_[t].size()), offset,
                         blob.bytes().size() - offset);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
    for (const auto& [term, df, offset, nbytes] : table) {
      w.put<std::int32_t>(term);
      w.put<std::uint32_t>(df);
      w.put<std::uint64_t>(offset);
      w.put<std::uint64_t>(nbytes);
    }
    w.bytes() += blob.bytes();
    return std::move(w.bytes());
  }

  static InvertedIndex deserialize(std::string_view bytes, const std::string& origin = "bm25 index") {
    ByteReader r(bytes, origin);
    char magic[8];
    r.get_bytes(magic, 8);
    if (std::string_view(magic, 8) != std::string_view("MRWBM25\0", 8)) throw DataError(origin + ": not a BM25 index");
    if (r.get<std::uint32_t>() != 1) throw DataError(origin + ": unsupported BM25 index version");
    InvertedIndex idx;
    const auto n = r.get<std::uint64_t>();
    idx.avg_len_ = r.get<double>();
    for (std::uint64_t d = 0; d < n; ++d) {
      idx.doc_ids_.push_back(r.get_string());
      idx.lengths_.push_back(r.get<std::uint32_t>());
    }
    const auto terms = r.get<std::uint32_t>();
    struct Entry {
      TokenId term;
      std::uint32_t df;
      std::uint64_t offset, nbytes;
    };
    std::vector<Entry> table;
    for (std::uint32_t i = 0; i < terms; ++i) {
      Entry e;
      e.term = r.get<std::int32_t>();
      e.df = r.get<std::uint32_t>();
      e.offset = r.get<std::uint64_t>();
      e.nbytes = r.get<std::uint64_t>();
      if (e.term < static_cast<TokenId>(kReservedTokens)) throw DataError(origin + ": reserved token in term table");
      table.push_back(e);
    }
    const std::size_t blob_start = r.position();
    const std::string_view blob = bytes.substr(blob_start);
    for (const auto& e : table) {
      if (e.offset + e.nbytes > blob.size()) throw DataError(origin + ": posting range out of bounds");
      ByteReader pr(blob.substr(e.offset, e.nbytes), origin);
      const auto term = static_cast<std::size_t>(e.term);
      if (idx.postings_.size() <= term) idx.postings_.resize(term + 1);
      auto& list = idx.postings_[term];
      if (!list.empty()) throw DataError(origin + ": term listed twice");
      std::uint64_t doc = 0;
      for (std::uint32_t i = 0; i < e.df; ++i) {
        const auto gap = pr.get_varint();
        if (i > 0 && gap == 0) throw DataError(origin + ": posting list not strictly increasing");
        doc = i == 0 ? gap : doc + gap;
        if (doc >= n) throw DataError(origin + ": posting references unknown document");
        list.push_back({static_cast<std::uint32_t>(doc), static_cast<std::uint32_t>(pr.get_varint())});
      }
      if (!pr.done()) throw DataError(origin + ": trailing bytes in posting list");
    }
    return idx;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }
  static InvertedIndex load(const std::filesystem::path& path) { return deserialize(read_file(path), path.string()); }

  bool operator==(const InvertedIndex&) const = default;

 private:
  std::vector<std::string> doc_ids_;
  std::vector<std::uint32_t> lengths_;
  double avg_len_ = 0.0;
  std::vector<std::vector<Posting>> postings_;  // by term id
};

}  // namespace marrow
