#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "marrow/bm25.hpp"

namespace marrow {
namespace {

using Docs = std::vector<std::pair<std::string, TokenSequence>>;

TokenSequence seq(std::vector<TokenId> ids) { return TokenSequence{std::move(ids), false}; }

TEST(InvertedIndexBuild, SingleDocument) {
  // "a b a" with a=3, b=4
  auto idx = InvertedIndex::build({{"d", seq({3, 4, 3})}});
  EXPECT_EQ(idx.postings(3), (std::vector<Posting>{{0, 2}}));
  EXPECT_EQ(idx.postings(4), (std::vector<Posting>{{0, 1}}));
  EXPECT_TRUE(idx.postings(5).empty());
  EXPECT_DOUBLE_EQ(idx.average_length(), 3.0);
}

TEST(InvertedIndexBuild, RejectsDuplicatesAndEmptyCorpus) {
  EXPECT_THROW(InvertedIndex::build({{"d", seq({3})}, {"d", seq({4})}}), DataError);
  EXPECT_THROW(InvertedIndex::build({}), DataError);
}

Docs random_docs(std::mt19937_64& rng, std::size_t n, int vocab, int max_len) {
  std::uniform_int_distribution<TokenId> tok(1, vocab - 1);  // includes <unk>
  std::uniform_int_distribution<int> len(0, max_len);
  Docs docs;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence s;
    for (int j = len(rng); j > 0; --j) s.ids.push_back(tok(rng));
    docs.emplace_back("doc" + std::to_string((i * 7919) % n), s);  // ids not in index order
  }
  return docs;
}

TEST(InvertedIndexBuild, MatchesNaiveCountingOracle) {
  std::mt19937_64 rng(11);
  auto docs = random_docs(rng, 200, 40, 30);
  auto idx = InvertedIndex::build(docs);
  std::uint64_t total = 0;
  for (const auto& [id, s] : docs) total += s.size();
  EXPECT_DOUBLE_EQ(idx.average_length(), static_cast<double>(total) / 200.0);
  for (TokenId t = 3; t < 40; ++t) {
    std::vector<Posting> want;
    for (std::uint32_t d = 0; d < docs.size(); ++d) {
      const auto tf = std::count(docs[d].second.ids.begin(), docs[d].second.ids.end(), t);
      if (tf > 0) want.push_back({d, static_cast<std::uint32_t>(tf)});
    }
    EXPECT_EQ(idx.postings(t), want) << "term " << t;
  }
  EXPECT_TRUE(idx.postings(kUnkId).empty());
}

TEST(Bm25Search, ScalarExample) {
  auto idx = InvertedIndex::build({{"d", seq({3})}});
  auto hits = idx.search(seq({3}), 10);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_NEAR(hits[0].score, std::log(4.0 / 3.0), 1e-12);
  EXPECT_NEAR(hits[0].score, 0.28768, 1e-5);
}

TEST(Bm25Search, OutOfVocabularyQueryIsEmpty) {
  auto idx = InvertedIndex::build({{"d", seq({3, 4})}});
  EXPECT_TRUE(idx.search(seq({kUnkId, kUnkId}), 5).empty());
  EXPECT_TRUE(idx.search(seq({}), 5).empty());
  EXPECT_TRUE(idx.search(seq({9}), 5).empty());
  EXPECT_THROW(idx.search(seq({3}), 0), ContractError);
}

TEST(Bm25Search, IdfNonNegativeAndScoreIncreasingInTf) {
  Docs docs;
  for (int i = 0; i < 5; ++i) docs.emplace_back("d" + std::to_string(i), seq({3, 4, 5, 6}));
  auto idx = InvertedIndex::build(docs);
  EXPECT_GE(idx.idf(3), 0.0);  // df == N
  double prev = -1;
  for (std::uint32_t tf = 1; tf <= 6; ++tf) {
    Docs d2 = docs;
    d2[0].second.ids.assign(12, 4);  // fixed length, tf copies of term 7
    for (std::uint32_t i = 0; i < tf; ++i) d2[0].second.ids[i] = 7;
    auto hits = InvertedIndex::build(d2).search(seq({7}), 1);
    ASSERT_EQ(hits.size(), 1u);
    EXPECT_GT(hits[0].score, prev);
    prev = hits[0].score;
  }
}

// Score every document directly from its token list.
std::vector<Hit> exhaustive_bm25(const Docs& docs, const TokenSequence& query, std::size_t k, Bm25Params p) {
  std::set<TokenId> terms;
  for (TokenId t : query.ids)
    if (t >= 3) terms.insert(t);
  double avg = 0;
  for (const auto& [id, s] : docs) avg += static_cast<double>(s.size());
  avg /= static_cast<double>(docs.size());
  std::map<TokenId, double> df;
  for (TokenId t : terms)
    for (const auto& [id, s] : docs) df[t] += std::find(s.ids.begin(), s.ids.end(), t) != s.ids.end();
  const double n = static_cast<double>(docs.size());
  std::vector<Hit> all;
  for (const auto& [id, s] : docs) {
    double score = 0;
    bool any = false;
    for (TokenId t : terms) {
      const double tf = static_cast<double>(std::count(s.ids.begin(), s.ids.end(), t));
      if (tf == 0) continue;
      any = true;
      const double idf = std::log(1.0 + (n - df[t] + 0.5) / (df[t] + 0.5));
      score += idf * tf * (p.k1 + 1) / (tf + p.k1 * (1 - p.b + p.b * static_cast<double>(s.size()) / avg));
    }
    if (any) all.push_back({id, score});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.score > b.score || (a.score == b.score && a.doc_id < b.doc_id);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

TEST(Bm25Search, TopKMatchesExhaustiveScoring) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto docs = random_docs(rng, 500, 60, 25);
    auto idx = InvertedIndex::build(docs);
    for (int q = 0; q < 10; ++q) {
      TokenSequence query;
      for (int j = 0; j < 1 + q % 4; ++j) query.ids.push_back(std::uniform_int_distribution<TokenId>(3, 70)(rng));
      const std::size_t k = 1 + static_cast<std::size_t>(q * 13 % 40);
      const Bm25Params p{0.5 + 0.1 * trial, 0.05 * trial};
      auto got = idx.search(query, k, p);
      auto want = exhaustive_bm25(docs, query, k, p);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].doc_id, want[i].doc_id) << trial << "/" << q << " rank " << i;
        EXPECT_NEAR(got[i].score, want[i].score, 1e-12);
      }
    }
  }
}

TEST(Bm25Search, TiesBreakByDocId) {
  auto idx = InvertedIndex::build({{"z", seq({3})}, {"a", seq({3})}, {"m", seq({3})}});
  auto hits = idx.search(seq({3}), 3);
  EXPECT_EQ(hits[0].doc_id, "a");
  EXPECT_EQ(hits[1].doc_id, "m");
  EXPECT_EQ(hits[2].doc_id, "z");
}

TEST(Bm25Persistence, RoundTripsAndRejectsCorruption) {
  std::mt19937_64 rng(5);
  auto idx = InvertedIndex::build(random_docs(rng, 300, 50, 20));
  const auto bytes = idx.serialize();
  auto back = InvertedIndex::deserialize(bytes);
  EXPECT_TRUE(back == idx);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_THROW(InvertedIndex::deserialize(bytes.substr(0, bytes.size() - 3)), DataError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(InvertedIndex::deserialize(bad), DataError);
}

}  // namespace
}  // namespace marrow
