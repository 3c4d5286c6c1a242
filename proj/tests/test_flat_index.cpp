#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "marrow/flat_index.hpp"
#include "support/oracles.hpp"

namespace marrow {
namespace {

TEST(FlatIndexBuild, EmptyIndexSearchesEmpty) {
  auto idx = FlatIndex::build(4, {}, {});
  EXPECT_EQ(idx.size(), 0u);
  std::vector<float> q = {1, 0, 0, 0};
  EXPECT_TRUE(idx.search(q, 10).empty());
}

TEST(FlatIndexBuild, RejectsBadRows) {
  EXPECT_THROW(FlatIndex::build(2, {"a", "a"}, {{1, 0}, {0, 1}}), DataError);
  EXPECT_THROW(FlatIndex::build(2, {"a"}, {{1, 0, 0}}), DataError);
  try {
    FlatIndex::build(2, {"ok", "bad"}, {{1, 0}, {0.5f, 0.5f}});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'bad'"), std::string::npos);
  }
}

TEST(FlatSearch, SelfRetrievalAndClampedK) {
  std::mt19937_64 rng(1);
  auto c = testing::random_unit_corpus(rng, 50, 8, 0);
  auto idx = FlatIndex::build(8, c.ids, c.rows);
  auto hits = idx.search(c.rows[17], 100);
  EXPECT_EQ(hits.size(), 50u);
  EXPECT_EQ(hits[0].doc_id, c.ids[17]);
  EXPECT_NEAR(hits[0].score, 1.0, 1e-5);
  for (const auto& h : hits) {
    EXPECT_LE(h.score, 1.0 + 1e-5);
    EXPECT_GE(h.score, -1.0 - 1e-5);
  }
  std::vector<float> wrong(7, 0.0f);
  EXPECT_THROW(idx.search(wrong, 1), DimensionError);
}

TEST(FlatSearch, FullRankingEqualsFullSort) {
  std::mt19937_64 rng(2);
  auto c = testing::random_unit_corpus(rng, 300, 6, 60);
  auto idx = FlatIndex::build(6, c.ids, c.rows);
  for (int q = 0; q < 20; ++q) {
    auto query = c.rows[static_cast<std::size_t>(q * 11)];
    EXPECT_EQ(idx.search(query, idx.size()), testing::exhaustive_search(c, query, idx.size()));
  }
}

TEST(FlatSearch, TenThousandRowsMatchExhaustiveOracle) {
  std::mt19937_64 rng(3);
  auto c = testing::random_unit_corpus(rng, 10000, 16, 500);
  auto idx = FlatIndex::build(16, c.ids, c.rows);
  for (int q = 0; q < 10; ++q) {
    auto query = testing::random_unit(rng, 16);
    EXPECT_EQ(idx.search(query, 10), testing::exhaustive_search(c, query, 10));
  }
}

TEST(BatchSearch, PartitionedAndParallelMatchSequential) {
  std::mt19937_64 rng(4);
  auto c = testing::random_unit_corpus(rng, 2000, 8, 300);
  auto idx = FlatIndex::build(8, c.ids, c.rows);
  std::vector<std::vector<float>> queries;
  for (int q = 0; q < 25; ++q) queries.push_back(testing::random_unit(rng, 8));
  auto sequential = idx.batch_search(queries, 20, 1);
  EXPECT_EQ(idx.batch_search(queries, 20, 4), sequential);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    EXPECT_EQ(idx.search(queries[q], 20, 4), sequential[q]);
    EXPECT_EQ(idx.search(queries[q], 20, 7), sequential[q]);
  }
  EXPECT_EQ(idx.batch_search({queries[0]}, 20)[0], idx.search(queries[0], 20));
}

TEST(FlatPersistence, RoundTripIsBitExact) {
  std::mt19937_64 rng(5);
  auto c = testing::random_unit_corpus(rng, 100, 8, 10);
  auto idx = FlatIndex::build(8, c.ids, c.rows);
  const auto bytes = idx.serialize();
  auto back = FlatIndex::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  auto q = testing::random_unit(rng, 8);
  EXPECT_EQ(back.search(q, 15), idx.search(q, 15));
  EXPECT_THROW(FlatIndex::deserialize(bytes.substr(0, bytes.size() - 1)), DataError);
}

TEST(FlatPersistence, ImportsJsonLines) {
  auto idx = FlatIndex::from_jsonl("{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":7,\"vector\":[0,1]}\n");
  EXPECT_EQ(idx.dim(), 2u);
  EXPECT_EQ(idx.ids(), (std::vector<std::string>{"a", "7"}));
  try {
    FlatIndex::from_jsonl("{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vector\":[1]}\n", "e");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("e:2"), std::string::npos);
  }
}

}  // namespace
}  // namespace marrow
