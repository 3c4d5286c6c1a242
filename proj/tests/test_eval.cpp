#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "marrow/eval.hpp"
#include "support/oracles.hpp"

namespace marrow {
namespace {

Run run_of(const std::map<std::string, std::vector<std::string>>& lists) {
  std::map<std::string, std::vector<std::pair<std::string, double>>> ranked;
  for (const auto& [q, docs] : lists)
    for (std::size_t i = 0; i < docs.size(); ++i) ranked[q].emplace_back(docs[i], 100.0 - static_cast<double>(i));
  return make_run(ranked);
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

TEST(Qrels, ParsesAndRejectsMalformedLines) {
  auto q = parse_qrels("q1 0 d1 2\n\nq1 0 d2 0\nq2 0 d1 1\n");
  EXPECT_EQ(q.grade("q1", "d1"), 2);
  EXPECT_EQ(q.grade("q1", "d9"), 0);
  EXPECT_EQ(q.judgments.size(), 2u);
  EXPECT_EQ(parse_qrels(format_qrels(q)), q);
  EXPECT_NE(error_of([] { parse_qrels("q1 0 d1 1\nq1 0 d2\n", "f"); }).find("f:2"), std::string::npos);
  EXPECT_NE(error_of([] { parse_qrels("q1 0 d1 x\n", "f"); }).find("f:1"), std::string::npos);
  EXPECT_THROW(parse_qrels("q1 0 d1 -1\n"), DataError);
  EXPECT_THROW(parse_qrels("q1 0 d1 1\nq1 0 d1 2\n"), DataError);
}

TEST(RunFile, RoundTripsWithSixDecimals) {
  auto run = make_run({{"q1", {{"a", 1.5}, {"b", 0.25}}}, {"q2", {{"c", -0.1234567}}}}, "tagx");
  const auto text = format_run(run);
  EXPECT_EQ(text, "q1 Q0 a 1 1.500000 tagx\nq1 Q0 b 2 0.250000 tagx\nq2 Q0 c 1 -0.123457 tagx\n");
  auto back = parse_run(text);
  EXPECT_EQ(back.tag, "tagx");
  EXPECT_EQ(back.queries.at("q1")[1].doc_id, "b");
  EXPECT_EQ(format_run(back), text);
}

TEST(RunFile, ValidationErrorsCarryLineNumbers) {
  EXPECT_NE(error_of([] { parse_run("q1 Q0 a 1 1.0 t\nq1 Q0 b 3 0.5 t\n", "r"); }).find("r:2"), std::string::npos);
  EXPECT_NE(error_of([] { parse_run("q1 Q0 a 1 1.0 t\nq1 Q0 b 2 2.0 t\n", "r"); }).find("r:2"), std::string::npos);
  EXPECT_NE(error_of([] { parse_run("q1 Q0 a 1 1.0 t\nq1 Q0 a 2 0.5 t\n", "r"); }).find("repeated"), std::string::npos);
  EXPECT_NE(error_of([] { parse_run("q1 Q0 a 1 1.0 t\nq1 Q0 b 2\n", "r"); }).find("r:2"), std::string::npos);
  EXPECT_THROW(parse_run("q1 Q0 a 1 nan t\n"), DataError);
  // ranks may appear out of order in the file
  EXPECT_NO_THROW(parse_run("q1 Q0 b 2 0.5 t\nq1 Q0 a 1 1.0 t\n"));
}

TEST(Mrr, PerfectRunAndThirdRank) {
  auto qrels = parse_qrels("q1 0 a 1\nq2 0 x 1\n");
  EXPECT_DOUBLE_EQ(mrr_at_k(run_of({{"q1", {"a", "b"}}, {"q2", {"x"}}}), qrels, 10).mean, 1.0);
  auto single = parse_qrels("q1 0 c 1\n");
  EXPECT_DOUBLE_EQ(mrr_at_k(run_of({{"q1", {"a", "b", "c"}}}), single, 10).mean, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mrr_at_k(run_of({{"q1", {"a", "b", "c"}}}), single, 2).mean, 0.0);
}

TEST(Mrr, QueriesMissingFromRunCountAsZero) {
  auto qrels = parse_qrels("q1 0 a 1\nq2 0 x 1\n");
  auto r = mrr_at_k(run_of({{"q1", {"a"}}}), qrels, 10);
  EXPECT_DOUBLE_EQ(r.mean, 0.5);
  EXPECT_EQ(r.per_query.size(), 2u);
}

TEST(Mrr, ThresholdControlsRelevance) {
  auto qrels = parse_qrels("q1 0 a 1\nq1 0 b 2\n");
  auto run = run_of({{"q1", {"a", "b"}}});
  EXPECT_DOUBLE_EQ(mrr_at_k(run, qrels, 10, {1, Gain::linear}).mean, 1.0);
  EXPECT_DOUBLE_EQ(mrr_at_k(run, qrels, 10, {2, Gain::linear}).mean, 0.5);
  EXPECT_THROW(mrr_at_k(run, qrels, 0), ContractError);
}

TEST(Recall, FullHalfAndExcludedQueries) {
  auto qrels = parse_qrels("q1 0 a 1\nq1 0 b 1\nq2 0 x 1\nq3 0 z 0\n");
  auto run = run_of({{"q1", {"a", "c", "b"}}, {"q2", {"x"}}, {"q3", {"z"}}});
  auto r = recall_at_k(run, qrels, 2);
  EXPECT_DOUBLE_EQ(r.per_query.at("q1"), 0.5);
  EXPECT_DOUBLE_EQ(r.per_query.at("q2"), 1.0);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_DOUBLE_EQ(r.mean, 0.75);
  EXPECT_DOUBLE_EQ(recall_at_k(run, qrels, 3).per_query.at("q1"), 1.0);
}

TEST(Ndcg, HandComputedExample) {
  auto qrels = parse_qrels("q 0 d1 3\nq 0 d2 1\n");
  auto run = run_of({{"q", {"d2", "d1"}}});
  const double dcg = 1.0 / std::log2(2.0) + 3.0 / std::log2(3.0);
  const double idcg = 3.0 + 1.0 / std::log2(3.0);
  EXPECT_NEAR(dcg, 2.8928, 1e-4);
  EXPECT_NEAR(idcg, 3.6309, 1e-4);
  const double got = ndcg_at_k(run, qrels, 10).mean;
  EXPECT_NEAR(got, dcg / idcg, 1e-12);
  EXPECT_NEAR(got, 0.7967, 5e-5);
  const double exp_dcg = 1.0 + 7.0 / std::log2(3.0), exp_idcg = 7.0 + 1.0 / std::log2(3.0);
  EXPECT_NEAR(ndcg_at_k(run, qrels, 10, {1, Gain::exponential}).mean, exp_dcg / exp_idcg, 1e-12);
}

TEST(Ndcg, IdealOrderAndEqualGradeSymmetry) {
  auto qrels = parse_qrels("q 0 a 3\nq 0 b 2\nq 0 c 2\nq 0 d 1\n");
  EXPECT_DOUBLE_EQ(ndcg_at_k(run_of({{"q", {"a", "b", "c", "d"}}}), qrels, 10).mean, 1.0);
  const double x = ndcg_at_k(run_of({{"q", {"d", "b", "x", "c", "a"}}}), qrels, 10).mean;
  const double y = ndcg_at_k(run_of({{"q", {"d", "c", "x", "b", "a"}}}), qrels, 10).mean;
  EXPECT_NEAR(x, y, 1e-9);
  auto zero = parse_qrels("q 0 a 0\n");
  EXPECT_EQ(ndcg_at_k(run_of({{"q", {"a"}}}), zero, 10).excluded, 1u);
}

TEST(MetricOracle, ThousandRandomInstancesAgree) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    auto [run, qrels] = testing::random_run_and_qrels(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    const int threshold = 1 + trial % 2;
    const bool exponential = trial % 3 == 0;
    testing::MetricOracle oracle{threshold, exponential};
    EvalOptions opt{threshold, exponential ? Gain::exponential : Gain::linear};
    ASSERT_NEAR(mrr_at_k(run, qrels, k, opt).mean, oracle.mrr(run, qrels, k), 1e-9) << trial;
    ASSERT_NEAR(recall_at_k(run, qrels, k, opt).mean, oracle.recall(run, qrels, k), 1e-9) << trial;
    ASSERT_NEAR(ndcg_at_k(run, qrels, k, opt).mean, oracle.ndcg(run, qrels, k), 1e-9) << trial;
  }
}

TEST(MetricProperties, BoundedAndMonotoneUnderPromotion) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    auto [run, qrels] = testing::random_run_and_qrels(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
    for (auto* metric : {&mrr_at_k, &recall_at_k, &ndcg_at_k}) {
      const double before = (*metric)(run, qrels, k, {}).mean;
      ASSERT_GE(before, 0.0);
      ASSERT_LE(before, 1.0);
      // swap the first relevant document below position 0 with its predecessor
      marrow::Run moved = run;
      for (auto& [qid, entries] : moved.queries) {
        for (std::size_t i = 1; i < entries.size(); ++i) {
          if (qrels.grade(qid, entries[i].doc_id) > qrels.grade(qid, entries[i - 1].doc_id)) {
            std::swap(entries[i].doc_id, entries[i - 1].doc_id);
            break;
          }
        }
      }
      EXPECT_GE((*metric)(moved, qrels, k, {}).mean, before - 1e-12);
    }
  }
}

TEST(EvaluateRun, ReportIsDeterministicAndConsistent) {
  std::mt19937_64 rng(5);
  auto [run, qrels] = testing::random_run_and_qrels(rng);
  run.queries[qrels.judgments.begin()->first];  // ensure overlap
  auto metrics = parse_metrics("mrr@10,recall@100,ndcg@10");
  auto a = evaluate_run(run, qrels, metrics), b = evaluate_run(run, qrels, metrics);
  EXPECT_EQ(a.aggregate_tsv(), b.aggregate_tsv());
  EXPECT_EQ(a.per_query_tsv(), b.per_query_tsv());
  EXPECT_EQ(a.names, (std::vector<std::string>{"MRR@10", "R@100", "nDCG@10"}));
  for (const auto& r : a.results) {
    double total = 0;
    for (const auto& [q, v] : r.per_query) total += v;
    if (!r.per_query.empty()) {
      EXPECT_NEAR(r.mean, total / static_cast<double>(r.per_query.size()), 1e-9);
    }
  }
}

TEST(EvaluateRun, DisjointQuerySetsAreAnError) {
  auto qrels = parse_qrels("q1 0 a 1\n");
  auto run = run_of({{"other", {"a"}}});
  EXPECT_THROW(evaluate_run(run, qrels, parse_metrics("mrr@10")), DataError);
}

TEST(MetricSpecTest, ParsesNames) {
  EXPECT_EQ(MetricSpec::parse("MRR@10").name(), "MRR@10");
  EXPECT_EQ(MetricSpec::parse("recall@1000").name(), "R@1000");
  EXPECT_EQ(MetricSpec::parse("ndcg@10").name(), "nDCG@10");
  EXPECT_THROW(MetricSpec::parse("map@10"), ConfigError);
  EXPECT_THROW(MetricSpec::parse("mrr"), ConfigError);
  EXPECT_THROW(MetricSpec::parse("mrr@0"), ConfigError);
}

}  // namespace
}  // namespace marrow
