#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <map>
#include <random>

#include "marrow/reranker.hpp"
#include "support/gradcheck.hpp"
#include "support/loss_gradcheck.hpp"
#include "support/tiny_model.hpp"

namespace marrow {
namespace {

using testing::seq;
using testing::tiny_config;

using testing::toy_vocab;

std::vector<TokenId> ids_of(const Vocabulary& v, const std::vector<std::string>& words) {
  std::vector<TokenId> out;
  for (const auto& w : words) out.push_back(v.id(w));
  return out;
}

TEST(FormatRerankInput, LiteralTemplate) {
  Vocabulary v({"<pad>", "<unk>", "</s>", "query", ":", "document", "a", "b"});
  auto s = format_rerank_input("a", "b", v, 64);
  auto want = ids_of(v, {"query", ":", "a", "document", ":", "b"});
  want.push_back(kEosId);
  EXPECT_EQ(s.ids, want);
  EXPECT_FALSE(s.truncated);
  // the words of the template text itself tokenize the same way
  auto literal = tokenize("query: a document: b", v, 64);
  literal.ids.push_back(kEosId);
  EXPECT_EQ(s.ids, literal.ids);
}

TEST(FormatRerankInput, TruncatesDocumentOnly) {
  auto v = toy_vocab();
  auto q = seq({3, 4, 5});
  TokenSequence d;
  for (int i = 0; i < 30; ++i) d.ids.push_back(static_cast<TokenId>(6 + i % 20));
  auto s = format_rerank_input(q, d, v, 12);
  ASSERT_EQ(s.size(), 12u);
  EXPECT_TRUE(s.truncated);
  EXPECT_EQ(std::vector<TokenId>(s.ids.begin() + 2, s.ids.begin() + 5), q.ids);
  EXPECT_EQ(s.ids[5], v.id("document"));
  EXPECT_EQ(std::vector<TokenId>(s.ids.begin() + 7, s.ids.end() - 1), std::vector<TokenId>(d.ids.begin(), d.ids.begin() + 4));
  EXPECT_EQ(s.ids.back(), kEosId);
  EXPECT_THROW(format_rerank_input(q, d, v, 3), ContractError);
}

TEST(FormatRerankInput, LengthNeverExceedsLimit) {
  auto v = toy_vocab();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<TokenId> tok(3, 36);
  for (int trial = 0; trial < 2000; ++trial) {
    TokenSequence q, d;
    for (int i = std::uniform_int_distribution<int>(0, 12)(rng); i > 0; --i) q.ids.push_back(tok(rng));
    for (int i = std::uniform_int_distribution<int>(0, 40)(rng); i > 0; --i) d.ids.push_back(tok(rng));
    const std::size_t max_len = std::uniform_int_distribution<std::size_t>(4, 50)(rng);
    auto s = format_rerank_input(q, d, v, max_len);
    ASSERT_LE(s.size(), max_len);
    EXPECT_EQ(s.ids.back(), kEosId);
    EXPECT_EQ(s.truncated, s.size() < q.size() + d.size() + 5);
    if (q.size() + 5 <= max_len) {
      EXPECT_EQ(std::vector<TokenId>(s.ids.begin() + 2, s.ids.begin() + 2 + static_cast<std::ptrdiff_t>(q.size())), q.ids);
    }
  }
}

TEST(ScorePair, ComposesFormatAndScoreHead) {
  auto v = toy_vocab();
  auto c = tiny_config(HeadKind::scalar);
  c.max_seq_len = 32;
  ModelCheckpoint ckpt{testing::spread_weights(c, 1), std::nullopt, v};
  auto q = seq({3, 4}), d = seq({5, 6, 7});
  const float s = score_pair(q, d, ckpt, 16);
  EXPECT_EQ(s, score_head(ckpt.weights, nullptr, format_rerank_input(q, d, v, 16)));
  EXPECT_EQ(s, score_pair(q, d, ckpt, 16));
  for (auto& x : ckpt.weights.head.values()) x = 0;
  ckpt.weights.head_bias[0] = 0;
  EXPECT_EQ(score_pair(q, d, ckpt, 16), 0.0f);
  EXPECT_EQ(score_pair(d, q, ckpt, 16), 0.0f);
  ModelCheckpoint headless{init_weights(tiny_config(), 1), std::nullopt, v};
  EXPECT_THROW(score_pair(q, d, headless, 16), ConfigError);
}

// ---- loss ----

double loss_of(const Tensor<double>& scores, double tau) {
  Tape<double> tape;
  return reranker_loss(tape.constant(scores), tau).value()[0];
}

TEST(RerankerLoss, ScalarExamples) {
  EXPECT_NEAR(loss_of(Tensor<double>({1, 4}, 0.8), 1.0), std::log(4.0), 1e-12);
  EXPECT_NEAR(loss_of(Tensor<double>::matrix({{3.0, 0.0}}), 1.0), -std::log(std::exp(3.0) / (std::exp(3.0) + 1.0)),
              1e-12);
  EXPECT_NEAR(loss_of(Tensor<double>::matrix({{3.0, 0.0}}), 1.0), 0.0486, 1e-4);
  EXPECT_NEAR(loss_of(Tensor<double>::matrix({{1.5, 0.0}}), 0.5), 0.0486, 1e-4);
  EXPECT_THROW(loss_of(Tensor<double>({1, 2}), 0.0), ContractError);
  EXPECT_THROW(loss_of(Tensor<double>({1, 1}), 1.0), ContractError);
}

TEST(RerankerLoss, BatchedLossIsMeanOfIsolatedQueries) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 6, group = 2 + trial % 5;
    auto scores = testing::random_tensor({n, group}, rng, 3.0);
    double isolated = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor<double> one({1, group});
      for (std::size_t j = 0; j < group; ++j) one[j] = scores(i, j);
      isolated += loss_of(one, 0.7);
    }
    EXPECT_NEAR(loss_of(scores, 0.7), isolated / static_cast<double>(n), 1e-6);
  }
}

TEST(RerankerLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor<double>> in = {testing::random_tensor({3, 5}, rng)};
    auto r = testing::gradcheck([](Tape<double>&, std::span<const Var<double>> v) { return reranker_loss(v[0], 1.3); },
                                in);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  }
}

using testing::reranker_gradcheck;

TEST(RerankerStep, FullLossGradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    EXPECT_LE(reranker_gradcheck(Trainable::all, s), 1e-4) << "seed " << s;
    EXPECT_LE(reranker_gradcheck(Trainable::adapters, s), 1e-4) << "seed " << s;
  }
}

// ---- reordering ----

std::vector<Hit> random_candidates(std::mt19937_64& rng, std::size_t n) {
  std::vector<Hit> out;
  double score = 50;
  for (std::size_t i = 0; i < n; ++i) {
    score -= std::uniform_real_distribution<double>(0, 1)(rng);
    out.push_back({"d" + std::to_string(std::uniform_int_distribution<int>(0, 999)(rng)) + "_" + std::to_string(i),
                   score});
  }
  return out;
}

TEST(Rerank, ReordersHeadAndKeepsTail) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + trial % 40;
    auto cands = random_candidates(rng, n);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    std::map<std::string, double> rescored;
    for (const auto& c : cands) rescored[c.doc_id] = std::uniform_int_distribution<int>(-3, 3)(rng);  // many ties
    auto out = rerank(cands, k, [&](const std::string& id) { return rescored.at(id); });
    ASSERT_EQ(out.size(), n);
    std::multiset<std::string> in_ids, out_ids;
    for (const auto& c : cands) in_ids.insert(c.doc_id);
    for (const auto& c : out) out_ids.insert(c.doc_id);
    EXPECT_EQ(in_ids, out_ids);
    // independent sort of the head
    std::vector<std::pair<double, std::string>> head;
    for (std::size_t i = 0; i < k; ++i) head.emplace_back(-rescored[cands[i].doc_id], cands[i].doc_id);
    std::sort(head.begin(), head.end());
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_EQ(out[i].doc_id, head[i].second);
      EXPECT_EQ(out[i].score, -head[i].first);
    }
    for (std::size_t i = k; i < n; ++i) EXPECT_EQ(out[i].doc_id, cands[i].doc_id);
    for (std::size_t i = 1; i < n; ++i) EXPECT_LE(out[i].score, out[i - 1].score);
    for (std::size_t i = k; i < n; ++i) EXPECT_LT(out[i].score, out[i - 1].score);
    EXPECT_EQ(rerank(cands, k, [&](const std::string& id) { return rescored.at(id); }, false).size(), k);
  }
}

TEST(Rerank, EdgeCases) {
  auto never = [](const std::string&) -> double { throw std::logic_error("not called"); };
  EXPECT_TRUE(rerank({}, 5, never).empty());
  std::vector<Hit> cands = {{"b", 3.0}, {"a", 2.0}, {"c", 1.0}};
  auto one = rerank(cands, 1, [](const std::string&) { return 0.5; });
  EXPECT_EQ(one[0].doc_id, "b");
  EXPECT_EQ(one[1].doc_id, "a");
  EXPECT_EQ(one[2].doc_id, "c");
  auto all = rerank(cands, 10, [](const std::string&) { return 1.0; });  // k beyond the list is clamped
  EXPECT_EQ(all[0].doc_id, "a");
  EXPECT_EQ(all[2].doc_id, "c");
}

TEST(Rerank, ModelOverloadUsesScorePair) {
  auto v = toy_vocab();
  auto c = tiny_config(HeadKind::scalar);
  ModelCheckpoint ckpt{testing::spread_weights(c, 2), std::nullopt, v};
  TokenLookup docs = {{"x", seq({5, 6})}, {"y", seq({7})}, {"z", seq({8, 9})}};
  auto q = seq({3});
  auto out = rerank(q, {{"x", 3}, {"y", 2}, {"z", 1}}, 3, ckpt, docs, 16);
  for (const auto& h : out) EXPECT_EQ(h.score, score_pair(q, docs.at(h.doc_id), ckpt, 16));
}

// ---- training ----

RerankerTrainConfig toy_rerank_config() {
  RerankerTrainConfig cfg;
  cfg.batch_size = 4;
  cfg.negatives = 3;
  cfg.epochs = 100;
  cfg.adam.lr = 5e-3;
  cfg.max_steps = 150;
  cfg.max_len = 16;
  cfg.seed = 1;
  return cfg;
}

TEST(TrainReranker, LearnsSeparableTask) {
  auto task = testing::toy_task(10, 2);
  auto w = init_weights(tiny_config(HeadKind::scalar), 3);
  auto log = train_reranker(w, nullptr, toy_rerank_config(), task.examples, task.queries, task.docs, toy_vocab());
  ASSERT_EQ(log.losses.size(), 150u);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += log.losses[i];
    tail += log.losses[140 + i];
  }
  EXPECT_LT(tail, 0.25 * head) << "first " << head / 10 << " last " << tail / 10;
}

TEST(TrainReranker, ZeroLearningRateAndDeterminism) {
  auto task = testing::toy_task(6, 3);
  auto cfg = toy_rerank_config();
  cfg.max_steps = 6;
  auto w = init_weights(tiny_config(HeadKind::scalar), 4);
  auto frozen = w;
  auto zero = cfg;
  zero.adam.lr = 0.0;
  train_reranker(frozen, nullptr, zero, task.examples, task.queries, task.docs, toy_vocab());
  EXPECT_TRUE(frozen == w);
  auto a = w, b = w;
  auto la = train_reranker(a, nullptr, cfg, task.examples, task.queries, task.docs, toy_vocab());
  ::setenv("MARROW_THREADS", "3", 1);
  auto lb = train_reranker(b, nullptr, cfg, task.examples, task.queries, task.docs, toy_vocab());
  ::unsetenv("MARROW_THREADS");
  EXPECT_EQ(la.losses, lb.losses);
  EXPECT_TRUE(a == b);
}

TEST(TrainReranker, RequiresScalarHead) {
  auto task = testing::toy_task(4, 3);
  auto w = init_weights(tiny_config(), 4);
  EXPECT_THROW(train_reranker(w, nullptr, toy_rerank_config(), task.examples, task.queries, task.docs, toy_vocab()),
               ConfigError);
}

}  // namespace
}  // namespace marrow
