#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "marrow/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/loss_gradcheck.hpp"

namespace marrow {
namespace {

using testing::gradcheck;
using testing::random_tensor;

Tensor<float> random_float(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<float> tape;
  auto eye = tape.constant(Tensor<float>::matrix({{1, 0}, {0, 1}}));
  auto b = tape.constant(Tensor<float>::matrix({{3, 4}, {5, 6}}));
  auto c = matmul(eye, b);
  EXPECT_EQ(c.tensor(), Tensor<float>::matrix({{3, 4}, {5, 6}}));
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
  Tape<float> tape;
  auto c = matmul(tape.constant(Tensor<float>::matrix({{1, 2}})), tape.constant(Tensor<float>::matrix({{3}, {4}})));
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.value()[0], 11.0f);
}

TEST(Matmul, MatchesNaiveTripleLoopExactly) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_float({3, 4}, rng);
    auto b = random_float({4, 2}, rng);
    Tape<float> tape;
    auto c = matmul(tape.constant(a), tape.constant(b));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        float acc = 0.0f;
        for (std::size_t t = 0; t < 4; ++t) acc += a(i, t) * b(t, j);
        EXPECT_EQ(c.value()[i * 2 + j], acc);
      }
  }
}

TEST(Matmul, TransposedVariantAgreesWithExplicitTranspose) {
  std::mt19937_64 rng(8);
  auto a = random_float({5, 3}, rng);
  auto b = random_float({4, 3}, rng);
  Tensor<float> bt({3, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) bt(j, i) = b(i, j);
  Tape<float> tape;
  auto c1 = matmul_nt(tape.constant(a), tape.constant(b));
  auto c2 = matmul(tape.constant(a), tape.constant(bt));
  EXPECT_EQ(c1.tensor(), c2.tensor());
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2x2]"), std::string::npos);
  }
}

TEST(Softmax, UniformRowIsUniform) {
  Tape<double> tape;
  auto y = softmax_rows(tape.constant(Tensor<double>::matrix({{0, 0, 0}})));
  for (double v : y.value()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Softmax, LogTwoGapGivesOneThirdTwoThirds) {
  for (double c : {-50.0, -1.0, 0.0, 3.5, 80.0}) {
    Tape<double> tape;
    auto y = softmax_rows(tape.constant(Tensor<double>::matrix({{c, c + std::log(2.0)}})));
    EXPECT_NEAR(y.value()[0], 1.0 / 3.0, 1e-12) << c;
    EXPECT_NEAR(y.value()[1], 2.0 / 3.0, 1e-12) << c;
  }
}

TEST(Softmax, MatchesScalarOracle) {
  Tape<double> tape;
  auto y = softmax_rows(tape.constant(Tensor<double>::matrix({{1.0, 2.0, 3.0}})));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y.value()[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(y.value()[1], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(y.value()[2], std::exp(3.0) / z, 1e-12);
}

TEST(Softmax, RowsSumToOneAndAreShiftInvariant) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> shift(-30.0f, 30.0f);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_float({4, 7}, rng);
    for (auto& v : x.values()) v *= 5.0f;
    Tensor<float> shifted = x;
    for (std::size_t r = 0; r < 4; ++r) {
      const float s = shift(rng);
      for (auto& v : shifted.row(r)) v += s;
    }
    Tape<float> tape;
    auto y = softmax_rows(tape.constant(x));
    auto ys = softmax_rows(tape.constant(shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      float total = 0.0f;
      for (std::size_t c = 0; c < 7; ++c) {
        const float v = y.value()[r * 7 + c];
        EXPECT_GE(v, 0.0f);
        total += v;
        EXPECT_NEAR(v, ys.value()[r * 7 + c], 1e-6);
      }
      EXPECT_NEAR(total, 1.0f, 1e-6);
    }
  }
}

TEST(Softmax, NanInputIsNumericError) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>::matrix({{1.0f, std::nanf("")}}));
  EXPECT_THROW(softmax_rows(x), NumericError);
}

TEST(RmsNorm, UnitRmsIsFixedPoint) {
  Tape<double> tape;
  auto y = rms_norm(tape.constant(Tensor<double>::matrix({{1, 1, 1, 1}})),
                    tape.constant(Tensor<double>::vector({1, 1, 1, 1})), 1e-15);
  for (double v : y.value()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(RmsNorm, ScalesToUnitRms) {
  Tape<double> tape;
  auto y = rms_norm(tape.constant(Tensor<double>::matrix({{2, 2}})), tape.constant(Tensor<double>::vector({1, 1})),
                    1e-15);
  EXPECT_NEAR(y.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-12);
}

TEST(RmsNorm, MatchesScalarOracle) {
  std::mt19937_64 rng(5);
  auto x = random_float({3, 8}, rng);
  auto g = random_float({8}, rng);
  const float eps = 1e-5f;
  Tape<float> tape;
  auto y = rms_norm(tape.constant(x), tape.constant(g), eps);
  for (std::size_t r = 0; r < 3; ++r) {
    double ms = 0.0;
    for (std::size_t i = 0; i < 8; ++i) ms += double(x(r, i)) * x(r, i);
    ms /= 8.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double expect = x(r, i) * double(g[i]) / std::sqrt(ms + eps);
      EXPECT_NEAR(y.value()[r * 8 + i], expect, 1e-6);
    }
  }
}

TEST(RmsNorm, GainLengthMismatchIsDimensionError) {
  Tape<float> tape;
  EXPECT_THROW(rms_norm(tape.constant(Tensor<float>({2, 4})), tape.constant(Tensor<float>({3})), 1e-5f),
               DimensionError);
}

TEST(Backward, SumGivesAllOnes) {
  Tensor<double> x({2, 3}, 0.5);
  Tape<double> tape;
  auto v = tape.leaf(x, true);
  tape.backward(sum(v));
  for (double g : tape.grad(v)) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquaredNormGivesTwiceInput) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({5}, rng);
  Tape<double> tape;
  auto v = tape.leaf(x, true);
  tape.backward(dot(v, v));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(tape.grad(v)[i], 2.0 * x[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor<double> x({2, 2}, 1.0);
  Tape<double> tape;
  auto v = tape.leaf(x, true);
  EXPECT_THROW(tape.backward(scale(v, 2.0)), ContractError);
}

TEST(Backward, FrozenLeavesReceiveNoGradient) {
  Tensor<double> a({1, 2}, 1.0), b({2, 1}, 2.0);
  Tape<double> tape;
  auto va = tape.leaf(a, false);
  auto vb = tape.leaf(b, true);
  tape.backward(sum(matmul(va, vb)));
  EXPECT_EQ(tape.node(va.id).grad.size(), 0u);
  EXPECT_EQ(tape.grad(vb)[0], 1.0);
}

TEST(Backward, RepeatedCallsDoNotAccumulate) {
  Tensor<double> x({3}, 2.0);
  Tape<double> tape;
  auto v = tape.leaf(x, true);
  auto loss = dot(v, v);
  tape.backward(loss);
  tape.backward(loss);
  for (double g : tape.grad(v)) EXPECT_EQ(g, 4.0);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  std::mt19937_64 rng(99);
  auto q = random_float({6, 8}, rng);
  auto run = [&] {
    Tape<float> tape;
    auto x = tape.constant(q);
    auto a = causal_attention(rope(x, 2, 10000.0), x, x, 2);
    return softmax_rows(matmul_nt(a, x)).tensor();
  };
  EXPECT_EQ(run(), run());
}

// Per-primitive gradchecks; the acceptance suite repeats these across seeds.
class PrimitiveGradcheck : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradcheck, AllPrimitivesMatchFiniteDifferences) {
  for (const auto& c : testing::primitive_gradchecks(static_cast<std::uint64_t>(GetParam())))
    EXPECT_LE(c.max_rel_error, 1e-4) << c.name << " worst at " << c.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradcheck, ::testing::Range(0, 5));

}  // namespace
}  // namespace marrow
