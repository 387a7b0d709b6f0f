// Copyright 2026 The Dynaquery Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dynaquery/error.h"
#include "dynaquery/grad_check.h"
#include "dynaquery/ops.h"
#include "oracles.h"

namespace dynaquery {
namespace {

using oracle::MaxAbsDiff;
using oracle::RandomTensor;

constexpr double kExact = 1e-12;
constexpr double kGradTol = 1e-4;

TEST(Conv2dTest, OneByOneKernelIsScalarMultiply) {
  Tensor x({1, 1, 3, 3}, 1.0);
  Tensor k({1, 1, 1, 1}, 2.0);
  Tensor y = Conv2d(x, k, {});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2dTest, SevenBySevenPaddedKeepsSpatialShape) {
  std::mt19937_64 rng(1);
  Tensor x = RandomTensor(rng, {1, 2, 9, 6});
  Tensor k = RandomTensor(rng, {1, 2, 7, 7});
  Tensor y = Conv2d(x, k, {.stride = 1, .padding = 3, .dilation = 1});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 9, 6}));
}

TEST(Conv2dTest, DilatedKernelMatchesDirectSum) {
  std::vector<double> v(25);
  for (int i = 0; i < 25; ++i) v[i] = i + 1;
  Tensor x({1, 1, 5, 5}, v);
  Tensor k({1, 1, 3, 3}, 1.0);
  Tensor y = Conv2d(x, k, {.stride = 1, .padding = 0, .dilation = 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_NEAR(y.item(), oracle::Conv2d(x, k, 1, 0, 2).item(), kExact);
  // Taps at rows/cols {0, 2, 4}: 1+3+5+11+13+15+21+23+25.
  EXPECT_EQ(y.item(), 117.0);
}

TEST(Conv2dTest, RandomShapesMatchLoopOracle) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(1, 3), spatial(3, 9);
  for (int trial = 0; trial < 120; ++trial) {
    const int b = small(rng), ci = small(rng), co = small(rng);
    const int kh = small(rng), kw = small(rng);
    const int stride = small(rng), pad = small(rng) - 1, dil = small(rng);
    const int h = spatial(rng) + dil * (kh - 1),
              w = spatial(rng) + dil * (kw - 1);
    Tensor x = RandomTensor(rng, {b, ci, h, w});
    Tensor k = RandomTensor(rng, {co, ci, kh, kw});
    Tensor y =
        Conv2d(x, k, {.stride = stride, .padding = pad, .dilation = dil});
    EXPECT_LE(MaxAbsDiff(y, oracle::Conv2d(x, k, stride, pad, dil)), kExact)
        << "trial " << trial;
  }
}

TEST(Conv2dTest, OutputShapeFormulaOverGrid) {
  std::mt19937_64 rng(3);
  for (int stride = 1; stride <= 3; ++stride) {
    for (int pad = 0; pad <= 3; ++pad) {
      for (int dil = 1; dil <= 3; ++dil) {
        const int h = 11, w = 8, kh = 3, kw = 2;
        Tensor x = RandomTensor(rng, {1, 1, h, w});
        Tensor k = RandomTensor(rng, {1, 1, kh, kw});
        Tensor y = Conv2d(x, k, {stride, pad, dil});
        EXPECT_EQ(y.dim(2), (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1);
        EXPECT_EQ(y.dim(3), (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1);
      }
    }
  }
}

TEST(Conv2dTest, ChannelMismatchIsDimensionError) {
  Tensor x({1, 2, 4, 4}, 1.0);
  Tensor k({1, 3, 3, 3}, 1.0);
  try {
    Conv2d(x, k, {});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
}

TEST(PoolTest, ChannelExamples) {
  Tensor x({1, 2, 1, 1}, {1.0, 3.0});
  EXPECT_EQ(PoolChannel(x, PoolMode::kAvg).item(), 2.0);
  EXPECT_EQ(PoolChannel(x, PoolMode::kMax).item(), 3.0);
  std::mt19937_64 rng(5);
  Tensor single = RandomTensor(rng, {2, 1, 3, 3});
  EXPECT_EQ(MaxAbsDiff(PoolChannel(single, PoolMode::kAvg), single), 0.0);
  EXPECT_EQ(MaxAbsDiff(PoolChannel(single, PoolMode::kMax), single), 0.0);
}

TEST(PoolTest, SpatialExamples) {
  Tensor x({1, 1, 2, 2}, {0.0, 0.0, 0.0, 4.0});
  EXPECT_EQ(PoolSpatial(x, PoolMode::kAvg).item(), 1.0);
  EXPECT_EQ(PoolSpatial(x, PoolMode::kMax).item(), 4.0);
  std::mt19937_64 rng(6);
  Tensor point = RandomTensor(rng, {2, 3, 1, 1});
  EXPECT_EQ(MaxAbsDiff(PoolSpatial(point, PoolMode::kAvg), point), 0.0);
}

TEST(PoolTest, RandomShapesMatchLoopOracle) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> dim(1, 5);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = RandomTensor(rng, {dim(rng), dim(rng), dim(rng), dim(rng)});
    for (bool max : {false, true}) {
      const PoolMode mode = max ? PoolMode::kMax : PoolMode::kAvg;
      EXPECT_LE(MaxAbsDiff(PoolChannel(x, mode), oracle::PoolChannel(x, max)),
                kExact);
      EXPECT_LE(MaxAbsDiff(PoolSpatial(x, mode), oracle::PoolSpatial(x, max)),
                kExact);
    }
  }
}

TEST(LinearTest, Examples) {
  Tensor x({1, 2}, {3.0, 4.0});
  EXPECT_EQ(Linear(x, Tensor({1, 2}, {1.0, 1.0}), Tensor({1}, 0.0)).item(),
            7.0);
  Tensor eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
  EXPECT_EQ(MaxAbsDiff(Linear(x, eye, Tensor({2}, 0.0)), x), 0.0);
}

TEST(LinearTest, RandomShapesMatchLoopOracle) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> dim(1, 7);
  for (int trial = 0; trial < 100; ++trial) {
    const int lead = dim(rng), mid = dim(rng), din = dim(rng), dout = dim(rng);
    Tensor x = RandomTensor(rng, {lead, mid, din});
    Tensor w = RandomTensor(rng, {dout, din});
    Tensor b = RandomTensor(rng, {dout});
    EXPECT_LE(MaxAbsDiff(Linear(x, w, b), oracle::Linear(x, w, b)), kExact);
  }
}

TEST(LinearTest, TrailingDimMismatchIsDimensionError) {
  EXPECT_THROW(Linear(Tensor({2, 3}), Tensor({4, 2}), Tensor({4})), Error);
}

TEST(MatMulTest, RandomShapesMatchLoopOracle) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> dim(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = dim(rng), k = dim(rng), m = dim(rng);
    Tensor a = RandomTensor(rng, {n, k});
    Tensor b = RandomTensor(rng, {k, m});
    EXPECT_LE(MaxAbsDiff(MatMul(a, b), oracle::MatMul(a, b)), kExact);
  }
}

TEST(AttentionTest, SingleKeyReturnsItsValue) {
  std::mt19937_64 rng(11);
  Tensor q = RandomTensor(rng, {3, 4}, -5, 5);
  Tensor k = RandomTensor(rng, {1, 4});
  Tensor v = RandomTensor(rng, {1, 4});
  Tensor y = Attention(q, k, v, 2);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.at({i, j}), v.at({0, j}), kExact);
}

TEST(AttentionTest, IdenticalKeysAverageValues) {
  std::mt19937_64 rng(12);
  Tensor q = RandomTensor(rng, {2, 4});
  Tensor key_row = RandomTensor(rng, {1, 4});
  std::vector<Tensor> rows(5, key_row);
  Tensor k = Concat(rows, 0);
  Tensor v = RandomTensor(rng, {5, 4});
  Tensor y = Attention(q, k, v, 1);
  for (int j = 0; j < 4; ++j) {
    double mean = 0;
    for (int r = 0; r < 5; ++r) mean += v.at({r, j}) / 5.0;
    EXPECT_NEAR(y.at({0, j}), mean, kExact);
    EXPECT_NEAR(y.at({1, j}), mean, kExact);
  }
}

TEST(AttentionTest, RandomShapesMatchLoopOracle) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> dim(1, 6), heads_pick(1, 3);
  Tensor q = RandomTensor(rng, {2, 4});
  Tensor k = RandomTensor(rng, {3, 4});
  Tensor v = RandomTensor(rng, {3, 4});
  EXPECT_LE(MaxAbsDiff(Attention(q, k, v, 2), oracle::Attention(q, k, v, 2)),
            kExact);
  for (int trial = 0; trial < 100; ++trial) {
    const int heads = heads_pick(rng), d = heads * dim(rng);
    const int n = dim(rng), m = dim(rng);
    Tensor qq = RandomTensor(rng, {n, d}, -2, 2);
    Tensor kk = RandomTensor(rng, {m, d}, -2, 2);
    Tensor vv = RandomTensor(rng, {m, d});
    EXPECT_LE(MaxAbsDiff(Attention(qq, kk, vv, heads),
                         oracle::Attention(qq, kk, vv, heads)),
              kExact);
  }
}

TEST(AttentionTest, HeadsMustDivideWidth) {
  Tensor q({2, 6}), k({3, 6}), v({3, 6});
  EXPECT_THROW(Attention(q, k, v, 4), Error);
}

TEST(SoftmaxTest, RowsSumToOneAndSigmoidInOpenInterval) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = RandomTensor(rng, {4, 7}, -30, 30);
    Tensor p = Softmax(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += p.at({r, c});
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const Tensor sig = Sigmoid(x);
    for (double v : sig.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ResizeBilinearTest, HalvingAveragesTwoByTwoBlocks) {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i;
  Tensor y = ResizeBilinear(Tensor({1, 4, 4}, v), 2, 2);
  // Half-pixel centres land between source pixels 0/1 and 2/3.
  EXPECT_NEAR(y.at({0, 0, 0}), (0 + 1 + 4 + 5) / 4.0, kExact);
  EXPECT_NEAR(y.at({0, 0, 1}), (2 + 3 + 6 + 7) / 4.0, kExact);
  EXPECT_NEAR(y.at({0, 1, 0}), (8 + 9 + 12 + 13) / 4.0, kExact);
  EXPECT_NEAR(y.at({0, 1, 1}), (10 + 11 + 14 + 15) / 4.0, kExact);
}

TEST(BroadcastTest, MulBroadcastsOverChannelsAndSpace) {
  std::mt19937_64 rng(15);
  Tensor s = RandomTensor(rng, {3, 2, 2});
  Tensor gate = RandomTensor(rng, {1, 2, 2});
  Tensor y = Mul(gate, s);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        EXPECT_EQ(y.at({c, i, j}), gate.at({0, i, j}) * s.at({c, i, j}));
  EXPECT_THROW(Mul(Tensor({2, 3}), Tensor({3, 2})), Error);
}

TEST(GradCheckTest, LinearIsExactUnderCentralDifferences) {
  std::mt19937_64 rng(16);
  auto report = GradCheck(
      "linear",
      [](std::span<const Tensor> in) { return Linear(in[0], in[1], in[2]); },
      {RandomTensor(rng, {3, 4}), RandomTensor(rng, {2, 4}),
       RandomTensor(rng, {2})},
      1e-5);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(GradCheckTest, SigmoidAtZero) {
  Tensor x = Tensor::Scalar(0.0);
  x.set_requires_grad(true);
  Tensor y = Sigmoid(x);
  y.Backward();
  EXPECT_EQ(x.grad()[0], 0.25);
  auto report = GradCheck(
      "sigmoid", [](std::span<const Tensor> in) { return Sigmoid(in[0]); },
      {Tensor::Scalar(0.0)});
  EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(GradCheckTest, NonFiniteForwardAborts) {
  try {
    GradCheck("log", [](std::span<const Tensor> in) { return Log(in[0]); },
              {Tensor::Scalar(-1.0)});
    FAIL() << "expected abort";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  EXPECT_THROW(GradCheck(
                   "x", [](std::span<const Tensor> in) { return in[0]; },
                   {Tensor::Scalar(1.0)}, 0.1),
               Error);
}

struct OpCase {
  const char* name;
  DifferentiableFn fn;
  std::vector<Shape> shapes;
  double lo = -1.0, hi = 1.0;
};

class OpGradTest : public ::testing::TestWithParam<int> {};

std::vector<OpCase> AllOps() {
  using S = std::span<const Tensor>;
  return {
      {"add_broadcast",
       [](S in) { return Add(in[0], in[1]); },
       {{2, 3, 4}, {1, 3, 1}}},
      {"sub", [](S in) { return Sub(in[0], in[1]); }, {{3, 4}, {3, 4}}},
      {"mul_broadcast",
       [](S in) { return Mul(in[0], in[1]); },
       {{1, 3, 3}, {4, 3, 3}}},
      {"div",
       [](S in) { return Div(in[0], AddScalar(Abs(in[1]), 1.0)); },
       {{3, 3}, {3, 3}}},
      {"minimum", [](S in) { return Minimum(in[0], in[1]); }, {{4, 4}, {4, 4}}},
      {"maximum", [](S in) { return Maximum(in[0], in[1]); }, {{4, 4}, {4, 4}}},
      {"relu", [](S in) { return Relu(in[0]); }, {{5, 5}}},
      {"sigmoid", [](S in) { return Sigmoid(in[0]); }, {{5, 5}}, -4, 4},
      {"exp", [](S in) { return Exp(in[0]); }, {{5}}},
      {"log", [](S in) { return Log(in[0]); }, {{5}}, 0.5, 2.0},
      {"softplus", [](S in) { return Softplus(in[0]); }, {{6}}, -5, 5},
      {"pow", [](S in) { return PowScalar(in[0], 2.0); }, {{6}}, 0.2, 1.0},
      {"inverse_sigmoid",
       [](S in) { return InverseSigmoid(in[0]); },
       {{6}},
       0.1,
       0.9},
      {"transpose", [](S in) { return Transpose(in[0]); }, {{3, 5}}},
      {"reshape", [](S in) { return Reshape(in[0], {5, 3}); }, {{3, 5}}},
      {"concat", [](S in) { return Concat(in, 1); }, {{2, 3}, {2, 2}}},
      {"slice", [](S in) { return Slice(in[0], 1, 1, 2); }, {{3, 4, 2}}},
      {"gather_rows",
       [](S in) {
         std::vector<int> idx = {2, 0, 2};
         return GatherRows(in[0], idx);
       },
       {{3, 4}}},
      {"gather_columns",
       [](S in) {
         std::vector<int> idx = {4, 1};
         return GatherColumnsAsRows(in[0], idx);
       },
       {{3, 5}}},
      {"sum", [](S in) { return Sum(in[0]); }, {{3, 3}}},
      {"mean", [](S in) { return Mean(in[0]); }, {{3, 3}}},
      {"matmul", [](S in) { return MatMul(in[0], in[1]); }, {{3, 4}, {4, 2}}},
      {"linear",
       [](S in) { return Linear(in[0], in[1], in[2]); },
       {{2, 3, 4}, {5, 4}, {5}}},
      {"conv2d",
       [](S in) {
         return Conv2d(in[0], in[1], in[2],
                       {.stride = 2, .padding = 1, .dilation = 1});
       },
       {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}},
      {"conv2d_dilated",
       [](S in) {
         return Conv2d(in[0], in[1],
                       {.stride = 1, .padding = 2, .dilation = 2});
       },
       {{1, 2, 5, 4}, {2, 2, 3, 3}}},
      {"pool_channel_avg",
       [](S in) { return PoolChannel(in[0], PoolMode::kAvg); },
       {{2, 3, 3, 3}}},
      {"pool_channel_max",
       [](S in) { return PoolChannel(in[0], PoolMode::kMax); },
       {{2, 3, 3, 3}}},
      {"pool_spatial_avg",
       [](S in) { return PoolSpatial(in[0], PoolMode::kAvg); },
       {{2, 3, 3, 3}}},
      {"pool_spatial_max",
       [](S in) { return PoolSpatial(in[0], PoolMode::kMax); },
       {{2, 3, 3, 3}}},
      {"resize_bilinear",
       [](S in) { return ResizeBilinear(in[0], 3, 2); },
       {{2, 5, 4}}},
      {"softmax", [](S in) { return Softmax(in[0]); }, {{3, 5}}, -3, 3},
      {"log_softmax", [](S in) { return LogSoftmax(in[0]); }, {{3, 5}}, -3, 3},
      {"layer_norm",
       [](S in) { return LayerNorm(in[0], in[1], in[2]); },
       {{3, 6}, {6}, {6}}},
      {"attention",
       [](S in) { return Attention(in[0], in[1], in[2], 2); },
       {{3, 4}, {5, 4}, {5, 4}},
       -2,
       2},
  };
}

TEST_P(OpGradTest, CentralDifferencesAgree) {
  const OpCase op = AllOps()[GetParam()];
  std::mt19937_64 rng(100 + GetParam());
  std::vector<Tensor> inputs;
  for (const Shape& s : op.shapes) {
    inputs.push_back(RandomTensor(rng, s, op.lo, op.hi));
  }
  const GradCheckReport report = GradCheck(op.name, op.fn, inputs, 1e-5);
  EXPECT_LT(report.max_rel_error, kGradTol)
      << op.name << " worst input " << report.worst_input << "["
      << report.worst_index << "] analytic " << report.analytic << " numeric "
      << report.numeric;
}

INSTANTIATE_TEST_SUITE_P(AllRegisteredOps, OpGradTest,
                         ::testing::Range(0, static_cast<int>(AllOps().size())),
                         [](const auto& info) {
                           return std::string(AllOps()[info.param].name);
                         });

TEST(BackwardTest, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::Scalar(3.0);
  x.set_requires_grad(true);
  Tensor y = Mul(x, x);
  Tensor z = Add(y, y);
  z.Backward();
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(BackwardTest, NoGradGuardSkipsGraph) {
  Tensor x = Tensor::Scalar(3.0);
  x.set_requires_grad(true);
  NoGradGuard guard;
  EXPECT_FALSE(Mul(x, x).requires_grad());
}

}  // namespace
}  // namespace dynaquery
