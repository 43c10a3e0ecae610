#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "serinv/layers.hpp"

using namespace serinv;
using ad::Tensor;

namespace {

std::vector<double> normal_values(std::size_t n, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Direct nested-loop valid dilated convolution over each sequence's valid frames.
std::vector<double> conv_oracle(const std::vector<double>& x, const std::vector<std::size_t>& lengths,
                                std::size_t cin, std::size_t len, const std::vector<double>& w,
                                const std::vector<double>& bias, std::size_t cout, std::size_t k, std::size_t d) {
  const std::size_t len_out = len - d * (k - 1);
  std::vector<double> out(lengths.size() * cout * len_out, 0.0);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t t = 0; t + d * (k - 1) < lengths[b]; ++t) {
        double s = bias[c];
        for (std::size_t j = 0; j < cin; ++j)
          for (std::size_t q = 0; q < k; ++q) s += w[(c * cin + j) * k + q] * x[(b * cin + j) * len + t + q * d];
        out[(b * cout + c) * len_out + t] = s;
      }
  return out;
}

Sequence one_channel(std::vector<double> v) {
  const std::size_t n = v.size();
  return {Tensor::from({1, 1, n}, std::move(v)), {n}};
}

}  // namespace

TEST(Conv1d, DifferenceKernel) {
  const auto y = conv1d_dilated(one_channel({1, 2, 3, 4, 5}), Tensor::from({1, 1, 3}, {1, 0, -1}),
                                Tensor::zeros({1}), 1);
  EXPECT_EQ(y.values.values(), (std::vector<double>{-2, -2, -2}));
  EXPECT_EQ(y.lengths[0], 3u);
}

TEST(Conv1d, DifferenceKernelDilationTwo) {
  const auto y = conv1d_dilated(one_channel({1, 2, 3, 4, 5}), Tensor::from({1, 1, 3}, {1, 0, -1}),
                                Tensor::zeros({1}), 2);
  EXPECT_EQ(y.values.values(), (std::vector<double>{-4}));
}

TEST(Conv1d, UnitKernelIsIdentity) {
  for (std::size_t d : {1u, 3u}) {
    const auto y = conv1d_dilated(one_channel({1, 2, 3}), Tensor::from({1, 1, 1}, {1}), Tensor(), d);
    EXPECT_EQ(y.values.values(), (std::vector<double>{1, 2, 3}));
  }
}

TEST(Conv1d, MatchesNestedLoopOracle) {
  const std::size_t cin = 3, cout = 4, k = 3, d = 2, len = 12;
  const std::vector<std::size_t> lengths{12, 9, 5};
  auto x = normal_values(lengths.size() * cin * len, 1);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t j = 0; j < cin; ++j)
      for (std::size_t t = lengths[b]; t < len; ++t) x[(b * cin + j) * len + t] = 0.0;
  const auto w = normal_values(cout * cin * k, 2);
  const auto bias = normal_values(cout, 3);
  const auto y = conv1d_dilated({Tensor::from({3, cin, len}, x), lengths}, Tensor::from({cout, cin, k}, w),
                                Tensor::from({cout}, bias), d);
  const auto expect = conv_oracle(x, lengths, cin, len, w, bias, cout, k, d);
  ASSERT_EQ(y.values.numel(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.values.values()[i], expect[i], 1e-10) << i;
  EXPECT_EQ(y.lengths, (std::vector<std::size_t>{8, 5, 1}));
}

TEST(Conv1d, TooShortInputIsNamed) {
  EXPECT_THROW(conv1d_dilated(one_channel({1, 2, 3, 4}), Tensor::from({1, 1, 3}, {1, 0, -1}), Tensor(), 2),
               TooShortError);
}

TEST(BiLstm, ZeroParametersGiveZeroOutput) {
  const std::size_t h = 3, f = 2, len = 4;
  LstmDirection z{Tensor::zeros({4 * h, f}, true), Tensor::zeros({4 * h, h}, true), Tensor::zeros({4 * h}, true)};
  const auto y = bilstm({Tensor::from({1, f, len}, normal_values(f * len, 4)), {len}}, z, z, h);
  for (double v : y.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(BiLstm, ReversalSymmetry) {
  const std::size_t h = 3, f = 2, len = 5;
  Rng rng(7);
  const BiLstmLayer a = BiLstmLayer::make(f, h, rng);
  const BiLstmLayer b = BiLstmLayer::make(f, h, rng);
  const auto x = normal_values(f * len, 8);
  std::vector<double> xr(x.size());
  for (std::size_t c = 0; c < f; ++c)
    for (std::size_t t = 0; t < len; ++t) xr[c * len + t] = x[c * len + (len - 1 - t)];
  const auto y1 = bilstm({Tensor::from({1, f, len}, x), {len}}, a.forward, b.forward, h);
  const auto y2 = bilstm({Tensor::from({1, f, len}, xr), {len}}, b.forward, a.forward, h);
  for (std::size_t c = 0; c < h; ++c)
    for (std::size_t t = 0; t < len; ++t) {
      EXPECT_NEAR(y1.values.values()[(h + c) * len + t], y2.values.values()[c * len + (len - 1 - t)], 1e-14);
    }
}

TEST(BiLstm, BackwardDirectionStartsAtLastValidFrame) {
  const std::size_t h = 2, f = 2, len = 6;
  Rng rng(9);
  const BiLstmLayer l = BiLstmLayer::make(f, h, rng);
  auto x = normal_values(f * len, 10);
  const auto short_seq = bilstm({Tensor::from({1, f, len}, x), {4}}, l.forward, l.backward, h);
  std::vector<double> trimmed;
  for (std::size_t c = 0; c < f; ++c)
    for (std::size_t t = 0; t < 4; ++t) trimmed.push_back(x[c * len + t]);
  const auto exact = bilstm({Tensor::from({1, f, 4}, trimmed), {4}}, l.forward, l.backward, h);
  for (std::size_t c = 0; c < 2 * h; ++c)
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_NEAR(short_seq.values.values()[c * len + t], exact.values.values()[c * 4 + t], 1e-14);
    }
}

TEST(StatsPool, HandComputedPopulationVariance) {
  const auto y = stats_pool(Sequence{Tensor::from({1, 2, 3}, {1, 2, 3, 4, 4, 4}), {3}});
  ASSERT_EQ(y.shape(), (ad::Shape{1, 4}));
  EXPECT_NEAR(y.values()[0], 2.0, 1e-15);
  EXPECT_NEAR(y.values()[1], 4.0, 1e-15);
  EXPECT_NEAR(y.values()[2], std::sqrt(2.0 / 3.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y.values()[3], std::sqrt(1e-5), 1e-15);
}

TEST(StatsPool, IgnoresPaddingAndFrameOrder) {
  const auto a = stats_pool(Sequence{Tensor::from({1, 1, 5}, {5, 1, 3, 99, -7}), {3}});
  const auto b = stats_pool(Sequence{Tensor::from({1, 1, 3}, {3, 5, 1}), {3}});
  EXPECT_NEAR(a.values()[0], b.values()[0], 1e-15);
  EXPECT_NEAR(a.values()[1], b.values()[1], 1e-15);
}

TEST(BatchNorm, TrainingStandardizesValidElements) {
  const std::size_t ch = 2, len = 10;
  auto x = normal_values(2 * ch * len, 11, 10.0);
  const std::vector<std::size_t> lengths{10, 7};
  BatchNorm1d bn = BatchNorm1d::make(ch);
  const auto y = batchnorm(Sequence{Tensor::from({2, ch, len}, x), lengths}, bn, true);
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0, ss = 0, n = 0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < lengths[b]; ++t) {
        const double v = y.values.values()[(b * ch + c) * len + t];
        s += v, ss += v * v, n += 1;
      }
    EXPECT_NEAR(s / n, 0.0, 1e-12);
    EXPECT_NEAR(ss / n, 1.0, 1e-6);
  }
}

TEST(BatchNorm, AffineParameters) {
  BatchNorm1d bn = BatchNorm1d::make(1);
  bn.gamma.data()[0] = 2.0;
  bn.beta.data()[0] = 3.0;
  const auto y = batchnorm(Tensor::from({4, 1}, {-30, -10, 10, 30}), bn, true);
  double s = 0, ss = 0;
  for (double v : y.values()) s += v;
  for (double v : y.values()) ss += (v - s / 4) * (v - s / 4);
  EXPECT_NEAR(s / 4, 3.0, 1e-12);
  EXPECT_NEAR(std::sqrt(ss / 4), 2.0, 1e-6);
}

TEST(BatchNorm, EvalWithIdentityStatistics) {
  BatchNorm1d bn = BatchNorm1d::make(2);
  const std::vector<double> x{1.0, -2.0, 0.5, 4.0};
  const auto y = batchnorm(Tensor::from({2, 2}, x), bn, false);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.values()[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, RunningStatsOnlyMoveWhenAsked) {
  BatchNorm1d bn = BatchNorm1d::make(1);
  batchnorm(Tensor::from({2, 1}, {4.0, 6.0}), bn, true, false);
  EXPECT_EQ(bn.running_mean.values()[0], 0.0);
  batchnorm(Tensor::from({2, 1}, {4.0, 6.0}), bn, true, true);
  EXPECT_NEAR(bn.running_mean.values()[0], 0.5, 1e-15);
}

TEST(Dropout, KeepOneIsIdentity) {
  Rng rng(1);
  const Tensor x = Tensor::from({3}, {1, 2, 3});
  EXPECT_EQ(dropout(x, 1.0, true, rng).values(), x.values());
  EXPECT_EQ(dropout(x, 1.0, false, rng).values(), x.values());
}

TEST(Dropout, EvalIsIdentity) {
  Rng rng(1);
  const Tensor x = Tensor::from({3}, {1, 2, 3});
  EXPECT_EQ(dropout(x, 0.5, false, rng).values(), x.values());
}

TEST(Dropout, InvertedScalingPreservesMean) {
  Rng rng(2024);
  const Tensor x = Tensor::from({100000}, std::vector<double>(100000, 1.0));
  const auto y = dropout(x, 0.5, true, rng);
  double s = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    s += v;
  }
  EXPECT_GE(s / 1e5, 0.98);
  EXPECT_LE(s / 1e5, 1.02);
}

TEST(Dropout, RejectsInvalidProbability) {
  Rng rng(1);
  EXPECT_THROW(dropout(Tensor::zeros({2}), 0.0, true, rng), ContractError);
  EXPECT_THROW(dropout(Tensor::zeros({2}), 1.5, true, rng), ContractError);
}
