// Copyright 2026 The EchoPT Workbench Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "echopt/grad_check.hpp"
#include "echopt/tensor.hpp"

namespace echopt::ad {
namespace {

using T = Tensor<double>;

Vec<double> random_vec(Eigen::Index n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Vec<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

T rand_param(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = numel(s);
  return T::parameter(std::move(s), random_vec(n, seed, lo, hi));
}

T rand_const(Shape s, std::uint64_t seed) {
  const auto n = numel(s);
  return T::constant(std::move(s), random_vec(n, seed));
}

// Moves every entry at least `gap` away from zero so relu kinks stay out of reach
// of the finite-difference step.
T nudged(Shape s, std::uint64_t seed, double gap = 0.05) {
  Vec<double> v = random_vec(numel(s), seed);
  for (auto& x : v) x = x >= 0 ? x + gap : x - gap;
  return T::parameter(std::move(s), std::move(v));
}

// Contracts an output with fixed random weights so that every output entry
// contributes a distinct amount to the scalar.
T project(const T& y, std::uint64_t seed = 99) {
  return sum(mul(y, rand_const(y.shape(), seed)));
}

constexpr double kTol = 1e-6;

TEST(TensorOps, MatmulIdentity) {
  RowMat<double> eye = RowMat<double>::Identity(4, 4);
  const T i = T::constant({4, 4}, Eigen::Map<Vec<double>>(eye.data(), 16));
  const T x = rand_const({4, 3}, 1);
  EXPECT_EQ(matmul(i, x).value(), x.value());
}

TEST(TensorOps, SoftmaxRowsSumToOne) {
  const T x = T::constant({5, 7}, random_vec(35, 2, -30.0, 30.0));
  const auto y = softmax(x).mat(5, 7);
  for (int r = 0; r < 5; ++r) EXPECT_NEAR(y.row(r).sum(), 1.0, 1e-12);
}

TEST(TensorOps, SquareGradientAtThree) {
  T x = T::parameter({1}, Vec<double>::Constant(1, 3.0));
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(TensorOps, SumGradientIsOnes) {
  T w = rand_param({3, 4}, 3);
  backward(sum(w));
  EXPECT_EQ(w.grad(), Vec<double>::Ones(12));
}

TEST(TensorOps, DetachedParameterGetsZeroGradient) {
  T w = rand_param({6}, 4);
  T v = rand_param({6}, 5);
  w.zero_grad();
  backward(sum(mul(w.detach(), v)));
  EXPECT_EQ(w.grad(), Vec<double>::Zero(6));
  EXPECT_EQ(v.grad(), w.value());
}

TEST(TensorOps, SharedSubexpressionsAccumulate) {
  T x = rand_param({5}, 6);
  backward(sum(add(x, x)));
  EXPECT_EQ(x.grad(), Vec<double>::Constant(5, 2.0));
}

TEST(TensorOps, BackwardTwiceAccumulates) {
  T x = rand_param({4}, 7);
  const T loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_TRUE(x.grad().isApprox(4.0 * x.value()));
}

TEST(TensorOps, NonScalarLossRejected) {
  T x = rand_param({4}, 8);
  EXPECT_THROW(backward(x), ShapeError);
}

TEST(TensorOps, ShapeMismatchNamesShapes) {
  const T a = rand_const({2, 3}, 9);
  const T b = rand_const({3, 2}, 10);
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(TensorOps, ConcatAndSliceRoundTrip) {
  const T a = rand_const({2, 3, 4}, 11);
  const T b = rand_const({2, 2, 4}, 12);
  const T c = concat<double>({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 5, 4}));
  EXPECT_EQ(slice(c, 1, 0, 3).value(), a.value());
  EXPECT_EQ(slice(c, 1, 3, 2).value(), b.value());
}

TEST(TensorOps, PatchifyInverse) {
  const T x = rand_const({2, 3, 8, 6}, 13);
  const T p = patchify(x, 4, 3);
  ASSERT_EQ(p.shape(), (Shape{2 * 2 * 2, 3 * 4 * 3}));
  const T back = unpatchify(matmul(p, T::constant({36, 36}, Eigen::Map<const Vec<double>>(
                                                                  RowMat<double>::Identity(36, 36).eval().data(), 1296))),
                            2, 3, 8, 6, 4, 3);
  EXPECT_EQ(back.value(), x.value());
}

TEST(TensorOps, ConvTransposeIsAdjointOfConv) {
  for (int stride : {1, 2}) {
    const T w = rand_const({3, 2, 5, 3}, 14);  // conv: 2 -> 3 channels; transpose: 3 -> 2
    const T x = rand_const({1, 2, 8, 6}, 15);
    const T y = conv2d(x, w, T(), {stride});
    const T z = rand_const(y.shape(), 16);
    const T xt = conv_transpose2d(z, w, T(), stride);
    ASSERT_EQ(xt.shape(), x.shape());
    EXPECT_NEAR(y.value().dot(z.value()), x.value().dot(xt.value()), 1e-10);
  }
}

TEST(TensorOps, ConvMatchesDirectSum) {
  const T x = rand_const({1, 2, 5, 4}, 17);
  const T w = rand_const({1, 2, 3, 3}, 18);
  const T b = T::constant({1}, Vec<double>::Constant(1, 0.25));
  const T y = conv2d(x, w, b);
  const auto X = x.value();
  const auto W = w.value();
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) {
      double acc = 0.25;
      for (int c = 0; c < 2; ++c) {
        for (int a = 0; a < 3; ++a) {
          for (int d = 0; d < 3; ++d) {
            const int ii = i + a - 1, jj = j + d - 1;
            if (ii < 0 || ii >= 5 || jj < 0 || jj >= 4) continue;
            acc += X[(c * 5 + ii) * 4 + jj] * W[(c * 3 + a) * 3 + d];
          }
        }
      }
      EXPECT_NEAR(y.value()[i * 4 + j], acc, 1e-12);
    }
  }
}

TEST(TensorOps, ResizeBilinearIdentityAtSameSize) {
  const T x = rand_const({1, 2, 4, 5}, 19);
  EXPECT_TRUE(resize_bilinear(x, 4, 5).value().isApprox(x.value(), 1e-14));
}

TEST(TensorOps, BatchNormInferenceUsesRunningStats) {
  BatchNormStats<double> stats(3);
  stats.running_mean << 1.0, 2.0, 3.0;
  stats.running_var << 4.0, 1.0, 0.25;
  const T x = T::constant({1, 3}, (Vec<double>(3) << 3.0, 2.0, 2.0).finished());
  const T g = T::constant({3}, Vec<double>::Ones(3));
  const T b = T::constant({3}, Vec<double>::Zero(3));
  const Vec<double> y = batch_norm(x, g, b, stats, false).value();
  EXPECT_NEAR(y[0], 2.0 / std::sqrt(4.0 + 1e-5), 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], -1.0 / std::sqrt(0.25 + 1e-5), 1e-12);
}

TEST(TensorOps, BatchNormTrainingUpdatesRunningStats) {
  BatchNormStats<double> stats(2);
  const T x = T::constant({4, 2}, (Vec<double>(8) << 1, 0, 2, 0, 3, 0, 4, 0).finished());
  const T g = T::constant({2}, Vec<double>::Ones(2));
  const T b = T::constant({2}, Vec<double>::Zero(2));
  batch_norm(x, g, b, stats, true);
  EXPECT_NEAR(stats.running_mean[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
  EXPECT_NEAR(stats.running_var[1], 0.9, 1e-12);
}

TEST(TensorOps, ForwardIsDeterministic) {
  const T x = rand_const({2, 3, 8, 8}, 20);
  const T w = rand_const({4, 3, 3, 3}, 21);
  const T a = softmax(reshape(conv2d(x, w, T()), {8, 64}));
  const T b = softmax(reshape(conv2d(x, w, T()), {8, 64}));
  EXPECT_EQ(a.value(), b.value());
}

// ---------------------------------------------------------------- gradient checks

TEST(GradCheck, LinearFunctionIsExact) {
  const T c = rand_const({10}, 30);
  // Central differences are exact for linear maps at any step; a wide step keeps
  // round-off out of the comparison.
  const auto r = grad_check([&](const T& x) { return sum(mul(x, c)); }, rand_param({10}, 31), 1e-2);
  EXPECT_LT(r.max_relative_error, 1e-10);
  EXPECT_EQ(r.coordinates_checked, 10);
}

TEST(GradCheck, ChecksAtLeastFiftyCoordinates) {
  const auto r = grad_check([](const T& x) { return sum(mul(x, x)); }, rand_param({200}, 32));
  EXPECT_GE(r.coordinates_checked, 50);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, Elementwise) {
  const T other = rand_const({3, 4}, 40);
  EXPECT_LT(grad_check([&](const T& x) { return project(add(x, other)); }, rand_param({3, 4}, 41)).max_relative_error, kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(sub(other, x)); }, rand_param({3, 4}, 42)).max_relative_error, kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(mul(x, other)); }, rand_param({3, 4}, 43)).max_relative_error, kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(mul(x, x)); }, rand_param({3, 4}, 44)).max_relative_error, kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(scale(x, 2.5)); }, rand_param({3, 4}, 45)).max_relative_error, kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(relu(x)); }, nudged({3, 4}, 46)).max_relative_error, kTol);
  EXPECT_LT(grad_check([&](const T& x) { return sum(mul(x, x)); }, rand_param({3, 4}, 47)).max_relative_error, kTol);
}

TEST(GradCheck, MeanSquaredError) {
  const T target = rand_const({2, 1, 4, 4}, 50);
  EXPECT_LT(grad_check([&](const T& x) { return mean_sq_error(x, target); }, rand_param({2, 1, 4, 4}, 51))
                .max_relative_error,
            kTol);
}

TEST(GradCheck, ShapeOps) {
  const T other = rand_const({2, 2, 3}, 60);
  EXPECT_LT(grad_check([&](const T& x) { return project(reshape(x, {6, 4})); }, rand_param({2, 3, 4}, 61))
                .max_relative_error,
            kTol);
  for (int axis : {0, 1, 2}) {
    Shape s = {2, 2, 3};
    s[static_cast<std::size_t>(axis)] = 3;
    const T y = rand_const(s, 62);
    EXPECT_LT(grad_check([&](const T& x) { return project(concat<double>({x, y, x}, axis)); }, rand_param({2, 2, 3}, 63))
                  .max_relative_error,
              kTol)
        << "axis " << axis;
    EXPECT_LT(grad_check([&](const T& x) { return project(slice(x, axis, 1, 1)); }, rand_param({2, 2, 3}, 64))
                  .max_relative_error,
              kTol)
        << "axis " << axis;
  }
  EXPECT_LT(grad_check([&](const T& x) { return project(transpose(x)); }, rand_param({3, 5}, 65)).max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(repeat_rows(x, 3)); }, rand_param({2, 4}, 66))
                .max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(patchify(x, 2, 3)); }, rand_param({2, 2, 4, 6}, 67))
                .max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(unpatchify(x, 2, 2, 4, 6, 2, 3)); },
                       rand_param({8, 12}, 68))
                .max_relative_error,
            kTol);
  (void)other;
}

TEST(GradCheck, LinearAlgebra) {
  const T b = rand_const({4, 5}, 70);
  const T a = rand_const({3, 4}, 71);
  EXPECT_LT(grad_check([&](const T& x) { return project(matmul(x, b)); }, rand_param({3, 4}, 72)).max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(matmul(a, x)); }, rand_param({4, 5}, 73)).max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(matmul(x, transpose(x))); }, rand_param({3, 4}, 74))
                .max_relative_error,
            kTol);
  const T m = rand_const({3, 5}, 75);
  EXPECT_LT(grad_check([&](const T& x) { return project(add_bias(m, x)); }, rand_param({5}, 76)).max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(add_bias(x, T::constant({5}, random_vec(5, 77)))); },
                       rand_param({3, 5}, 78))
                .max_relative_error,
            kTol);
}

TEST(GradCheck, Softmax) {
  EXPECT_LT(grad_check([&](const T& x) { return project(softmax(x)); }, rand_param({4, 6}, 80, -2.0, 2.0))
                .max_relative_error,
            kTol);
}

TEST(GradCheck, LayerNorm) {
  const T g = T::constant({6}, random_vec(6, 81, 0.5, 1.5));
  const T b = rand_const({6}, 82);
  const T x0 = rand_const({4, 6}, 83);
  EXPECT_LT(grad_check([&](const T& x) { return project(layer_norm(x, g, b)); }, rand_param({4, 6}, 84))
                .max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(layer_norm(x0, x, b)); }, rand_param({6}, 85))
                .max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(layer_norm(x0, g, x)); }, rand_param({6}, 86))
                .max_relative_error,
            kTol);
}

TEST(GradCheck, LayerNormChw) {
  const T g = T::constant({3}, random_vec(3, 87, 0.5, 1.5));
  const T b = rand_const({3}, 88);
  const T x0 = rand_const({2, 3, 4, 5}, 89);
  EXPECT_LT(grad_check([&](const T& x) { return project(layer_norm_chw(x, g, b)); }, rand_param({2, 3, 4, 5}, 90))
                .max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(layer_norm_chw(x0, x, b)); }, rand_param({3}, 91))
                .max_relative_error,
            kTol);
  EXPECT_LT(grad_check([&](const T& x) { return project(layer_norm_chw(x0, g, x)); }, rand_param({3}, 92))
                .max_relative_error,
            kTol);
}

TEST(GradCheck, BatchNormBothModes) {
  const T g = T::constant({4}, random_vec(4, 93, 0.5, 1.5));
  const T b = rand_const({4}, 94);
  const T x0 = rand_const({6, 4}, 95);
  for (bool training : {true, false}) {
    auto run = [&](const T& x, const T& gamma, const T& beta) {
      BatchNormStats<double> stats(4);
      stats.running_mean = random_vec(4, 96);
      stats.running_var = random_vec(4, 97, 0.5, 2.0);
      return project(batch_norm(x, gamma, beta, stats, training));
    };
    EXPECT_LT(grad_check([&](const T& x) { return run(x, g, b); }, rand_param({6, 4}, 98)).max_relative_error, kTol)
        << "training " << training;
    EXPECT_LT(grad_check([&](const T& x) { return run(x0, x, b); }, rand_param({4}, 99)).max_relative_error, kTol);
    EXPECT_LT(grad_check([&](const T& x) { return run(x0, g, x); }, rand_param({4}, 100)).max_relative_error, kTol);
  }
}

TEST(GradCheck, Conv2d) {
  const T w = rand_const({3, 2, 3, 5}, 110);
  const T bias = rand_const({3}, 111);
  const T x0 = rand_const({2, 2, 6, 7}, 112);
  for (Conv2dOptions opt : {Conv2dOptions{1}, Conv2dOptions{2}, Conv2dOptions{2, 0, 1}}) {
    EXPECT_LT(grad_check([&](const T& x) { return project(conv2d(x, w, bias, opt)); }, rand_param({2, 2, 6, 7}, 113))
                  .max_relative_error,
              kTol)
        << "stride " << opt.stride;
    EXPECT_LT(grad_check([&](const T& x) { return project(conv2d(x0, x, bias, opt)); }, rand_param({3, 2, 3, 5}, 114))
                  .max_relative_error,
              kTol);
    EXPECT_LT(grad_check([&](const T& x) { return project(conv2d(x0, w, x, opt)); }, rand_param({3}, 115))
                  .max_relative_error,
              kTol);
  }
}

TEST(GradCheck, ConvTranspose2d) {
  const T w = rand_const({2, 3, 4, 3}, 120);
  const T bias = rand_const({3}, 121);
  const T x0 = rand_const({2, 2, 3, 4}, 122);
  for (int stride : {1, 2}) {
    EXPECT_LT(grad_check([&](const T& x) { return project(conv_transpose2d(x, w, bias, stride)); },
                         rand_param({2, 2, 3, 4}, 123))
                  .max_relative_error,
              kTol);
    EXPECT_LT(grad_check([&](const T& x) { return project(conv_transpose2d(x0, x, bias, stride)); },
                         rand_param({2, 3, 4, 3}, 124))
                  .max_relative_error,
              kTol);
    EXPECT_LT(grad_check([&](const T& x) { return project(conv_transpose2d(x0, w, x, stride)); }, rand_param({3}, 125))
                  .max_relative_error,
              kTol);
  }
}

TEST(GradCheck, ResizeBilinear) {
  for (auto [oh, ow] : {std::pair{7, 9}, std::pair{2, 3}, std::pair{8, 10}}) {
    EXPECT_LT(grad_check([&](const T& x) { return project(resize_bilinear(x, oh, ow)); }, rand_param({2, 2, 4, 5}, 130))
                  .max_relative_error,
              kTol);
  }
}

TEST(GradCheck, ComposedConvReluMse) {
  const T w = rand_const({2, 1, 3, 3}, 140);
  const T target = rand_const({1, 2, 6, 6}, 141);
  const auto r = grad_check(
      [&](const T& x) { return mean_sq_error(relu(conv2d(x, w, T())), target); }, rand_param({1, 1, 6, 6}, 142));
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, Float32WithinLooseTolerance) {
  Tensor<float> x = Tensor<float>::parameter({8}, random_vec(8, 150).cast<float>());
  const Tensor<float> c = Tensor<float>::constant({8}, random_vec(8, 151).cast<float>());
  backward(sum(mul(mul(x, x), c)));
  const Vec<float> expected = 2.0f * x.value().cwiseProduct(c.value());
  EXPECT_LT((x.grad() - expected).cwiseAbs().maxCoeff(), 1e-3f);
}

}  // namespace
}  // namespace echopt::ad
