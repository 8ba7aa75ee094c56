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

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "echopt/sonar_sim.hpp"
#include "echopt/tensor.hpp"

namespace echopt {

using ScapePtr = std::shared_ptr<const Energyscape>;

// n consecutive measured frames (oldest first), the n + 1 commands that led into
// each of them plus the command whose outcome is predicted, and optionally the
// frame that followed.
struct FrameStack {
  std::vector<ScapePtr> frames;
  std::vector<VelocityCommand> commands;
  ScapePtr target;

  const Energyscape& newest() const { return *frames.back(); }
};

// Validates the stack geometry against the expected frame count.
void check_stack(const FrameStack& stack, int n_frames);

struct EchoPTConfig {
  int num_ranges = 128;
  int num_azimuths = 64;
  int n_frames = 3;
  int patch_h = 16;
  int patch_w = 8;
  int embed_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int qkv_dim = 64;
  int ffn_dim = 128;
  int pos_slots = 0;  // learned positional vectors; 0 means one per patch
  int kernel_h = 5;
  int kernel_w = 5;
  int branch_stride = 2;  // downsampling of the convolutional branches before fusion
  // Channels: transformer-branch conv 1, conv 2, image branch, fusion, decoder.
  std::vector<int> conv_channels = {8, 16, 8, 8, 4};
  // Width of a full-resolution head that sees the decoder output next to the
  // input frames; 0 leaves the decoder output to the final conv alone.
  int skip_channels = 8;
  // Adds the flow-warped newest frame as a head input and predicts a residual on it.
  bool flow_prior = true;
  double frame_period = 0.2;  // step length of the prior warp
  // Velocity MLP widths; the last one is reshaped to a mlp_map_h x mlp_map_w map.
  std::vector<int> mlp_dims = {16, 16, 128};
  int mlp_map_h = 16;
  int mlp_map_w = 8;
  int velocity_inputs = 8;
  double v_scale = 0.3;
  double omega_scale = 1.0;
  // Lower bound on the per-stack intensity scale, so near-empty views stay bounded.
  double scale_floor = 0.005;

  int model_width() const { return embed_dim + velocity_inputs; }
  int num_patches() const { return (num_ranges / patch_h) * (num_azimuths / patch_w); }
  int position_slots() const { return pos_slots > 0 ? pos_slots : num_patches(); }
  // Throws std::invalid_argument naming the broken invariant.
  void validate() const;

  static EchoPTConfig toy();
  // Dimensions of the full-size network from the architecture table.
  static EchoPTConfig full_scale();
};

template <typename T>
struct ModelParams {
  using TensorT = ad::Tensor<T>;

  struct Block {
    TensorT ln_gamma, ln_beta;
    TensorT wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };

  EchoPTConfig cfg;
  TensorT embed_w, embed_b, pos_embed;
  TensorT bn_gamma, bn_beta;
  ad::BatchNormStats<T> bn_stats;
  std::vector<Block> blocks;
  TensorT final_ln_gamma, final_ln_beta, unembed_w;
  TensorT tf_conv1_w, tf_conv1_b, tf_conv2_w, tf_conv2_b, tf_ln_gamma, tf_ln_beta;
  TensorT img_conv_w, img_deconv_w, img_deconv_b;
  TensorT fc0_w, fc0_b, fc1_w, fc1_b, fc2_w, fc2_b;
  TensorT fuse_conv_w, fuse_deconv_w, fuse_deconv_b, skip_conv_w, skip_conv_b, out_conv_w, out_conv_b;

  struct Named {
    std::string name;
    TensorT* tensor;
    bool is_weight;  // receives L2 regularisation
  };
  std::vector<Named> named();
  std::vector<std::pair<std::string, const TensorT*>> named() const;

  // Deep copy; the copy has fresh leaves with no gradient history.
  ModelParams clone() const;
  template <typename U>
  ModelParams<U> cast() const;
};

template <typename T>
ModelParams<T> build_model(const EchoPTConfig& cfg, Rng& rng);

// Learnable scalar count; batch-norm running statistics are excluded.
template <typename T>
long long count_params(const ModelParams<T>& params);

// Network inputs for a minibatch: frames normalised by the RMS of each stack's
// newest frame, velocities scaled to O(1).
template <typename T>
struct Batch {
  ad::Tensor<T> frames;      // [N, n_frames, H, W]
  ad::Tensor<T> velocities;  // [N, velocity_inputs]
  ad::Tensor<T> targets;     // [N, 1, H, W] normalised, empty when stacks have no target
  ad::Tensor<T> prior;       // [N, 1, H, W] flow-warped newest frame, empty unless flow_prior
  std::vector<double> scales;
};

template <typename T>
Batch<T> make_batch(const EchoPTConfig& cfg, const std::vector<const FrameStack*>& stacks);

// Differentiable forward pass on a prepared batch; returns [N, 1, H, W] in
// normalised units.
template <typename T>
ad::Tensor<T> forward_batch(ModelParams<T>& params, const Batch<T>& batch, bool training);

// Inference on one stack; output is in energy units on the input grid.
template <typename T>
Energyscape forward(ModelParams<T>& params, const FrameStack& stack);

struct OptimSettings {
  double learn_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double l2 = 1e-4;
  int minibatch = 64;
  int max_epochs = 1000;
  bool shuffle = true;
  // Each training stack is mirrored in azimuth, with turn rates negated, with probability 1/2.
  bool mirror = false;
  std::uint64_t seed = 1;
};

struct EpochLoss {
  int epoch = 0;
  double train = 0.0;  // NaN for the initial entry
  double validation = 0.0;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;  // best validation loss
  ModelParams<T> last;    // state after the final epoch
  std::vector<EpochLoss> curve;
  int best_epoch = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int epoch, const std::string& what) : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

// Adam on the mean squared error, shuffling every epoch and keeping the
// parameters with the lowest validation loss. An empty validation set scores
// on the training set.
template <typename T>
TrainResult<T> train(ModelParams<T> init, const std::vector<FrameStack>& train_set,
                     const std::vector<FrameStack>& validation_set, const OptimSettings& optim,
                     const EpochCallback& on_epoch = {});

// Mean loss in normalised units, inference mode.
template <typename T>
double evaluate_loss(ModelParams<T>& params, const std::vector<FrameStack>& stacks, int minibatch = 32);

}  // namespace echopt
