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

#include "echopt/echopt_net.hpp"
#include "echopt/flow_predict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace echopt {

using ad::Tensor;
using ad::Vec;

void check_stack(const FrameStack& stack, int n_frames) {
  if (static_cast<int>(stack.frames.size()) != n_frames) {
    throw std::invalid_argument("frame stack holds " + std::to_string(stack.frames.size()) + " frames, expected " +
                                std::to_string(n_frames));
  }
  if (static_cast<int>(stack.commands.size()) != n_frames + 1) {
    throw std::invalid_argument("frame stack holds " + std::to_string(stack.commands.size()) +
                                " commands, expected " + std::to_string(n_frames + 1));
  }
  for (const auto& f : stack.frames) {
    if (!f) throw std::invalid_argument("frame stack has an empty frame");
    if (!f->same_geometry(*stack.frames.front())) throw std::invalid_argument("frame stack mixes grid sizes");
  }
}

void EchoPTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("EchoPTConfig: " + msg); };
  if (num_ranges <= 0 || num_azimuths <= 0 || n_frames <= 0) fail("grid and frame counts must be positive");
  if (patch_h <= 0 || patch_w <= 0 || num_ranges % patch_h != 0 || num_azimuths % patch_w != 0) {
    fail("grid " + std::to_string(num_ranges) + "x" + std::to_string(num_azimuths) + " not divisible by patch " +
         std::to_string(patch_h) + "x" + std::to_string(patch_w));
  }
  if (n_heads <= 0 || qkv_dim % n_heads != 0) fail("qkv_dim must be divisible by n_heads");
  if (velocity_inputs != 2 * (n_frames + 1)) fail("velocity_inputs must equal 2 * (n_frames + 1)");
  if (embed_dim <= 0 || ffn_dim <= 0 || n_layers < 0) fail("embedding and ffn widths must be positive");
  if (position_slots() < num_patches()) fail("fewer positional slots than patches");
  if (conv_channels.size() != 5) fail("conv_channels needs 5 entries");
  if (std::any_of(conv_channels.begin(), conv_channels.end(), [](int c) { return c <= 0; })) fail("conv channels");
  if (skip_channels < 0) fail("skip_channels must be non-negative");
  if (!(frame_period > 0.0)) fail("frame_period must be positive");
  if (mlp_dims.size() != 3) fail("mlp_dims needs 3 entries");
  if (mlp_dims.back() != mlp_map_h * mlp_map_w) fail("last mlp width must equal map size");
  if (branch_stride <= 0 || num_ranges % branch_stride != 0 || num_azimuths % branch_stride != 0) {
    fail("grid not divisible by branch_stride");
  }
  if (kernel_h <= 0 || kernel_w <= 0) fail("kernel size must be positive");
  if (!(scale_floor >= 0.0) || !(v_scale > 0.0) || !(omega_scale > 0.0)) fail("input scales must be positive");
}

EchoPTConfig EchoPTConfig::toy() { return EchoPTConfig{}; }

EchoPTConfig EchoPTConfig::full_scale() {
  EchoPTConfig c;
  // The image size is not published; any grid divisible by the 25x5 patch with
  // at most 2000 patches gives the same parameter count.
  c.num_ranges = 250;
  c.num_azimuths = 100;
  c.n_frames = 3;
  c.patch_h = 25;
  c.patch_w = 5;
  c.embed_dim = 376;
  c.n_layers = 8;
  c.n_heads = 6;
  c.qkv_dim = 384;
  c.ffn_dim = 500;
  c.pos_slots = 2000;
  c.kernel_h = 20;
  c.kernel_w = 5;
  c.branch_stride = 2;
  c.conv_channels = {16, 32, 16, 16, 4};
  c.mlp_dims = {10, 10, 200};
  c.mlp_map_h = 20;
  c.mlp_map_w = 10;
  c.velocity_inputs = 8;
  c.skip_channels = 0;
  c.flow_prior = false;
  return c;
}

// ---------------------------------------------------------------- parameters

template <typename T>
std::vector<typename ModelParams<T>::Named> ModelParams<T>::named() {
  std::vector<Named> out = {
      {"embedding/weights", &embed_w, true},      {"embedding/bias", &embed_b, false},
      {"posembed_input/weights", &pos_embed, true}, {"batchnorm/scale", &bn_gamma, false},
      {"batchnorm/offset", &bn_beta, false},
  };
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "tf" + std::to_string(i + 1) + "/";
    Block& b = blocks[i];
    out.insert(out.end(), {
                              {p + "layernorm/scale", &b.ln_gamma, false},
                              {p + "layernorm/offset", &b.ln_beta, false},
                              {p + "query/weights", &b.wq, true},
                              {p + "query/bias", &b.bq, false},
                              {p + "key/weights", &b.wk, true},
                              {p + "key/bias", &b.bk, false},
                              {p + "value/weights", &b.wv, true},
                              {p + "value/bias", &b.bv, false},
                              {p + "output/weights", &b.wo, true},
                              {p + "output/bias", &b.bo, false},
                              {p + "ffn_in/weights", &b.ffn_w1, true},
                              {p + "ffn_in/bias", &b.ffn_b1, false},
                              {p + "ffn_out/weights", &b.ffn_w2, true},
                              {p + "ffn_out/bias", &b.ffn_b2, false},
                          });
  }
  out.insert(out.end(), {
                            {"final_layernorm/scale", &final_ln_gamma, false},
                            {"final_layernorm/offset", &final_ln_beta, false},
                            {"unembed/weights", &unembed_w, true},
                            {"tf_conv1/weights", &tf_conv1_w, true},
                            {"tf_conv1/bias", &tf_conv1_b, false},
                            {"tf_conv2/weights", &tf_conv2_w, true},
                            {"tf_conv2/bias", &tf_conv2_b, false},
                            {"tf_layernorm/scale", &tf_ln_gamma, false},
                            {"tf_layernorm/offset", &tf_ln_beta, false},
                            {"img_conv/weights", &img_conv_w, true},
                            {"img_deconv/weights", &img_deconv_w, true},
                            {"img_deconv/bias", &img_deconv_b, false},
                            {"fc/weights", &fc0_w, true},
                            {"fc/bias", &fc0_b, false},
                            {"fc_1/weights", &fc1_w, true},
                            {"fc_1/bias", &fc1_b, false},
                            {"fc_2/weights", &fc2_w, true},
                            {"fc_2/bias", &fc2_b, false},
                            {"fuse_conv/weights", &fuse_conv_w, true},
                            {"fuse_deconv/weights", &fuse_deconv_w, true},
                            {"fuse_deconv/bias", &fuse_deconv_b, false},
                        });
  if (cfg.skip_channels > 0) {
    out.insert(out.end(), {{"skip_conv/weights", &skip_conv_w, true}, {"skip_conv/bias", &skip_conv_b, false}});
  }
  out.insert(out.end(), {{"conv2/weights", &out_conv_w, true}, {"conv2/bias", &out_conv_b, false}});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (const auto& n : const_cast<ModelParams*>(this)->named()) out.emplace_back(n.name, n.tensor);
  return out;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams<T> copy = *this;
  for (auto& n : copy.named()) *n.tensor = Tensor<T>::parameter(n.tensor->shape(), n.tensor->value());
  return copy;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.cfg = cfg;
  out.blocks.resize(blocks.size());
  out.bn_stats.running_mean = bn_stats.running_mean.template cast<U>();
  out.bn_stats.running_var = bn_stats.running_var.template cast<U>();
  out.bn_stats.momentum = static_cast<U>(bn_stats.momentum);
  out.bn_stats.eps = static_cast<U>(bn_stats.eps);
  auto src = named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) {
    *dst[i].tensor = Tensor<U>::parameter(src[i].second->shape(), src[i].second->value().template cast<U>());
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> uniform_param(ad::Shape shape, double limit, Rng& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Vec<T> v(ad::numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(dist(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> filled(ad::Shape shape, double value) {
  const auto n = ad::numel(shape);
  return Tensor<T>::parameter(std::move(shape), Vec<T>::Constant(n, static_cast<T>(value)));
}

// Fan-in scaled uniform; relu-fed layers use the He bound, others LeCun.
double fan_in_limit(double fan_in, bool relu) { return std::sqrt((relu ? 6.0 : 3.0) / fan_in); }

}  // namespace

template <typename T>
ModelParams<T> build_model(const EchoPTConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams<T> p;
  p.cfg = cfg;
  const int width = cfg.model_width();
  const int patch_in = cfg.n_frames * cfg.patch_h * cfg.patch_w;
  const int kk = cfg.kernel_h * cfg.kernel_w;
  const int s2 = cfg.branch_stride * cfg.branch_stride;
  const auto& ch = cfg.conv_channels;

  p.embed_w = uniform_param<T>({patch_in, cfg.embed_dim}, fan_in_limit(patch_in, false), rng);
  p.embed_b = filled<T>({cfg.embed_dim}, 0.0);
  p.pos_embed = uniform_param<T>({cfg.position_slots(), cfg.embed_dim}, 0.05, rng);
  p.bn_gamma = filled<T>({width}, 1.0);
  p.bn_beta = filled<T>({width}, 0.0);
  p.bn_stats = ad::BatchNormStats<T>(width);

  for (int l = 0; l < cfg.n_layers; ++l) {
    typename ModelParams<T>::Block b;
    b.ln_gamma = filled<T>({width}, 1.0);
    b.ln_beta = filled<T>({width}, 0.0);
    b.wq = uniform_param<T>({width, cfg.qkv_dim}, fan_in_limit(width, false), rng);
    b.bq = filled<T>({cfg.qkv_dim}, 0.0);
    b.wk = uniform_param<T>({width, cfg.qkv_dim}, fan_in_limit(width, false), rng);
    b.bk = filled<T>({cfg.qkv_dim}, 0.0);
    b.wv = uniform_param<T>({width, cfg.qkv_dim}, fan_in_limit(width, false), rng);
    b.bv = filled<T>({cfg.qkv_dim}, 0.0);
    b.wo = uniform_param<T>({cfg.qkv_dim, width}, fan_in_limit(cfg.qkv_dim, false), rng);
    b.bo = filled<T>({width}, 0.0);
    b.ffn_w1 = uniform_param<T>({width, cfg.ffn_dim}, fan_in_limit(width, true), rng);
    b.ffn_b1 = filled<T>({cfg.ffn_dim}, 0.0);
    b.ffn_w2 = uniform_param<T>({cfg.ffn_dim, width}, fan_in_limit(cfg.ffn_dim, false), rng);
    b.ffn_b2 = filled<T>({width}, 0.0);
    p.blocks.push_back(std::move(b));
  }
  p.final_ln_gamma = filled<T>({width}, 1.0);
  p.final_ln_beta = filled<T>({width}, 0.0);
  p.unembed_w = uniform_param<T>({width, cfg.patch_h * cfg.patch_w}, fan_in_limit(width, false), rng);

  p.tf_conv1_w = uniform_param<T>({ch[0], 1, cfg.kernel_h, cfg.kernel_w}, fan_in_limit(kk, true), rng);
  p.tf_conv1_b = filled<T>({ch[0]}, 0.0);
  p.tf_conv2_w = uniform_param<T>({ch[1], ch[0], cfg.kernel_h, cfg.kernel_w}, fan_in_limit(ch[0] * kk, true), rng);
  p.tf_conv2_b = filled<T>({ch[1]}, 0.0);
  p.tf_ln_gamma = filled<T>({ch[1]}, 1.0);
  p.tf_ln_beta = filled<T>({ch[1]}, 0.0);

  p.img_conv_w =
      uniform_param<T>({ch[2], cfg.n_frames, cfg.kernel_h, cfg.kernel_w}, fan_in_limit(cfg.n_frames * kk, true), rng);
  p.img_deconv_w = uniform_param<T>({ch[2], ch[2], cfg.kernel_h, cfg.kernel_w}, fan_in_limit(ch[2] * kk, true), rng);
  p.img_deconv_b = filled<T>({ch[2]}, 0.0);

  const auto& m = cfg.mlp_dims;
  p.fc0_w = uniform_param<T>({cfg.velocity_inputs, m[0]}, fan_in_limit(cfg.velocity_inputs, true), rng);
  p.fc0_b = filled<T>({m[0]}, 0.0);
  p.fc1_w = uniform_param<T>({m[0], m[1]}, fan_in_limit(m[0], true), rng);
  p.fc1_b = filled<T>({m[1]}, 0.0);
  p.fc2_w = uniform_param<T>({m[1], m[2]}, fan_in_limit(m[1], false), rng);
  p.fc2_b = filled<T>({m[2]}, 0.0);

  const int fused = ch[1] + 2 * ch[2] + 1;
  p.fuse_conv_w = uniform_param<T>({ch[3], fused, cfg.kernel_h, cfg.kernel_w}, fan_in_limit(fused * kk, true), rng);
  p.fuse_deconv_w =
      uniform_param<T>({ch[3], ch[4], cfg.kernel_h, cfg.kernel_w}, fan_in_limit(double(ch[3] * kk) / s2, true), rng);
  p.fuse_deconv_b = filled<T>({ch[4]}, 0.0);
  int head = ch[4];
  if (cfg.skip_channels > 0) {
    const int in = ch[4] + cfg.n_frames + (cfg.flow_prior ? 1 : 0);
    p.skip_conv_w =
        uniform_param<T>({cfg.skip_channels, in, cfg.kernel_h, cfg.kernel_w}, fan_in_limit(in * kk, true), rng);
    p.skip_conv_b = filled<T>({cfg.skip_channels}, 0.0);
    head = cfg.skip_channels;
  }
  p.out_conv_w = uniform_param<T>({1, head, cfg.kernel_h, cfg.kernel_w}, fan_in_limit(head * kk, false), rng);
  p.out_conv_b = filled<T>({1}, 0.0);
  return p;
}

template <typename T>
long long count_params(const ModelParams<T>& params) {
  long long total = 0;
  for (const auto& [name, t] : params.named()) {
    if (t->defined()) total += static_cast<long long>(t->size());
  }
  return total;
}

// ---------------------------------------------------------------- forward

template <typename T>
Batch<T> make_batch(const EchoPTConfig& cfg, const std::vector<const FrameStack*>& stacks) {
  const int n = static_cast<int>(stacks.size());
  if (n == 0) throw std::invalid_argument("make_batch: empty batch");
  const int h = cfg.num_ranges, w = cfg.num_azimuths, nf = cfg.n_frames;
  const Eigen::Index cells = static_cast<Eigen::Index>(h) * w;
  const bool with_target = std::all_of(stacks.begin(), stacks.end(), [](const FrameStack* s) { return bool(s->target); });

  Batch<T> b;
  Vec<T> frames(static_cast<Eigen::Index>(n) * nf * cells);
  Vec<T> vel(static_cast<Eigen::Index>(n) * cfg.velocity_inputs);
  Vec<T> targets(with_target ? static_cast<Eigen::Index>(n) * cells : 0);
  Vec<T> prior(cfg.flow_prior ? static_cast<Eigen::Index>(n) * cells : 0);
  for (int s = 0; s < n; ++s) {
    const FrameStack& st = *stacks[static_cast<std::size_t>(s)];
    check_stack(st, nf);
    if (st.newest().num_ranges() != h || st.newest().num_azimuths() != w) {
      throw std::invalid_argument("stack grid " + std::to_string(st.newest().num_ranges()) + "x" +
                                  std::to_string(st.newest().num_azimuths()) + " does not match the model grid");
    }
    const double rms = st.newest().data.norm() / std::sqrt(static_cast<double>(cells));
    const double floored = std::max(rms, cfg.scale_floor);
    const double scale = floored > 0.0 ? floored : 1.0;
    b.scales.push_back(scale);
    for (int f = 0; f < nf; ++f) {
      const Grid& g = st.frames[static_cast<std::size_t>(f)]->data;
      frames.segment((static_cast<Eigen::Index>(s) * nf + f) * cells, cells) =
          (Eigen::Map<const Eigen::VectorXd>(g.data(), cells) / scale).template cast<T>();
    }
    for (int c = 0; c <= nf; ++c) {
      vel[s * cfg.velocity_inputs + 2 * c] = static_cast<T>(st.commands[static_cast<std::size_t>(c)].v_lin / cfg.v_scale);
      vel[s * cfg.velocity_inputs + 2 * c + 1] =
          static_cast<T>(st.commands[static_cast<std::size_t>(c)].omega_r / cfg.omega_scale);
    }
    if (cfg.flow_prior) {
      const Energyscape warped = flow_warp(st.newest(), st.commands.back(), cfg.frame_period);
      prior.segment(s * cells, cells) =
          (Eigen::Map<const Eigen::VectorXd>(warped.data.data(), cells) / scale).template cast<T>();
    }
    if (with_target) {
      if (!st.target->same_geometry(st.newest())) throw std::invalid_argument("target grid differs from inputs");
      targets.segment(s * cells, cells) =
          (Eigen::Map<const Eigen::VectorXd>(st.target->data.data(), cells) / scale).template cast<T>();
    }
  }
  b.frames = Tensor<T>::constant({n, nf, h, w}, std::move(frames));
  b.velocities = Tensor<T>::constant({n, cfg.velocity_inputs}, std::move(vel));
  if (with_target) b.targets = Tensor<T>::constant({n, 1, h, w}, std::move(targets));
  if (cfg.flow_prior) b.prior = Tensor<T>::constant({n, 1, h, w}, std::move(prior));
  return b;
}

namespace {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ad::add_bias(ad::matmul(x, w), b);
}

template <typename T>
Tensor<T> self_attention(const typename ModelParams<T>::Block& blk, const Tensor<T>& y, int batch, int tokens,
                         int heads) {
  const Tensor<T> q = linear(y, blk.wq, blk.bq);
  const Tensor<T> k = linear(y, blk.wk, blk.bk);
  const Tensor<T> v = linear(y, blk.wv, blk.bv);
  const int dh = q.dim(1) / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> samples;
  for (int s = 0; s < batch; ++s) {
    const Tensor<T> qs = ad::slice(q, 0, s * tokens, tokens);
    const Tensor<T> ks = ad::slice(k, 0, s * tokens, tokens);
    const Tensor<T> vs = ad::slice(v, 0, s * tokens, tokens);
    std::vector<Tensor<T>> per_head;
    for (int h = 0; h < heads; ++h) {
      const Tensor<T> qh = ad::slice(qs, 1, h * dh, dh);
      const Tensor<T> kh = ad::slice(ks, 1, h * dh, dh);
      const Tensor<T> vh = ad::slice(vs, 1, h * dh, dh);
      const Tensor<T> att = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
      per_head.push_back(ad::matmul(att, vh));
    }
    samples.push_back(ad::concat(per_head, 1));
  }
  return linear(ad::concat(samples, 0), blk.wo, blk.bo);
}

}  // namespace

template <typename T>
Tensor<T> forward_batch(ModelParams<T>& p, const Batch<T>& batch, bool training) {
  const EchoPTConfig& cfg = p.cfg;
  const int n = batch.frames.dim(0);
  const int h = cfg.num_ranges, w = cfg.num_azimuths;
  if (cfg.flow_prior && (!batch.prior.defined() || batch.prior.shape() != ad::Shape{n, 1, h, w})) {
    throw std::invalid_argument("forward_batch: flow_prior needs a [N, 1, H, W] prior");
  }
  const int tokens = cfg.num_patches();
  const int width = cfg.model_width();
  const int hs = h / cfg.branch_stride, ws = w / cfg.branch_stride;
  const auto& ch = cfg.conv_channels;
  const Tensor<T> none;

  // Transformer branch: patch embedding, learned positions, velocity features
  // appended to every token.
  Tensor<T> x = linear(ad::patchify(batch.frames, cfg.patch_h, cfg.patch_w), p.embed_w, p.embed_b);
  const Tensor<T> pos = ad::reshape(ad::slice(p.pos_embed, 0, 0, tokens), {tokens * cfg.embed_dim});
  x = ad::reshape(ad::add_bias(ad::reshape(x, {n, tokens * cfg.embed_dim}), pos), {n * tokens, cfg.embed_dim});
  x = ad::concat<T>({x, ad::repeat_rows(batch.velocities, tokens)}, 1);
  x = ad::batch_norm(x, p.bn_gamma, p.bn_beta, p.bn_stats, training);
  for (const auto& blk : p.blocks) {
    const Tensor<T> y = ad::layer_norm(x, blk.ln_gamma, blk.ln_beta);
    const Tensor<T> ffn = linear(ad::relu(linear(y, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2);
    x = ad::add(ad::add(x, self_attention<T>(blk, y, n, tokens, cfg.n_heads)), ffn);
  }
  x = ad::layer_norm(x, p.final_ln_gamma, p.final_ln_beta);
  Tensor<T> tf = ad::unpatchify(ad::matmul(x, p.unembed_w), n, 1, h, w, cfg.patch_h, cfg.patch_w);
  tf = ad::relu(ad::conv2d(tf, p.tf_conv1_w, p.tf_conv1_b, {cfg.branch_stride}));
  tf = ad::relu(ad::layer_norm_chw(ad::conv2d(tf, p.tf_conv2_w, p.tf_conv2_b), p.tf_ln_gamma, p.tf_ln_beta));

  // Convolutional branch over the depth-stacked frames.
  const Tensor<T> img = ad::relu(ad::conv2d(batch.frames, p.img_conv_w, none, {cfg.branch_stride}));
  const Tensor<T> img_up = ad::relu(ad::conv_transpose2d(img, p.img_deconv_w, p.img_deconv_b, 1));

  // Velocity MLP reshaped to a coarse spatial map.
  Tensor<T> mlp = ad::relu(linear(batch.velocities, p.fc0_w, p.fc0_b));
  mlp = ad::relu(linear(mlp, p.fc1_w, p.fc1_b));
  mlp = ad::reshape(linear(mlp, p.fc2_w, p.fc2_b), {n, 1, cfg.mlp_map_h, cfg.mlp_map_w});
  mlp = ad::resize_bilinear(mlp, hs, ws);

  if (tf.dim(2) != hs || tf.dim(3) != ws) tf = ad::resize_bilinear(tf, hs, ws);
  Tensor<T> fused = ad::concat<T>({tf, img, img_up, mlp}, 1);
  fused = ad::relu(ad::conv2d(fused, p.fuse_conv_w, none));
  fused = ad::relu(ad::conv_transpose2d(fused, p.fuse_deconv_w, p.fuse_deconv_b, cfg.branch_stride));
  (void)ch;
  (void)width;
  if (cfg.skip_channels > 0) {
    std::vector<Tensor<T>> head = {fused, batch.frames};
    if (cfg.flow_prior) head.push_back(batch.prior);
    fused = ad::relu(ad::conv2d(ad::concat<T>(head, 1), p.skip_conv_w, p.skip_conv_b));
  }
  Tensor<T> out = ad::conv2d(fused, p.out_conv_w, p.out_conv_b);
  if (cfg.flow_prior) out = ad::add(out, batch.prior);
  return ad::relu(out);
}

template <typename T>
Energyscape forward(ModelParams<T>& params, const FrameStack& stack) {
  const Batch<T> batch = make_batch<T>(params.cfg, {&stack});
  const Tensor<T> out = forward_batch(params, batch, false);
  const Energyscape& last = stack.newest();
  Grid g(last.num_ranges(), last.num_azimuths());
  Eigen::Map<Eigen::VectorXd>(g.data(), g.size()) = out.value().template cast<double>() * batch.scales[0];
  double dt = 0.2;
  if (stack.frames.size() >= 2) dt = last.timestamp - stack.frames[stack.frames.size() - 2]->timestamp;
  Energyscape result;
  result.data = std::move(g);
  result.r_max = last.r_max;
  result.fov = last.fov;
  result.timestamp = last.timestamp + dt;
  return result;
}

// ---------------------------------------------------------------- training

template <typename T>
double evaluate_loss(ModelParams<T>& params, const std::vector<FrameStack>& stacks, int minibatch) {
  if (stacks.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < stacks.size(); start += static_cast<std::size_t>(minibatch)) {
    std::vector<const FrameStack*> ptrs;
    for (std::size_t i = start; i < std::min(stacks.size(), start + static_cast<std::size_t>(minibatch)); ++i) {
      ptrs.push_back(&stacks[i]);
    }
    const Batch<T> b = make_batch<T>(params.cfg, ptrs);
    const Tensor<T> out = forward_batch(params, b, false);
    total += static_cast<double>(ad::mean_sq_error(out, b.targets).item()) * static_cast<double>(ptrs.size());
  }
  return total / static_cast<double>(stacks.size());
}

namespace {

// Flips the selected samples along azimuth and negates their turn rates.
template <typename T>
void mirror_samples(Batch<T>& b, const std::vector<char>& flip, const EchoPTConfig& cfg) {
  const int h = cfg.num_ranges, w = cfg.num_azimuths, nf = cfg.n_frames;
  auto flip_rows = [&](Vec<T>& v, Eigen::Index first, int planes) {
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(planes) * h; ++r) {
      v.segment(first + r * w, w).reverseInPlace();
    }
  };
  for (std::size_t s = 0; s < flip.size(); ++s) {
    if (!flip[s]) continue;
    const auto i = static_cast<Eigen::Index>(s);
    flip_rows(b.frames.value(), i * nf * h * w, nf);
    flip_rows(b.targets.value(), i * h * w, 1);
    if (cfg.flow_prior) flip_rows(b.prior.value(), i * h * w, 1);
    for (int c = 1; c < cfg.velocity_inputs; c += 2) b.velocities.value()[i * cfg.velocity_inputs + c] *= T(-1);
  }
}

}  // namespace

template <typename T>
TrainResult<T> train(ModelParams<T> params, const std::vector<FrameStack>& train_set,
                     const std::vector<FrameStack>& validation_set, const OptimSettings& optim,
                     const EpochCallback& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: empty dataset");
  if (optim.minibatch < 2) throw std::invalid_argument("train: minibatch must be at least 2 for batch norm");
  const auto& val = validation_set.empty() ? train_set : validation_set;

  auto named = params.named();
  std::vector<Vec<T>> m1, m2;
  for (auto& np : named) {
    m1.push_back(Vec<T>::Zero(np.tensor->size()));
    m2.push_back(Vec<T>::Zero(np.tensor->size()));
  }
  Rng rng(optim.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult<T> result;
  double best = evaluate_loss(params, val);
  result.curve.push_back({0, std::numeric_limits<double>::quiet_NaN(), best});
  result.params = params.clone();
  if (on_epoch) on_epoch(result.curve.back());

  long long step = 0;
  const T lr = static_cast<T>(optim.learn_rate);
  const T b1 = static_cast<T>(optim.beta1), b2 = static_cast<T>(optim.beta2);
  for (int epoch = 1; epoch <= optim.max_epochs; ++epoch) {
    if (optim.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += static_cast<std::size_t>(optim.minibatch)) {
      std::vector<const FrameStack*> ptrs;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(optim.minibatch)); ++i) {
        ptrs.push_back(&train_set[order[i]]);
      }
      if (ptrs.size() < 2) break;
      for (auto& np : named) np.tensor->zero_grad();
      Batch<T> b = make_batch<T>(params.cfg, ptrs);
      if (optim.mirror) {
        std::vector<char> flip(ptrs.size());
        for (auto& f : flip) f = static_cast<char>(rng() >> 63);
        mirror_samples(b, flip, params.cfg);
      }
      const Tensor<T> loss = ad::mean_sq_error(forward_batch(params, b, true), b.targets);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw TrainingDiverged(epoch, "training diverged: non-finite loss in epoch " + std::to_string(epoch));
      }
      ad::backward(loss);
      ++step;
      const T c1 = T(1) - static_cast<T>(std::pow(optim.beta1, static_cast<double>(step)));
      const T c2 = T(1) - static_cast<T>(std::pow(optim.beta2, static_cast<double>(step)));
      for (std::size_t i = 0; i < named.size(); ++i) {
        auto& t = *named[i].tensor;
        Vec<T> g = t.grad();
        if (named[i].is_weight && optim.l2 > 0.0) g += static_cast<T>(optim.l2) * t.value();
        m1[i] = b1 * m1[i] + (T(1) - b1) * g;
        m2[i] = b2 * m2[i] + (T(1) - b2) * g.cwiseAbs2();
        t.value().array() -= lr * (m1[i].array() / c1) / ((m2[i].array() / c2).sqrt() + static_cast<T>(optim.epsilon));
      }
      epoch_loss += lv * static_cast<double>(ptrs.size());
      seen += ptrs.size();
    }
    EpochLoss el{epoch, seen ? epoch_loss / static_cast<double>(seen) : 0.0, evaluate_loss(params, val)};
    if (!std::isfinite(el.validation)) {
      throw TrainingDiverged(epoch, "training diverged: non-finite validation loss in epoch " + std::to_string(epoch));
    }
    result.curve.push_back(el);
    if (el.validation < best) {
      best = el.validation;
      result.params = params.clone();
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(el);
  }
  result.last = std::move(params);
  return result;
}

#define ECHOPT_INSTANTIATE(T)                                                                                 \
  template struct ModelParams<T>;                                                                             \
  template ModelParams<T> build_model<T>(const EchoPTConfig&, Rng&);                                          \
  template long long count_params<T>(const ModelParams<T>&);                                                  \
  template Batch<T> make_batch<T>(const EchoPTConfig&, const std::vector<const FrameStack*>&);                \
  template Tensor<T> forward_batch<T>(ModelParams<T>&, const Batch<T>&, bool);                                \
  template Energyscape forward<T>(ModelParams<T>&, const FrameStack&);                                        \
  template double evaluate_loss<T>(ModelParams<T>&, const std::vector<FrameStack>&, int);                     \
  template TrainResult<T> train<T>(ModelParams<T>, const std::vector<FrameStack>&,                           \
                                   const std::vector<FrameStack>&, const OptimSettings&, const EpochCallback&);

ECHOPT_INSTANTIATE(float)
ECHOPT_INSTANTIATE(double)
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

}  // namespace echopt
