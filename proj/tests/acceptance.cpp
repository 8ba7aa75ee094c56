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

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Work files go to ./acceptance_work.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "echopt/checkpoint.hpp"
#include "echopt/config_io.hpp"
#include "echopt/dataset.hpp"
#include "echopt/echopt_net.hpp"
#include "echopt/flow_predict.hpp"
#include "echopt/grad_check.hpp"
#include "echopt/metrics.hpp"
#include "echopt/predictive.hpp"
#include "echopt/sonar_sim.hpp"

namespace fs = std::filesystem;
using namespace echopt;

namespace {

const std::string kSource = ECHOPT_SOURCE_DIR;
const std::string kCli = ECHOPT_CLI_PATH;
const fs::path kWork = fs::absolute("acceptance_work");

// Training and evaluation data, in seconds of driving.
constexpr double kTrainArena = 600.0;
constexpr double kTrainCorridor = 600.0;
constexpr double kValidation = 150.0;
constexpr double kTest = 300.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream ss;
  ss.precision(digits);
  ss << v;
  return ss.str();
}

// Runs the CLI with its output captured in a log; returns the exit status.
int cli(const std::string& args, const std::string& log) {
  const std::string cmd = kCli + " " + args + " > " + (kWork / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

std::string path(const std::string& leaf) { return (kWork / leaf).string(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

using Row = std::map<std::string, std::string>;

std::vector<Row> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    Row r;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) r[header[i]] = cells[i];
    rows.push_back(std::move(r));
  }
  return rows;
}

double num(const Row& r, const std::string& key) { return std::stod(r.at(key)); }

// Sub-bin peak location by parabolic interpolation along each axis.
PolarPoint refined_peak(const Energyscape& e) {
  Eigen::Index k = 0, j = 0;
  e.data.maxCoeff(&k, &j);
  auto vertex = [](double a, double b, double c) {
    const double d = a - 2.0 * b + c;
    return d == 0.0 ? 0.0 : 0.5 * (a - c) / d;
  };
  double kk = static_cast<double>(k), jj = static_cast<double>(j);
  if (k > 0 && k + 1 < e.data.rows()) kk += vertex(e.data(k - 1, j), e.data(k, j), e.data(k + 1, j));
  if (j > 0 && j + 1 < e.data.cols()) jj += vertex(e.data(k, j - 1), e.data(k, j), e.data(k, j + 1));
  return {(kk + 0.5) * e.range_bin_width(), -0.5 * e.fov + (jj + 0.5) * e.azimuth_bin_width()};
}

// ----------------------------------------------------------------- criteria

Outcome flow_line_invariant() {
  const auto t0 = Clock::now();
  const SensorConfig sensor;
  Rng rng(2024);
  std::uniform_real_distribution<double> ur(2.0, 4.5), ut(-0.8, 0.8);
  const double tol = 1.5 * sensor.r_max / sensor.num_ranges;
  const VelocityCommand forward{0.3, 0.0};
  int steps = 0, within = 0;
  for (int seq = 0; seq < 100; ++seq) {
    const double r = ur(rng), th = ut(rng);
    ReflectorMap world;
    world.reflectors.push_back({r * std::cos(th), r * std::sin(th), 0.05, 1.0});
    world.bounds = {-10.0, 10.0, -10.0, 10.0};
    const double rc = std::abs(r * std::sin(th));
    Pose2D pose;
    for (int k = 0; k < 10; ++k) {
      pose = step_kinematics(pose, forward, 0.2);
      const SensorHit hit = to_sensor_frame(world.reflectors[0], pose);
      if (hit.range < 0.5 || std::abs(hit.azimuth) > 0.5 * sensor.fov - 0.1) break;
      const Energyscape e = inject_noise(render_energyscape(world, pose, sensor), 5.0, rng);
      const PolarPoint p = refined_peak(e);
      ++steps;
      within += std::abs(std::abs(p.r * std::sin(p.theta)) - rc) < tol;
    }
  }
  const double share = steps ? static_cast<double>(within) / steps : 0.0;
  const double secs = seconds_since(t0);
  return {share >= 0.95 && steps > 0 && secs < 60.0,
          std::to_string(within) + "/" + std::to_string(steps) + " steps on the flow line, " + fmt(secs, 3) + " s"};
}

// Columns [lo, hi) of a scape as a scape of its own.
Energyscape crop_columns(const Energyscape& e, int lo, int hi) {
  Energyscape out = e;
  out.data = e.data.middleCols(lo, hi - lo);
  out.fov = e.azimuth_bin_width() * (hi - lo);
  return out;
}

// Rotation is an exact azimuth shift for an isotropic sensor, on the columns
// seen in both frames, when the turn spans whole azimuth bins.
Outcome pure_rotation() {
  const WorldSpec world = load_world(kSource + "/worlds/arena.json");
  SensorConfig isotropic;
  isotropic.directivity_sigma = std::numeric_limits<double>::infinity();
  const SensorConfig directive{};
  const double bin = isotropic.fov / isotropic.num_azimuths;
  const int w = isotropic.num_azimuths, margin = 4;
  Rng rng(77);
  std::uniform_real_distribution<double> ux(-4.0, 4.0), uh(-kPi, kPi);
  std::uniform_int_distribution<int> uk(1, 6), usign(0, 1);
  double worst_truth = 1.0, worst_pair = 1.0, directive_overlap = 1.0, directive_full = 1.0;
  for (int i = 0; i < 50; ++i) {
    const Pose2D pose{ux(rng), ux(rng), uh(rng)};
    const int k = uk(rng) * (usign(rng) ? 1 : -1);
    const VelocityCommand turn{0.0, k * bin / 0.2};
    const Pose2D turned = step_kinematics(pose, turn, 0.2);
    const int lo = std::abs(k) + margin, hi = w - std::abs(k) - margin;
    for (const SensorConfig* sensor : {static_cast<const SensorConfig*>(&isotropic), &directive}) {
      const Energyscape before = render_energyscape(world.map, pose, *sensor);
      const Energyscape after = crop_columns(render_energyscape(world.map, turned, *sensor), lo, hi);
      const Energyscape naive = crop_columns(naive_shift(before, turn, 0.2), lo, hi);
      const Energyscape flow = crop_columns(flow_warp(before, turn, 0.2), lo, hi);
      const double truth = std::min(cross_corr_coeff(naive, after).value, cross_corr_coeff(flow, after).value);
      if (sensor == &isotropic) {
        worst_truth = std::min(worst_truth, truth);
        worst_pair = std::min(worst_pair, cross_corr_coeff(naive, flow).value);
      } else {
        directive_overlap = std::min(directive_overlap, truth);
        directive_full = std::min(directive_full,
                                  cross_corr_coeff(flow_warp(before, turn, 0.2),
                                                   render_energyscape(world.map, turned, *sensor))
                                      .value);
      }
    }
  }
  return {worst_truth > 0.99 && worst_pair > 0.999,
          "isotropic min CC vs truth " + fmt(worst_truth, 6) + ", naive vs flow " + fmt(worst_pair, 6) +
              "; default directivity min CC " + fmt(directive_overlap, 4) + " on the overlap, " +
              fmt(directive_full, 4) + " full grid"};
}

using TD = ad::Tensor<double>;

ad::Vec<double> random_vec(Eigen::Index n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Vec<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}
TD rand_param(ad::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(s);
  return TD::parameter(std::move(s), random_vec(n, seed, lo, hi));
}
TD rand_const(ad::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(s);
  return TD::constant(std::move(s), random_vec(n, seed, lo, hi));
}
TD project(const TD& y) { return ad::sum(ad::mul(y, rand_const(y.shape(), 99))); }

double primitive_gradients(std::string& worst_name) {
  using F = std::function<TD(const TD&)>;
  const TD m45 = rand_const({4, 5}, 1), m34 = rand_const({3, 4}, 2), g6 = rand_const({6}, 3, 0.5, 1.5);
  const TD b6 = rand_const({6}, 4), x46 = rand_const({4, 6}, 5);
  const TD cw = rand_const({3, 2, 3, 5}, 6), cb = rand_const({3}, 7), cx = rand_const({2, 2, 6, 7}, 8);
  const TD tw = rand_const({2, 3, 4, 3}, 9), tb = rand_const({3}, 10), tx = rand_const({2, 2, 3, 4}, 11);
  const TD target = rand_const({2, 1, 4, 4}, 12);
  const TD other = rand_const({2, 3, 4}, 13);
  auto bn = [&](bool training) {
    return F([&, training](const TD& x) {
      ad::BatchNormStats<double> stats(6);
      stats.running_mean = random_vec(6, 14);
      stats.running_var = random_vec(6, 15, 0.5, 2.0);
      return project(ad::batch_norm(x, g6, b6, stats, training));
    });
  };
  ad::Vec<double> nudged = random_vec(24, 16);
  for (auto& v : nudged) v += v >= 0 ? 0.05 : -0.05;
  struct Case {
    std::string name;
    F f;
    TD x;
  };
  std::vector<Case> cases = {
      {"matmul", [&](const TD& x) { return project(ad::matmul(x, m45)); }, rand_param({3, 4}, 20)},
      {"matmul rhs", [&](const TD& x) { return project(ad::matmul(m34, x)); }, rand_param({4, 5}, 21)},
      {"conv2d", [&](const TD& x) { return project(ad::conv2d(x, cw, cb)); }, rand_param({2, 2, 6, 7}, 22)},
      {"conv2d stride 2", [&](const TD& x) { return project(ad::conv2d(x, cw, cb, {2})); }, rand_param({2, 2, 6, 7}, 23)},
      {"conv2d padding 1", [&](const TD& x) { return project(ad::conv2d(x, cw, cb, {2, 0, 1})); },
       rand_param({2, 2, 6, 7}, 24)},
      {"conv2d weights", [&](const TD& x) { return project(ad::conv2d(cx, x, cb, {2})); }, rand_param({3, 2, 3, 5}, 25)},
      {"transposed conv2d", [&](const TD& x) { return project(ad::conv_transpose2d(x, tw, tb, 2)); },
       rand_param({2, 2, 3, 4}, 26)},
      {"transposed conv2d weights", [&](const TD& x) { return project(ad::conv_transpose2d(tx, x, tb, 2)); },
       rand_param({2, 3, 4, 3}, 27)},
      {"relu", [&](const TD& x) { return project(ad::relu(x)); }, TD::parameter({4, 6}, nudged)},
      {"softmax", [&](const TD& x) { return project(ad::softmax(x)); }, rand_param({4, 6}, 28, -2.0, 2.0)},
      {"layer_norm", [&](const TD& x) { return project(ad::layer_norm(x, g6, b6)); }, rand_param({4, 6}, 29)},
      {"layer_norm gain", [&](const TD& x) { return project(ad::layer_norm(x46, x, b6)); }, rand_param({6}, 30)},
      {"batch_norm training", bn(true), rand_param({4, 6}, 31)},
      {"batch_norm inference", bn(false), rand_param({4, 6}, 32)},
      {"add", [&](const TD& x) { return project(ad::add(x, other)); }, rand_param({2, 3, 4}, 33)},
      {"concat", [&](const TD& x) { return project(ad::concat<double>({x, other, x}, 1)); }, rand_param({2, 3, 4}, 34)},
      {"reshape", [&](const TD& x) { return project(ad::reshape(x, {6, 4})); }, rand_param({2, 3, 4}, 35)},
      {"slice", [&](const TD& x) { return project(ad::slice(x, 2, 1, 2)); }, rand_param({2, 3, 4}, 36)},
      {"mean_sq_error", [&](const TD& x) { return ad::mean_sq_error(x, target); }, rand_param({2, 1, 4, 4}, 37)},
  };
  double worst = 0.0;
  for (auto& c : cases) {
    const double err = ad::grad_check(c.f, c.x, 1e-5, 200).max_relative_error;
    if (err > worst) {
      worst = err;
      worst_name = c.name;
    }
  }
  return worst;
}

double network_gradients(std::string& worst_name) {
  const WorldSpec world = load_world(kSource + "/worlds/arena.json");
  DatasetOptions opt;
  opt.duration = 2.0;
  opt.seed = 6;
  const auto stacks = make_stacks(generate_dataset(world.map, SensorConfig{}, opt), 3);
  Rng rng(5);
  auto p = build_model<double>(EchoPTConfig::toy(), rng);
  const Batch<double> b = make_batch<double>(p.cfg, {&stacks[0], &stacks[1], &stacks[2]});
  auto loss = [&] { return ad::mean_sq_error(forward_batch(p, b, true), b.targets).item(); };
  auto named = p.named();
  for (auto& np : named) np.tensor->zero_grad();
  ad::backward(ad::mean_sq_error(forward_batch(p, b, true), b.targets));
  const double eps = 1e-7;
  double worst = 0.0;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& np : named) {
    auto& t = *np.tensor;
    const ad::Vec<double> grad = t.grad(), saved = t.value();
    const double gnorm = grad.norm();
    ad::Vec<double> dir(t.size());
    if (gnorm > 1e-12) {
      dir = grad / gnorm;
    } else {
      for (auto& x : dir) x = gauss(rng);
      dir /= dir.norm();
    }
    t.value() = saved + eps * dir;
    const double up = loss();
    t.value() = saved - eps * dir;
    const double down = loss();
    t.value() = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = gnorm > 1e-12 ? std::abs(numeric - gnorm) / gnorm : std::abs(numeric) / 1e-4;
    if (err > worst) {
      worst = err;
      worst_name = np.name;
    }
  }
  return worst;
}

Outcome gradients() {
  const auto t0 = Clock::now();
  std::string prim_name, net_name;
  const double prim = primitive_gradients(prim_name);
  const double net = network_gradients(net_name);
  const double secs = seconds_since(t0);
  return {prim < 1e-6 && net < 1e-4 && secs < 120.0, fmt(secs, 3) + " s, primitives max rel err " + fmt(prim, 3) + " (" + prim_name +
                                         "), toy network " + fmt(net, 3) + " (" + net_name + ")"};
}

// Independent row sums of the full-scale architecture table.
long long table_rows_sum() {
  const long long width = 376 + 8;
  const long long layer = 2 * width + 4 * (width * 384 + 384) + (width * 500 + 500) + (500 * width + width);
  return (375 * 376 + 376) + 2000 * 376 + 2 * width + 8 * layer + 2 * width + width * 125 + (16 * 100 + 16) +
         (32 * 16 * 100 + 32) + 2 * 32 + 16 * 3 * 100 + (16 * 16 * 100 + 16) + (8 * 10 + 10) + (10 * 10 + 10) +
         (10 * 200 + 200) + 16 * 65 * 100 + (16 * 4 * 100 + 4) + (4 * 100 + 1);
}

Outcome parameter_count() {
  Rng rng(1);
  const long long built = count_params(build_model<float>(EchoPTConfig::full_scale(), rng));
  const long long oracle = table_rows_sum();
  const double off = std::abs(built - 9.0e6) / 9.0e6;
  return {built == oracle && off < 0.10, "built " + std::to_string(built) + ", table sum " + std::to_string(oracle) +
                                             ", " + fmt(100.0 * off, 3) + "% from 9M"};
}

struct Pipeline {
  bool data_ok = false;
  bool trained = false;
  double train_seconds = 0.0;
  std::string checkpoint;
  std::string note;
};

Pipeline build_pipeline() {
  Pipeline p;
  const std::string arena = kSource + "/worlds/arena.json", corridor = kSource + "/worlds/corridor.json";
  const std::string cfg = " --config " + kSource + "/configs/dataset.json --sensor " + kSource + "/configs/sensor.json";
  struct Job {
    std::string world, out;
    double duration;
    int seed;
  };
  const std::vector<Job> jobs = {{arena, "train_arena.frames", kTrainArena, 11},
                                 {corridor, "train_corridor.frames", kTrainCorridor, 12},
                                 {arena, "val_arena.frames", kValidation, 13},
                                 {corridor, "val_corridor.frames", kValidation, 14},
                                 {arena, "test_arena.frames", kTest, 15}};
  for (const auto& j : jobs) {
    const int rc = cli("gen-data --world " + j.world + cfg + " --duration " + fmt(j.duration, 6) + " --seed " +
                           std::to_string(j.seed) + " --out " + path(j.out),
                       j.out + ".log");
    if (rc != 0) {
      p.note = "gen-data " + j.out + " exited " + std::to_string(rc);
      return p;
    }
  }
  p.data_ok = true;
  const auto t0 = Clock::now();
  const int rc = cli("train --train " + path("train_arena.frames") + " " + path("train_corridor.frames") + " --val " +
                         path("val_arena.frames") + " " + path("val_corridor.frames") + " --config " + kSource +
                         "/configs/train.json --out " + path("model"),
                     "train.log");
  p.train_seconds = seconds_since(t0);
  p.trained = rc == 0;
  p.checkpoint = path("model/model");
  if (!p.trained) p.note = "train exited " + std::to_string(rc);
  return p;
}

Outcome benchmark(const Pipeline& p) {
  if (!p.trained) return {false, p.note};
  const int rc = cli("bench --data " + path("test_arena.frames") + " --checkpoint " + p.checkpoint + " --out " +
                         path("bench"),
                     "bench.log");
  if (rc != 0) return {false, "bench exited " + std::to_string(rc)};
  std::map<std::string, std::map<int, std::pair<double, double>>> cc;  // method -> horizon -> (cc, nrmsd)
  int n1 = 0;
  for (const auto& r : read_csv(kWork / "bench" / "bench_summary.csv")) {
    const int k = static_cast<int>(num(r, "horizon"));
    cc[r.at("method")][k] = {num(r, "cc_mean"), num(r, "nrmsd_mean")};
    if (k == 1) n1 = static_cast<int>(num(r, "n"));
  }
  std::map<std::string, double> p_cc, p_nr;
  for (const auto& r : read_csv(kWork / "bench" / "bench_pvalues.csv")) {
    if (r.at("horizon") != "1" || r.at("method") != "echopt") continue;
    (r.at("metric") == "cc" ? p_cc : p_nr)[r.at("baseline")] = num(r, "p");
  }
  const auto& e = cc["echopt"][1];
  const auto& f = cc["flow"][1];
  const auto& n = cc["naive"][1];
  const bool order_cc = e.first > f.first && f.first >= n.first;
  const bool order_nr = e.second < f.second && f.second <= n.second;
  const bool significant = p_cc["flow"] < 0.05 && p_cc["naive"] < 0.05;
  bool monotone = true;
  for (const auto& [method, by_k] : cc) {
    double prev = 2.0;
    for (const auto& [k, v] : by_k) {
      monotone = monotone && v.first <= prev;
      prev = v.first;
    }
  }
  const bool fast = p.train_seconds < 900.0;
  const bool pass = order_cc && order_nr && significant && monotone && fast && n1 >= 200;
  std::string detail = "n=" + std::to_string(n1) + " CC echopt/flow/naive " + fmt(e.first) + "/" + fmt(f.first) +
                       "/" + fmt(n.first) + ", NRMSD " + fmt(e.second) + "/" + fmt(f.second) + "/" +
                       fmt(n.second) + ", p(cc) vs flow " + fmt(p_cc["flow"], 3) + " vs naive " +
                       fmt(p_cc["naive"], 3) + ", horizons monotone " + (monotone ? "yes" : "no") +
                       ", training " + fmt(p.train_seconds, 4) + " s";
  return {pass, detail};
}

Outcome zero_motion(const Pipeline& p) {
  const WorldSpec world = load_world(kSource + "/worlds/arena.json");
  const SensorConfig sensor;
  const Dataset test = read_dataset(path("test_arena.frames"));
  Rng rng(404);
  std::vector<FrameStack> stacks;
  for (std::size_t i = 0; i < test.records.size() && stacks.size() < 50; i += test.records.size() / 50) {
    const Energyscape clean = render_energyscape(world.map, test.records[i].pose, sensor);
    FrameStack s;
    for (int f = 0; f < 3; ++f) s.frames.push_back(std::make_shared<Energyscape>(inject_noise(clean, 5.0, rng)));
    s.commands.assign(4, VelocityCommand{});
    stacks.push_back(std::move(s));
  }
  bool exact = true;
  for (const Predictor& a : {Predictor::naive(0.2), Predictor::flow(0.2)}) {
    for (const auto& s : stacks) {
      const Energyscape out = a.predict(s);
      exact = exact && cross_corr_coeff(out, s.newest()).value == 1.0 && nrmsd(out, s.newest()).value == 0.0 &&
              out.data == s.newest().data;
    }
  }
  if (!p.trained) return {false, std::string("analytic identity ") + (exact ? "exact" : "broken") + ", " + p.note};
  const Predictor e = Predictor::echopt(std::make_shared<ModelParams<float>>(load_checkpoint(p.checkpoint)), 0.2);
  double sum = 0.0;
  for (const auto& s : stacks) sum += cross_corr_coeff(e.predict(s), s.newest()).value;
  const double mean = sum / static_cast<double>(stacks.size());
  return {exact && mean > 0.9, std::string("analytic identity ") + (exact ? "exact" : "broken") +
                                   ", EchoPT mean CC " + fmt(mean) + " over " + std::to_string(stacks.size()) +
                                   " stacks"};
}

Outcome slip(const Pipeline& p) {
  if (!p.trained) return {false, p.note};
  const auto t0 = Clock::now();
  const int rc = cli("slip-exp --world " + kSource + "/worlds/slip.json --config " + kSource +
                         "/configs/slip.json --methods naive flow echopt --checkpoint " + p.checkpoint + " --out " +
                         path("slip"),
                     "slip.log");
  const double secs = seconds_since(t0);
  if (rc != 0) return {false, "slip-exp exited " + std::to_string(rc)};
  double both_ratio = 0.0, single_fraction = 0.0;
  for (const auto& r : read_csv(kWork / "slip" / "slip_summary.csv")) {
    if (r.at("method") != "echopt" || r.at("horizon") != "5") continue;
    if (r.at("window") == "0") both_ratio = num(r, "ratio_median");
    if (r.at("window") == "1") single_fraction = num(r, "fraction_above_p95");
  }
  return {both_ratio > 3.0 && single_fraction >= 0.5 && secs < 300.0,
          "EchoPT AR-5 both-wheel median ratio " + fmt(both_ratio) + ", single-wheel share above p95 " +
              fmt(single_fraction) + ", " + fmt(secs, 3) + " s"};
}

Outcome corridor(const Pipeline& p) {
  if (!p.trained) return {false, p.note};
  const auto t0 = Clock::now();
  const int rc = cli("corridor-exp --world " + kSource + "/worlds/corridor.json --config " + kSource +
                         "/configs/corridor.json --runs 20 --checkpoint " + p.checkpoint + " --out " +
                         path("corridor"),
                     "corridor.log");
  const double secs = seconds_since(t0);
  if (rc != 0) return {false, "corridor-exp exited " + std::to_string(rc)};
  std::map<std::string, Row> by;
  for (const auto& r : read_csv(kWork / "corridor" / "corridor_summary.csv")) by[r.at("condition")] = r;
  const double tc = num(by["clean"], "median_travel_time"), tp = num(by["noisy+prediction"], "median_travel_time"),
               tn = num(by["noisy"], "median_travel_time");
  const double dc = num(by["clean"], "median_abs_deviation"),
               dp = num(by["noisy+prediction"], "median_abs_deviation"), dn = num(by["noisy"], "median_abs_deviation");
  const double stops = num(by["noisy"], "mean_gate_stops");
  const bool time_order = tc < tp && tp < tn;
  const bool dev_order = dc <= dp && dp < dn;
  return {time_order && dev_order && stops >= 1.0 && secs < 900.0,
          "travel time clean/pred/noisy " + fmt(tc) + "/" + fmt(tp) + "/" + fmt(tn) + " s, |deviation| " + fmt(dc, 3) +
              "/" + fmt(dp, 3) + "/" + fmt(dn, 3) + " m, noisy stops per run " + fmt(stops, 3) + ", " +
              fmt(secs, 3) + " s"};
}

Outcome bursts() {
  const CorridorExperimentConfig cfg;
  const double duration = 3600.0;
  const BurstSchedule s = BurstSchedule::periodic(duration, cfg.burst_period, cfg.burst_length, cfg.frame_period, 9);
  const int frames = static_cast<int>(std::lround(duration / cfg.frame_period));
  std::vector<bool> noisy(static_cast<std::size_t>(frames));
  int flagged = 0;
  for (int i = 0; i < frames; ++i) {
    noisy[static_cast<std::size_t>(i)] = noise_schedule(i * cfg.frame_period, s) == cfg.burst_snr_db;
    flagged += noisy[static_cast<std::size_t>(i)];
  }
  // Lengths of the maximal noisy runs on the frame grid.
  int runs = 0, bad_runs = 0;
  for (int i = 0; i < frames;) {
    if (!noisy[static_cast<std::size_t>(i)]) {
      ++i;
      continue;
    }
    int j = i;
    while (j < frames && noisy[static_cast<std::size_t>(j)]) ++j;
    ++runs;
    bad_runs += std::abs((j - i) * cfg.frame_period - cfg.burst_length) > 1e-9;
    i = j;
  }
  const double duty = static_cast<double>(flagged) / frames;
  return {std::abs(duty - 0.3) <= 0.05 * 0.3 && bad_runs == 0 && runs > 0,
          "duty " + fmt(duty) + ", " + std::to_string(runs - bad_runs) + "/" + std::to_string(runs) +
              " bursts exactly 1.2 s"};
}

Outcome determinism(const Pipeline& p) {
  if (!p.trained) return {false, p.note};
  const std::vector<std::pair<std::string, std::string>> reruns = {
      {"bench", "bench --data " + path("test_arena.frames") + " --checkpoint " + p.checkpoint + " --out " +
                    path("bench_rerun")},
      {"slip", "slip-exp --world " + kSource + "/worlds/slip.json --config " + kSource +
                   "/configs/slip.json --methods naive flow echopt --checkpoint " + p.checkpoint + " --out " +
                   path("slip_rerun")},
      {"corridor", "corridor-exp --world " + kSource + "/worlds/corridor.json --config " + kSource +
                       "/configs/corridor.json --runs 20 --checkpoint " + p.checkpoint + " --out " +
                       path("corridor_rerun")}};
  int compared = 0;
  std::string mismatch;
  for (const auto& [name, args] : reruns) {
    if (cli(args, name + "_rerun.log") != 0) return {false, name + " rerun failed"};
    for (const auto& entry : fs::directory_iterator(kWork / name)) {
      if (entry.path().extension() != ".csv") continue;
      const fs::path twin = kWork / (name + "_rerun") / entry.path().filename();
      ++compared;
      if (slurp(entry.path()) != slurp(twin)) mismatch += " " + name + "/" + entry.path().filename().string();
    }
  }
  return {mismatch.empty() && compared > 0,
          std::to_string(compared) + " CSVs compared" + (mismatch.empty() ? ", all byte-identical" : ", differ:" + mismatch)};
}

}  // namespace

int main() {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& run) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << " " << name << ": " << (o.pass ? "PASS" : "FAIL") << " (" << o.detail << ") ["
              << fmt(seconds_since(t0), 4) << " s]" << std::endl;
  };
  report(1, "flow-line invariant", flow_line_invariant);
  report(2, "pure rotation", pure_rotation);
  report(3, "gradient correctness", gradients);
  report(4, "parameter count", parameter_count);
  Pipeline pipe;
  try {
    pipe = build_pipeline();
  } catch (const std::exception& e) {
    pipe.note = std::string("pipeline error: ") + e.what();
  }
  report(5, "prediction benchmark", [&] { return benchmark(pipe); });
  report(6, "zero-motion identity", [&] { return zero_motion(pipe); });
  report(7, "slip detection", [&] { return slip(pipe); });
  report(8, "corridor following", [&] { return corridor(pipe); });
  report(9, "burst schedule", bursts);
  report(10, "determinism", [&] { return determinism(pipe); });
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
