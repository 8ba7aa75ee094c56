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

#include "echopt/predictive.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>

#include "echopt/flow_predict.hpp"
#include "echopt/metrics.hpp"

namespace echopt {

std::string method_name(Method m) {
  switch (m) {
    case Method::naive:
      return "naive";
    case Method::flow:
      return "flow";
    case Method::echopt:
      return "echopt";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + name + "' (expected naive, flow or echopt)");
}

Predictor Predictor::naive(double frame_period) {
  Predictor p;
  p.method_ = Method::naive;
  p.frame_period_ = frame_period;
  return p;
}

Predictor Predictor::flow(double frame_period) {
  Predictor p = naive(frame_period);
  p.method_ = Method::flow;
  return p;
}

Predictor Predictor::echopt(std::shared_ptr<ModelParams<float>> params, double frame_period) {
  if (!params) throw std::invalid_argument("Predictor::echopt: missing model parameters");
  Predictor p = naive(frame_period);
  p.method_ = Method::echopt;
  p.params_ = std::move(params);
  return p;
}

int Predictor::history_length() const { return method_ == Method::echopt ? params_->cfg.n_frames : 1; }

Energyscape Predictor::predict(const FrameStack& stack) const {
  if (stack.frames.empty() || stack.commands.size() != stack.frames.size() + 1) {
    throw std::invalid_argument("Predictor::predict: need k frames and k + 1 commands");
  }
  const VelocityCommand& next = stack.commands.back();
  switch (method_) {
    case Method::naive:
      return naive_shift(stack.newest(), next, frame_period_);
    case Method::flow:
      return flow_warp(stack.newest(), next, frame_period_);
    case Method::echopt: {
      const int n = params_->cfg.n_frames;
      if (static_cast<int>(stack.frames.size()) == n) return forward(*params_, stack);
      if (static_cast<int>(stack.frames.size()) < n) {
        throw std::invalid_argument("Predictor::predict: EchoPT needs " + std::to_string(n) + " frames");
      }
      FrameStack tail;
      tail.frames.assign(stack.frames.end() - n, stack.frames.end());
      tail.commands.assign(stack.commands.end() - (n + 1), stack.commands.end());
      return forward(*params_, tail);
    }
  }
  throw std::logic_error("unreachable");
}

std::vector<Energyscape> predict_ar(const Predictor& p, const FrameStack& history,
                                    const std::vector<VelocityCommand>& future_cmds, int k) {
  if (k < 1) throw std::invalid_argument("predict_ar: horizon must be at least 1");
  if (static_cast<int>(future_cmds.size()) < k) throw std::invalid_argument("predict_ar: fewer commands than horizon");
  const int n = p.history_length();
  if (static_cast<int>(history.frames.size()) < n || history.commands.size() < history.frames.size()) {
    throw std::invalid_argument("predict_ar: history needs " + std::to_string(n) +
                                " frames and one command per frame");
  }
  std::deque<ScapePtr> frames(history.frames.end() - n, history.frames.end());
  const std::size_t first = history.frames.size() - static_cast<std::size_t>(n);
  std::deque<VelocityCommand> cmds(history.commands.begin() + static_cast<std::ptrdiff_t>(first),
                                   history.commands.begin() + static_cast<std::ptrdiff_t>(history.frames.size()));
  std::vector<Energyscape> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    FrameStack stack;
    stack.frames.assign(frames.begin(), frames.end());
    stack.commands.assign(cmds.begin(), cmds.end());
    stack.commands.push_back(future_cmds[static_cast<std::size_t>(i)]);
    out.push_back(p.predict(stack));
    frames.pop_front();
    frames.push_back(std::make_shared<const Energyscape>(out.back()));
    cmds.pop_front();
    cmds.push_back(future_cmds[static_cast<std::size_t>(i)]);
  }
  return out;
}

double slip_error_signal(const Energyscape& predicted, const Energyscape& measured) {
  const MetricValue cc = cross_corr_coeff(predicted, measured);
  const double diff = (predicted.data - measured.data).norm();
  if (!cc.defined || std::abs(cc.value) < 1e-6) return diff == 0.0 ? 0.0 : kSlipErrorCeiling;
  return std::min(diff / std::sqrt(std::abs(cc.value)), kSlipErrorCeiling);
}

double peak_to_median_db(const Energyscape& scape) {
  if (scape.data.size() == 0) return -kInf;
  const double peak = scape.data.maxCoeff();
  if (!(peak > 0.0)) return -kInf;
  const double median = scape.noise_floor_estimate();
  if (!(median > 0.0)) return kInf;
  return 10.0 * std::log10(peak / median);
}

bool data_validity_gate(const Energyscape& scape, const GateConfig& gate) {
  return peak_to_median_db(scape) > gate.threshold_db;
}

VelocityCommand corridor_controller(const Energyscape& scape, const Pose2D& pose, double waypoint_x,
                                    double waypoint_y, const ControllerGains& gains, const GateConfig& gate) {
  if (!data_validity_gate(scape, gate)) return {};
  const double floor = scape.noise_floor_estimate();
  const double dr = scape.range_bin_width(), dth = scape.azimuth_bin_width();
  double left_w = 0.0, left_r = 0.0, right_w = 0.0, right_r = 0.0;
  for (int k = 0; k < scape.num_ranges(); ++k) {
    const double r = (k + 0.5) * dr;
    if (r < gains.range_min || r > gains.range_max) continue;
    for (int j = 0; j < scape.num_azimuths(); ++j) {
      const double e = scape.data(k, j) - floor;
      if (e <= 0.0) continue;
      const double theta = -0.5 * scape.fov + (j + 0.5) * dth;
      if (theta > 0.0) {
        left_w += e;
        left_r += e * r;
      } else if (theta < 0.0) {
        right_w += e;
        right_r += e * r;
      }
    }
  }
  const double c_left = left_w > 0.0 ? left_r / left_w : gains.range_max;
  const double c_right = right_w > 0.0 ? right_r / right_w : gains.range_max;
  const double bearing = wrap_angle(std::atan2(waypoint_y - pose.y, waypoint_x - pose.x) - pose.heading);
  const double omega = gains.k_balance * (c_left - c_right) + gains.k_waypoint * bearing;
  return {gains.forward_speed, std::clamp(omega, -gains.omega_max, gains.omega_max)};
}

// ----------------------------------------------------------------- bench

std::vector<BenchSample> run_bench(const Dataset& data, const std::vector<Predictor>& predictors,
                                   const BenchConfig& cfg) {
  if (cfg.horizons.empty() || cfg.sequences < 1) throw std::invalid_argument("run_bench: nothing to evaluate");
  const int max_k = *std::max_element(cfg.horizons.begin(), cfg.horizons.end());
  const int n = cfg.n_frames;
  const int count = static_cast<int>(data.records.size());
  const int last_start = count - n - max_k;
  if (last_start < 0) {
    throw std::invalid_argument("run_bench: dataset of " + std::to_string(count) + " frames is too short for horizon " +
                                std::to_string(max_k));
  }
  const int sequences = std::min(cfg.sequences, last_start + 1);
  std::vector<BenchSample> out;
  for (int s = 0; s < sequences; ++s) {
    const int start =
        sequences == 1 ? 0 : static_cast<int>((static_cast<long long>(s) * last_start) / (sequences - 1));
    FrameStack hist;
    for (int f = start; f < start + n; ++f) {
      hist.frames.push_back(data.records[static_cast<std::size_t>(f)].scape);
      hist.commands.push_back(data.records[static_cast<std::size_t>(f)].commanded);
    }
    std::vector<VelocityCommand> future;
    for (int f = start + n; f < start + n + max_k; ++f) future.push_back(data.records[static_cast<std::size_t>(f)].commanded);
    for (const Predictor& p : predictors) {
      // One rollout to the longest horizon serves every shorter one.
      const auto preds = predict_ar(p, hist, future, max_k);
      for (int k : cfg.horizons) {
        const Energyscape& truth = *data.records[static_cast<std::size_t>(start + n + k - 1)].scape;
        const Energyscape& pred = preds[static_cast<std::size_t>(k - 1)];
        out.push_back({p.method(), k, start, cross_corr_coeff(pred, truth).value, nrmsd(pred, truth).value});
      }
    }
  }
  return out;
}

// ----------------------------------------------------------------- slip

namespace {

VelocityCommand script_command(const std::vector<ScriptStep>& script, double t) {
  VelocityCommand cmd;
  for (const auto& step : script) {
    if (step.start <= t + 1e-9) cmd = step.cmd;
  }
  return cmd;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

SlipResult slip_experiment(const WorldSpec& world, const SensorConfig& sensor, const SlipExperimentConfig& cfg,
                           const std::vector<Predictor>& predictors) {
  if (!(cfg.frame_period > 0.0) || !(cfg.duration > cfg.frame_period)) {
    throw std::invalid_argument("slip_experiment: duration must exceed the frame period");
  }
  const int steps = static_cast<int>(std::llround(cfg.duration / cfg.frame_period)) + 1;
  Rng noise_rng(mix_seed(cfg.seed, 1));

  SlipResult res;
  std::vector<ScapePtr> measured;
  Pose2D pose = cfg.start;
  for (int i = 0; i < steps; ++i) {
    const double t = i * cfg.frame_period;
    VelocityCommand cmd, exec;
    int active = -1;
    if (i > 0) {
      const double t_prev = (i - 1) * cfg.frame_period;
      cmd = script_command(cfg.script, t_prev);
      SlipState slip;
      for (std::size_t w = 0; w < cfg.windows.size(); ++w) {
        const auto& win = cfg.windows[w];
        if (t_prev + 1e-9 >= win.start && t_prev + 1e-9 < win.start + win.length) {
          slip = win.slip;
          active = static_cast<int>(w);
        }
      }
      exec = executed_command(cmd, slip, cfg.wheel_base);
      pose = step_kinematics(pose, cmd, cfg.frame_period, slip, cfg.wheel_base);
    }
    res.times.push_back(t);
    res.window.push_back(active);
    res.commanded.push_back(cmd);
    res.executed.push_back(exec);
    res.poses.push_back(pose);
    measured.push_back(
        std::make_shared<const Energyscape>(inject_noise(render_energyscape(world.map, pose, sensor, t), cfg.snr_db,
                                                         noise_rng)));
  }

  for (const Predictor& p : predictors) {
    const int n = p.history_length();
    for (int k : cfg.horizons) {
      SlipSeries s{p.method(), k, std::vector<double>(static_cast<std::size_t>(steps),
                                                      std::numeric_limits<double>::quiet_NaN())};
      for (int i = n + k - 1; i < steps; ++i) {
        FrameStack hist;
        for (int f = i - k - n + 1; f <= i - k; ++f) {
          hist.frames.push_back(measured[static_cast<std::size_t>(f)]);
          hist.commands.push_back(res.commanded[static_cast<std::size_t>(f)]);
        }
        std::vector<VelocityCommand> future(res.commanded.begin() + (i - k + 1), res.commanded.begin() + i + 1);
        const auto preds = predict_ar(p, hist, future, k);
        s.eps[static_cast<std::size_t>(i)] = slip_error_signal(preds.back(), *measured[static_cast<std::size_t>(i)]);
      }
      res.series.push_back(std::move(s));
    }
  }
  return res;
}

double median(std::vector<double> values) { return percentile(std::move(values), 0.5); }

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<SlipWindowStats> summarize_slip(const SlipResult& result, const SlipExperimentConfig& cfg,
                                            int echopt_frames) {
  std::vector<SlipWindowStats> out;
  const std::size_t steps = result.times.size();
  for (const auto& series : result.series) {
    const int n = series.method == Method::echopt ? echopt_frames : 1;
    const int tail = n + series.horizon;
    std::vector<bool> excluded(steps, false);
    for (std::size_t i = 0; i < steps; ++i) {
      if (result.window[i] < 0) continue;
      for (std::size_t j = i; j < std::min(steps, i + static_cast<std::size_t>(tail) + 1); ++j) excluded[j] = true;
    }
    std::vector<double> outside;
    for (std::size_t i = 0; i < steps; ++i) {
      if (!excluded[i] && !std::isnan(series.eps[i])) outside.push_back(series.eps[i]);
    }
    const double med_out = median(outside);
    const double p95 = percentile(outside, 0.95);
    for (std::size_t w = 0; w < cfg.windows.size(); ++w) {
      std::vector<double> inside;
      for (std::size_t i = 0; i < steps; ++i) {
        if (result.window[i] == static_cast<int>(w) && !std::isnan(series.eps[i])) inside.push_back(series.eps[i]);
      }
      const auto above = std::count_if(inside.begin(), inside.end(), [&](double e) { return e > p95; });
      out.push_back({series.method, series.horizon, static_cast<int>(w), median(inside), med_out, p95,
                     inside.empty() ? 0.0 : static_cast<double>(above) / static_cast<double>(inside.size())});
    }
  }
  return out;
}

// ----------------------------------------------------------------- corridor

std::string condition_name(Condition c) {
  switch (c) {
    case Condition::clean:
      return "clean";
    case Condition::noisy:
      return "noisy";
    case Condition::noisy_prediction:
      return "noisy+prediction";
  }
  return "unknown";
}

Condition parse_condition(const std::string& name) {
  for (Condition c : {Condition::clean, Condition::noisy, Condition::noisy_prediction}) {
    if (condition_name(c) == name) return c;
  }
  throw std::invalid_argument("unknown condition '" + name + "' (expected clean, noisy or noisy+prediction)");
}

namespace {

CorridorRun corridor_run(const WorldSpec& world, const SensorConfig& sensor, const CorridorExperimentConfig& cfg,
                         Condition condition, int run, const Pose2D& spawn, const BurstSchedule& schedule,
                         const std::optional<Predictor>& predictor) {
  CorridorRun out;
  out.condition = condition;
  out.run = run;
  out.travel_time = cfg.timeout;
  Rng noise_rng(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(run)));

  const int n = predictor ? predictor->history_length() : 0;
  std::deque<ScapePtr> frames;
  std::deque<VelocityCommand> cmds;
  Pose2D pose = spawn;
  VelocityCommand last_cmd;
  bool was_rejected = false;
  const int steps = static_cast<int>(std::floor(cfg.timeout / cfg.frame_period + 1e-9));
  for (int i = 0; i <= steps; ++i) {
    const double t = i * cfg.frame_period;
    out.times.push_back(t);
    out.trajectory.push_back(pose);
    if (pose.x >= world.corridor_x_start && pose.x <= world.corridor_x_end) {
      out.midline_deviations.push_back(pose.y - world.midline_y);
    }
    if (std::hypot(pose.x - world.waypoint_x, pose.y - world.waypoint_y) < world.arrival_radius) {
      out.arrived = true;
      out.travel_time = t;
      break;
    }
    if (!world.map.bounds.contains(pose.x, pose.y)) break;  // left the world; counted as a failed run

    const Energyscape clean = render_energyscape(world.map, pose, sensor, t);
    const double snr = condition == Condition::clean ? cfg.base_snr_db : noise_schedule(t, schedule);
    auto measured = std::make_shared<const Energyscape>(inject_noise(clean, snr, noise_rng));
    ScapePtr control = measured;
    const bool valid = data_validity_gate(*measured, cfg.gate);
    if (!valid) ++out.rejected_frames;
    if (!valid && condition == Condition::noisy_prediction && predictor &&
        static_cast<int>(frames.size()) == n) {
      FrameStack stack;
      stack.frames.assign(frames.begin(), frames.end());
      stack.commands.assign(cmds.begin(), cmds.end());
      stack.commands.push_back(last_cmd);
      control = std::make_shared<const Energyscape>(predictor->predict(stack));
    }
    if (condition == Condition::noisy_prediction) {
      frames.push_back(control);
      cmds.push_back(last_cmd);
      if (static_cast<int>(frames.size()) > n) {
        frames.pop_front();
        cmds.pop_front();
      }
    }
    const bool rejected = !data_validity_gate(*control, cfg.gate);
    if (rejected && !was_rejected) ++out.gate_stops;
    was_rejected = rejected;
    const VelocityCommand cmd =
        corridor_controller(*control, pose, world.waypoint_x, world.waypoint_y, cfg.gains, cfg.gate);
    pose = step_kinematics(pose, cmd, cfg.frame_period, {}, cfg.wheel_base);
    last_cmd = cmd;
  }
  return out;
}

}  // namespace

std::vector<CorridorRun> corridor_experiment(const WorldSpec& world, const SensorConfig& sensor,
                                             const CorridorExperimentConfig& cfg,
                                             const std::optional<Predictor>& predictor) {
  if (cfg.runs < 1) throw std::invalid_argument("corridor_experiment: runs must be positive");
  for (Condition c : cfg.conditions) {
    if (c == Condition::noisy_prediction && (!predictor || predictor->method() != Method::echopt)) {
      throw std::invalid_argument("corridor_experiment: noisy+prediction needs an EchoPT predictor");
    }
  }
  std::vector<CorridorRun> runs;
  for (int r = 0; r < cfg.runs; ++r) {
    Rng spawn_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(r)));
    std::uniform_real_distribution<double> ux(world.spawn.x_min, world.spawn.x_max);
    std::uniform_real_distribution<double> uy(world.spawn.y_min, world.spawn.y_max);
    std::uniform_real_distribution<double> uh(-1.0, 1.0);
    Pose2D spawn;
    spawn.x = ux(spawn_rng);
    spawn.y = uy(spawn_rng);
    spawn.heading = wrap_angle(world.spawn_heading + world.spawn_heading_spread * uh(spawn_rng));
    const BurstSchedule schedule =
        BurstSchedule::periodic(cfg.timeout + cfg.frame_period, cfg.burst_period, cfg.burst_length, cfg.frame_period,
                                mix_seed(cfg.seed, 500 + static_cast<std::uint64_t>(r)));
    BurstSchedule sched = schedule;
    sched.burst_snr_db = cfg.burst_snr_db;
    sched.base_snr_db = cfg.base_snr_db;
    for (Condition c : cfg.conditions) {
      runs.push_back(corridor_run(world, sensor, cfg, c, r, spawn, sched, predictor));
    }
  }
  return runs;
}

std::vector<CorridorSummary> summarize_corridor(const std::vector<CorridorRun>& runs) {
  std::vector<CorridorSummary> out;
  for (Condition c : {Condition::clean, Condition::noisy, Condition::noisy_prediction}) {
    CorridorSummary s;
    s.condition = c;
    std::vector<double> times, deviations;
    double stops = 0.0;
    for (const auto& r : runs) {
      if (r.condition != c) continue;
      ++s.runs;
      if (r.arrived) ++s.arrivals;
      times.push_back(r.travel_time);
      for (double d : r.midline_deviations) deviations.push_back(std::abs(d));
      stops += r.gate_stops;
    }
    if (s.runs == 0) continue;
    s.median_travel_time = median(times);
    s.median_abs_deviation = median(deviations);
    s.mean_gate_stops = stops / s.runs;
    out.push_back(s);
  }
  return out;
}

}  // namespace echopt
