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

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "echopt/dataset.hpp"
#include "echopt/echopt_net.hpp"
#include "echopt/sonar_sim.hpp"

namespace echopt {

// A reflector world with the experiment geometry around it.
struct WorldSpec {
  std::string name;
  ReflectorMap map;
  Bounds spawn;                      // spawn box for random starts
  double spawn_heading = 0.0;        // mean spawn heading
  double spawn_heading_spread = 0.0; // uniform half-width around it
  double waypoint_x = 0.0;
  double waypoint_y = 0.0;
  double arrival_radius = 0.5;
  double midline_y = 0.0;            // corridor centre line
  double corridor_x_start = 0.0;     // midline deviation is sampled for x in [start, end]
  double corridor_x_end = 0.0;
};

enum class Method { naive, flow, echopt };
inline constexpr std::array<Method, 3> kAllMethods = {Method::naive, Method::flow, Method::echopt};

std::string method_name(Method m);
Method parse_method(const std::string& name);

// Next-frame predictor behind one interface. The analytic predictors use only
// the newest frame and the final command of the stack.
class Predictor {
 public:
  static Predictor naive(double frame_period);
  static Predictor flow(double frame_period);
  static Predictor echopt(std::shared_ptr<ModelParams<float>> params, double frame_period);

  Method method() const { return method_; }
  // Frames of history the predictor consumes.
  int history_length() const;
  double frame_period() const { return frame_period_; }

  // Stack: history frames (oldest first), the commands that led into each of
  // them and the command to predict through.
  Energyscape predict(const FrameStack& stack) const;

 private:
  Method method_ = Method::naive;
  double frame_period_ = 0.2;
  std::shared_ptr<ModelParams<float>> params_;
};

// Auto-regressive rollout. `history` supplies the frames and the commands that
// led into them (a trailing next command, if present, is ignored); step i
// predicts through future_cmds[i], and every prediction joins the history.
std::vector<Energyscape> predict_ar(const Predictor& p, const FrameStack& history,
                                    const std::vector<VelocityCommand>& future_cmds, int k);

inline constexpr double kSlipErrorCeiling = 1e9;

// ||I_p - I_m|| / sqrt(|CC(I_p, I_m)|), capped at kSlipErrorCeiling when |CC| < 1e-6.
double slip_error_signal(const Energyscape& predicted, const Energyscape& measured);

// Peak-to-median energy ratio in dB; -inf for an all-zero scape.
double peak_to_median_db(const Energyscape& scape);

struct GateConfig {
  double threshold_db = 12.0;
};

bool data_validity_gate(const Energyscape& scape, const GateConfig& gate = {});

struct ControllerGains {
  double k_balance = 1.0;    // rad/s per metre of left-right centroid difference
  double k_waypoint = 0.5;   // rad/s per radian of waypoint bearing
  double forward_speed = 0.3;
  double range_min = 0.3;    // range window for the balance term
  double range_max = 2.5;
  double omega_max = 1.0;
};

// Energy balance steering plus waypoint bearing; (0, 0) when the gate rejects the scape.
VelocityCommand corridor_controller(const Energyscape& scape, const Pose2D& pose, double waypoint_x,
                                    double waypoint_y, const ControllerGains& gains, const GateConfig& gate);

// ----------------------------------------------------------------- bench

struct BenchConfig {
  std::vector<int> horizons = {1, 3, 5, 10};
  int sequences = 200;  // evenly spaced start positions through the dataset
  int n_frames = 3;     // history length shared by all methods
};

struct BenchSample {
  Method method = Method::naive;
  int horizon = 1;
  int start = 0;  // index of the oldest history frame
  double cc = 0.0;
  double nrmsd = 0.0;
};

// For every start position and horizon k, rolls each predictor k steps from the
// measured history and scores the last prediction against the measured frame.
std::vector<BenchSample> run_bench(const Dataset& data, const std::vector<Predictor>& predictors,
                                   const BenchConfig& cfg);

// ----------------------------------------------------------------- slip

struct SlipWindow {
  double start = 0.0;
  double length = 6.0;
  SlipState slip;
};

struct ScriptStep {
  double start = 0.0;  // seconds; command holds until the next step starts
  VelocityCommand cmd;
};

struct SlipExperimentConfig {
  double duration = 45.0;
  double frame_period = 0.2;
  double snr_db = 5.0;
  double wheel_base = 0.3;
  Pose2D start;
  std::vector<ScriptStep> script;
  std::vector<SlipWindow> windows = {{10.0, 6.0, {0.8, 0.8}}, {30.0, 6.0, {0.6, 0.0}}};
  std::vector<int> horizons = {1, 3, 5};
  std::uint64_t seed = 1;
};

struct SlipSeries {
  Method method = Method::naive;
  int horizon = 1;
  std::vector<double> eps;  // NaN until enough history exists
};

struct SlipResult {
  std::vector<double> times;
  std::vector<int> window;  // index of the active slip window, -1 outside
  std::vector<VelocityCommand> commanded;
  std::vector<VelocityCommand> executed;
  std::vector<Pose2D> poses;
  std::vector<SlipSeries> series;
};

// Drives the scripted commands with slip applied to the executed motion only;
// predictors see the commanded stream. For horizon k the prediction of frame t
// uses measured frames up to t - k.
SlipResult slip_experiment(const WorldSpec& world, const SensorConfig& sensor, const SlipExperimentConfig& cfg,
                           const std::vector<Predictor>& predictors);

struct SlipWindowStats {
  Method method = Method::naive;
  int horizon = 1;
  int window = 0;
  double median_in = 0.0;
  double median_out = 0.0;
  double p95_out = 0.0;
  double fraction_above_p95 = 0.0;  // share of in-window samples above p95_out
};

// Out-of-window samples skip n_frames + horizon frames after each window, while
// the slipped motion is still inside the prediction history.
std::vector<SlipWindowStats> summarize_slip(const SlipResult& result, const SlipExperimentConfig& cfg,
                                            int echopt_frames);

double median(std::vector<double> values);
double percentile(std::vector<double> values, double q);  // linear interpolation, q in [0, 1]

// ----------------------------------------------------------------- corridor

enum class Condition { clean, noisy, noisy_prediction };
std::string condition_name(Condition c);
Condition parse_condition(const std::string& name);

struct CorridorExperimentConfig {
  int runs = 20;
  double frame_period = 0.2;
  double timeout = 120.0;
  double wheel_base = 0.3;
  double burst_period = 4.0;  // one 1.2 s burst per period gives a 30% duty
  double burst_length = 1.2;
  double burst_snr_db = -80.0;
  double base_snr_db = 5.0;
  ControllerGains gains;
  GateConfig gate;
  std::vector<Condition> conditions = {Condition::clean, Condition::noisy, Condition::noisy_prediction};
  std::uint64_t seed = 1;
};

struct CorridorRun {
  Condition condition = Condition::clean;
  int run = 0;
  bool arrived = false;
  double travel_time = 0.0;  // timeout value for failed runs
  int gate_stops = 0;        // transitions from valid to rejected data
  int rejected_frames = 0;
  std::vector<double> times;
  std::vector<Pose2D> trajectory;
  std::vector<double> midline_deviations;  // signed y - midline
};

// Runs every condition for cfg.runs spawns; run r of every condition shares its
// spawn pose and burst schedule. noisy_prediction needs an EchoPT predictor.
std::vector<CorridorRun> corridor_experiment(const WorldSpec& world, const SensorConfig& sensor,
                                             const CorridorExperimentConfig& cfg,
                                             const std::optional<Predictor>& predictor);

struct CorridorSummary {
  Condition condition = Condition::clean;
  int runs = 0;
  int arrivals = 0;
  double median_travel_time = 0.0;
  double median_abs_deviation = 0.0;  // pooled over every sample of every run
  double mean_gate_stops = 0.0;
};

std::vector<CorridorSummary> summarize_corridor(const std::vector<CorridorRun>& runs);

}  // namespace echopt
