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

#include "echopt/sonar_sim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace echopt {

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw std::invalid_argument(std::string("non-finite ") + what);
  }
}

double sinc_squared(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double s = std::sin(kPi * x) / (kPi * x);
  return s * s;
}

}  // namespace

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

void ReflectorMap::validate() const {
  for (std::size_t i = 0; i < reflectors.size(); ++i) {
    const auto& r = reflectors[i];
    std::ostringstream msg;
    msg << "reflector " << i << ": ";
    if (!std::isfinite(r.x) || !std::isfinite(r.y) || !std::isfinite(r.radius) ||
        !std::isfinite(r.reflectivity)) {
      msg << "non-finite field";
      throw std::invalid_argument(msg.str());
    }
    if (r.radius < 0.0) {
      msg << "negative radius " << r.radius;
      throw std::invalid_argument(msg.str());
    }
    if (r.reflectivity <= 0.0 || r.reflectivity > 1.0) {
      msg << "reflectivity " << r.reflectivity << " outside (0, 1]";
      throw std::invalid_argument(msg.str());
    }
    if (!bounds.contains(r.x, r.y)) {
      msg << "position (" << r.x << ", " << r.y << ") outside bounds";
      throw std::invalid_argument(msg.str());
    }
  }
}

void SensorConfig::validate() const {
  if (num_ranges <= 0 || num_azimuths <= 0) throw std::invalid_argument("grid dimensions must be positive");
  if (!(r_max > 0.0) || !(range_sigma > 0.0) || !(beam_null_spacing > 0.0) || !(directivity_sigma > 0.0) ||
      !(r_min > 0.0)) {
    throw std::invalid_argument("sensor lengths and widths must be positive");
  }
  if (!(fov > 0.0) || fov > kPi) throw std::invalid_argument("fov must lie in (0, pi]");
}

double SensorConfig::floor_level() const { return std::pow(10.0, -floor_db / 10.0); }

double Energyscape::noise_floor_estimate() const {
  if (data.size() == 0) return 0.0;
  std::vector<double> v(data.data(), data.data() + data.size());
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

bool Energyscape::is_valid() const {
  return data.allFinite() && (data.size() == 0 || data.minCoeff() >= 0.0);
}

Energyscape blank_scape(const SensorConfig& sensor, double fill, double t) {
  return Energyscape(Grid::Constant(sensor.num_ranges, sensor.num_azimuths, fill), sensor, t);
}

VelocityCommand executed_command(const VelocityCommand& cmd, const SlipState& slip, double wheel_base) {
  const double half = 0.5 * wheel_base;
  const double v_left = (cmd.v_lin - cmd.omega_r * half) * (1.0 - slip.left);
  const double v_right = (cmd.v_lin + cmd.omega_r * half) * (1.0 - slip.right);
  return {0.5 * (v_left + v_right), (v_right - v_left) / wheel_base};
}

Eigen::Vector3d arc_displacement(const VelocityCommand& cmd, double dt) {
  const double dphi = cmd.omega_r * dt;
  if (std::abs(dphi) < 1e-12) {
    return {cmd.v_lin * dt, 0.0, dphi};
  }
  const double radius = cmd.v_lin / cmd.omega_r;
  return {radius * std::sin(dphi), radius * (1.0 - std::cos(dphi)), dphi};
}

Pose2D step_kinematics(const Pose2D& pose, const VelocityCommand& cmd, double dt, const SlipState& slip,
                       double wheel_base) {
  require_finite(pose.x, "pose.x");
  require_finite(pose.y, "pose.y");
  require_finite(pose.heading, "pose.heading");
  require_finite(cmd.v_lin, "v_lin");
  require_finite(cmd.omega_r, "omega_r");
  require_finite(dt, "dt");
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(wheel_base > 0.0)) throw std::invalid_argument("wheel_base must be positive");
  if (slip.left < 0.0 || slip.left > 1.0 || slip.right < 0.0 || slip.right > 1.0) {
    throw std::invalid_argument("slip must lie in [0, 1]");
  }

  const VelocityCommand exec = executed_command(cmd, slip, wheel_base);
  const double w = exec.omega_r;
  const double h = pose.heading;
  Pose2D next = pose;
  if (std::abs(w * dt) < 1e-12) {
    next.x += exec.v_lin * dt * std::cos(h);
    next.y += exec.v_lin * dt * std::sin(h);
  } else {
    const double radius = exec.v_lin / w;
    next.x += radius * (std::sin(h + w * dt) - std::sin(h));
    next.y -= radius * (std::cos(h + w * dt) - std::cos(h));
  }
  next.heading = wrap_angle(h + w * dt);
  return next;
}

SensorHit to_sensor_frame(const Reflector& refl, const Pose2D& pose) {
  const double dx = refl.x - pose.x;
  const double dy = refl.y - pose.y;
  const double c = std::cos(pose.heading);
  const double s = std::sin(pose.heading);
  const double xs = c * dx + s * dy;
  const double ys = -s * dx + c * dy;
  return {std::max(std::hypot(xs, ys) - refl.radius, 0.0), std::atan2(ys, xs)};
}

double deposit_amplitude(const SensorHit& hit, double reflectivity, const SensorConfig& sensor) {
  double directivity = 1.0;
  if (std::isfinite(sensor.directivity_sigma)) {
    const double z = hit.azimuth / sensor.directivity_sigma;
    directivity = std::exp(-0.5 * z * z);
  }
  const double r = std::max(hit.range, sensor.r_min);
  return reflectivity * directivity / (r * r);
}

Energyscape render_energyscape(const ReflectorMap& world, const Pose2D& pose, const SensorConfig& sensor,
                               double timestamp) {
  require_finite(pose.x, "pose.x");
  require_finite(pose.y, "pose.y");
  require_finite(pose.heading, "pose.heading");

  const int nr = sensor.num_ranges;
  const int na = sensor.num_azimuths;
  Grid grid = Grid::Constant(nr, na, sensor.floor_level());

  // Sidelobes of reflectors slightly outside the field of view still leak in.
  const double azimuth_margin = 4.0 * sensor.beam_null_spacing;
  const double range_margin = 5.0 * sensor.range_sigma;
  Eigen::VectorXd range_profile(nr);
  Eigen::RowVectorXd azimuth_profile(na);

  for (const auto& refl : world.reflectors) {
    const SensorHit hit = to_sensor_frame(refl, pose);
    if (hit.range > sensor.r_max + range_margin) continue;
    if (std::abs(hit.azimuth) > 0.5 * sensor.fov + azimuth_margin) continue;

    const double amplitude = deposit_amplitude(hit, refl.reflectivity, sensor);
    for (int k = 0; k < nr; ++k) {
      const double z = (sensor.range_at(k) - hit.range) / sensor.range_sigma;
      range_profile[k] = std::abs(z) > 8.0 ? 0.0 : std::exp(-0.5 * z * z);
    }
    for (int j = 0; j < na; ++j) {
      azimuth_profile[j] = sinc_squared((sensor.azimuth_at(j) - hit.azimuth) / sensor.beam_null_spacing);
    }
    grid.noalias() += amplitude * range_profile * azimuth_profile;
  }
  return Energyscape(std::move(grid), sensor, timestamp);
}

bool BurstSchedule::in_burst(double t) const {
  constexpr double kTol = 1e-9;
  return std::any_of(starts.begin(), starts.end(), [&](double s) {
    return t >= s - kTol && t < s + burst_length - kTol;
  });
}

BurstSchedule BurstSchedule::periodic(double duration, double period, double burst_length, double frame_period,
                                      std::uint64_t seed) {
  if (!(period > burst_length) || !(frame_period > 0.0)) {
    throw std::invalid_argument("burst period must exceed burst length");
  }
  BurstSchedule schedule;
  schedule.burst_length = burst_length;
  Rng rng(seed);
  // Offsets stop one frame short of the period end so consecutive bursts never merge.
  const int slots = std::max(1, static_cast<int>(std::ceil((period - burst_length) / frame_period - 1e-9)));
  std::uniform_int_distribution<int> offset(0, slots - 1);
  for (int i = 0; i * period < duration - 1e-9; ++i) {
    schedule.starts.push_back(i * period + offset(rng) * frame_period);
  }
  return schedule;
}

double noise_schedule(double t, const BurstSchedule& schedule) {
  return schedule.in_burst(t) ? schedule.burst_snr_db : schedule.base_snr_db;
}

Energyscape inject_noise(const Energyscape& scape, double snr_db, Rng& rng) {
  if (!scape.is_valid()) throw std::invalid_argument("inject_noise: scape has negative or non-finite cells");
  if (snr_db == kInf) return scape;

  const double signal_power = scape.data.squaredNorm() / static_cast<double>(scape.data.size());
  const double sigma =
      signal_power > 0.0 ? std::sqrt(signal_power / std::pow(10.0, snr_db / 10.0)) : 1.0;
  std::normal_distribution<double> gauss(0.0, 1.0);
  Energyscape out = scape;
  double* cell = out.data.data();
  for (Eigen::Index i = 0; i < out.data.size(); ++i) {
    cell[i] = std::max(cell[i] + sigma * std::abs(gauss(rng)), 0.0);
  }
  return out;
}

}  // namespace echopt
