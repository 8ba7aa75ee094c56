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
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace echopt {

// Row-major so that data() is range-major, matching the tensor and file layouts.
using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

struct Pose2D {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

struct VelocityCommand {
  double v_lin = 0.0;    // m/s
  double omega_r = 0.0;  // rad/s, positive = counter-clockwise

  bool is_zero() const { return v_lin == 0.0 && omega_r == 0.0; }
  VelocityCommand reversed() const { return {-v_lin, -omega_r}; }
};

// 0 = wheel grips, 1 = wheel spins freely.
struct SlipState {
  double left = 0.0;
  double right = 0.0;
};

struct Reflector {
  double x = 0.0;
  double y = 0.0;
  double radius = 0.0;
  double reflectivity = 1.0;
};

struct Bounds {
  double x_min = -10.0;
  double x_max = 10.0;
  double y_min = -10.0;
  double y_max = 10.0;

  bool contains(double x, double y, double margin = 0.0) const {
    return x >= x_min + margin && x <= x_max - margin && y >= y_min + margin &&
           y <= y_max - margin;
  }
};

struct ReflectorMap {
  std::vector<Reflector> reflectors;
  Bounds bounds;

  // Throws std::invalid_argument when a reflector breaks the map invariants.
  void validate() const;
};

struct SensorConfig {
  int num_ranges = 128;
  int num_azimuths = 64;
  double r_max = 5.0;
  double fov = 2.0 * kPi / 3.0;
  double range_sigma = 0.05;         // pulse envelope, meters
  double beam_null_spacing = 0.1;    // first null of the azimuth sinc^2 lobe, radians
  double directivity_sigma = 0.7;    // Gaussian emitter/receiver directivity; kInf disables it
  double base_snr_db = 5.0;          // measurement SNR used when frames are "clean"
  double floor_db = 40.0;            // deterministic floor below a unit reflector at 1 m
  double r_min = 0.1;                // clamp for the 1/r^2 spreading loss

  void validate() const;

  double range_bin_width() const { return r_max / num_ranges; }
  double azimuth_bin_width() const { return fov / num_azimuths; }
  double range_at(double k) const { return (k + 0.5) * range_bin_width(); }
  double azimuth_at(double j) const { return -0.5 * fov + (j + 0.5) * azimuth_bin_width(); }
  // Fractional bin coordinates; inverse of range_at / azimuth_at.
  double range_index(double r) const { return r / range_bin_width() - 0.5; }
  double azimuth_index(double theta) const { return (theta + 0.5 * fov) / azimuth_bin_width() - 0.5; }
  double floor_level() const;
};

// A polar range x azimuth energy map. Rows are range bins, columns azimuth bins.
struct Energyscape {
  Grid data;
  double r_max = 5.0;
  double fov = 2.0 * kPi / 3.0;
  double timestamp = 0.0;

  Energyscape() = default;
  Energyscape(Grid d, const SensorConfig& sensor, double t = 0.0)
      : data(std::move(d)), r_max(sensor.r_max), fov(sensor.fov), timestamp(t) {}

  int num_ranges() const { return static_cast<int>(data.rows()); }
  int num_azimuths() const { return static_cast<int>(data.cols()); }
  bool same_geometry(const Energyscape& o) const {
    return data.rows() == o.data.rows() && data.cols() == o.data.cols();
  }
  // Polar axis helpers mirroring SensorConfig for a bare scape.
  double range_bin_width() const { return r_max / num_ranges(); }
  double azimuth_bin_width() const { return fov / num_azimuths(); }
  double noise_floor_estimate() const;  // median cell value
  bool is_valid() const;                // finite and non-negative
};

Energyscape blank_scape(const SensorConfig& sensor, double fill = 0.0, double t = 0.0);

// Converts a commanded (v, omega) to wheel speeds, attenuates each wheel by
// (1 - slip) and converts back.
VelocityCommand executed_command(const VelocityCommand& cmd, const SlipState& slip,
                                 double wheel_base);

// Exact-arc displacement of the robot over dt, expressed in the frame of the
// starting pose: (dx forward, dy left, dheading).
Eigen::Vector3d arc_displacement(const VelocityCommand& cmd, double dt);

Pose2D step_kinematics(const Pose2D& pose, const VelocityCommand& cmd, double dt,
                       const SlipState& slip = {}, double wheel_base = 0.3);

// Sensor-frame polar position of a reflector's nearest surface point.
struct SensorHit {
  double range = 0.0;
  double azimuth = 0.0;
};
SensorHit to_sensor_frame(const Reflector& refl, const Pose2D& pose);

// Noise-free rendering: separable Gaussian (range) x sinc^2 (azimuth) point-spread
// function, 1/r^2 spreading and Gaussian directivity, summed over reflectors, plus
// the deterministic floor. Occlusion is not modelled.
Energyscape render_energyscape(const ReflectorMap& world, const Pose2D& pose,
                               const SensorConfig& sensor, double timestamp = 0.0);

// Peak energy a single reflector would deposit (before PSF sampling).
double deposit_amplitude(const SensorHit& hit, double reflectivity, const SensorConfig& sensor);

struct BurstSchedule {
  std::vector<double> starts;  // seconds
  double burst_length = 1.2;
  double burst_snr_db = -80.0;
  double base_snr_db = 5.0;

  bool in_burst(double t) const;

  // One burst per period, placed at a random frame-aligned offset that ends before
  // the period does, so the duty cycle is exactly burst_length / period over whole
  // periods and bursts stay separate.
  static BurstSchedule periodic(double duration, double period, double burst_length,
                                double frame_period, std::uint64_t seed);
};

double noise_schedule(double t, const BurstSchedule& schedule);

// Adds full-wave rectified Gaussian noise sigma*|g| with E[n^2] = mean(S^2) / 10^(snr/10).
// snr_db = +inf returns the input unchanged; an all-zero scape gets sigma = 1.
Energyscape inject_noise(const Energyscape& scape, double snr_db, Rng& rng);

}  // namespace echopt
