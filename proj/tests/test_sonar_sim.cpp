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

#include "echopt/metrics.hpp"
#include "echopt/sonar_sim.hpp"

namespace echopt {
namespace {

void expect_pose(const Pose2D& p, double x, double y, double h, double tol = 1e-12) {
  EXPECT_NEAR(p.x, x, tol);
  EXPECT_NEAR(p.y, y, tol);
  EXPECT_NEAR(p.heading, h, tol);
}

// Places a reflector at sensor-frame polar (r, theta) for a sensor at the origin facing +x.
Reflector at_polar(double r, double theta, double reflectivity = 1.0) {
  return {r * std::cos(theta), r * std::sin(theta), 0.0, reflectivity};
}

ReflectorMap world_of(std::vector<Reflector> refl) {
  ReflectorMap w;
  w.reflectors = std::move(refl);
  return w;
}

TEST(Kinematics, StraightLine) { expect_pose(step_kinematics({}, {0.3, 0.0}, 0.2), 0.06, 0.0, 0.0); }

TEST(Kinematics, PureRotation) { expect_pose(step_kinematics({}, {0.0, 1.0}, 0.2), 0.0, 0.0, 0.2); }

TEST(Kinematics, FullTwoWheelSlipStopsTheRobot) {
  expect_pose(step_kinematics({}, {0.3, 0.0}, 0.2, {1.0, 1.0}), 0.0, 0.0, 0.0);
}

TEST(Kinematics, SingleWheelSlipTurnsTowardsSlippingWheel) {
  const Pose2D p = step_kinematics({}, {0.3, 0.0}, 0.2, {0.6, 0.0}, 0.3);
  EXPECT_GT(p.heading, 0.0);  // right wheel faster: counter-clockwise
  const VelocityCommand e = executed_command({0.3, 0.0}, {0.6, 0.0}, 0.3);
  EXPECT_NEAR(e.v_lin, 0.5 * (0.3 * 0.4 + 0.3), 1e-15);
  EXPECT_NEAR(e.omega_r, (0.3 - 0.12) / 0.3, 1e-15);
}

TEST(Kinematics, ZeroSlipExecutesCommand) {
  const VelocityCommand e = executed_command({0.17, -0.4}, {}, 0.3);
  EXPECT_NEAR(e.v_lin, 0.17, 1e-15);
  EXPECT_NEAR(e.omega_r, -0.4, 1e-15);
}

TEST(Kinematics, CompositionOfTwoSteps) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Pose2D p0{3 * u(rng), 3 * u(rng), 3 * u(rng)};
    const VelocityCommand c{0.3 * u(rng), u(rng)};
    const Pose2D two = step_kinematics(step_kinematics(p0, c, 0.2), c, 0.2);
    const Pose2D one = step_kinematics(p0, c, 0.4);
    EXPECT_NEAR(two.x, one.x, 1e-12);
    EXPECT_NEAR(two.y, one.y, 1e-12);
    EXPECT_NEAR(wrap_angle(two.heading - one.heading), 0.0, 1e-12);
  }
}

TEST(Kinematics, HeadingStaysWrapped) {
  Pose2D p{0, 0, 3.1};
  for (int i = 0; i < 50; ++i) {
    p = step_kinematics(p, {0.1, 1.0}, 0.2);
    EXPECT_GT(p.heading, -kPi);
    EXPECT_LE(p.heading, kPi);
  }
}

TEST(Kinematics, RejectsBadInput) {
  EXPECT_THROW(step_kinematics({}, {std::nan(""), 0.0}, 0.2), std::invalid_argument);
  EXPECT_THROW(step_kinematics({kInf, 0, 0}, {0.1, 0.0}, 0.2), std::invalid_argument);
  EXPECT_THROW(step_kinematics({}, {0.1, 0.0}, 0.0), std::invalid_argument);
  EXPECT_THROW(step_kinematics({}, {0.1, 0.0}, 0.2, {}, 0.0), std::invalid_argument);
  EXPECT_THROW(step_kinematics({}, {0.1, 0.0}, 0.2, {1.5, 0.0}), std::invalid_argument);
}

TEST(Render, ReflectorDeadAheadPeaksAtAnalyticBin) {
  const SensorConfig s;
  const Energyscape e = render_energyscape(world_of({at_polar(2.0, 0.0)}), {}, s);
  Eigen::Index k = 0, j = 0;
  e.data.maxCoeff(&k, &j);
  EXPECT_EQ(k, static_cast<Eigen::Index>(std::floor(2.0 / s.range_bin_width())));
  // 64 azimuth bins put theta = 0 on the edge between bins 31 and 32.
  EXPECT_TRUE(j == 31 || j == 32) << j;
  EXPECT_NEAR(s.azimuth_at(static_cast<double>(j)), 0.0, 0.5 * s.azimuth_bin_width() + 1e-12);
}

TEST(Render, EmptyWorldIsTheFloor) {
  const SensorConfig s;
  const Energyscape e = render_energyscape(ReflectorMap{}, {}, s);
  EXPECT_LE(e.data.maxCoeff(), s.floor_level());
  EXPECT_TRUE(e.is_valid());
}

TEST(Render, OutOfViewReflectorStaysBelowSidelobeBound) {
  const SensorConfig s;
  const double r = 2.0, theta = 0.5 * s.fov + 0.3;
  const Energyscape e = render_energyscape(world_of({at_polar(r, theta)}), {}, s);
  // Independent bound: amplitude times the sinc^2 envelope 1 / (pi x)^2 at the
  // nearest cell centre, x = angular distance / null spacing.
  const double amplitude = std::exp(-0.5 * std::pow(theta / s.directivity_sigma, 2)) / (r * r);
  const double nearest = theta - s.azimuth_at(s.num_azimuths - 1);
  const double bound = amplitude / std::pow(kPi * nearest / s.beam_null_spacing, 2);
  EXPECT_LE(e.data.maxCoeff() - s.floor_level(), bound);
}

TEST(Render, RotationEquivarianceWithoutDirectivity) {
  SensorConfig s;
  s.directivity_sigma = kInf;
  Rng rng(9);
  std::uniform_real_distribution<double> ur(0.5, 4.5), ut(-0.5 * s.fov + 0.5, 0.5 * s.fov - 0.5);
  std::vector<Reflector> base;
  for (int i = 0; i < 8; ++i) base.push_back(at_polar(ur(rng), ut(rng), 0.5 + 0.05 * i));
  const int m = 3;
  const double delta = m * s.azimuth_bin_width();
  std::vector<Reflector> rotated;
  for (const auto& b : base) {
    rotated.push_back({b.x * std::cos(delta) - b.y * std::sin(delta), b.x * std::sin(delta) + b.y * std::cos(delta),
                       b.radius, b.reflectivity});
  }
  const Grid a = render_energyscape(world_of(base), {}, s).data;
  const Grid b = render_energyscape(world_of(rotated), {}, s).data;
  const double scale = a.maxCoeff();
  for (int k = 0; k < s.num_ranges; ++k) {
    for (int j = 0; j + m < s.num_azimuths; ++j) ASSERT_NEAR(b(k, j + m), a(k, j), 1e-9 * scale) << k << "," << j;
  }
}

TEST(Render, AddingAReflectorNeverDecreasesACell) {
  const SensorConfig s;
  Rng rng(4);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  std::vector<Reflector> refl;
  for (int i = 0; i < 10; ++i) refl.push_back({std::abs(u(rng)) + 0.3, u(rng), 0.05, 0.7});
  const Grid before = render_energyscape(world_of(refl), {}, s).data;
  refl.push_back({1.5, 0.4, 0.02, 0.3});
  const Grid after = render_energyscape(world_of(refl), {}, s).data;
  EXPECT_GE((after - before).minCoeff(), 0.0);
}

TEST(Render, PeakWithinOneBinOfAnalyticPosition) {
  const SensorConfig s;
  Rng rng(5);
  std::uniform_real_distribution<double> ur(0.4, 4.6), ut(-0.5 * s.fov + 0.05, 0.5 * s.fov - 0.05);
  std::uniform_real_distribution<double> urad(0.0, 0.1);
  for (int i = 0; i < 100; ++i) {
    const double r = ur(rng), theta = ut(rng), radius = urad(rng);
    const double centre = r + radius;
    const Reflector refl{centre * std::cos(theta), centre * std::sin(theta), radius, 1.0};
    const Energyscape e = render_energyscape(world_of({refl}), {}, s);
    Eigen::Index k = 0, j = 0;
    e.data.maxCoeff(&k, &j);
    EXPECT_LE(std::abs(static_cast<double>(k) - s.range_index(r)), 1.0) << r;
    EXPECT_LE(std::abs(static_cast<double>(j) - s.azimuth_index(theta)), 1.0) << theta;
  }
}

TEST(Render, PoseTransformsTheWorld) {
  // A robot at (1, 1) facing +y sees a reflector at (1, 3) dead ahead at 2 m.
  const SensorHit hit = to_sensor_frame({1.0, 3.0, 0.0, 1.0}, {1.0, 1.0, kPi / 2});
  EXPECT_NEAR(hit.range, 2.0, 1e-12);
  EXPECT_NEAR(hit.azimuth, 0.0, 1e-12);
  const SensorHit left = to_sensor_frame({0.0, 1.0, 0.0, 1.0}, {1.0, 1.0, kPi / 2});
  EXPECT_NEAR(left.azimuth, kPi / 2, 1e-12);  // left of the robot is positive azimuth
}

TEST(Noise, InfiniteSnrIsIdentity) {
  const SensorConfig s;
  const Energyscape e = render_energyscape(world_of({at_polar(2.0, 0.2)}), {}, s);
  Rng rng(1);
  EXPECT_EQ(inject_noise(e, kInf, rng).data, e.data);
}

TEST(Noise, MinusEightyDbDestroysCorrelation) {
  const SensorConfig s;
  const Energyscape e = render_energyscape(world_of({at_polar(2.0, 0.2), at_polar(3.0, -0.4)}), {}, s);
  int below = 0;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const double cc = cross_corr_coeff(e, inject_noise(e, -80.0, rng)).value;
    if (cc < 0.1) ++below;
  }
  EXPECT_EQ(below, 100);
}

TEST(Noise, PowerMatchesRequestedSnr) {
  const SensorConfig s;
  const Energyscape e = render_energyscape(world_of({at_polar(2.0, 0.2), at_polar(1.0, -0.4)}), {}, s);
  Rng rng(2);
  const Energyscape n = inject_noise(e, 5.0, rng);
  const double signal = e.data.squaredNorm() / static_cast<double>(e.data.size());
  const double noise = (n.data - e.data).squaredNorm() / static_cast<double>(e.data.size());
  EXPECT_NEAR(10.0 * std::log10(signal / noise), 5.0, 0.1);
  EXPECT_GE(n.data.minCoeff(), 0.0);
}

TEST(Noise, DeterministicForFixedSeed) {
  const SensorConfig s;
  const Energyscape e = render_energyscape(world_of({at_polar(2.0, 0.2)}), {}, s);
  Rng a(42), b(42);
  EXPECT_EQ(inject_noise(e, 5.0, a).data, inject_noise(e, 5.0, b).data);
}

TEST(Noise, AllZeroScapeGetsUnitPowerNoise) {
  const SensorConfig s;
  Rng rng(3);
  const Energyscape n = inject_noise(blank_scape(s), 5.0, rng);
  EXPECT_NEAR(n.data.squaredNorm() / static_cast<double>(n.data.size()), 1.0, 0.05);
  EXPECT_GE(n.data.minCoeff(), 0.0);
}

TEST(Bursts, ScheduleValues) {
  BurstSchedule s;
  s.starts = {2.0};
  EXPECT_EQ(noise_schedule(2.5, s), -80.0);
  EXPECT_EQ(noise_schedule(1.0, s), 5.0);
  EXPECT_EQ(noise_schedule(3.3, s), 5.0);
  EXPECT_EQ(noise_schedule(7.0, BurstSchedule{}), 5.0);
}

TEST(Bursts, PeriodicDutyAndLengthOnFrameGrid) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const BurstSchedule s = BurstSchedule::periodic(60.0, 4.0, 1.2, 0.2, seed);
    EXPECT_EQ(s.starts.size(), 15u);
    int flagged = 0;
    for (int i = 0; i < 300; ++i) flagged += s.in_burst(i * 0.2);
    EXPECT_NEAR(flagged / 300.0, 0.3, 0.05);
    for (double start : s.starts) {
      int covered = 0;
      for (int i = 0; i < 300; ++i) covered += (i * 0.2 >= start - 1e-9 && i * 0.2 < start + 1.2 - 1e-9);
      EXPECT_EQ(covered, 6) << "a 1.2 s burst spans 6 frames at 5 Hz";
    }
    for (std::size_t i = 1; i < s.starts.size(); ++i) EXPECT_GT(s.starts[i] - s.starts[i - 1], 1.2 + 0.1);
  }
}

}  // namespace
}  // namespace echopt
