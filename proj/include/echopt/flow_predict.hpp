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

#include "echopt/sonar_sim.hpp"

namespace echopt {

struct PolarPoint {
  double r = 1.0;
  double theta = 0.0;
};

// Lateral intercept of an acoustic flow line: under pure linear motion
// r * sin(theta) stays constant for every static reflector.
struct FlowConstant {
  double range = 0.0;
};

FlowConstant flow_line_constant(const PolarPoint& p);

struct RigidTransformResult {
  PolarPoint point;
  bool in_view = true;
};

// Where a sensor-frame point appears after the robot executes `cmd` for `dt`
// along an exact arc. Points that collapse onto the origin or leave |theta| <= fov/2
// are flagged out of view.
RigidTransformResult polar_rigid_transform(const PolarPoint& p, const VelocityCommand& cmd, double dt,
                                           double fov = 2.0 * kPi);

// Bilinear sample at fractional (range, azimuth) bin indices; `fill` outside the grid.
double sample_bilinear(const Grid& grid, double range_index, double azimuth_index, double fill);

// Translates the grid by -v*dt along range and -omega*dt along azimuth.
Energyscape naive_shift(const Energyscape& scape, const VelocityCommand& cmd, double dt);

// Pull-warps every output cell through the exact inverse rigid motion.
Energyscape flow_warp(const Energyscape& scape, const VelocityCommand& cmd, double dt);

}  // namespace echopt
