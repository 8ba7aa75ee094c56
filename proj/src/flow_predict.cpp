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

#include "echopt/flow_predict.hpp"

#include <algorithm>
#include <cmath>

namespace echopt {

FlowConstant flow_line_constant(const PolarPoint& p) { return {p.r * std::sin(p.theta)}; }

RigidTransformResult polar_rigid_transform(const PolarPoint& p, const VelocityCommand& cmd, double dt,
                                           double fov) {
  if (!(dt > 0.0)) throw std::invalid_argument("polar_rigid_transform: dt must be positive");
  if (cmd.is_zero()) return {p, std::abs(p.theta) <= 0.5 * fov};

  const Eigen::Vector3d d = arc_displacement(cmd, dt);
  const double x = p.r * std::cos(p.theta) - d.x();
  const double y = p.r * std::sin(p.theta) - d.y();
  const double c = std::cos(d.z());
  const double s = std::sin(d.z());
  const double xn = c * x + s * y;
  const double yn = -s * x + c * y;
  const double r = std::hypot(xn, yn);
  RigidTransformResult out;
  out.point = {r, std::atan2(yn, xn)};
  out.in_view = r > 1e-12 && std::abs(out.point.theta) <= 0.5 * fov;
  return out;
}

double sample_bilinear(const Grid& grid, double ki, double ji, double fill) {
  const double rows = static_cast<double>(grid.rows());
  const double cols = static_cast<double>(grid.cols());
  // Half a bin past the outermost centres still belongs to the edge cell.
  if (!(ki >= -0.5 && ki <= rows - 0.5 && ji >= -0.5 && ji <= cols - 0.5)) return fill;
  ki = std::clamp(ki, 0.0, rows - 1.0);
  ji = std::clamp(ji, 0.0, cols - 1.0);
  const int k0 = static_cast<int>(std::floor(ki));
  const int j0 = static_cast<int>(std::floor(ji));
  const int k1 = std::min<int>(k0 + 1, static_cast<int>(grid.rows()) - 1);
  const int j1 = std::min<int>(j0 + 1, static_cast<int>(grid.cols()) - 1);
  const double fk = ki - k0;
  const double fj = ji - j0;
  const double top = (1.0 - fj) * grid(k0, j0) + fj * grid(k0, j1);
  const double bottom = (1.0 - fj) * grid(k1, j0) + fj * grid(k1, j1);
  return (1.0 - fk) * top + fk * bottom;
}

Energyscape naive_shift(const Energyscape& scape, const VelocityCommand& cmd, double dt) {
  if (cmd.is_zero()) return scape;
  const double fill = scape.noise_floor_estimate();
  const double range_shift = cmd.v_lin * dt / scape.range_bin_width();
  const double azimuth_shift = cmd.omega_r * dt / scape.azimuth_bin_width();
  Energyscape out = scape;
  for (int k = 0; k < scape.num_ranges(); ++k) {
    for (int j = 0; j < scape.num_azimuths(); ++j) {
      out.data(k, j) = sample_bilinear(scape.data, k + range_shift, j + azimuth_shift, fill);
    }
  }
  out.timestamp = scape.timestamp + dt;
  return out;
}

Energyscape flow_warp(const Energyscape& scape, const VelocityCommand& cmd, double dt) {
  if (cmd.is_zero()) return scape;
  const double fill = scape.noise_floor_estimate();
  const double dr = scape.range_bin_width();
  const double da = scape.azimuth_bin_width();
  const VelocityCommand back = cmd.reversed();
  Energyscape out = scape;
  for (int k = 0; k < scape.num_ranges(); ++k) {
    const double r = (k + 0.5) * dr;
    for (int j = 0; j < scape.num_azimuths(); ++j) {
      const double theta = -0.5 * scape.fov + (j + 0.5) * da;
      const auto src = polar_rigid_transform({r, theta}, back, dt);
      out.data(k, j) =
          src.in_view ? sample_bilinear(scape.data, src.point.r / dr - 0.5,
                                        (src.point.theta + 0.5 * scape.fov) / da - 0.5, fill)
                      : fill;
    }
  }
  out.timestamp = scape.timestamp + dt;
  return out;
}

}  // namespace echopt
