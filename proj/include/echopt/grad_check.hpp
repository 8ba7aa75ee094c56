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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>

#include "echopt/tensor.hpp"

namespace echopt::ad {

struct GradCheckResult {
  double max_relative_error = 0.0;
  Eigen::Index worst_index = -1;
  int coordinates_checked = 0;
};

// Compares the tape gradient of a scalar function with central differences
// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps on up to `max_coords` random
// coordinates (all of them when x is small). Relative error uses the
// denominator max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                                  double eps = 1e-5, int max_coords = 64, std::uint64_t seed = 7) {
  if (!x.requires_grad()) x = Tensor<double>::parameter(x.shape(), x.value());
  x.zero_grad();
  backward(f(x));
  const Vec<double> analytic = x.grad();

  std::vector<Eigen::Index> coords(static_cast<std::size_t>(x.size()));
  std::iota(coords.begin(), coords.end(), Eigen::Index{0});
  if (static_cast<int>(coords.size()) > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(max_coords));
  }

  GradCheckResult result;
  for (Eigen::Index i : coords) {
    const double saved = x.value()[i];
    x.value()[i] = saved + eps;
    const double up = f(x).item();
    x.value()[i] = saved - eps;
    const double down = f(x).item();
    x.value()[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace echopt::ad
