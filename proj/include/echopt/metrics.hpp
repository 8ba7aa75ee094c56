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

#include <utility>
#include <vector>

#include "echopt/sonar_sim.hpp"

namespace echopt {

// A metric value with a flag for the degenerate inputs that leave it undefined.
struct MetricValue {
  double value = 0.0;
  bool defined = true;
};

// Pearson correlation over all cells; constant inputs report 0 and undefined.
MetricValue cross_corr_coeff(const Grid& a, const Grid& b);
MetricValue cross_corr_coeff(const Energyscape& a, const Energyscape& b);

struct Correlogram {
  Grid map;            // rows: range shift -max_dr..max_dr, cols: azimuth shift -max_dj..max_dj
  int peak_dr = 0;     // displacement of b's content relative to a, range bins
  int peak_dj = 0;     // same, azimuth bins
  double peak = 0.0;
  bool defined = true;
};

// Normalised cross-correlation of the mean-removed images over integer shifts
// with zero padding. Negative limits mean the full extent.
Correlogram correlogram(const Grid& a, const Grid& b, int max_dr = -1, int max_dj = -1);

// rms(predicted - target) / rms(target); an all-zero target is undefined.
MetricValue nrmsd(const Grid& predicted, const Grid& target);
MetricValue nrmsd(const Energyscape& predicted, const Energyscape& target);

struct MetricReport {
  double cc = 0.0;
  double nrmsd = 0.0;
  int peak_dr = 0;
  int peak_dj = 0;
};

MetricReport compare(const Energyscape& predicted, const Energyscape& target, bool with_correlogram = false);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

Summary summarize(const std::vector<double>& values);

// Regularised incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double dof);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double dof = 0.0;
};

// Welch's unequal-variance two-sample t-test, two-sided.
TTestResult welch_t_test(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace echopt
