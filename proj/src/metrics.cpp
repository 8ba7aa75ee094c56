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

#include "echopt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace echopt {

namespace {

void require_same_shape(const char* op, const Grid& a, const Grid& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

MetricValue cross_corr_coeff(const Grid& a, const Grid& b) {
  require_same_shape("cross_corr_coeff", a, b);
  const auto av = a.array() - a.mean();
  const auto bv = b.array() - b.mean();
  const double saa = (av * av).sum();
  const double sbb = (bv * bv).sum();
  if (!(saa > 0.0) || !(sbb > 0.0)) return {0.0, false};
  const double cc = (av * bv).sum() / std::sqrt(saa * sbb);
  return {std::clamp(cc, -1.0, 1.0), true};
}

MetricValue cross_corr_coeff(const Energyscape& a, const Energyscape& b) { return cross_corr_coeff(a.data, b.data); }

Correlogram correlogram(const Grid& a, const Grid& b, int max_dr, int max_dj) {
  require_same_shape("correlogram", a, b);
  const int h = static_cast<int>(a.rows()), w = static_cast<int>(a.cols());
  if (max_dr < 0 || max_dr > h - 1) max_dr = h - 1;
  if (max_dj < 0 || max_dj > w - 1) max_dj = w - 1;
  const Grid az = (a.array() - a.mean()).matrix();
  const Grid bz = (b.array() - b.mean()).matrix();
  const double norm = std::sqrt(az.squaredNorm() * bz.squaredNorm());

  Correlogram out;
  out.map = Grid::Zero(2 * max_dr + 1, 2 * max_dj + 1);
  if (!(norm > 0.0)) {
    out.defined = false;
    return out;
  }
  out.peak = -std::numeric_limits<double>::infinity();
  for (int dr = -max_dr; dr <= max_dr; ++dr) {
    const int k0 = std::max(0, -dr), k1 = std::min(h, h - dr);
    for (int dj = -max_dj; dj <= max_dj; ++dj) {
      const int j0 = std::max(0, -dj), j1 = std::min(w, w - dj);
      double acc = 0.0;
      if (k1 > k0 && j1 > j0) {
        acc = (az.block(k0, j0, k1 - k0, j1 - j0).array() * bz.block(k0 + dr, j0 + dj, k1 - k0, j1 - j0).array())
                  .sum();
      }
      const double v = acc / norm;
      out.map(dr + max_dr, dj + max_dj) = v;
      // Ties resolve to the smallest shift magnitude.
      if (v > out.peak || (v == out.peak && std::abs(dr) + std::abs(dj) < std::abs(out.peak_dr) + std::abs(out.peak_dj))) {
        out.peak = v;
        out.peak_dr = dr;
        out.peak_dj = dj;
      }
    }
  }
  return out;
}

MetricValue nrmsd(const Grid& predicted, const Grid& target) {
  require_same_shape("nrmsd", predicted, target);
  const double denom = target.norm();
  if (!(denom > 0.0)) return {0.0, false};
  return {(predicted - target).norm() / denom, true};
}

MetricValue nrmsd(const Energyscape& predicted, const Energyscape& target) {
  return nrmsd(predicted.data, target.data);
}

MetricReport compare(const Energyscape& predicted, const Energyscape& target, bool with_correlogram) {
  MetricReport r;
  r.cc = cross_corr_coeff(predicted, target).value;
  r.nrmsd = nrmsd(predicted, target).value;
  if (with_correlogram) {
    const Correlogram c = correlogram(target.data, predicted.data);
    r.peak_dr = c.peak_dr;
    r.peak_dj = c.peak_dj;
  }
  return r;
}

Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("summarize: empty sample");
  const Eigen::Map<const Eigen::VectorXd> v(values.data(), static_cast<Eigen::Index>(values.size()));
  Summary s;
  s.mean = v.mean();
  if (values.size() > 1) {
    s.std = std::sqrt((v.array() - s.mean).square().sum() / static_cast<double>(values.size() - 1));
  }
  return s;
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("incomplete_beta: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_cdf: degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
  return t > 0.0 ? 1.0 - tail : tail;
}

TTestResult welch_t_test(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() < 2 || ys.size() < 2) throw std::invalid_argument("welch_t_test: each sample needs at least 2 values");
  const Summary sx = summarize(xs), sy = summarize(ys);
  const double nx = static_cast<double>(xs.size()), ny = static_cast<double>(ys.size());
  const double vx = sx.std * sx.std / nx, vy = sy.std * sy.std / ny;
  const double se2 = vx + vy;
  TTestResult r;
  const double diff = sx.mean - sy.mean;
  if (!(se2 > 0.0)) {
    r.dof = nx + ny - 2.0;
    if (diff == 0.0) return r;
    r.t = diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = diff / std::sqrt(se2);
  r.dof = se2 * se2 / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
  r.p = std::clamp(2.0 * student_t_cdf(-std::abs(r.t), r.dof), 0.0, 1.0);
  return r;
}

}  // namespace echopt
