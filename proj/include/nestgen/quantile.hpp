// Copyright 2026 The nestgen Authors. All Rights Reserved.
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
#include <span>
#include <vector>

#include "nestgen/tensor.hpp"

namespace nestgen {

/// Sorted quantile values used to discretize a numeric column.
struct QuantileTable {
  std::vector<double> q;
  bool integer_mode = false;

  std::size_t bins() const { return q.size(); }

  /// Index of the nearest quantile; ties go to the lower index and values
  /// outside [q.front(), q.back()] clamp to the end bins.
  std::size_t encode(double x) const {
    if (std::isnan(x)) throw Error("cannot bin NaN");
    if (q.empty()) throw Error("empty quantile table");
    auto it = std::lower_bound(q.begin(), q.end(), x);
    double nearest;
    if (it == q.begin()) {
      nearest = q.front();
    } else if (it == q.end()) {
      nearest = q.back();
    } else {
      const double above = *it;
      const double below = *(it - 1);
      nearest = (x - below <= above - x) ? below : above;
    }
    return static_cast<std::size_t>(std::lower_bound(q.begin(), q.end(), nearest) - q.begin());
  }

  /// Interval sampled for bin i: [q_i, q_{i+1}], the last bin reusing the
  /// last interval.
  std::pair<double, double> interval(std::size_t i) const {
    if (q.size() == 1) return {q[0], q[0]};
    if (i + 1 >= q.size()) return {q[q.size() - 2], q[q.size() - 1]};
    return {q[i], q[i + 1]};
  }

  friend bool operator==(const QuantileTable&, const QuantileTable&) = default;
};

/// Empirical quantiles at levels i / (n - 1), linearly interpolated between
/// order statistics.
inline QuantileTable fit_quantiles(std::span<const double> values, std::size_t n,
                                   bool integer_mode = false) {
  if (values.empty()) throw Error("cannot fit quantiles of an empty column");
  if (n < 2) throw Error("quantile table needs at least 2 bins");
  std::vector<double> sorted(values.begin(), values.end());
  for (double v : sorted)
    if (std::isnan(v)) throw Error("NaN in numeric column");
  std::sort(sorted.begin(), sorted.end());
  QuantileTable t;
  t.integer_mode = integer_mode;
  t.q.resize(n);
  const double last = static_cast<double>(sorted.size() - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double h = last * static_cast<double>(i) / static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    t.q[i] = sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  }
  // Interpolation can break monotonicity by one ulp.
  for (std::size_t i = 1; i < n; ++i) t.q[i] = std::max(t.q[i], t.q[i - 1]);
  return t;
}

}  // namespace nestgen
