// tests/oracles.hpp

// Copyright 2026 The mert-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Brute-force metric oracles shared by the unit tests and the acceptance run.

#ifndef MERT_TESTS_ORACLES_HPP_
#define MERT_TESTS_ORACLES_HPP_

#include "mert/probe.hpp"

#include <cmath>
#include <map>
#include <set>
#include <vector>

namespace mert::testing {

/// Fraction of positive/negative pairs ranked correctly, ties count half.
inline double oracle_roc_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return good / pairs;
}

/// Mean over positives of the precision among items scored at least as high.
inline double oracle_average_precision(const std::vector<double>& s, const std::vector<int>& y) {
  double sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    ++pos;
    double tp = 0.0, n = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= s[i]) {
        n += 1.0;
        tp += y[j];
      }
    sum += tp / n;
  }
  return sum / double(pos);
}

/// Pitch-class set of the diatonic scale of a key (natural minor).
inline std::set<int> scale_of(const probe::Key& k) {
  static const int major[7] = {0, 2, 4, 5, 7, 9, 11};
  static const int minor[7] = {0, 2, 3, 5, 7, 8, 10};
  std::set<int> out;
  for (int step : k.minor ? minor : major) out.insert((k.tonic + step) % 12);
  return out;
}

/// Credit from scale relations: relative keys share every pitch class, a fifth
/// above shares six, parallel keys share the tonic.
inline double oracle_key_credit(const probe::Key& p, const probe::Key& t) {
  if (p == t) return 1.0;
  const auto a = scale_of(p), b = scale_of(t);
  std::size_t common = 0;
  for (int x : a) common += b.count(x);
  if (p.minor == t.minor && common == 6 && p.tonic == (t.tonic + 7) % 12) return 0.5;
  if (p.minor != t.minor && common == 7) return 0.3;
  if (p.minor != t.minor && p.tonic == t.tonic) return 0.2;
  return 0.0;
}

/// Exhaustive maximum matching over every assignment of truth events.
inline double oracle_beat_f_measure(const std::vector<double>& pred, const std::vector<double>& truth,
                                    double tol = 0.02) {
  if (pred.empty() && truth.empty()) return 1.0;
  if (pred.empty() || truth.empty()) return 0.0;
  std::map<std::pair<std::size_t, unsigned>, std::size_t> memo;
  auto best = [&](auto&& self, std::size_t i, unsigned used) -> std::size_t {
    if (i == truth.size()) return 0;
    const auto key = std::make_pair(i, used);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::size_t r = self(self, i + 1, used);
    for (std::size_t j = 0; j < pred.size(); ++j)
      if (!(used >> j & 1u) && std::abs(pred[j] - truth[i]) <= tol) r = std::max(r, 1 + self(self, i + 1, used | 1u << j));
    return memo[key] = r;
  };
  const double m = double(best(best, 0, 0u));
  if (m == 0.0) return 0.0;
  const double p = m / double(pred.size()), r = m / double(truth.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace mert::testing

#endif  // MERT_TESTS_ORACLES_HPP_
