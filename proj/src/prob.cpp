// Copyright 2026 The ASSD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "assd/prob.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "assd/error.h"

namespace assd {

ProbVector::ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
  require(!probs_.empty(), ErrorCode::kInvalidInput, "empty probability vector");
  double sum = 0.0;
  for (double p : probs_) {
    require(p >= 0.0 && std::isfinite(p), ErrorCode::kInvalidInput, "negative or non-finite probability");
    sum += p;
  }
  if (!(std::abs(sum - 1.0) <= kNormTolerance))
    fail(ErrorCode::kInvalidInput, "probabilities sum to " + std::to_string(sum));
}

ProbVector ProbVector::uniform(std::size_t size) {
  return ProbVector(std::vector<double>(size, 1.0 / static_cast<double>(size)));
}

ProbVector ProbVector::one_hot(std::size_t size, std::size_t index) {
  std::vector<double> v(size, 0.0);
  v.at(index) = 1.0;
  return ProbVector(std::move(v));
}

ProbVector ProbVector::from_weights(std::vector<double> weights) {
  double sum = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), ErrorCode::kInvalidInput, "negative or non-finite weight");
    sum += w;
  }
  require(sum > 0.0, ErrorCode::kInvalidInput, "weights sum to zero");
  for (double& w : weights) w /= sum;
  return ProbVector(std::move(weights));
}

ProbVector ProbVector::from_logits(std::span<const double> logits) {
  require(!logits.empty(), ErrorCode::kInvalidInput, "empty logits");
  const double max = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(logits[i] - max);
    sum += e[i];
  }
  for (double& x : e) x /= sum;
  return ProbVector(std::move(e));
}

int ProbVector::sample(double u) const {
  double cumulative = 0.0;
  int last_positive = -1;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (probs_[i] <= 0.0) continue;
    last_positive = static_cast<int>(i);
    cumulative += probs_[i];
    if (u < cumulative) return last_positive;
  }
  // Rounding left u above the final cumulative sum.
  return last_positive;
}

}  // namespace assd
