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

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace assd {

inline constexpr double kNormTolerance = 1e-9;

// Categorical distribution over a vocabulary. Entries are non-negative and
// sum to one within kNormTolerance; the constructor enforces both.
class ProbVector {
 public:
  ProbVector() = default;
  explicit ProbVector(std::vector<double> probs);

  static ProbVector uniform(std::size_t size);
  static ProbVector one_hot(std::size_t size, std::size_t index);
  // Normalizes non-negative weights. Throws if they sum to zero.
  static ProbVector from_weights(std::vector<double> weights);
  // Max-subtracted softmax.
  static ProbVector from_logits(std::span<const double> logits);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> values() const { return probs_; }

  // Inverse-CDF draw given u in [0, 1). Never returns a zero-mass index.
  int sample(double u) const;

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  std::vector<double> probs_;
};

}  // namespace assd
