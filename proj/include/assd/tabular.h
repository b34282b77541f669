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
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "assd/model.h"
#include "assd/rng.h"

namespace assd {

inline constexpr std::size_t kDefaultCellCap = 1'000'000;

// Explicit joint table over V^N token tuples; the brute-force oracle behind
// every exactness check. Cells are indexed lexicographically with position 0
// most significant.
class TabularJointModel final : public AnyOrderModel {
 public:
  TabularJointModel(int vocab, int n, std::vector<double> table, std::size_t cell_cap = kDefaultCellCap);

  static TabularJointModel from_json(const nlohmann::json& j, std::size_t cell_cap = kDefaultCellCap);
  static TabularJointModel load(const std::string& path, std::size_t cell_cap = kDefaultCellCap);
  nlohmann::json to_json() const;

  int vocab_size() const override { return vocab_; }
  int length() const override { return n_; }

  std::span<const double> table() const { return table_; }
  std::size_t cell_index(std::span<const int> tokens) const;
  std::vector<int> cell_tokens(std::size_t index) const;

  // Total table mass over all completions of the non-MASK tokens.
  double mass(const TokenSequence& partial) const;

  // log p(x_{sigma(>=m)} | x_{sigma(<m)}) by direct table summation.
  // Throws zero-conditioning if the prompt has no mass.
  double exact_joint_conditional(const Ordering& ord, const TokenSequence& fill) const;

  // Exact distribution over full tuples consistent with the non-MASK tokens.
  // Keys are cell indices; zero-mass cells are omitted.
  std::vector<std::pair<std::size_t, double>> completion_distribution(const TokenSequence& prompt) const;

  // Draws a full tuple from the joint.
  TokenSequence sample_joint(Rng& rng) const;

  // Exact left-to-right conditional p(x_i = token | x_<i).
  double left_to_right_conditional(std::span<const int> prefix, int token) const;

 protected:
  std::vector<ProbVector> do_marginals(const TokenSequence& seq, const Ordering& ord, int n,
                                       std::span<const int> queries) const override;
  std::vector<ProbVector> do_chained(const TokenSequence& seq, const Ordering& ord, int n, int t) const override;

 private:
  // Partial states use base V+1 digits with digit V meaning MASK.
  std::uint64_t state_code(const TokenSequence& seq) const;
  double state_mass(std::uint64_t code) const;
  // Conditional at `position` (MASK in `code`); false if the state has no mass.
  bool conditional_at(std::uint64_t code, int position, std::vector<double>& out) const;

  int vocab_;
  int n_;
  std::vector<double> table_;
  std::vector<std::uint64_t> digit_weight_;  // (V+1)^(N-1-p)
  std::uint64_t all_mask_code_ = 0;
  std::vector<double> state_mass_;  // empty when (V+1)^N is too large to precompute
};

// Fixture constructors. All normalize their output.
namespace fixtures {

TabularJointModel random_dirichlet(int vocab, int n, double concentration, Rng& rng);
TabularJointModel product(const std::vector<std::vector<double>>& marginals);
TabularJointModel random_product(int vocab, int n, Rng& rng);
// Mass only on constant tuples (v, v, ..., v), uniform over v.
TabularJointModel fully_correlated(int vocab, int n);
// One dominant tuple carrying `peak` mass, the rest spread randomly.
TabularJointModel near_deterministic(int vocab, int n, double peak, Rng& rng);
// First-order Markov chain with some forbidden transitions (zero cells).
TabularJointModel sparse_markov(int vocab, int n, Rng& rng);

}  // namespace fixtures

}  // namespace assd
