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
#include <span>
#include <vector>

#include <json.hpp>

#include "assd/rng.h"

namespace assd {

// Decode order over N positions. sigma[i] is the position decoded at rank i;
// the first m ranks are the prompt. Any bijection is representable; the
// canonical (any-subset) form keeps both blocks ascending.
class Ordering {
 public:
  Ordering() = default;
  // Validates that sigma is a bijection on [0, N) and 0 <= m <= N.
  Ordering(std::vector<int> sigma, int m);

  static Ordering identity(int n, int m = 0);

  int n() const { return static_cast<int>(sigma_.size()); }
  int m() const { return m_; }
  int operator[](int rank) const { return sigma_[static_cast<std::size_t>(rank)]; }
  std::span<const int> sigma() const { return sigma_; }
  // rank_of(sigma[i]) == i
  int rank_of(int position) const { return rank_[static_cast<std::size_t>(position)]; }

  std::span<const int> prompt() const { return std::span(sigma_).first(static_cast<std::size_t>(m_)); }
  std::span<const int> masked() const { return std::span(sigma_).subspan(static_cast<std::size_t>(m_)); }

  bool is_canonical() const;

  friend bool operator==(const Ordering& a, const Ordering& b) { return a.m_ == b.m_ && a.sigma_ == b.sigma_; }

 private:
  std::vector<int> sigma_;
  std::vector<int> rank_;
  int m_ = 0;
};

// Prompt positions ascending, then the remaining positions ascending.
Ordering canonicalize_ordering(std::span<const int> prompt_positions, int n);

// allow(r, c) == 1: the query at position r may attend to position c.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  explicit MaskMatrix(int n) : n_(n), allow_(static_cast<std::size_t>(n) * n, 0) {}

  int n() const { return n_; }
  bool operator()(int row, int col) const { return allow_[index(row, col)] != 0; }
  void set(int row, int col, bool value) { allow_[index(row, col)] = value ? 1 : 0; }
  int row_count(int row) const;

  friend bool operator==(const MaskMatrix&, const MaskMatrix&) = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(col);
  }

  int n_ = 0;
  std::vector<std::uint8_t> allow_;
};

// allow[sigma(i)][sigma(j)] = (i > j)
MaskMatrix build_query_mask(const Ordering& ord);
// allow[sigma(i)][sigma(j)] = (i >= j)
MaskMatrix build_content_mask(const Ordering& ord);

enum class OrderMode { kCanonicalLattice, kAnyPermutation };

struct MaskDistributionConfig {
  double prompt_frac_min = 0.0;
  double prompt_frac_max = 1.0;
  bool stratified = false;
  OrderMode mode = OrderMode::kCanonicalLattice;

  void validate() const;
};

// Integer prompt-length range [ceil(min * N), floor(max * N)]. Throws
// invalid-config if empty.
std::pair<int, int> prompt_length_range(const MaskDistributionConfig& cfg, int n);

// Draws m uniformly from the prompt-length range, a uniform random
// permutation (Fisher-Yates), and sorts both blocks unless the mode is
// any-permutation.
Ordering sample_mask_pattern(const MaskDistributionConfig& cfg, int n, Rng& rng);

// Batch of patterns. With cfg.stratified the integer prompt-length range is
// cut into `batch` disjoint strata of near-equal width and each pattern draws
// its length from its own stratum, in shuffled order.
std::vector<Ordering> sample_mask_batch(const MaskDistributionConfig& cfg, int n, int batch, Rng& rng);

// Prompt length from the same stratified rule, for a single stratum.
int stratified_prompt_length(int lo, int hi, int stratum, int strata, double u);

nlohmann::json to_json(const Ordering& ord);
Ordering ordering_from_json(const nlohmann::json& j);

nlohmann::json to_json(const MaskDistributionConfig& cfg);
MaskDistributionConfig mask_config_from_json(const nlohmann::json& j);

}  // namespace assd
