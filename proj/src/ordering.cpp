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

#include "assd/ordering.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "assd/error.h"

namespace assd {

Ordering::Ordering(std::vector<int> sigma, int m) : sigma_(std::move(sigma)), m_(m) {
  const int n = static_cast<int>(sigma_.size());
  if (!(m >= 0 && m <= n))
    fail(ErrorCode::kInvalidInput, "prompt length " + std::to_string(m) + " outside [0, " + std::to_string(n) + "]");
  rank_.assign(sigma_.size(), -1);
  for (int i = 0; i < n; ++i) {
    const int pos = sigma_[static_cast<std::size_t>(i)];
    if (!(pos >= 0 && pos < n)) fail(ErrorCode::kInvalidInput, "position " + std::to_string(pos) + " out of range");
    if (!(rank_[static_cast<std::size_t>(pos)] < 0))
      fail(ErrorCode::kInvalidInput, "position " + std::to_string(pos) + " repeated");
    rank_[static_cast<std::size_t>(pos)] = i;
  }
}

Ordering Ordering::identity(int n, int m) {
  std::vector<int> sigma(static_cast<std::size_t>(n));
  std::iota(sigma.begin(), sigma.end(), 0);
  return Ordering(std::move(sigma), m);
}

bool Ordering::is_canonical() const {
  const auto ascending = [](std::span<const int> block) {
    return std::adjacent_find(block.begin(), block.end(), std::greater_equal<>()) == block.end();
  };
  return ascending(prompt()) && ascending(masked());
}

Ordering canonicalize_ordering(std::span<const int> prompt_positions, int n) {
  require(n >= 0, ErrorCode::kInvalidInput, "negative length");
  std::vector<char> in_prompt(static_cast<std::size_t>(n), 0);
  for (int pos : prompt_positions) {
    if (!(pos >= 0 && pos < n))
      fail(ErrorCode::kInvalidInput,
           "prompt position " + std::to_string(pos) + " outside [0, " + std::to_string(n) + ")");
    if (!(!in_prompt[static_cast<std::size_t>(pos)]))
      fail(ErrorCode::kInvalidInput, "duplicate prompt position " + std::to_string(pos));
    in_prompt[static_cast<std::size_t>(pos)] = 1;
  }
  std::vector<int> sigma;
  sigma.reserve(static_cast<std::size_t>(n));
  for (int pos = 0; pos < n; ++pos) {
    if (in_prompt[static_cast<std::size_t>(pos)]) sigma.push_back(pos);
  }
  const int m = static_cast<int>(sigma.size());
  for (int pos = 0; pos < n; ++pos) {
    if (!in_prompt[static_cast<std::size_t>(pos)]) sigma.push_back(pos);
  }
  return Ordering(std::move(sigma), m);
}

int MaskMatrix::row_count(int row) const {
  int count = 0;
  for (int c = 0; c < n_; ++c) count += (*this)(row, c) ? 1 : 0;
  return count;
}

namespace {

MaskMatrix build_mask(const Ordering& ord, bool include_self) {
  const int n = ord.n();
  MaskMatrix mask(n);
  for (int i = 0; i < n; ++i) {
    const int limit = include_self ? i + 1 : i;
    for (int j = 0; j < limit; ++j) mask.set(ord[i], ord[j], true);
  }
  return mask;
}

}  // namespace

MaskMatrix build_query_mask(const Ordering& ord) { return build_mask(ord, false); }
MaskMatrix build_content_mask(const Ordering& ord) { return build_mask(ord, true); }

void MaskDistributionConfig::validate() const {
  require(prompt_frac_min >= 0.0 && prompt_frac_min <= prompt_frac_max && prompt_frac_max <= 1.0,
          ErrorCode::kInvalidConfig, "prompt fractions must satisfy 0 <= min <= max <= 1");
}

std::pair<int, int> prompt_length_range(const MaskDistributionConfig& cfg, int n) {
  cfg.validate();
  require(n >= 1, ErrorCode::kInvalidInput, "sequence length must be positive");
  // Tolerate tiny representation error (0.3 * 10 = 3.0000000000000004).
  constexpr double kEps = 1e-9;
  const int lo = static_cast<int>(std::ceil(cfg.prompt_frac_min * n - kEps));
  const int hi = static_cast<int>(std::floor(cfg.prompt_frac_max * n + kEps));
  if (!(lo <= hi))
    fail(ErrorCode::kInvalidConfig,
         "empty prompt-length range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return {lo, hi};
}

namespace {

Ordering pattern_with_length(const MaskDistributionConfig& cfg, int n, int m, Rng& rng) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  if (cfg.mode == OrderMode::kCanonicalLattice) {
    std::sort(perm.begin(), perm.begin() + m);
    std::sort(perm.begin() + m, perm.end());
  }
  return Ordering(std::move(perm), m);
}

}  // namespace

Ordering sample_mask_pattern(const MaskDistributionConfig& cfg, int n, Rng& rng) {
  const auto [lo, hi] = prompt_length_range(cfg, n);
  const int m = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo) + 1));
  return pattern_with_length(cfg, n, m, rng);
}

int stratified_prompt_length(int lo, int hi, int stratum, int strata, double u) {
  // Stratum s owns the integers lo + [floor(s K / S), floor((s + 1) K / S)).
  const long k = hi - lo + 1;
  const long begin = stratum * k / strata;
  const long end = (stratum + 1) * k / strata;
  if (end > begin) {
    const long width = end - begin;
    return lo + static_cast<int>(begin + std::min<long>(width - 1, static_cast<long>(u * width)));
  }
  // More strata than integers: neighbouring strata share a value.
  return lo + static_cast<int>(std::min<long>(k - 1, begin));
}

std::vector<Ordering> sample_mask_batch(const MaskDistributionConfig& cfg, int n, int batch, Rng& rng) {
  require(batch >= 0, ErrorCode::kInvalidInput, "negative batch size");
  std::vector<Ordering> out;
  out.reserve(static_cast<std::size_t>(batch));
  if (!cfg.stratified) {
    for (int b = 0; b < batch; ++b) out.push_back(sample_mask_pattern(cfg, n, rng));
    return out;
  }
  const auto [lo, hi] = prompt_length_range(cfg, n);
  std::vector<int> strata(static_cast<std::size_t>(batch));
  std::iota(strata.begin(), strata.end(), 0);
  for (int i = batch - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(strata[static_cast<std::size_t>(i)], strata[static_cast<std::size_t>(j)]);
  }
  for (int b = 0; b < batch; ++b) {
    const int m = stratified_prompt_length(lo, hi, strata[static_cast<std::size_t>(b)], batch, rng.uniform());
    out.push_back(pattern_with_length(cfg, n, m, rng));
  }
  return out;
}

nlohmann::json to_json(const Ordering& ord) {
  return {{"n", ord.n()}, {"m", ord.m()}, {"sigma", std::vector<int>(ord.sigma().begin(), ord.sigma().end())}};
}

Ordering ordering_from_json(const nlohmann::json& j) {
  try {
    Ordering ord(j.at("sigma").get<std::vector<int>>(), j.at("m").get<int>());
    require(ord.n() == j.at("n").get<int>(), ErrorCode::kInvalidInput, "ordering length mismatch");
    return ord;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidInput, std::string("malformed ordering: ") + e.what());
  }
}

nlohmann::json to_json(const MaskDistributionConfig& cfg) {
  return {{"prompt_frac_min", cfg.prompt_frac_min},
          {"prompt_frac_max", cfg.prompt_frac_max},
          {"stratified", cfg.stratified},
          {"mode", cfg.mode == OrderMode::kCanonicalLattice ? "canonical" : "any-permutation"}};
}

MaskDistributionConfig mask_config_from_json(const nlohmann::json& j) {
  MaskDistributionConfig cfg;
  cfg.prompt_frac_min = j.value("prompt_frac_min", cfg.prompt_frac_min);
  cfg.prompt_frac_max = j.value("prompt_frac_max", cfg.prompt_frac_max);
  cfg.stratified = j.value("stratified", cfg.stratified);
  const std::string mode = j.value("mode", std::string("canonical"));
  if (mode == "canonical") {
    cfg.mode = OrderMode::kCanonicalLattice;
  } else if (mode == "any-permutation") {
    cfg.mode = OrderMode::kAnyPermutation;
  } else {
    fail(ErrorCode::kInvalidConfig, "unknown ordering mode '" + mode + "'");
  }
  cfg.validate();
  return cfg;
}

}  // namespace assd
