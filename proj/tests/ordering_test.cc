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
#include <numeric>
#include <vector>

#include "assd/error.h"
#include "assd/rng.h"
#include "gtest/gtest.h"

namespace assd {
namespace {

std::vector<int> sigma_of(const Ordering& o) { return {o.sigma().begin(), o.sigma().end()}; }

std::vector<int> attended(const MaskMatrix& mask, int row) {
  std::vector<int> cols;
  for (int c = 0; c < mask.n(); ++c) {
    if (mask(row, c)) cols.push_back(c);
  }
  return cols;
}

Ordering random_permutation(int n, int m, Rng& rng) {
  std::vector<int> sigma(static_cast<std::size_t>(n));
  std::iota(sigma.begin(), sigma.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(sigma[i], sigma[rng.below(i + 1)]);
  return Ordering(sigma, m);
}

TEST(OrderingTest, ValidatesBijectionAndPromptLength) {
  EXPECT_THROW(Ordering({0, 0, 1}, 0), Error);
  EXPECT_THROW(Ordering({0, 1, 3}, 0), Error);
  EXPECT_THROW(Ordering({0, 1, 2}, 4), Error);
  EXPECT_THROW(Ordering({0, 1, 2}, -1), Error);
  EXPECT_NO_THROW(Ordering({2, 0, 1}, 3));
}

TEST(OrderingTest, CanonicalizeSortsBothBlocks) {
  const std::vector<int> prompt{3, 0};
  const Ordering o = canonicalize_ordering(prompt, 4);
  EXPECT_EQ(sigma_of(o), (std::vector<int>{0, 3, 1, 2}));
  EXPECT_EQ(o.m(), 2);
  EXPECT_TRUE(o.is_canonical());
}

TEST(OrderingTest, CanonicalizeEdgeCases) {
  const Ordering empty = canonicalize_ordering({}, 3);
  EXPECT_EQ(sigma_of(empty), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(empty.m(), 0);
  const std::vector<int> all{0, 1, 2};
  const Ordering full = canonicalize_ordering(all, 3);
  EXPECT_EQ(sigma_of(full), all);
  EXPECT_EQ(full.m(), 3);
}

TEST(OrderingTest, CanonicalizeRejectsBadPositions) {
  const std::vector<int> out_of_range{4};
  const std::vector<int> duplicate{1, 1};
  try {
    canonicalize_ordering(out_of_range, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidInput);
  }
  EXPECT_THROW(canonicalize_ordering(duplicate, 4), Error);
}

TEST(OrderingTest, RankOfInvertsSigma) {
  const Ordering o({2, 0, 3, 1}, 1);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(o.rank_of(o[i]), i);
  EXPECT_FALSE(o.is_canonical());
}

TEST(MaskTest, IdentityQueryMaskIsStrictlyLowerTriangular) {
  const MaskMatrix q = build_query_mask(Ordering::identity(4));
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) EXPECT_EQ(q(r, c), c < r) << r << "," << c;
  }
}

TEST(MaskTest, FigureOneOrderRows) {
  // sigma = [1, 0, 3, 2]: position 1 decodes first, then 0, 3, 2.
  const MaskMatrix q = build_query_mask(Ordering({1, 0, 3, 2}, 0));
  EXPECT_EQ(attended(q, 0), (std::vector<int>{1}));
  EXPECT_EQ(attended(q, 1), (std::vector<int>{}));
  EXPECT_EQ(attended(q, 3), (std::vector<int>{0, 1}));
  EXPECT_EQ(attended(q, 2), (std::vector<int>{0, 1, 3}));
}

TEST(MaskTest, ContentMaskIdentityHasDiagonal) {
  const MaskMatrix c = build_content_mask(Ordering::identity(3));
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) EXPECT_EQ(c(r, k), k <= r);
  }
}

TEST(MaskTest, RandomOrderingProperties) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(12));
    const Ordering o = random_permutation(n, static_cast<int>(rng.below(n + 1)), rng);
    const MaskMatrix q = build_query_mask(o);
    const MaskMatrix c = build_content_mask(o);
    for (int i = 0; i < n; ++i) {
      EXPECT_EQ(q.row_count(o[i]), i);
      for (int j = 0; j < n; ++j) {
        ASSERT_EQ(q(o[i], o[j]), i > j);
        ASSERT_EQ(c(o[i], o[j]) - q(o[i], o[j]), o[i] == o[j] ? 1 : 0);
      }
    }
  }
}

TEST(MaskSamplingTest, ForcedEmptyAndFullPrompts) {
  Rng rng(1);
  MaskDistributionConfig none{0.0, 0.0};
  const Ordering a = sample_mask_pattern(none, 5, rng);
  EXPECT_EQ(a.m(), 0);
  EXPECT_EQ(sigma_of(a), (std::vector<int>{0, 1, 2, 3, 4}));
  MaskDistributionConfig all{1.0, 1.0};
  const Ordering b = sample_mask_pattern(all, 4, rng);
  EXPECT_EQ(b.m(), 4);
  EXPECT_EQ(sigma_of(b), (std::vector<int>{0, 1, 2, 3}));
}

TEST(MaskSamplingTest, PromptLengthRangeUsesCeilAndFloor) {
  MaskDistributionConfig cfg{0.25, 0.6};
  EXPECT_EQ(prompt_length_range(cfg, 10), std::make_pair(3, 6));
  MaskDistributionConfig empty{0.31, 0.39};
  EXPECT_THROW(prompt_length_range(empty, 10), Error);
  MaskDistributionConfig inverted{0.8, 0.2};
  EXPECT_THROW(inverted.validate(), Error);
}

TEST(MaskSamplingTest, DeterministicGivenSeedAndCanonical) {
  MaskDistributionConfig cfg{0.0, 1.0};
  Rng a(9), b(9);
  for (int i = 0; i < 50; ++i) {
    const Ordering x = sample_mask_pattern(cfg, 8, a);
    EXPECT_EQ(x, sample_mask_pattern(cfg, 8, b));
    EXPECT_TRUE(x.is_canonical());
  }
}

TEST(MaskSamplingTest, PromptLengthUniformOverRange) {
  MaskDistributionConfig cfg{0.0, 1.0};
  Rng rng(4);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 20000; ++i) ++counts[sample_mask_pattern(cfg, 4, rng).m()];
  for (int c : counts) EXPECT_NEAR(c, 4000, 250);
}

TEST(MaskSamplingTest, StratifiedBatchHitsEveryDecile) {
  MaskDistributionConfig cfg{0.0, 1.0, true};
  Rng rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    const auto batch = sample_mask_batch(cfg, 100, 10, rng);
    std::vector<int> per_decile(10, 0);
    for (const auto& o : batch) ++per_decile[std::min(9, o.m() / 10)];
    for (int c : per_decile) EXPECT_EQ(c, 1);
  }
}

TEST(MaskSamplingTest, AnyPermutationModeIsLive) {
  MaskDistributionConfig cfg{0.0, 1.0, false, OrderMode::kAnyPermutation};
  Rng rng(2);
  int non_canonical = 0;
  for (int i = 0; i < 200; ++i) non_canonical += sample_mask_pattern(cfg, 4, rng).is_canonical() ? 0 : 1;
  EXPECT_GT(non_canonical, 0);
}

TEST(OrderingJsonTest, RoundTrip) {
  const Ordering o({0, 3, 1, 2}, 2);
  const auto j = to_json(o);
  EXPECT_EQ(j.at("n"), 4);
  EXPECT_EQ(j.at("m"), 2);
  EXPECT_EQ(ordering_from_json(j), o);
  MaskDistributionConfig cfg{0.1, 0.5, true, OrderMode::kAnyPermutation};
  const auto back = mask_config_from_json(to_json(cfg));
  EXPECT_EQ(back.prompt_frac_min, 0.1);
  EXPECT_EQ(back.mode, OrderMode::kAnyPermutation);
  EXPECT_TRUE(back.stratified);
}

}  // namespace
}  // namespace assd
