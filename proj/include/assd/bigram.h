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

#include <cstdint>
#include <vector>

#include "assd/model.h"
#include "assd/rng.h"

namespace assd {

// Context bigram statistics over the non-MASK adjacent pairs of a partially
// decoded sequence. pair(b, a) counts b immediately followed by a; left(b)
// counts b as the left element of such a pair, so left(b) = sum_a pair(b, a).
class BigramCounts {
 public:
  explicit BigramCounts(int vocab);

  // Sweep over every adjacent pair of `seq` with both members non-MASK.
  static BigramCounts build(const TokenSequence& seq);

  // Call after `pos` changed from MASK to a token: adds the pairs through
  // `pos` whose other member is already non-MASK.
  void on_commit(const TokenSequence& seq, int pos);

  // Adds every count of `other` (same vocabulary).
  void merge(const BigramCounts& other);

  int vocab() const { return vocab_; }
  std::int64_t pair(int left, int right) const { return pairs_[static_cast<std::size_t>(left) * vocab_ + right]; }
  std::int64_t left(int token) const { return left_[static_cast<std::size_t>(token)]; }

  // c(. | b); uniform when b never appears as a left element.
  ProbVector conditional(int b) const;

  friend bool operator==(const BigramCounts&, const BigramCounts&) = default;

 private:
  void add(int left, int right);

  int vocab_;
  std::vector<std::int64_t> pairs_;
  std::vector<std::int64_t> left_;
};

struct BigramDraft {
  std::vector<int> values;            // one per rank in [n, t)
  std::vector<ProbVector> densities;  // distribution each value was drawn from
  int mask_conditioning_events = 0;   // x_cond would have been MASK
};

// Drafts ranks [n, t) left to right. x_cond is the real left neighbour when
// visible, otherwise the value already drafted for it in this window. The
// left neighbour of position 0 does not exist and uses the uniform fallback.
BigramDraft bigram_draft(const BigramCounts& counts, const Ordering& ord, const TokenSequence& seq, int n, int t,
                         Rng& rng);

}  // namespace assd
