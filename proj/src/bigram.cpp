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

#include "assd/bigram.h"

#include "assd/error.h"

namespace assd {

BigramCounts::BigramCounts(int vocab)
    : vocab_(vocab),
      pairs_(static_cast<std::size_t>(vocab) * static_cast<std::size_t>(vocab), 0),
      left_(static_cast<std::size_t>(vocab), 0) {
  require(vocab >= 1, ErrorCode::kInvalidInput, "vocabulary must be nonempty");
}

BigramCounts BigramCounts::build(const TokenSequence& seq) {
  BigramCounts counts(seq.vocab());
  for (int i = 0; i + 1 < seq.n(); ++i) {
    if (!seq.is_mask(i) && !seq.is_mask(i + 1)) counts.add(seq[i], seq[i + 1]);
  }
  return counts;
}

void BigramCounts::add(int left, int right) {
  ++pairs_[static_cast<std::size_t>(left) * vocab_ + right];
  ++left_[static_cast<std::size_t>(left)];
}

void BigramCounts::merge(const BigramCounts& other) {
  require(other.vocab_ == vocab_, ErrorCode::kContractViolation, "bigram vocabulary mismatch");
  for (std::size_t i = 0; i < pairs_.size(); ++i) pairs_[i] += other.pairs_[i];
  for (std::size_t i = 0; i < left_.size(); ++i) left_[i] += other.left_[i];
}

void BigramCounts::on_commit(const TokenSequence& seq, int pos) {
  require(!seq.is_mask(pos), ErrorCode::kContractViolation, "on_commit called on a MASK position");
  if (pos > 0 && !seq.is_mask(pos - 1)) add(seq[pos - 1], seq[pos]);
  if (pos + 1 < seq.n() && !seq.is_mask(pos + 1)) add(seq[pos], seq[pos + 1]);
}

ProbVector BigramCounts::conditional(int b) const {
  require(b >= 0 && b < vocab_, ErrorCode::kInvalidInput, "conditioning token outside vocabulary");
  const std::int64_t total = left(b);
  if (total == 0) return ProbVector::uniform(static_cast<std::size_t>(vocab_));
  std::vector<double> probs(static_cast<std::size_t>(vocab_));
  for (int a = 0; a < vocab_; ++a) {
    probs[static_cast<std::size_t>(a)] = static_cast<double>(pair(b, a)) / static_cast<double>(total);
  }
  return ProbVector(std::move(probs));
}

BigramDraft bigram_draft(const BigramCounts& counts, const Ordering& ord, const TokenSequence& seq, int n, int t,
                         Rng& rng) {
  require(0 <= n && n <= t && t <= ord.n(), ErrorCode::kContractViolation, "rank range out of bounds");
  require(counts.vocab() == seq.vocab(), ErrorCode::kContractViolation, "vocabulary mismatch");
  BigramDraft draft;
  draft.values.reserve(static_cast<std::size_t>(t - n));
  draft.densities.reserve(static_cast<std::size_t>(t - n));
  const auto uniform = ProbVector::uniform(static_cast<std::size_t>(seq.vocab()));
  for (int i = n; i < t; ++i) {
    const int pos = ord[i];
    int x_cond = kMask;
    if (pos >= 1) {
      const int left = pos - 1;
      if (!seq.is_mask(left)) {
        x_cond = seq[left];
      } else {
        const int left_rank = ord.rank_of(left);
        if (left_rank >= n && left_rank < i) {
          x_cond = draft.values[static_cast<std::size_t>(left_rank - n)];
        } else {
          // Only reachable for non-canonical orderings.
          ++draft.mask_conditioning_events;
        }
      }
    }
    const ProbVector& dist = x_cond == kMask ? uniform : counts.conditional(x_cond);
    draft.values.push_back(dist.sample(rng.uniform()));
    draft.densities.push_back(dist);
  }
  return draft;
}

}  // namespace assd
