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

#include "assd/model.h"

#include <algorithm>
#include <string>

#include "assd/error.h"

namespace assd {

TokenSequence::TokenSequence(std::vector<int> tokens, int vocab) : tokens_(std::move(tokens)), vocab_(vocab) {
  require(vocab >= 1, ErrorCode::kInvalidInput, "vocabulary must be nonempty");
  require(!tokens_.empty(), ErrorCode::kInvalidInput, "sequence must be nonempty");
  for (int t : tokens_) {
    if (!(t == kMask || (t >= 0 && t < vocab)))
      fail(ErrorCode::kInvalidInput, "token " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
  }
}

TokenSequence TokenSequence::masked(int n, int vocab) {
  return TokenSequence(std::vector<int>(static_cast<std::size_t>(n), kMask), vocab);
}

void TokenSequence::set(int pos, int token) {
  if (!(token == kMask || (token >= 0 && token < vocab_)))
    fail(ErrorCode::kInvalidInput, "token " + std::to_string(token) + " outside vocabulary");
  tokens_.at(static_cast<std::size_t>(pos)) = token;
}

int TokenSequence::mask_count() const { return static_cast<int>(std::count(tokens_.begin(), tokens_.end(), kMask)); }

void AnyOrderModel::check_shapes(const TokenSequence& seq, const Ordering& ord) const {
  if (!(seq.n() == length() && ord.n() == length()))
    fail(ErrorCode::kContractViolation,
         "sequence/ordering length does not match model length " + std::to_string(length()));
  require(seq.vocab() == vocab_size(), ErrorCode::kContractViolation, "vocabulary mismatch");
}

std::vector<ProbVector> AnyOrderModel::marginals_given_visible(const TokenSequence& seq, const Ordering& ord, int n,
                                                               std::span<const int> queries) const {
  check_shapes(seq, ord);
  require(n >= 0 && n <= ord.n(), ErrorCode::kContractViolation, "visible prefix out of range");
  for (int i = 0; i < n; ++i) {
    if (!(!seq.is_mask(ord[i])))
      fail(ErrorCode::kContractViolation, "visible position " + std::to_string(ord[i]) + " is MASK");
  }
  for (int q : queries) {
    require(q >= 0 && q < seq.n(), ErrorCode::kContractViolation, "query position out of range");
    if (!(ord.rank_of(q) >= n))
      fail(ErrorCode::kContractViolation, "query position " + std::to_string(q) + " is already visible");
    if (!(seq.is_mask(q))) fail(ErrorCode::kContractViolation, "query position " + std::to_string(q) + " is not MASK");
  }
  return do_marginals(seq, ord, n, queries);
}

std::vector<ProbVector> AnyOrderModel::chained_conditionals(const TokenSequence& seq, const Ordering& ord, int n,
                                                            int t) const {
  check_shapes(seq, ord);
  require(0 <= n && n <= t && t <= ord.n(), ErrorCode::kContractViolation, "rank range out of bounds");
  for (int i = 0; i < t; ++i) {
    if (!(!seq.is_mask(ord[i])))
      fail(ErrorCode::kContractViolation,
           "missing value at rank " + std::to_string(i) + " (position " + std::to_string(ord[i]) + ")");
  }
  return do_chained(seq, ord, n, t);
}

}  // namespace assd
