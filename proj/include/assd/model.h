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

#include <span>
#include <vector>

#include "assd/ordering.h"
#include "assd/prob.h"

namespace assd {

// Reserved value for positions that have not been decoded. Outside every
// vocabulary.
inline constexpr int kMask = -1;

class TokenSequence {
 public:
  TokenSequence() = default;
  TokenSequence(std::vector<int> tokens, int vocab);
  static TokenSequence masked(int n, int vocab);

  int n() const { return static_cast<int>(tokens_.size()); }
  int vocab() const { return vocab_; }
  int operator[](int pos) const { return tokens_[static_cast<std::size_t>(pos)]; }
  bool is_mask(int pos) const { return (*this)[pos] == kMask; }
  void set(int pos, int token);
  void clear(int pos) { tokens_[static_cast<std::size_t>(pos)] = kMask; }
  std::span<const int> tokens() const { return tokens_; }
  int mask_count() const;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;

 private:
  std::vector<int> tokens_;
  int vocab_ = 0;
};

// Any-order density model. Each public call is one network function
// evaluation; callers count NFEs per call.
class AnyOrderModel {
 public:
  virtual ~AnyOrderModel() = default;

  virtual int vocab_size() const = 0;
  virtual int length() const = 0;

  // Distribution at each query position conditioned only on the tokens at
  // sigma(<n). Queries are conditionally independent of one another.
  // Requires sigma(<n) non-MASK and every query MASK and not in sigma(<n).
  std::vector<ProbVector> marginals_given_visible(const TokenSequence& seq, const Ordering& ord, int n,
                                                  std::span<const int> queries) const;

  // Entry i - n is the conditional of x_{sigma(i)} given sigma(<i), for
  // i in [n, t). Requires sigma(<t) non-MASK; positions at ranks >= t are
  // ignored.
  std::vector<ProbVector> chained_conditionals(const TokenSequence& seq, const Ordering& ord, int n, int t) const;

 protected:
  virtual std::vector<ProbVector> do_marginals(const TokenSequence& seq, const Ordering& ord, int n,
                                               std::span<const int> queries) const = 0;
  virtual std::vector<ProbVector> do_chained(const TokenSequence& seq, const Ordering& ord, int n, int t) const = 0;

 private:
  void check_shapes(const TokenSequence& seq, const Ordering& ord) const;
};

}  // namespace assd
