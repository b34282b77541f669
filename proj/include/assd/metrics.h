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
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "assd/bigram.h"
#include "assd/model.h"
#include "assd/tabular.h"

namespace assd {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;  // sample standard deviation / sqrt(count)
  int count = 0;
};

MeanSe mean_se(std::span<const double> values);

// Base-2 entropy of the within-sequence token frequencies.
double shannon_entropy(std::span<const int> tokens);

class LeftToRightReference {
 public:
  virtual ~LeftToRightReference() = default;
  virtual double conditional(std::span<const int> prefix, int token) const = 0;
};

class TabularReference final : public LeftToRightReference {
 public:
  explicit TabularReference(const TabularJointModel& model) : model_(model) {}
  double conditional(std::span<const int> prefix, int token) const override;

 private:
  const TabularJointModel& model_;
};

// Additively smoothed bigram estimated from held-out sequences; the first
// token uses the smoothed unigram distribution.
class BigramReference final : public LeftToRightReference {
 public:
  BigramReference(int vocab, std::span<const TokenSequence> corpus, double smoothing = 1.0);
  double conditional(std::span<const int> prefix, int token) const override;

 private:
  int vocab_;
  double smoothing_;
  BigramCounts counts_;
  std::vector<std::int64_t> unigram_;
  std::int64_t unigram_total_ = 0;
};

struct PerplexityResult {
  double value = 0.0;  // +inf when some density is zero
  bool finite = true;
  int zero_density_index = -1;
  std::string diagnostic;
};

// exp(-(1/N) sum_i ln q(x_i | x_<i))
PerplexityResult generative_perplexity(std::span<const int> tokens, const LeftToRightReference& reference);

using OutcomeKey = std::vector<int>;
using ExactDistribution = std::map<OutcomeKey, double>;

class EmpiricalDistribution {
 public:
  void add(const OutcomeKey& outcome, std::int64_t count = 1);
  // Associative and commutative.
  void merge(const EmpiricalDistribution& other);
  std::int64_t total() const { return total_; }
  const std::map<OutcomeKey, std::int64_t>& counts() const { return counts_; }
  std::int64_t count(const OutcomeKey& outcome) const;
  ExactDistribution normalized() const;

 private:
  std::map<OutcomeKey, std::int64_t> counts_;
  std::int64_t total_ = 0;
};

double total_variation(const ExactDistribution& a, const ExactDistribution& b);
double total_variation(const EmpiricalDistribution& a, const ExactDistribution& b);
double total_variation(const EmpiricalDistribution& a, const EmpiricalDistribution& b);

struct ChiSquareResult {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
  int cells = 0;         // after pooling
  int pooled_cells = 0;  // original cells merged into the catch-all
};

// Pearson goodness of fit. Cells whose expected count is below
// `min_expected` are merged into one catch-all cell (which absorbs the
// smallest remaining cell while it is still below the threshold). An
// observation in a zero-probability cell gives statistic +inf, p = 0.
ChiSquareResult chi_square_gof(const EmpiricalDistribution& observed, const ExactDistribution& expected,
                               double min_expected = 5.0);

// Two-sample test of homogeneity on a 2 x K table, same pooling rule on the
// pooled expected counts.
ChiSquareResult chi_square_homogeneity(const EmpiricalDistribution& a, const EmpiricalDistribution& b,
                                       double min_expected = 5.0);

// Regularized upper incomplete gamma Q(a, x); series below a + 1, Lentz
// continued fraction above.
double regularized_gamma_q(double a, double x);
double chi_square_survival(double statistic, int dof);

struct DecoderSummary {
  std::string decoder;
  MeanSe gen_ppl;
  MeanSe entropy;
  MeanSe model_nfe;
  MeanSe aux_nfe;
  MeanSe tokens_per_iteration;
  MeanSe masked_tokens;
  MeanSe wall_ms;  // reported, never asserted
  int infinite_ppl = 0;
};

struct MetricsReport {
  std::vector<DecoderSummary> decoders;
  std::optional<double> tv_distance;
  std::optional<ChiSquareResult> chi_square;
  std::vector<std::string> flags;

  // Wall-clock values live under "timing" only.
  nlohmann::json to_json() const;
  // Fixed columns, one row per decoder; wall-clock excluded.
  void write_csv(std::ostream& out) const;
  // decoder,wall_ms_mean,wall_ms_se
  void write_timing_csv(std::ostream& out) const;
};

}  // namespace assd
