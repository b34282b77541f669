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

#include "assd/metrics.h"

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "assd/error.h"
#include "assd/rng.h"
#include "gtest/gtest.h"

#ifdef ASSD_HAVE_BOOST_MATH
#include <boost/math/special_functions/gamma.hpp>
#endif

namespace assd {
namespace {

// Returns a preset density per step regardless of the prefix.
class ScriptedReference final : public LeftToRightReference {
 public:
  explicit ScriptedReference(std::vector<double> densities) : densities_(std::move(densities)) {}
  double conditional(std::span<const int> prefix, int) const override { return densities_.at(prefix.size()); }

 private:
  std::vector<double> densities_;
};

ExactDistribution two_point(double a) { return {{{0}, a}, {{1}, 1.0 - a}}; }

TEST(MeanSeTest, SampleStandardError) {
  const std::vector<double> xs{1, 2, 3, 4};
  const MeanSe m = mean_se(xs);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.se, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(m.count, 4);
  const std::vector<double> one{7};
  EXPECT_EQ(mean_se(one).se, 0.0);
}

TEST(EntropyTest, Examples) {
  EXPECT_EQ(shannon_entropy(std::vector<int>{3, 3, 3}), 0.0);
  EXPECT_DOUBLE_EQ(shannon_entropy(std::vector<int>{0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(shannon_entropy(std::vector<int>{0, 1, 2, 3}), 2.0);
  EXPECT_NEAR(shannon_entropy(std::vector<int>{0, 0, 0, 1}), -(0.75 * std::log2(0.75) + 0.25 * std::log2(0.25)),
              1e-15);
  EXPECT_THROW(shannon_entropy(std::vector<int>{}), Error);
}

TEST(EntropyTest, BoundedByLogOfDistinctCount) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> tokens(1 + rng.below(50));
    for (int& t : tokens) t = static_cast<int>(rng.below(6));
    const double h = shannon_entropy(tokens);
    std::vector<int> sorted = tokens;
    std::sort(sorted.begin(), sorted.end());
    const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log2(static_cast<double>(distinct)) + 1e-12);
  }
}

TEST(PerplexityTest, ScriptedDensities) {
  const ScriptedReference ref({0.5, 0.125});
  const auto r = generative_perplexity(std::vector<int>{0, 0}, ref);
  EXPECT_TRUE(r.finite);
  EXPECT_NEAR(r.value, 4.0, 1e-12);
}

TEST(PerplexityTest, UniformReferenceGivesVocabSize) {
  const TabularJointModel uniform(5, 3, std::vector<double>(125, 1.0 / 125));
  const TabularReference ref(uniform);
  EXPECT_NEAR(generative_perplexity(std::vector<int>{4, 0, 2}, ref).value, 5.0, 1e-12);
}

TEST(PerplexityTest, InverseGeometricMeanOfDensities) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> d(1 + rng.below(10));
    double log_sum = 0.0;
    for (double& x : d) {
      x = 0.01 + 0.99 * rng.uniform();
      log_sum += std::log(x);
    }
    const ScriptedReference ref(d);
    const auto r = generative_perplexity(std::vector<int>(d.size(), 0), ref);
    EXPECT_NEAR(r.value, 1.0 / std::exp(log_sum / static_cast<double>(d.size())), 1e-9 * r.value);
    EXPECT_GE(r.value, 1.0);
  }
}

TEST(PerplexityTest, ZeroDensityIsInfiniteWithDiagnostic) {
  const ScriptedReference ref({0.5, 0.0, 0.5});
  const auto r = generative_perplexity(std::vector<int>{0, 0, 0}, ref);
  EXPECT_FALSE(r.finite);
  EXPECT_TRUE(std::isinf(r.value));
  EXPECT_EQ(r.zero_density_index, 1);
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(PerplexityTest, TabularReferenceUsesExactConditionals) {
  const TabularJointModel m(2, 2, {0.4, 0.1, 0.2, 0.3});
  const TabularReference ref(m);
  // p(x0 = 1) = 0.5, p(x1 = 0 | x0 = 1) = 0.4
  EXPECT_NEAR(generative_perplexity(std::vector<int>{1, 0}, ref).value, 1.0 / std::sqrt(0.2), 1e-12);
}

TEST(BigramReferenceTest, SmoothedCounts) {
  const std::vector<TokenSequence> corpus{TokenSequence({0, 1, 0, 1}, 2)};
  const BigramReference ref(2, corpus, 1.0);
  EXPECT_NEAR(ref.conditional(std::vector<int>{}, 0), 0.5, 1e-15);
  EXPECT_NEAR(ref.conditional(std::vector<int>{0}, 1), 0.75, 1e-15);
  EXPECT_NEAR(ref.conditional(std::vector<int>{1, 1}, 0), 2.0 / 3.0, 1e-15);
  double total = 0.0;
  for (int a = 0; a < 2; ++a) total += ref.conditional(std::vector<int>{1}, a);
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(TotalVariationTest, Examples) {
  EXPECT_EQ(total_variation(two_point(0.5), two_point(0.5)), 0.0);
  EXPECT_DOUBLE_EQ(total_variation(ExactDistribution{{{0}, 1.0}}, ExactDistribution{{{1}, 1.0}}), 1.0);
  EXPECT_DOUBLE_EQ(total_variation(two_point(0.5), two_point(0.75)), 0.25);
}

TEST(TotalVariationTest, MetricProperties) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    ExactDistribution a, b, c;
    double za = 0, zb = 0, zc = 0;
    for (int k = 0; k < 6; ++k) {
      za += a[{k}] = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
      zb += b[{k}] = rng.uniform();
      zc += c[{k}] = rng.uniform();
    }
    for (auto& [k, v] : a) v /= za;
    for (auto& [k, v] : b) v /= zb;
    for (auto& [k, v] : c) v /= zc;
    const double ab = total_variation(a, b);
    EXPECT_NEAR(ab, total_variation(b, a), 1e-15);
    EXPECT_LE(ab, 1.0);
    EXPECT_LE(ab, total_variation(a, c) + total_variation(c, b) + 1e-12);
  }
}

TEST(EmpiricalTest, MergeIsAssociativeAndCommutative) {
  Rng rng(11);
  EmpiricalDistribution parts[3];
  for (auto& p : parts) {
    for (int i = 0; i < 50; ++i) p.add({static_cast<int>(rng.below(4))});
  }
  EmpiricalDistribution left = parts[0];
  left.merge(parts[1]);
  left.merge(parts[2]);
  EmpiricalDistribution right = parts[2];
  EmpiricalDistribution tail = parts[1];
  tail.merge(parts[0]);
  right.merge(tail);
  EXPECT_EQ(left.counts(), right.counts());
  EXPECT_EQ(left.total(), 150);
  EXPECT_EQ(total_variation(left, right), 0.0);
}

TEST(EmpiricalTest, TvAgainstExactConverges) {
  Rng rng(13);
  EmpiricalDistribution emp;
  for (int i = 0; i < 200000; ++i) emp.add({rng.uniform() < 0.3 ? 0 : 1});
  EXPECT_LT(total_variation(emp, two_point(0.3)), 0.005);
}

TEST(ChiSquareTest, TwoCellExample) {
  EmpiricalDistribution emp;
  emp.add({0}, 60);
  emp.add({1}, 40);
  const auto r = chi_square_gof(emp, two_point(0.5));
  EXPECT_NEAR(r.statistic, 4.0, 1e-12);
  EXPECT_EQ(r.dof, 1);
  EXPECT_NEAR(r.p_value, std::erfc(std::sqrt(2.0)), 1e-10);
}

TEST(ChiSquareTest, PoolsSmallCells) {
  const ExactDistribution expected{{{0}, 0.5}, {{1}, 0.45}, {{2}, 0.03}, {{3}, 0.02}};
  EmpiricalDistribution emp;
  emp.add({0}, 50);
  emp.add({1}, 45);
  emp.add({2}, 1);
  emp.add({3}, 4);
  const auto r = chi_square_gof(emp, expected);
  EXPECT_EQ(r.cells, 3);
  EXPECT_EQ(r.dof, 2);
  EXPECT_EQ(r.pooled_cells, 2);
  EXPECT_NEAR(r.statistic, 0.0, 1e-12);
}

TEST(ChiSquareTest, ImpossibleObservation) {
  EmpiricalDistribution emp;
  emp.add({0}, 99);
  emp.add({1}, 1);
  const auto r = chi_square_gof(emp, ExactDistribution{{{0}, 1.0}});
  EXPECT_TRUE(std::isinf(r.statistic));
  EXPECT_EQ(r.p_value, 0.0);
}

TEST(ChiSquareTest, NullPValuesAreRoughlyUniform) {
  Rng rng(17);
  const ExactDistribution expected{{{0}, 0.2}, {{1}, 0.3}, {{2}, 0.5}};
  int below = 0;
  const int reps = 400;
  for (int rep = 0; rep < reps; ++rep) {
    EmpiricalDistribution emp;
    for (int i = 0; i < 1000; ++i) {
      const double u = rng.uniform();
      emp.add({u < 0.2 ? 0 : (u < 0.5 ? 1 : 2)});
    }
    if (chi_square_gof(emp, expected).p_value < 0.1) ++below;
  }
  EXPECT_NEAR(below / static_cast<double>(reps), 0.1, 0.05);
}

TEST(ChiSquareTest, HomogeneityOfIdenticalSamples) {
  EmpiricalDistribution a;
  a.add({0}, 30);
  a.add({1}, 70);
  const auto r = chi_square_homogeneity(a, a);
  EXPECT_NEAR(r.statistic, 0.0, 1e-12);
  EXPECT_NEAR(r.p_value, 1.0, 1e-12);
  EmpiricalDistribution b;
  b.add({0}, 70);
  b.add({1}, 30);
  EXPECT_LT(chi_square_homogeneity(a, b).p_value, 1e-6);
}

TEST(GammaTest, ClosedForms) {
  // Q(1, x) = exp(-x); Q(1/2, x) = erfc(sqrt x).
  for (double x : {0.01, 0.5, 1.0, 2.0, 5.0, 20.0}) {
    EXPECT_NEAR(regularized_gamma_q(1.0, x), std::exp(-x), 1e-14);
    EXPECT_NEAR(regularized_gamma_q(0.5, x), std::erfc(std::sqrt(x)), 1e-13);
  }
  EXPECT_EQ(chi_square_survival(0.0, 3), 1.0);
}

#ifdef ASSD_HAVE_BOOST_MATH
TEST(GammaTest, MatchesBoost) {
  for (double a : {0.5, 1.0, 1.5, 3.0, 10.0, 50.0, 200.0}) {
    for (double x : {0.001, 0.1, 1.0, 2.5, 10.0, 30.0, 100.0, 250.0}) {
      const double expect = boost::math::gamma_q(a, x);
      EXPECT_NEAR(regularized_gamma_q(a, x), expect, 1e-12 + 1e-10 * expect) << "a=" << a << " x=" << x;
    }
  }
}
#endif

TEST(ReportTest, CsvAndJsonLayout) {
  MetricsReport report;
  DecoderSummary d;
  d.decoder = "sequential";
  d.wall_ms = {1.5, 0.1, 10};
  report.decoders.push_back(d);
  report.flags.push_back("sequential_nfe_equals_masked_tokens");
  std::ostringstream csv;
  report.write_csv(csv);
  EXPECT_EQ(csv.str().rfind("decoder,gen_ppl_mean,", 0), 0u);
  EXPECT_EQ(csv.str().find("wall"), std::string::npos);
  std::ostringstream timing;
  report.write_timing_csv(timing);
  EXPECT_EQ(timing.str().rfind("decoder,wall_ms_mean,wall_ms_se\n", 0), 0u);
  const auto j = report.to_json();
  EXPECT_TRUE(j.contains("timing"));
  EXPECT_FALSE(j.at("decoders").at(0).contains("wall_ms"));
}

}  // namespace
}  // namespace assd
