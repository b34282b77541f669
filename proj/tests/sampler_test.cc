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

#include "assd/sampler.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "assd/error.h"
#include "assd/metrics.h"
#include "assd/tabular.h"
#include "gtest/gtest.h"

namespace assd {
namespace {

ExactDistribution exact_completions(const TabularJointModel& model, const TokenSequence& prompt) {
  ExactDistribution out;
  for (const auto& [cell, p] : model.completion_distribution(prompt)) out[model.cell_tokens(cell)] = p;
  return out;
}

EmpiricalDistribution run_many(DecoderKind kind, const TabularJointModel& model, const TokenSequence& prompt,
                               const Ordering& ord, const SamplerConfig& cfg, int samples, std::uint64_t seed) {
  EmpiricalDistribution emp;
  for (int s = 0; s < samples; ++s) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(s)));
    const DecodeResult r = run_decoder(kind, model, prompt, ord, cfg, rng);
    emp.add(std::vector<int>(r.tokens.tokens().begin(), r.tokens.tokens().end()));
  }
  return emp;
}

ProbVector random_dist(int v, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(v));
  for (double& x : w) x = rng.exponential();
  return ProbVector::from_weights(std::move(w));
}

TEST(StepTest, AcceptProbability) {
  EXPECT_EQ(accept_probability(0.25, 0.5), 1.0);
  EXPECT_EQ(accept_probability(0.5, 0.25), 0.5);
  EXPECT_EQ(accept_probability(1.0, 0.0), 0.0);
  try {
    accept_probability(0.0, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kImpossibleDraft);
  }
}

TEST(StepTest, ResidualExample) {
  const ProbVector r = residual_distribution(ProbVector({0.25, 0.75}), ProbVector({0.5, 0.5}));
  EXPECT_DOUBLE_EQ(r[0], 1.0);
  EXPECT_DOUBLE_EQ(r[1], 0.0);
}

TEST(StepTest, ResidualOfIdenticalDistributionsThrows) {
  try {
    residual_distribution(ProbVector({0.3, 0.7}), ProbVector({0.3, 0.7}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kZeroResidual);
  }
}

TEST(StepTest, OneHotDraftAndTarget) {
  const auto a = ProbVector::one_hot(3, 0);
  const auto b = ProbVector::one_hot(3, 2);
  EXPECT_EQ(accept_probability(a[0], b[0]), 0.0);
  EXPECT_EQ(residual_distribution(a, b), b);
  EXPECT_EQ(step_exact_outcome_distribution(a, b), b);
  EXPECT_EQ(step_exact_outcome_distribution(b, b), b);
}

TEST(StepTest, AnalyticOutcomeEqualsTargetForRandomPairs) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(6));
    const ProbVector p = random_dist(v, rng);
    const ProbVector q = random_dist(v, rng);
    const ProbVector out = step_exact_outcome_distribution(p, q);
    for (int x = 0; x < v; ++x) ASSERT_NEAR(out[x], q[x], 1e-12);
  }
}

TEST(StepTest, MonteCarloStepMatchesTarget) {
  // Simulates the draft-accept-resample step directly.
  const ProbVector p({0.6, 0.3, 0.1});
  const ProbVector q({0.2, 0.3, 0.5});
  Rng rng(9);
  std::vector<int> counts(3, 0);
  const int trials = 200000;
  for (int s = 0; s < trials; ++s) {
    const int x = p.sample(rng.uniform());
    int out = x;
    if (!(rng.uniform() < accept_probability(p[x], q[x]))) out = residual_distribution(p, q).sample(rng.uniform());
    ++counts[out];
  }
  for (int x = 0; x < 3; ++x) EXPECT_NEAR(counts[x] / static_cast<double>(trials), q[x], 0.005);
}

TEST(SamplerConfigTest, WarningsAndValidation) {
  SamplerConfig cfg;
  cfg.k = 0;
  EXPECT_THROW(cfg.validate(), Error);
  for (int k : {1, 2}) {
    cfg.k = k;
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.warnings().size(), 1u);
  }
  cfg.k = 3;
  EXPECT_TRUE(cfg.warnings().empty());
}

TEST(SequentialTest, NfeEqualsMaskedCount) {
  Rng frng(11);
  const TabularJointModel model = fixtures::random_dirichlet(3, 5, 1.0, frng);
  for (int m = 0; m <= 5; ++m) {
    std::vector<int> prompt_pos;
    for (int p = 0; p < m; ++p) prompt_pos.push_back(p);
    const Ordering ord = canonicalize_ordering(prompt_pos, 5);
    TokenSequence prompt = TokenSequence::masked(5, 3);
    for (int p : prompt_pos) prompt.set(p, 0);
    if (model.mass(prompt) == 0.0) continue;
    Rng rng(1);
    const DecodeResult r = decode_sequential(model, prompt, ord, rng);
    EXPECT_EQ(r.trace.model_nfe, 5 - m);
    EXPECT_EQ(r.tokens.mask_count(), 0);
  }
}

TEST(ParallelTest, SingleEvaluation) {
  const TabularJointModel model = fixtures::fully_correlated(2, 4);
  Rng rng(1);
  const DecodeResult r = decode_parallel_independent(model, TokenSequence::masked(4, 2), Ordering::identity(4), rng);
  EXPECT_EQ(r.trace.model_nfe, 1);
  EXPECT_EQ(r.tokens.mask_count(), 0);
}

TEST(AssdTest, ProductModelAcceptsWholeWindows) {
  Rng frng(13);
  const TabularJointModel model = fixtures::random_product(3, 7, frng);
  for (int k : {1, 2, 3, 5, 8}) {
    SamplerConfig cfg;
    cfg.k = k;
    Rng rng(static_cast<std::uint64_t>(k));
    const DecodeResult r = decode_assd(model, TokenSequence::masked(7, 3), Ordering::identity(7), cfg, rng);
    int remaining = 7;
    ASSERT_FALSE(r.trace.accepted_per_iter.empty());
    for (int a : r.trace.accepted_per_iter) {
      EXPECT_EQ(a, std::min(k, remaining));
      remaining -= a;
    }
    EXPECT_EQ(remaining, 0);
    EXPECT_EQ(r.trace.resample_events, 0);
    EXPECT_EQ(r.trace.first_rank_violations, 0);
  }
}

TEST(AssdTest, NfeNeverExceedsMaskedCountForKAtLeastTwo) {
  Rng frng(17);
  const TabularJointModel model = fixtures::random_dirichlet(2, 5, 0.5, frng);
  for (int k = 2; k <= 6; ++k) {
    SamplerConfig cfg;
    cfg.k = k;
    for (int s = 0; s < 500; ++s) {
      Rng rng(Rng::derive(k, s));
      const DecodeResult r = decode_assd(model, TokenSequence::masked(5, 2), Ordering::identity(5), cfg, rng);
      ASSERT_LE(r.trace.model_nfe, 5);
    }
  }
}

TEST(AssdTest, EachIterationCommitsAtLeastOneToken) {
  Rng frng(19);
  const TabularJointModel model = fixtures::sparse_markov(3, 4, frng);
  SamplerConfig cfg;
  cfg.k = 4;
  cfg.draft_kind = DraftKind::kContextBigram;
  for (int s = 0; s < 500; ++s) {
    Rng rng(s);
    const DecodeResult r = decode_assd_ngram(model, TokenSequence::masked(4, 3), Ordering::identity(4), cfg, rng);
    for (int a : r.trace.accepted_per_iter) ASSERT_GE(a, 1);
    EXPECT_EQ(r.trace.model_nfe, r.trace.iterations());
    EXPECT_EQ(r.trace.aux_nfe, r.trace.iterations());
  }
}

TEST(AssdTest, RecordedStepsAreConsistent) {
  const TabularJointModel model = fixtures::fully_correlated(3, 4);
  SamplerConfig cfg;
  cfg.k = 4;
  cfg.record_steps = true;
  for (int s = 0; s < 200; ++s) {
    Rng rng(s);
    const DecodeResult r = decode_assd(model, TokenSequence::masked(4, 3), Ordering::identity(4), cfg, rng);
    for (const DraftStep& st : r.steps) {
      if (st.accepted) {
        EXPECT_EQ(st.committed, st.draft);
      } else {
        EXPECT_GT(st.p, st.q);
        EXPECT_GT(st.q_vec[st.committed], st.p_vec[st.committed]);
      }
      EXPECT_EQ(r.tokens[st.rank], st.committed);
    }
    // A correlated table forces every later token to equal the first.
    for (int p = 1; p < 4; ++p) EXPECT_EQ(r.tokens[p], r.tokens[0]);
  }
}

TEST(AssdTest, DeterministicGivenSeed) {
  Rng frng(23);
  const TabularJointModel model = fixtures::random_dirichlet(3, 4, 1.0, frng);
  SamplerConfig cfg;
  for (DecoderKind kind : {DecoderKind::kAssdSelf, DecoderKind::kAssdNgram, DecoderKind::kSequential}) {
    Rng a(99);
    Rng b(99);
    const auto ra = run_decoder(kind, model, TokenSequence::masked(4, 3), Ordering::identity(4), cfg, a);
    const auto rb = run_decoder(kind, model, TokenSequence::masked(4, 3), Ordering::identity(4), cfg, b);
    EXPECT_EQ(ra.trace.tokens, rb.trace.tokens);
    EXPECT_EQ(ra.trace.accepted_per_iter, rb.trace.accepted_per_iter);
  }
}

TEST(AssdTest, RejectsNonCanonicalOrdering) {
  const TabularJointModel model = fixtures::fully_correlated(2, 3);
  Rng rng(1);
  SamplerConfig cfg;
  EXPECT_THROW(decode_assd(model, TokenSequence::masked(3, 2), Ordering({2, 0, 1}, 0), cfg, rng), Error);
  // The sequential decoder accepts any order.
  EXPECT_NO_THROW(decode_sequential(model, TokenSequence::masked(3, 2), Ordering({2, 0, 1}, 0), rng));
}

TEST(AssdTest, RejectsBadPrompt) {
  const TabularJointModel model = fixtures::fully_correlated(2, 3);
  Rng rng(1);
  SamplerConfig cfg;
  EXPECT_THROW(decode_assd(model, TokenSequence::masked(3, 2), Ordering::identity(3, 1), cfg, rng), Error);
  EXPECT_THROW(decode_assd(model, TokenSequence({0, 1, kMask}, 2), Ordering::identity(3, 1), cfg, rng), Error);
  EXPECT_THROW(decode_assd(model, TokenSequence::masked(2, 2), Ordering::identity(2), cfg, rng), Error);
}

struct ExactnessCase {
  DecoderKind kind;
  int k;
  int m;
};

class ExactnessTest : public ::testing::TestWithParam<ExactnessCase> {};

TEST_P(ExactnessTest, MatchesTableConditional) {
  const auto c = GetParam();
  Rng frng(29);
  const TabularJointModel model = fixtures::random_dirichlet(2, 4, 1.0, frng);
  std::vector<int> prompt_pos;
  TokenSequence prompt = TokenSequence::masked(4, 2);
  if (c.m == 1) {
    prompt_pos.push_back(2);
    prompt.set(2, 1);
  }
  const Ordering ord = canonicalize_ordering(prompt_pos, 4);
  SamplerConfig cfg;
  cfg.k = c.k;
  const auto emp = run_many(c.kind, model, prompt, ord, cfg, 100000, 31);
  const auto exact = exact_completions(model, prompt);
  EXPECT_LT(total_variation(emp, exact), 0.01);
  EXPECT_GT(chi_square_gof(emp, exact).p_value, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Decoders, ExactnessTest,
                         ::testing::Values(ExactnessCase{DecoderKind::kSequential, 1, 0},
                                           ExactnessCase{DecoderKind::kAssdSelf, 3, 0},
                                           ExactnessCase{DecoderKind::kAssdSelf, 5, 1},
                                           ExactnessCase{DecoderKind::kAssdSelf, 1, 1},
                                           ExactnessCase{DecoderKind::kAssdNgram, 3, 0},
                                           ExactnessCase{DecoderKind::kAssdNgram, 5, 1}));

TEST(ParallelTest, BiasedOnCorrelatedModel) {
  const TabularJointModel model = fixtures::fully_correlated(2, 2);
  SamplerConfig cfg;
  const auto emp = run_many(DecoderKind::kParallel, model, TokenSequence::masked(2, 2), Ordering::identity(2), cfg,
                            20000, 37);
  EXPECT_NEAR(total_variation(emp, exact_completions(model, TokenSequence::masked(2, 2))), 0.5, 0.03);
}

TEST(FaultInjectionTest, AcceptOffsetIsDetected) {
  const TabularJointModel model = fixtures::fully_correlated(2, 3);
  SamplerConfig cfg;
  cfg.k = 3;
  cfg.fault_accept_offset = 0.2;
  const auto emp = run_many(DecoderKind::kAssdNgram, model, TokenSequence::masked(3, 2), Ordering::identity(3), cfg,
                            20000, 41);
  const auto exact = exact_completions(model, TokenSequence::masked(3, 2));
  // Accepting a rejected draft lands in a zero-mass cell.
  EXPECT_LT(chi_square_gof(emp, exact).p_value, 1e-6);
  EXPECT_GT(total_variation(emp, exact), 0.05);
}

TEST(TraceTest, JsonHasCounters) {
  const TabularJointModel model = fixtures::fully_correlated(2, 3);
  Rng rng(1);
  SamplerConfig cfg;
  const auto r = decode_assd(model, TokenSequence::masked(3, 2), Ordering::identity(3), cfg, rng);
  const auto j = to_json(r.trace);
  EXPECT_EQ(j.at("model_nfe").get<std::int64_t>(), r.trace.model_nfe);
  EXPECT_EQ(j.at("tokens").get<std::vector<int>>(), r.trace.tokens);
  EXPECT_EQ(j.at("draft_kind"), "self");
}

}  // namespace
}  // namespace assd
