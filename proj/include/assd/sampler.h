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
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "assd/model.h"
#include "assd/ordering.h"
#include "assd/prob.h"
#include "assd/rng.h"

namespace assd {

enum class DraftKind { kSelf, kContextBigram };
std::string_view draft_kind_name(DraftKind kind);
DraftKind draft_kind_from_string(std::string_view name);

enum class AssertionLevel {
  kOff,    // no first-rank check
  kCount,  // count checks and violations in the trace
  kAbort,  // throw on a violation
};

struct SamplerConfig {
  int k = 5;
  std::uint64_t seed = 0;
  DraftKind draft_kind = DraftKind::kSelf;
  AssertionLevel assertions = AssertionLevel::kCount;
  bool record_steps = false;
  // Test-only fault injection: added to the acceptance threshold.
  double fault_accept_offset = 0.0;

  void validate() const;
  // Non-fatal configuration warnings (k <= 2).
  std::vector<std::string> warnings() const;
};

struct DecodeTrace {
  std::uint64_t seed = 0;
  int n = 0;
  int m = 0;
  int k = 0;
  std::string draft_kind;  // "sequential", "parallel", "self", "context-bigram"
  std::int64_t model_nfe = 0;
  std::int64_t aux_nfe = 0;
  std::vector<int> accepted_per_iter;  // tokens committed per iteration
  std::int64_t resample_events = 0;
  std::int64_t discarded_drafts = 0;  // drafted ranks dropped after a rejection
  std::int64_t first_rank_checks = 0;
  std::int64_t first_rank_violations = 0;
  std::int64_t mask_conditioning_events = 0;
  std::int64_t duration_ns = 0;
  std::vector<int> tokens;

  int iterations() const { return static_cast<int>(accepted_per_iter.size()); }
  double tokens_per_iteration() const;
};

// Wall-clock `duration_ns` included; everything else is a function of the
// seed.
nlohmann::json to_json(const DecodeTrace& trace);

struct DraftStep {
  int rank = 0;
  int draft = 0;
  double p = 0.0;
  double q = 0.0;
  ProbVector p_vec;
  ProbVector q_vec;
  double r = 0.0;
  bool accepted = false;
  int committed = 0;  // draft if accepted, else the resampled token
};

struct DecodeResult {
  TokenSequence tokens;
  DecodeTrace trace;
  std::vector<DraftStep> steps;  // filled when SamplerConfig::record_steps
};

// min(1, q / p). Throws impossible-draft on p <= 0.
double accept_probability(double p, double q);

// Normalized positive part of q - p. Throws zero-residual when q <= p
// everywhere.
ProbVector residual_distribution(const ProbVector& p, const ProbVector& q);

// Law of one draft-accept-resample step marginalized analytically:
// min(p, q) + (sum max(q - p, 0)) * residual.
ProbVector step_exact_outcome_distribution(const ProbVector& p, const ProbVector& q);

// One evaluation per masked token, in decode order.
DecodeResult decode_sequential(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord, Rng& rng);

// One evaluation; every masked token from its prompt-only marginal.
DecodeResult decode_parallel_independent(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                                         Rng& rng);

// Any-subset speculative decoding with the model as its own draft.
DecodeResult decode_assd(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                         const SamplerConfig& cfg, Rng& rng);

// Same loop with the context-bigram draft; counts start from the prompt and
// are updated as tokens are committed.
DecodeResult decode_assd_ngram(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                               const SamplerConfig& cfg, Rng& rng);

enum class DecoderKind { kSequential, kParallel, kAssdSelf, kAssdNgram };
std::string_view decoder_name(DecoderKind kind);
DecoderKind decoder_from_string(std::string_view name);

DecodeResult run_decoder(DecoderKind kind, const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                         const SamplerConfig& cfg, Rng& rng);

}  // namespace assd
