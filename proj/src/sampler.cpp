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
#include <chrono>
#include <string>

#include "assd/bigram.h"
#include "assd/error.h"

namespace assd {

std::string_view draft_kind_name(DraftKind kind) { return kind == DraftKind::kSelf ? "self" : "context-bigram"; }

DraftKind draft_kind_from_string(std::string_view name) {
  if (name == "self") return DraftKind::kSelf;
  if (name == "context-bigram" || name == "ngram") return DraftKind::kContextBigram;
  fail(ErrorCode::kInvalidConfig, "unknown draft kind '" + std::string(name) + "'");
}

void SamplerConfig::validate() const {
  require(k >= 1, ErrorCode::kInvalidConfig, "speculation window k must be >= 1");
}

std::vector<std::string> SamplerConfig::warnings() const {
  std::vector<std::string> out;
  if (k <= 2) {
    out.push_back("k = " + std::to_string(k) +
                  " is at most 2; a window of at least 3 is needed for speculation to save evaluations"
                  " (with k = 1 every non-final iteration spends two evaluations on one token)");
  }
  return out;
}

double DecodeTrace::tokens_per_iteration() const {
  if (accepted_per_iter.empty()) return 0.0;
  int total = 0;
  for (int a : accepted_per_iter) total += a;
  return static_cast<double>(total) / static_cast<double>(accepted_per_iter.size());
}

nlohmann::json to_json(const DecodeTrace& trace) {
  return {{"seed", trace.seed},
          {"n", trace.n},
          {"m", trace.m},
          {"k", trace.k},
          {"draft_kind", trace.draft_kind},
          {"model_nfe", trace.model_nfe},
          {"aux_nfe", trace.aux_nfe},
          {"accepted_per_iter", trace.accepted_per_iter},
          {"duration_ns", trace.duration_ns},
          {"tokens", trace.tokens}};
}

double accept_probability(double p, double q) {
  require(p > 0.0, ErrorCode::kImpossibleDraft, "draft density is zero");
  return std::min(1.0, q / p);
}

ProbVector residual_distribution(const ProbVector& p, const ProbVector& q) {
  require(p.size() == q.size(), ErrorCode::kInvalidInput, "distribution sizes differ");
  std::vector<double> residual(p.size());
  double total = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    residual[x] = std::max(0.0, q[x] - p[x]);
    total += residual[x];
  }
  require(total > 0.0, ErrorCode::kZeroResidual, "q <= p everywhere; rejection has probability zero");
  for (double& r : residual) r /= total;
  return ProbVector(std::move(residual));
}

ProbVector step_exact_outcome_distribution(const ProbVector& p, const ProbVector& q) {
  require(p.size() == q.size(), ErrorCode::kInvalidInput, "distribution sizes differ");
  std::vector<double> out(p.size());
  double reject_mass = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    // P(draft = x, accepted) = p(x) * min(1, q(x) / p(x)) = min(p(x), q(x))
    out[x] = std::min(p[x], q[x]);
    reject_mass += std::max(q[x] - p[x], 0.0);
  }
  if (reject_mass > 0.0) {
    const ProbVector residual = residual_distribution(p, q);
    for (std::size_t x = 0; x < p.size(); ++x) out[x] += reject_mass * residual[x];
  }
  return ProbVector(std::move(out));
}

namespace {

using Clock = std::chrono::steady_clock;

void check_prompt(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord) {
  require(prompt.n() == model.length() && ord.n() == model.length(), ErrorCode::kInvalidInput,
          "prompt/ordering length does not match the model");
  require(prompt.vocab() == model.vocab_size(), ErrorCode::kInvalidInput, "prompt vocabulary mismatch");
  for (int i = 0; i < ord.n(); ++i) {
    if (i < ord.m()) {
      require(!prompt.is_mask(ord[i]), ErrorCode::kInvalidInput, "prompt position is MASK");
    } else {
      require(prompt.is_mask(ord[i]), ErrorCode::kInvalidInput, "position to generate is not MASK");
    }
  }
}

DecodeTrace start_trace(const TokenSequence& prompt, const Ordering& ord, int k, std::string kind) {
  DecodeTrace trace;
  trace.n = prompt.n();
  trace.m = ord.m();
  trace.k = k;
  trace.draft_kind = std::move(kind);
  return trace;
}

void finish(DecodeResult& result, Clock::time_point start) {
  result.trace.tokens.assign(result.tokens.tokens().begin(), result.tokens.tokens().end());
  result.trace.duration_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
}

DecodeResult speculative_decode(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                                const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  check_prompt(model, prompt, ord);
  require(ord.is_canonical(), ErrorCode::kInvalidInput, "speculative decoding needs a canonical ordering");
  const auto start = Clock::now();
  const bool self_draft = cfg.draft_kind == DraftKind::kSelf;
  const int total = ord.n();

  DecodeResult result{prompt, start_trace(prompt, ord, cfg.k, std::string(draft_kind_name(cfg.draft_kind))), {}};
  result.trace.seed = cfg.seed;
  TokenSequence& seq = result.tokens;
  DecodeTrace& trace = result.trace;

  BigramCounts counts(model.vocab_size());
  if (!self_draft) counts = BigramCounts::build(seq);

  int n = ord.m();
  std::vector<int> queries;
  std::vector<int> drafts;
  std::vector<ProbVector> draft_dists;
  while (n < total) {
    const int t = std::min(n + cfg.k, total);

    drafts.clear();
    if (self_draft) {
      queries.assign(ord.sigma().begin() + n, ord.sigma().begin() + t);
      draft_dists = model.marginals_given_visible(seq, ord, n, queries);
      ++trace.model_nfe;
      for (const ProbVector& dist : draft_dists) drafts.push_back(dist.sample(rng.uniform()));
    } else {
      BigramDraft draft = bigram_draft(counts, ord, seq, n, t, rng);
      ++trace.aux_nfe;
      trace.mask_conditioning_events += draft.mask_conditioning_events;
      drafts = std::move(draft.values);
      draft_dists = std::move(draft.densities);
    }

    // Last token with a self draft: the first-rank draft is always accepted,
    // so the oracle pass is skipped.
    if (self_draft && n == total - 1) {
      seq.set(ord[n], drafts[0]);
      trace.accepted_per_iter.push_back(1);
      if (cfg.assertions != AssertionLevel::kOff) ++trace.first_rank_checks;
      if (cfg.record_steps) {
        const double p = draft_dists[0][static_cast<std::size_t>(drafts[0])];
        result.steps.push_back({n, drafts[0], p, p, draft_dists[0], draft_dists[0], 0.0, true, drafts[0]});
      }
      break;
    }

    TokenSequence proposal = seq;
    for (int i = n; i < t; ++i) proposal.set(ord[i], drafts[static_cast<std::size_t>(i - n)]);
    const std::vector<ProbVector> oracle = model.chained_conditionals(proposal, ord, n, t);
    ++trace.model_nfe;

    int committed = 0;
    int last = n;
    for (int i = n; i < t; ++i) {
      last = i;
      const auto idx = static_cast<std::size_t>(i - n);
      const int draft = drafts[idx];
      const ProbVector& p_vec = draft_dists[idx];
      const ProbVector& q_vec = oracle[idx];
      const double p = p_vec[static_cast<std::size_t>(draft)];
      const double q = q_vec[static_cast<std::size_t>(draft)];
      const double r = rng.uniform();

      if (self_draft && i == n && cfg.assertions != AssertionLevel::kOff) {
        ++trace.first_rank_checks;
        if (q != p) {
          ++trace.first_rank_violations;
          require(cfg.assertions != AssertionLevel::kAbort, ErrorCode::kContractViolation,
                  "first-rank oracle density differs from the draft density");
        }
      }

      const bool accepted = r < accept_probability(p, q) + cfg.fault_accept_offset;
      int value = draft;
      if (!accepted) {
        // Zero residual would mean q <= p everywhere, i.e. rejection has
        // probability zero.
        value = residual_distribution(p_vec, q_vec).sample(rng.uniform());
        ++trace.resample_events;
      }
      seq.set(ord[i], value);
      if (!self_draft) counts.on_commit(seq, ord[i]);
      ++committed;
      if (cfg.record_steps) result.steps.push_back({i, draft, p, q, p_vec, q_vec, r, accepted, value});
      if (!accepted) break;
    }
    trace.discarded_drafts += t - 1 - last;
    trace.accepted_per_iter.push_back(committed);
    n = last + 1;
  }
  finish(result, start);
  return result;
}

}  // namespace

DecodeResult decode_sequential(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord, Rng& rng) {
  check_prompt(model, prompt, ord);
  const auto start = Clock::now();
  DecodeResult result{prompt, start_trace(prompt, ord, 1, "sequential"), {}};
  for (int i = ord.m(); i < ord.n(); ++i) {
    const int pos = ord[i];
    const auto dist = model.marginals_given_visible(result.tokens, ord, i, std::span(&pos, 1));
    ++result.trace.model_nfe;
    result.tokens.set(pos, dist[0].sample(rng.uniform()));
    result.trace.accepted_per_iter.push_back(1);
  }
  finish(result, start);
  return result;
}

DecodeResult decode_parallel_independent(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                                         Rng& rng) {
  check_prompt(model, prompt, ord);
  const auto start = Clock::now();
  DecodeResult result{prompt, start_trace(prompt, ord, ord.n() - ord.m(), "parallel"), {}};
  if (ord.m() < ord.n()) {
    const auto masked = ord.masked();
    const auto dists = model.marginals_given_visible(prompt, ord, ord.m(), masked);
    ++result.trace.model_nfe;
    for (std::size_t j = 0; j < masked.size(); ++j) result.tokens.set(masked[j], dists[j].sample(rng.uniform()));
    result.trace.accepted_per_iter.push_back(static_cast<int>(masked.size()));
  }
  finish(result, start);
  return result;
}

DecodeResult decode_assd(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                         const SamplerConfig& cfg, Rng& rng) {
  require(cfg.draft_kind == DraftKind::kSelf, ErrorCode::kInvalidConfig, "decode_assd expects draft_kind = self");
  return speculative_decode(model, prompt, ord, cfg, rng);
}

DecodeResult decode_assd_ngram(const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                               const SamplerConfig& cfg, Rng& rng) {
  require(cfg.draft_kind == DraftKind::kContextBigram, ErrorCode::kInvalidConfig,
          "decode_assd_ngram expects draft_kind = context-bigram");
  return speculative_decode(model, prompt, ord, cfg, rng);
}

std::string_view decoder_name(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kSequential: return "sequential";
    case DecoderKind::kParallel: return "parallel";
    case DecoderKind::kAssdSelf: return "assd-self";
    case DecoderKind::kAssdNgram: return "assd-ngram";
  }
  return "unknown";
}

DecoderKind decoder_from_string(std::string_view name) {
  if (name == "sequential") return DecoderKind::kSequential;
  if (name == "parallel") return DecoderKind::kParallel;
  if (name == "assd-self" || name == "assd") return DecoderKind::kAssdSelf;
  if (name == "assd-ngram") return DecoderKind::kAssdNgram;
  fail(ErrorCode::kInvalidConfig, "unknown decoder '" + std::string(name) + "'");
}

DecodeResult run_decoder(DecoderKind kind, const AnyOrderModel& model, const TokenSequence& prompt, const Ordering& ord,
                         const SamplerConfig& cfg, Rng& rng) {
  switch (kind) {
    case DecoderKind::kSequential: return decode_sequential(model, prompt, ord, rng);
    case DecoderKind::kParallel: return decode_parallel_independent(model, prompt, ord, rng);
    case DecoderKind::kAssdSelf: {
      SamplerConfig c = cfg;
      c.draft_kind = DraftKind::kSelf;
      return decode_assd(model, prompt, ord, c, rng);
    }
    case DecoderKind::kAssdNgram: {
      SamplerConfig c = cfg;
      c.draft_kind = DraftKind::kContextBigram;
      return decode_assd_ngram(model, prompt, ord, c, rng);
    }
  }
  fail(ErrorCode::kInvalidConfig, "unknown decoder");
}

}  // namespace assd
