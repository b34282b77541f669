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

#include "assd/harness.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "assd/bigram.h"
#include "assd/error.h"
#include "assd/ordering.h"
#include "assd/rng.h"
#include "assd/training.h"
#include "assd/transformer.h"

namespace assd::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

json read_json_file(const fs::path& path, ErrorCode code) {
  std::ifstream in(path);
  if (!(in.good())) fail(code, "cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(code, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!(in.good())) fail(ErrorCode::kInvalidConfig, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!(out.good())) fail(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!(out.good())) fail(ErrorCode::kIo, "short write to '" + path.string() + "'");
}

void ensure_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!(!ec)) fail(ErrorCode::kIo, "cannot create output directory '" + dir.string() + "': " + ec.message());
}

int thread_count(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

}  // namespace

fs::path RunConfig::input_path(const std::string& relative) const {
  const fs::path p(relative);
  return p.is_absolute() ? p : base_dir / p;
}

RunConfig make_run_config(json raw, const fs::path& base_dir, const Overrides& overrides) {
  require(raw.is_object(), ErrorCode::kInvalidConfig, "config must be a JSON object");
  RunConfig cfg;
  cfg.base_dir = base_dir;
  if (overrides.seed) {
    cfg.seed = *overrides.seed;
  } else {
    require(raw.contains("seed"), ErrorCode::kInvalidConfig, "config has no seed (set \"seed\" or pass --seed)");
    const json& seed = raw.at("seed");
    require(seed.is_number_unsigned() || (seed.is_number_integer() && seed.get<std::int64_t>() >= 0),
            ErrorCode::kInvalidConfig, "seed must be a non-negative integer");
    cfg.seed = raw.at("seed").get<std::uint64_t>();
  }
  raw["seed"] = cfg.seed;
  if (overrides.out) {
    cfg.out_dir = *overrides.out;
  } else if (raw.contains("out")) {
    cfg.out_dir = raw.at("out").get<std::string>();
  }
  if (overrides.k) {
    cfg.k = *overrides.k;
  } else if (raw.contains("k") && raw.at("k").is_number_integer()) {
    cfg.k = raw.at("k").get<int>();
  }
  cfg.raw = std::move(raw);
  return cfg;
}

RunConfig load_run_config(const fs::path& path, const Overrides& overrides) {
  json raw = read_json_file(path, ErrorCode::kInvalidConfig);
  return make_run_config(std::move(raw), path.parent_path(), overrides);
}

Fixture load_fixture(const fs::path& path) {
  const json j = read_json_file(path, ErrorCode::kInvalidConfig);
  try {
    return {j.value("id", path.stem().string()), TabularJointModel::from_json(j)};
  } catch (const Error& e) {
    fail(ErrorCode::kInvalidConfig, "fixture '" + path.string() + "': " + e.what());
  }
}

VerifyOptions verify_options_from_config(const RunConfig& cfg) {
  const json& j = cfg.raw;
  VerifyOptions opts;
  opts.seed = cfg.seed;
  require(j.contains("fixtures") && j.at("fixtures").is_array() && !j.at("fixtures").empty(), ErrorCode::kInvalidConfig,
          "verify config needs a non-empty \"fixtures\" list");
  for (const auto& f : j.at("fixtures")) opts.fixtures.push_back(load_fixture(cfg.input_path(f.get<std::string>())));
  opts.prompt_lengths = j.value("prompt_lengths", opts.prompt_lengths);
  if (cfg.k) {
    opts.ks = {*cfg.k};
  } else if (j.contains("k")) {
    opts.ks = j.at("k").get<std::vector<int>>();
  }
  if (j.contains("draft_kinds")) {
    opts.draft_kinds.clear();
    for (const auto& d : j.at("draft_kinds")) opts.draft_kinds.push_back(draft_kind_from_string(d.get<std::string>()));
  }
  opts.samples_min = j.value("samples_min", opts.samples_min);
  opts.samples_per_outcome = j.value("samples_per_outcome", opts.samples_per_outcome);
  opts.tv_threshold = j.value("tv_threshold", opts.tv_threshold);
  opts.alpha = j.value("alpha", opts.alpha);
  opts.single_step_pairs = j.value("single_step_pairs", opts.single_step_pairs);
  opts.mean_field_samples = j.value("mean_field_samples", opts.mean_field_samples);
  opts.ngram_count_contexts = j.value("ngram_count_contexts", opts.ngram_count_contexts);
  opts.threads = j.value("threads", opts.threads);
  opts.fault_accept_offset = j.value("fault_accept_offset", opts.fault_accept_offset);
  opts.only_suites = j.value("suites", opts.only_suites);
  for (int k : opts.ks) require(k >= 1, ErrorCode::kInvalidConfig, "k must be >= 1");
  require(opts.samples_min >= 1 && opts.samples_per_outcome >= 0, ErrorCode::kInvalidConfig,
          "sample counts must be positive");
  return opts;
}

void parallel_blocks(std::int64_t total, std::int64_t block, int threads,
                     const std::function<void(std::int64_t, std::int64_t, std::int64_t)>& fn) {
  require(block >= 1, ErrorCode::kContractViolation, "block size must be positive");
  const std::int64_t blocks = (total + block - 1) / block;
  const int workers =
      static_cast<int>(std::min<std::int64_t>(thread_count(threads), std::max<std::int64_t>(blocks, 1)));
  std::atomic<std::int64_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto work = [&] {
    for (;;) {
      const std::int64_t b = next.fetch_add(1);
      if (b >= blocks) return;
      try {
        fn(b, b * block, std::min(total, (b + 1) * block));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = blocks;
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

json CaseResult::to_json() const {
  return {{"fixture", fixture},
          {"n", n},
          {"vocab", vocab},
          {"m", m},
          {"k", k},
          {"draft_kind", draft_kind_name(draft)},
          {"prompt", prompt},
          {"samples", samples},
          {"outcomes", outcomes},
          {"tv", tv},
          {"tv_pass", tv_pass},
          {"chi_square",
           {{"statistic", std::isfinite(chi_square.statistic) ? chi_square.statistic : -1.0},
            {"dof", chi_square.dof},
            {"p_value", chi_square.p_value},
            {"cells", chi_square.cells},
            {"pooled_cells", chi_square.pooled_cells}}},
          {"chi_square_pass", chi_square_pass},
          {"nfe_bound_violations", nfe_bound_violations},
          {"short_iteration_violations", short_iteration_violations},
          {"iterations", iterations},
          {"first_rank_checks", first_rank_checks},
          {"first_rank_violations", first_rank_violations},
          {"mask_conditioning_events", mask_conditioning_events},
          {"model_nfe", model_nfe},
          {"aux_nfe", aux_nfe},
          {"max_model_nfe", max_model_nfe}};
}

const SuiteResult* VerificationReport::suite(const std::string& name) const {
  for (const auto& s : suites) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

std::vector<std::string> VerificationReport::failed_suites() const {
  std::vector<std::string> out;
  for (const auto& s : suites) {
    if (!s.passed) out.push_back(s.name);
  }
  return out;
}

json VerificationReport::to_json() const {
  json out;
  out["passed"] = passed;
  json ss = json::array();
  json timing = json::object();
  for (const auto& s : suites) {
    ss.push_back({{"name", s.name}, {"passed", s.passed}, {"message", s.message}, {"detail", s.detail}});
    timing[s.name] = {{"runtime_ms", s.runtime_ms}};
  }
  out["suites"] = std::move(ss);
  json cs = json::array();
  for (const auto& c : cases) cs.push_back(c.to_json());
  out["cases"] = std::move(cs);
  out["warnings"] = warnings;
  out["failed_suites"] = failed_suites();
  out["timing"] = std::move(timing);
  return out;
}

namespace {

constexpr std::int64_t kTrialBlock = 4096;
constexpr std::uint64_t kSingleStepStream = 0x5157;
constexpr std::uint64_t kMeanFieldStream = 0x4D46;
constexpr std::uint64_t kNgramStream = 0x4E47;

// Prompt positions spread over the sequence; values chosen greedily by
// largest mass so the prompt is always reachable.
TokenSequence matrix_prompt(const TabularJointModel& model, int m, std::vector<int>& positions) {
  const int n = model.length();
  const int v = model.vocab_size();
  require(m >= 0 && m < n, ErrorCode::kInvalidConfig, "prompt length must lie in [0, N)");
  positions.clear();
  for (int j = 0; j < m; ++j) positions.push_back(static_cast<int>((2 * j + 1) * n / (2 * m)));
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  require(static_cast<int>(positions.size()) == m, ErrorCode::kInvalidConfig, "prompt positions collide");
  TokenSequence seq = TokenSequence::masked(n, v);
  for (int pos : positions) {
    int best = 0;
    double best_mass = -1.0;
    for (int x = 0; x < v; ++x) {
      seq.set(pos, x);
      const double mass = model.mass(seq);
      if (mass > best_mass) {
        best_mass = mass;
        best = x;
      }
    }
    seq.set(pos, best);
  }
  return seq;
}

struct CasePartial {
  std::vector<std::int64_t> counts;
  std::int64_t nfe_bound_violations = 0;
  std::int64_t short_iteration_violations = 0;
  std::int64_t iterations = 0;
  std::int64_t first_rank_checks = 0;
  std::int64_t first_rank_violations = 0;
  std::int64_t mask_conditioning_events = 0;
  std::int64_t model_nfe = 0;
  std::int64_t aux_nfe = 0;
  std::int64_t max_model_nfe = 0;
};

CaseResult run_case(const Fixture& fx, int m, int k, DraftKind draft, const VerifyOptions& opts,
                    std::uint64_t case_seed) {
  const TabularJointModel& model = fx.model;
  CaseResult res;
  res.fixture = fx.id;
  res.n = model.length();
  res.vocab = model.vocab_size();
  res.m = m;
  res.k = k;
  res.draft = draft;
  std::vector<int> positions;
  const TokenSequence prompt = matrix_prompt(model, m, positions);
  res.prompt.assign(prompt.tokens().begin(), prompt.tokens().end());
  const Ordering ord = canonicalize_ordering(positions, res.n);

  ExactDistribution exact;
  for (const auto& [cell, prob] : model.completion_distribution(prompt)) {
    if (prob > 0.0) {
      exact[model.cell_tokens(cell)] = prob;
      ++res.outcomes;
    }
  }
  res.samples = std::max(opts.samples_min, opts.samples_per_outcome * res.outcomes);

  SamplerConfig sc;
  sc.k = k;
  sc.seed = case_seed;
  sc.draft_kind = draft;
  sc.assertions = AssertionLevel::kCount;
  sc.fault_accept_offset = opts.fault_accept_offset;
  const bool bound_applies = !(draft == DraftKind::kSelf && k < 2);
  const std::int64_t bound = res.n - m;
  const std::size_t cells = model.table().size();

  const std::int64_t blocks = (res.samples + kTrialBlock - 1) / kTrialBlock;
  std::vector<CasePartial> partials(static_cast<std::size_t>(blocks));
  parallel_blocks(res.samples, kTrialBlock, opts.threads, [&](std::int64_t b, std::int64_t begin, std::int64_t end) {
    CasePartial& part = partials[static_cast<std::size_t>(b)];
    part.counts.assign(cells, 0);
    for (std::int64_t trial = begin; trial < end; ++trial) {
      Rng rng(Rng::derive(case_seed, static_cast<std::uint64_t>(trial)));
      const DecodeResult out = draft == DraftKind::kSelf ? decode_assd(model, prompt, ord, sc, rng)
                                                         : decode_assd_ngram(model, prompt, ord, sc, rng);
      const DecodeTrace& tr = out.trace;
      ++part.counts[model.cell_index(out.tokens.tokens())];
      part.model_nfe += tr.model_nfe;
      part.aux_nfe += tr.aux_nfe;
      part.max_model_nfe = std::max(part.max_model_nfe, tr.model_nfe);
      if (bound_applies && tr.model_nfe > bound) ++part.nfe_bound_violations;
      if (draft == DraftKind::kSelf && k >= 2) {
        for (int it = 0; it + 1 < tr.iterations(); ++it) {
          if (tr.accepted_per_iter[static_cast<std::size_t>(it)] < 2) ++part.short_iteration_violations;
        }
      }
      part.iterations += tr.iterations();
      part.first_rank_checks += tr.first_rank_checks;
      part.first_rank_violations += tr.first_rank_violations;
      part.mask_conditioning_events += tr.mask_conditioning_events;
    }
  });

  std::vector<std::int64_t> counts(cells, 0);
  for (const auto& part : partials) {
    for (std::size_t c = 0; c < cells; ++c) counts[c] += part.counts[c];
    res.nfe_bound_violations += part.nfe_bound_violations;
    res.short_iteration_violations += part.short_iteration_violations;
    res.iterations += part.iterations;
    res.first_rank_checks += part.first_rank_checks;
    res.first_rank_violations += part.first_rank_violations;
    res.mask_conditioning_events += part.mask_conditioning_events;
    res.model_nfe += part.model_nfe;
    res.aux_nfe += part.aux_nfe;
    res.max_model_nfe = std::max(res.max_model_nfe, part.max_model_nfe);
  }
  EmpiricalDistribution empirical;
  for (std::size_t c = 0; c < cells; ++c) {
    if (counts[c] > 0) empirical.add(model.cell_tokens(c), counts[c]);
  }
  res.tv = total_variation(empirical, exact);
  res.chi_square = chi_square_gof(empirical, exact);
  res.tv_pass = res.tv < opts.tv_threshold;
  res.chi_square_pass = res.chi_square.p_value >= opts.alpha;
  return res;
}

bool wants(const VerifyOptions& opts, const std::string& suite) {
  return opts.only_suites.empty() ||
         std::find(opts.only_suites.begin(), opts.only_suites.end(), suite) != opts.only_suites.end();
}

SuiteResult suite_single_step(const VerifyOptions& opts) {
  SuiteResult s;
  s.name = "single_step";
  Rng rng(Rng::derive(opts.seed, kSingleStepStream));
  double max_err = 0.0;
  const auto random_dist = [&](int v) {
    std::vector<double> w(static_cast<std::size_t>(v));
    double total = 0.0;
    do {
      total = 0.0;
      for (double& x : w) {
        x = rng.uniform() < 0.2 ? 0.0 : rng.exponential();
        total += x;
      }
    } while (total <= 0.0);
    return ProbVector::from_weights(w);
  };
  for (int i = 0; i < opts.single_step_pairs; ++i) {
    const int v = 2 + static_cast<int>(rng.below(7));
    const ProbVector p = random_dist(v);
    const ProbVector q = i % 10 == 0 ? p : random_dist(v);
    const ProbVector out = step_exact_outcome_distribution(p, q);
    for (int x = 0; x < v; ++x) {
      max_err = std::max(max_err, std::abs(out[static_cast<std::size_t>(x)] - q[static_cast<std::size_t>(x)]));
    }
  }
  s.passed = max_err < 1e-12;
  s.detail = {{"pairs", opts.single_step_pairs}, {"max_abs_error", max_err}, {"tolerance", 1e-12}};
  std::ostringstream msg;
  msg << opts.single_step_pairs << " pairs, max abs error " << max_err;
  s.message = msg.str();
  return s;
}

double parallel_tv(const TabularJointModel& model, std::int64_t samples, std::uint64_t seed, int threads) {
  const int n = model.length();
  const TokenSequence prompt = TokenSequence::masked(n, model.vocab_size());
  const Ordering ord = Ordering::identity(n, 0);
  const std::size_t cells = model.table().size();
  const std::int64_t blocks = (samples + kTrialBlock - 1) / kTrialBlock;
  std::vector<std::vector<std::int64_t>> partial(static_cast<std::size_t>(blocks));
  parallel_blocks(samples, kTrialBlock, threads, [&](std::int64_t b, std::int64_t begin, std::int64_t end) {
    auto& counts = partial[static_cast<std::size_t>(b)];
    counts.assign(cells, 0);
    for (std::int64_t t = begin; t < end; ++t) {
      Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(t)));
      ++counts[model.cell_index(decode_parallel_independent(model, prompt, ord, rng).tokens.tokens())];
    }
  });
  ExactDistribution exact;
  EmpiricalDistribution empirical;
  for (std::size_t c = 0; c < cells; ++c) {
    std::int64_t count = 0;
    for (const auto& p : partial) count += p[c];
    if (model.table()[c] > 0.0) exact[model.cell_tokens(c)] = model.table()[c];
    if (count > 0) empirical.add(model.cell_tokens(c), count);
  }
  return total_variation(empirical, exact);
}

SuiteResult suite_mean_field(const VerifyOptions& opts) {
  SuiteResult s;
  s.name = "mean_field";
  const TabularJointModel correlated(2, 2, {0.5, 0.0, 0.0, 0.5});
  const TabularJointModel independent = fixtures::product({{0.3, 0.7}, {0.8, 0.2}});
  const double tv_corr =
      parallel_tv(correlated, opts.mean_field_samples, Rng::derive(opts.seed, kMeanFieldStream), opts.threads);
  const double tv_prod =
      parallel_tv(independent, opts.mean_field_samples, Rng::derive(opts.seed, kMeanFieldStream + 1), opts.threads);
  const bool corr_ok = tv_corr >= 0.45 && tv_corr <= 0.55;
  const bool prod_ok = tv_prod < opts.tv_threshold;
  s.passed = corr_ok && prod_ok;
  s.detail = {{"samples", opts.mean_field_samples},
              {"correlated_tv", tv_corr},
              {"correlated_range", {0.45, 0.55}},
              {"product_tv", tv_prod},
              {"product_threshold", opts.tv_threshold}};
  std::ostringstream msg;
  msg << "correlated TV " << tv_corr << ", product TV " << tv_prod;
  s.message = msg.str();
  return s;
}

// Direct scan over adjacent pairs, independent of BigramCounts.
std::vector<std::int64_t> brute_pairs(const TokenSequence& seq) {
  const int v = seq.vocab();
  std::vector<std::int64_t> pairs(static_cast<std::size_t>(v) * v, 0);
  for (int i = 0; i + 1 < seq.n(); ++i) {
    if (!seq.is_mask(i) && !seq.is_mask(i + 1)) ++pairs[static_cast<std::size_t>(seq[i]) * v + seq[i + 1]];
  }
  return pairs;
}

SuiteResult suite_ngram_safety(const VerifyOptions& opts, const std::vector<CaseResult>& cases) {
  SuiteResult s;
  s.name = "ngram_safety";
  Rng rng(Rng::derive(opts.seed, kNgramStream));
  int count_mismatches = 0;
  for (int c = 0; c < opts.ngram_count_contexts; ++c) {
    const int v = 2 + static_cast<int>(rng.below(5));
    const int n = 2 + static_cast<int>(rng.below(15));
    TokenSequence full = TokenSequence::masked(n, v);
    for (int i = 0; i < n; ++i) full.set(i, static_cast<int>(rng.below(static_cast<std::uint64_t>(v))));
    // Reveal positions in a random order, checking the running counts at
    // every prefix of the reveal.
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
    }
    TokenSequence partial = TokenSequence::masked(n, v);
    BigramCounts running(v);
    for (int pos : order) {
      partial.set(pos, full[pos]);
      running.on_commit(partial, pos);
      const BigramCounts swept = BigramCounts::build(partial);
      const auto brute = brute_pairs(partial);
      bool ok = running == swept;
      for (int a = 0; a < v && ok; ++a) {
        std::int64_t left = 0;
        for (int b = 0; b < v; ++b) {
          const std::int64_t expect = brute[static_cast<std::size_t>(a) * v + b];
          left += expect;
          ok = ok && swept.pair(a, b) == expect;
        }
        ok = ok && swept.left(a) == left;
        if (ok) {
          const ProbVector cond = swept.conditional(a);
          for (int b = 0; b < v && ok; ++b) {
            const double expect =
                left == 0 ? 1.0 / v
                          : static_cast<double>(brute[static_cast<std::size_t>(a) * v + b]) / static_cast<double>(left);
            ok = std::abs(cond[static_cast<std::size_t>(b)] - expect) < 1e-15;
          }
        }
      }
      if (!ok) ++count_mismatches;
    }
  }
  std::int64_t decodes = 0;
  std::int64_t events = 0;
  for (const auto& c : cases) {
    if (c.draft != DraftKind::kContextBigram) continue;
    decodes += c.samples;
    events += c.mask_conditioning_events;
  }
  s.passed = count_mismatches == 0 && events == 0;
  s.detail = {{"count_contexts", opts.ngram_count_contexts},
              {"count_mismatches", count_mismatches},
              {"ngram_decodes", decodes},
              {"mask_conditioning_events", events}};
  std::ostringstream msg;
  msg << decodes << " n-gram decodes, " << events << " MASK-conditioning events, " << count_mismatches
      << " count mismatches";
  s.message = msg.str();
  return s;
}

}  // namespace

VerificationReport run_verification(const VerifyOptions& opts) {
  VerificationReport report;
  for (int k : opts.ks) {
    SamplerConfig probe;
    probe.k = k;
    for (const auto& w : probe.warnings()) {
      if (std::find(report.warnings.begin(), report.warnings.end(), w) == report.warnings.end()) {
        report.warnings.push_back(w);
      }
    }
  }

  if (wants(opts, "single_step")) {
    const auto start = Clock::now();
    report.suites.push_back(suite_single_step(opts));
    report.suites.back().runtime_ms = elapsed_ms(start);
  }

  const bool need_matrix =
      wants(opts, "distribution") || wants(opts, "nfe_bound") || wants(opts, "first_rank") || wants(opts, "ngram_safety");
  double matrix_ms = 0.0;
  if (need_matrix) {
    const auto start = Clock::now();
    std::uint64_t case_index = 0;
    for (const auto& fx : opts.fixtures) {
      for (int m : opts.prompt_lengths) {
        for (int k : opts.ks) {
          for (DraftKind d : opts.draft_kinds) {
            report.cases.push_back(run_case(fx, m, k, d, opts, Rng::derive(opts.seed, case_index++)));
          }
        }
      }
    }
    matrix_ms = elapsed_ms(start);
  }

  if (wants(opts, "distribution")) {
    SuiteResult s;
    s.name = "distribution";
    int failures = 0;
    double worst_tv = 0.0;
    double min_p = 1.0;
    for (const auto& c : report.cases) {
      if (!c.tv_pass || !c.chi_square_pass) ++failures;
      worst_tv = std::max(worst_tv, c.tv);
      min_p = std::min(min_p, c.chi_square.p_value);
    }
    s.passed = failures == 0 && !report.cases.empty();
    s.detail = {{"cases", report.cases.size()}, {"failing_cases", failures},         {"max_tv", worst_tv},
                {"min_p_value", min_p},         {"tv_threshold", opts.tv_threshold}, {"alpha", opts.alpha}};
    std::ostringstream msg;
    msg << report.cases.size() << " cases, " << failures << " failing, max TV " << worst_tv << ", min p " << min_p;
    s.message = msg.str();
    s.runtime_ms = matrix_ms;
    report.suites.push_back(std::move(s));
  }

  if (wants(opts, "nfe_bound")) {
    SuiteResult s;
    s.name = "nfe_bound";
    std::int64_t violations = 0;
    std::int64_t short_iters = 0;
    std::int64_t self_decodes = 0;
    int exempt = 0;
    for (const auto& c : report.cases) {
      violations += c.nfe_bound_violations;
      if (c.draft == DraftKind::kSelf) {
        if (c.k < 2) {
          ++exempt;
          continue;
        }
        self_decodes += c.samples;
        short_iters += c.short_iteration_violations;
      }
    }
    s.passed = violations == 0 && short_iters == 0;
    s.detail = {{"violations", violations},
                {"short_iteration_violations", short_iters},
                {"self_decodes", self_decodes},
                {"exempt_cases", exempt}};
    std::ostringstream msg;
    msg << self_decodes << " self-draft decodes, " << violations << " bound violations, " << short_iters
        << " short iterations";
    if (exempt > 0) msg << " (" << exempt << " cases with k < 2 exempt)";
    s.message = msg.str();
    report.suites.push_back(std::move(s));
  }

  if (wants(opts, "first_rank")) {
    SuiteResult s;
    s.name = "first_rank";
    std::int64_t checks = 0;
    std::int64_t iterations = 0;
    std::int64_t violations = 0;
    bool all_equal = true;
    for (const auto& c : report.cases) {
      if (c.draft != DraftKind::kSelf) continue;
      checks += c.first_rank_checks;
      iterations += c.iterations;
      violations += c.first_rank_violations;
      all_equal = all_equal && c.first_rank_checks == c.iterations;
    }
    s.passed = all_equal && violations == 0;
    s.detail = {{"checks", checks}, {"iterations", iterations}, {"violations", violations}};
    std::ostringstream msg;
    msg << checks << " checks over " << iterations << " iterations, " << violations << " violations";
    s.message = msg.str();
    report.suites.push_back(std::move(s));
  }

  if (wants(opts, "mean_field")) {
    const auto start = Clock::now();
    report.suites.push_back(suite_mean_field(opts));
    report.suites.back().runtime_ms = elapsed_ms(start);
  }

  if (wants(opts, "ngram_safety")) {
    const auto start = Clock::now();
    report.suites.push_back(suite_ngram_safety(opts, report.cases));
    report.suites.back().runtime_ms = elapsed_ms(start);
  }

  report.passed = std::all_of(report.suites.begin(), report.suites.end(), [](const auto& s) { return s.passed; });
  return report;
}

int cmd_verify(const RunConfig& cfg, std::ostream& log) {
  const VerifyOptions opts = verify_options_from_config(cfg);
  const VerificationReport report = run_verification(opts);
  for (const auto& w : report.warnings) log << "warning: " << w << "\n";
  for (const auto& s : report.suites) log << (s.passed ? "PASS " : "FAIL ") << s.name << ": " << s.message << "\n";
  const fs::path out = cfg.out_dir.empty() ? fs::path("out/verify") : cfg.out_dir;
  ensure_out_dir(out);
  write_text_file(out / "verification_report.json", report.to_json().dump(2) + "\n");
  if (!report.passed) {
    log << "verification failed:";
    for (const auto& name : report.failed_suites()) log << " " << name;
    log << "\n";
    return kExitVerificationFailure;
  }
  log << "verification passed\n";
  return kExitOk;
}

namespace {

// Maps between token ids and display characters.
struct Symbols {
  std::string chars;  // chars[id]

  int encode(char c) const {
    const auto pos = chars.find(c);
    return pos == std::string::npos ? -1 : static_cast<int>(pos);
  }
  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) out += id == kMask ? '_' : chars[static_cast<std::size_t>(id)];
    return out;
  }
};

struct LoadedModel {
  std::optional<TabularJointModel> tabular;
  std::optional<TwoStreamTransformer> transformer;
  Symbols symbols;
  const AnyOrderModel& get() const {
    if (tabular) return *tabular;
    return *transformer;
  }
};

LoadedModel load_model(const RunConfig& cfg) {
  require(cfg.raw.contains("model") && cfg.raw.at("model").is_object(), ErrorCode::kInvalidConfig,
          "config needs a \"model\" object");
  const json& spec = cfg.raw.at("model");
  const std::string kind = spec.value("kind", std::string("tabular"));
  LoadedModel out;
  if (kind == "tabular") {
    require(spec.contains("path"), ErrorCode::kInvalidConfig, "tabular model needs \"path\"");
    out.tabular = load_fixture(cfg.input_path(spec.at("path").get<std::string>())).model;
    const std::string digits = "0123456789abcdefghijklmnopqrstuvwxyz";
    const int v = out.tabular->vocab_size();
    out.symbols.chars = v <= static_cast<int>(digits.size()) ? digits.substr(0, static_cast<std::size_t>(v))
                                                             : std::string(static_cast<std::size_t>(v), '?');
  } else if (kind == "transformer") {
    require(spec.contains("checkpoint"), ErrorCode::kInvalidConfig, "transformer model needs \"checkpoint\"");
    const fs::path prefix = cfg.input_path(spec.at("checkpoint").get<std::string>());
    if (!(fs::exists(prefix.string() + ".json")))
      fail(ErrorCode::kInvalidConfig, "checkpoint '" + prefix.string() + ".json' does not exist");
    json meta;
    out.transformer = TwoStreamTransformer::load(prefix.string(), &meta);
    out.symbols.chars = meta.value("alphabet", std::string()) + "|";
    require(static_cast<int>(out.symbols.chars.size()) == out.transformer->vocab_size(), ErrorCode::kInvalidInput,
            "checkpoint alphabet does not match its vocabulary");
  } else {
    fail(ErrorCode::kInvalidConfig, "unknown model kind '" + kind + "'");
  }
  return out;
}

// Fixed prompt from "prompt" (text with _MASK_ markers) or "prompt_tokens"
// (-1 = MASK). Short prompts are padded with MASK.
std::optional<TokenSequence> fixed_prompt(const RunConfig& cfg, const LoadedModel& lm) {
  const AnyOrderModel& model = lm.get();
  const int n = model.length();
  std::vector<int> ids;
  if (cfg.raw.contains("prompt")) {
    static constexpr std::string_view kMarker = "_MASK_";
    const std::string text = cfg.raw.at("prompt").get<std::string>();
    for (std::size_t i = 0; i < text.size();) {
      if (text.compare(i, kMarker.size(), kMarker) == 0) {
        ids.push_back(kMask);
        i += kMarker.size();
        continue;
      }
      const int id = lm.symbols.encode(text[i]);
      if (!(id >= 0)) fail(ErrorCode::kInvalidInput, std::string("prompt character '") + text[i] + "' is not a token");
      ids.push_back(id);
      ++i;
    }
  } else if (cfg.raw.contains("prompt_tokens")) {
    ids = cfg.raw.at("prompt_tokens").get<std::vector<int>>();
  } else {
    return std::nullopt;
  }
  if (!(static_cast<int>(ids.size()) <= n))
    fail(ErrorCode::kInvalidInput,
         "prompt has " + std::to_string(ids.size()) + " tokens but the model length is " + std::to_string(n));
  ids.resize(static_cast<std::size_t>(n), kMask);
  return TokenSequence(std::move(ids), model.vocab_size());
}

std::vector<int> visible_positions(const TokenSequence& seq) {
  std::vector<int> out;
  for (int p = 0; p < seq.n(); ++p) {
    if (!seq.is_mask(p)) out.push_back(p);
  }
  return out;
}

struct PromptSource {
  std::optional<TokenSequence> fixed;
  double mask_fraction = 1.0;
  std::vector<TokenSequence> corpus;  // transformer source sequences

  // Prompt for one trial; random prompts keep round((1 - f) N) positions of a
  // source sequence.
  TokenSequence draw(const LoadedModel& lm, Rng& rng) const {
    if (fixed) return *fixed;
    const AnyOrderModel& model = lm.get();
    const int n = model.length();
    TokenSequence source;
    if (lm.tabular) {
      source = lm.tabular->sample_joint(rng);
    } else {
      require(!corpus.empty(), ErrorCode::kInvalidConfig, "mask_fraction prompts need a \"corpus\" for this model");
      source = corpus[rng.below(corpus.size())];
    }
    const int keep = static_cast<int>(std::lround((1.0 - mask_fraction) * n));
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 0; i < keep; ++i) {
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(i) + rng.below(perm.size() - i)]);
    }
    TokenSequence prompt = TokenSequence::masked(n, model.vocab_size());
    for (int i = 0; i < keep; ++i)
      prompt.set(perm[static_cast<std::size_t>(i)], source[perm[static_cast<std::size_t>(i)]]);
    return prompt;
  }
};

std::vector<TokenSequence> load_corpus_chunks(const RunConfig& cfg, const std::string& key, const LoadedModel& lm) {
  if (!cfg.raw.contains(key)) return {};
  if (!(lm.transformer.has_value())) fail(ErrorCode::kInvalidConfig, "\"" + key + "\" needs a transformer model");
  const std::string alphabet = lm.symbols.chars.substr(0, lm.symbols.chars.size() - 1);
  const auto docs = split_documents(read_text_file(cfg.input_path(cfg.raw.at(key).get<std::string>())));
  return tokenize_and_pack(docs, CharTokenizer(alphabet), lm.transformer->length(), UnknownCharPolicy::kSkip);
}

PromptSource prompt_source(const RunConfig& cfg, const LoadedModel& lm) {
  PromptSource src;
  src.fixed = fixed_prompt(cfg, lm);
  src.mask_fraction = cfg.raw.value("mask_fraction", 1.0);
  require(src.mask_fraction >= 0.0 && src.mask_fraction <= 1.0, ErrorCode::kInvalidConfig,
          "mask_fraction must lie in [0, 1]");
  src.corpus = load_corpus_chunks(cfg, "corpus", lm);
  return src;
}

SamplerConfig sampler_config(const RunConfig& cfg) {
  SamplerConfig sc;
  if (cfg.k) sc.k = *cfg.k;
  sc.assertions = AssertionLevel::kCount;
  sc.validate();
  return sc;
}

}  // namespace

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const json& j = cfg.raw;
  require(j.contains("corpus"), ErrorCode::kInvalidConfig, "train config needs \"corpus\"");
  const auto docs = split_documents(read_text_file(cfg.input_path(j.at("corpus").get<std::string>())));
  require(!docs.empty(), ErrorCode::kInvalidInput, "corpus is empty");
  const CharTokenizer tok =
      j.contains("alphabet") ? CharTokenizer(j.at("alphabet").get<std::string>()) : CharTokenizer::from_documents(docs);
  const std::string policy = j.value("unknown_chars", std::string("error"));
  require(policy == "error" || policy == "skip", ErrorCode::kInvalidConfig, "unknown_chars must be error|skip");

  TransformerConfig mc = transformer_config_from_json(j.value("model", json::object()));
  mc.vocab = tok.vocab();
  mc.seq_len = j.value("seq_len", mc.seq_len);
  mc.validate();
  TrainConfig tc = train_config_from_json(j.value("train", json::object()));
  tc.seed = cfg.seed;
  tc.validate();

  const auto chunks =
      tokenize_and_pack(docs, tok, mc.seq_len, policy == "skip" ? UnknownCharPolicy::kSkip : UnknownCharPolicy::kError);
  const double val_fraction = j.value("val_fraction", 0.1);
  require(val_fraction > 0.0 && val_fraction < 1.0, ErrorCode::kInvalidConfig, "val_fraction must lie in (0, 1)");
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(val_fraction * chunks.size())));
  if (!(chunks.size() > n_val))
    fail(ErrorCode::kInvalidInput,
         "corpus yields " + std::to_string(chunks.size()) + " chunks; need more than the validation split");
  const std::span<const TokenSequence> all(chunks);
  const auto train_chunks = all.first(chunks.size() - n_val);
  const auto val_chunks = all.last(n_val);

  Rng init_rng(Rng::derive(cfg.seed, 0));
  TwoStreamTransformer model(mc, init_rng);
  log << "training " << model.parameter_count() << " parameters on " << train_chunks.size() << " chunks ("
      << val_chunks.size() << " held out)\n";
  const TrainResult result = train(model, train_chunks, val_chunks, tc);
  log << "validation NLL " << result.initial_val_nll << " -> " << result.final_val_nll << " nats/token\n";

  const fs::path out = cfg.out_dir.empty() ? fs::path("out/train") : cfg.out_dir;
  ensure_out_dir(out);
  const json meta = {{"alphabet", tok.alphabet()},
                     {"seed", cfg.seed},
                     {"steps", tc.steps},
                     {"initial_val_nll", result.initial_val_nll},
                     {"final_val_nll", result.final_val_nll}};
  model.save((out / "model").string(), meta);
  std::ostringstream csv;
  write_loss_curve_csv(csv, result.curve);
  write_text_file(out / "loss_curve.csv", csv.str());
  return kExitOk;
}

int cmd_sample(const RunConfig& cfg, std::ostream& log) {
  const LoadedModel lm = load_model(cfg);
  const AnyOrderModel& model = lm.get();
  const PromptSource src = prompt_source(cfg, lm);
  const DecoderKind decoder = decoder_from_string(cfg.raw.value("decoder", std::string("assd-self")));
  const SamplerConfig base = sampler_config(cfg);
  if (decoder == DecoderKind::kAssdSelf || decoder == DecoderKind::kAssdNgram) {
    for (const auto& w : base.warnings()) log << "warning: " << w << "\n";
  }
  const int samples = cfg.raw.value("samples", 1);
  require(samples >= 1, ErrorCode::kInvalidConfig, "samples must be positive");

  std::ostringstream text;
  std::ostringstream traces;
  for (int s = 0; s < samples; ++s) {
    const std::uint64_t seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(s));
    Rng rng(seed);
    const TokenSequence prompt = src.draw(lm, rng);
    const Ordering ord = canonicalize_ordering(visible_positions(prompt), model.length());
    SamplerConfig sc = base;
    sc.seed = seed;
    DecodeResult res = run_decoder(decoder, model, prompt, ord, sc, rng);
    res.trace.seed = seed;
    text << lm.symbols.decode(res.tokens.tokens()) << "\n";
    traces << to_json(res.trace).dump() << "\n";
  }
  const fs::path out = cfg.out_dir.empty() ? fs::path("out/sample") : cfg.out_dir;
  ensure_out_dir(out);
  write_text_file(out / "samples.txt", text.str());
  write_text_file(out / "traces.jsonl", traces.str());
  log << "wrote " << samples << " samples to " << (out / "samples.txt").string() << "\n";
  return kExitOk;
}

int cmd_bench(const RunConfig& cfg, std::ostream& log) {
  const LoadedModel lm = load_model(cfg);
  const AnyOrderModel& model = lm.get();
  const PromptSource src = prompt_source(cfg, lm);
  const SamplerConfig base = sampler_config(cfg);
  for (const auto& w : base.warnings()) log << "warning: " << w << "\n";
  std::vector<DecoderKind> decoders;
  for (const auto& d : cfg.raw.value("decoders", std::vector<std::string>{"sequential", "assd-self", "assd-ngram"})) {
    decoders.push_back(decoder_from_string(d));
  }
  require(!decoders.empty(), ErrorCode::kInvalidConfig, "no decoders to compare");
  const int trials = cfg.raw.value("trials", 100);
  require(trials >= 1, ErrorCode::kInvalidConfig, "trials must be positive");

  std::unique_ptr<LeftToRightReference> reference;
  std::vector<TokenSequence> reference_corpus;
  const json ref = cfg.raw.value("reference", json::object());
  const std::string ref_kind = ref.value("kind", std::string(lm.tabular ? "tabular" : "bigram"));
  if (ref_kind == "tabular") {
    require(lm.tabular.has_value(), ErrorCode::kInvalidConfig, "tabular reference needs a tabular model");
    reference = std::make_unique<TabularReference>(*lm.tabular);
  } else if (ref_kind == "bigram") {
    RunConfig ref_cfg = cfg;
    ref_cfg.raw = {{"corpus", ref.value("corpus", cfg.raw.value("corpus", std::string()))}};
    reference_corpus = load_corpus_chunks(ref_cfg, "corpus", lm);
    require(!reference_corpus.empty(), ErrorCode::kInvalidConfig, "bigram reference needs a non-empty corpus");
    reference = std::make_unique<BigramReference>(model.vocab_size(), reference_corpus, ref.value("smoothing", 1.0));
  } else {
    fail(ErrorCode::kInvalidConfig, "unknown reference kind '" + ref_kind + "'");
  }

  struct Samples {
    std::vector<double> ppl, entropy, model_nfe, aux_nfe, tpi, masked, wall;
    int infinite = 0;
    bool nfe_matches_masked = true;
    EmpiricalDistribution outcomes;
  };
  std::vector<Samples> per(decoders.size());
  for (int t = 0; t < trials; ++t) {
    const std::uint64_t trial_seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(t));
    Rng prompt_rng(trial_seed);
    const TokenSequence prompt = src.draw(lm, prompt_rng);
    const Ordering ord = canonicalize_ordering(visible_positions(prompt), model.length());
    for (std::size_t d = 0; d < decoders.size(); ++d) {
      SamplerConfig sc = base;
      sc.seed = Rng::derive(trial_seed, d + 1);
      Rng rng(sc.seed);
      const DecodeResult res = run_decoder(decoders[d], model, prompt, ord, sc, rng);
      Samples& s = per[d];
      const PerplexityResult ppl = generative_perplexity(res.tokens.tokens(), *reference);
      if (ppl.finite) {
        s.ppl.push_back(ppl.value);
      } else {
        ++s.infinite;
      }
      s.entropy.push_back(shannon_entropy(res.tokens.tokens()));
      s.model_nfe.push_back(static_cast<double>(res.trace.model_nfe));
      s.aux_nfe.push_back(static_cast<double>(res.trace.aux_nfe));
      const int masked = ord.n() - ord.m();
      if (masked > 0) s.tpi.push_back(res.trace.tokens_per_iteration());
      s.masked.push_back(masked);
      s.wall.push_back(static_cast<double>(res.trace.duration_ns) * 1e-6);
      if (decoders[d] == DecoderKind::kSequential && res.trace.model_nfe != masked) s.nfe_matches_masked = false;
      if (src.fixed) s.outcomes.add(res.trace.tokens);
    }
  }

  MetricsReport report;
  std::optional<std::size_t> seq_idx, self_idx;
  for (std::size_t d = 0; d < decoders.size(); ++d) {
    Samples& s = per[d];
    DecoderSummary sum;
    sum.decoder = std::string(decoder_name(decoders[d]));
    sum.gen_ppl = mean_se(s.ppl);
    sum.entropy = mean_se(s.entropy);
    sum.model_nfe = mean_se(s.model_nfe);
    sum.aux_nfe = mean_se(s.aux_nfe);
    sum.tokens_per_iteration = mean_se(s.tpi);
    sum.masked_tokens = mean_se(s.masked);
    sum.wall_ms = mean_se(s.wall);
    sum.infinite_ppl = s.infinite;
    report.decoders.push_back(sum);
    if (decoders[d] == DecoderKind::kSequential && !seq_idx) seq_idx = d;
    if (decoders[d] == DecoderKind::kAssdSelf && !self_idx) self_idx = d;
  }
  if (seq_idx) {
    report.flags.push_back(per[*seq_idx].nfe_matches_masked ? "sequential_nfe_equals_masked_tokens"
                                                            : "sequential_nfe_differs_from_masked_tokens");
  }
  if (seq_idx && self_idx) {
    const double seq_total = std::accumulate(per[*seq_idx].model_nfe.begin(), per[*seq_idx].model_nfe.end(), 0.0);
    const double self_total = std::accumulate(per[*self_idx].model_nfe.begin(), per[*self_idx].model_nfe.end(), 0.0);
    report.flags.push_back(self_total < seq_total ? "assd_nfe_strictly_below_sequential"
                                                  : "assd_nfe_not_below_sequential");
  }
  if (lm.tabular && src.fixed) {
    const std::size_t d = self_idx.value_or(0);
    ExactDistribution exact;
    for (const auto& [cell, prob] : lm.tabular->completion_distribution(*src.fixed)) {
      if (prob > 0.0) exact[lm.tabular->cell_tokens(cell)] = prob;
    }
    report.tv_distance = total_variation(per[d].outcomes, exact);
    report.chi_square = chi_square_gof(per[d].outcomes, exact);
  }

  const fs::path out = cfg.out_dir.empty() ? fs::path("out/bench") : cfg.out_dir;
  ensure_out_dir(out);
  write_text_file(out / "metrics.json", report.to_json().dump(2) + "\n");
  std::ostringstream csv;
  report.write_csv(csv);
  write_text_file(out / "metrics.csv", csv.str());
  std::ostringstream timing;
  report.write_timing_csv(timing);
  write_text_file(out / "timing.csv", timing.str());
  for (const auto& d : report.decoders) {
    log << d.decoder << ": model NFE " << d.model_nfe.mean << " +- " << d.model_nfe.se << ", tokens/iteration "
        << d.tokens_per_iteration.mean << ", gen PPL " << d.gen_ppl.mean << "\n";
  }
  for (const auto& f : report.flags) log << "flag: " << f << "\n";
  return kExitOk;
}

int run_command(const std::string& command, const fs::path& config, const Overrides& overrides, std::ostream& log) {
  try {
    const RunConfig cfg = load_run_config(config, overrides);
    if (command == "verify") return cmd_verify(cfg, log);
    if (command == "train") return cmd_train(cfg, log);
    if (command == "sample") return cmd_sample(cfg, log);
    if (command == "bench") return cmd_bench(cfg, log);
    log << "error: unknown command '" << command << "'\n";
    return kExitConfigError;
  } catch (const Error& e) {
    log << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::kInvalidConfig:
      case ErrorCode::kInvalidInput: return kExitConfigError;
      default: return kExitRuntimeFault;
    }
  } catch (const json::exception& e) {
    log << "error [invalid-config]: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    log << "error [runtime]: " << e.what() << "\n";
    return kExitRuntimeFault;
  }
}

}  // namespace assd::harness
