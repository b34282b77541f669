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
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "assd/metrics.h"
#include "assd/sampler.h"
#include "assd/tabular.h"

namespace assd::harness {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerificationFailure = 1,
  kExitConfigError = 2,
  kExitRuntimeFault = 3,
};

// Flag overrides; any value set here beats the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> k;
};

struct RunConfig {
  nlohmann::json raw;
  std::filesystem::path base_dir;  // input paths are relative to the config file
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::optional<int> k;

  std::filesystem::path input_path(const std::string& relative) const;
};

// Throws invalid-config on unreadable JSON or a missing seed.
RunConfig load_run_config(const std::filesystem::path& path, const Overrides& overrides);
RunConfig make_run_config(nlohmann::json raw, const std::filesystem::path& base_dir, const Overrides& overrides);

struct Fixture {
  std::string id;
  TabularJointModel model;
};

Fixture load_fixture(const std::filesystem::path& path);

struct VerifyOptions {
  std::vector<Fixture> fixtures;
  std::vector<int> prompt_lengths{0, 1};
  std::vector<int> ks{3, 5};
  std::vector<DraftKind> draft_kinds{DraftKind::kSelf, DraftKind::kContextBigram};
  std::int64_t samples_min = 200000;
  std::int64_t samples_per_outcome = 5000;
  double tv_threshold = 0.01;
  double alpha = 0.001;
  int single_step_pairs = 10000;
  std::int64_t mean_field_samples = 100000;
  int ngram_count_contexts = 100;
  int threads = 0;  // 0 = hardware concurrency
  std::uint64_t seed = 0;
  double fault_accept_offset = 0.0;
  // Run only these suites when non-empty.
  std::vector<std::string> only_suites;
};

VerifyOptions verify_options_from_config(const RunConfig& cfg);

struct CaseResult {
  std::string fixture;
  int n = 0;
  int vocab = 0;
  int m = 0;
  int k = 0;
  DraftKind draft = DraftKind::kSelf;
  std::vector<int> prompt;
  std::int64_t samples = 0;
  int outcomes = 0;  // support size of the exact completion distribution
  double tv = 0.0;
  ChiSquareResult chi_square;
  bool tv_pass = false;
  bool chi_square_pass = false;
  std::int64_t nfe_bound_violations = 0;
  std::int64_t short_iteration_violations = 0;  // non-final self iterations committing < 2
  std::int64_t iterations = 0;
  std::int64_t first_rank_checks = 0;
  std::int64_t first_rank_violations = 0;
  std::int64_t mask_conditioning_events = 0;
  std::int64_t model_nfe = 0;
  std::int64_t aux_nfe = 0;
  std::int64_t max_model_nfe = 0;

  nlohmann::json to_json() const;
};

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::string message;
  nlohmann::json detail = nlohmann::json::object();
  double runtime_ms = 0.0;
};

struct VerificationReport {
  std::vector<SuiteResult> suites;
  std::vector<CaseResult> cases;
  std::vector<std::string> warnings;
  bool passed = true;

  const SuiteResult* suite(const std::string& name) const;
  std::vector<std::string> failed_suites() const;
  // Runtimes live under "timing".
  nlohmann::json to_json() const;
};

VerificationReport run_verification(const VerifyOptions& opts);

// Deterministic fan-out: [0, total) is cut into fixed blocks; `fn(block,
// begin, end)` runs on a worker pool and callers reduce by block index.
void parallel_blocks(std::int64_t total, std::int64_t block, int threads,
                     const std::function<void(std::int64_t, std::int64_t, std::int64_t)>& fn);

int cmd_verify(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_sample(const RunConfig& cfg, std::ostream& log);
int cmd_bench(const RunConfig& cfg, std::ostream& log);

// Loads the config, dispatches, and maps errors to exit codes.
int run_command(const std::string& command, const std::filesystem::path& config, const Overrides& overrides,
                std::ostream& log);

}  // namespace assd::harness
