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

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "assd/error.h"
#include "gtest/gtest.h"

namespace assd::harness {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const fs::path kSource = ASSD_SOURCE_DIR;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("assd_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

VerifyOptions smoke_options() {
  VerifyOptions opts;
  opts.fixtures.push_back(load_fixture(kSource / "fixtures/random_n3_v2.json"));
  opts.fixtures.push_back(load_fixture(kSource / "fixtures/correlated_n3_v3.json"));
  opts.samples_min = 20000;
  opts.samples_per_outcome = 500;
  opts.tv_threshold = 0.03;
  opts.single_step_pairs = 500;
  opts.mean_field_samples = 20000;
  opts.ngram_count_contexts = 20;
  opts.seed = 7;
  opts.threads = 2;
  return opts;
}

TEST(RunConfigTest, SeedIsRequired) {
  try {
    make_run_config(json{{"out", "x"}}, ".", {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidConfig);
  }
  EXPECT_THROW(make_run_config(json{{"seed", -3}}, ".", {}), Error);
  EXPECT_THROW(make_run_config(json::array(), ".", {}), Error);
}

TEST(RunConfigTest, OverridesBeatFile) {
  Overrides o;
  o.seed = 5;
  o.out = "elsewhere";
  o.k = 4;
  const RunConfig cfg = make_run_config(json{{"seed", 1}, {"out", "here"}, {"k", 2}}, "/base", o);
  EXPECT_EQ(cfg.seed, 5u);
  EXPECT_EQ(cfg.raw.at("seed"), 5);
  EXPECT_EQ(cfg.out_dir, "elsewhere");
  EXPECT_EQ(cfg.k, 4);
  EXPECT_EQ(cfg.input_path("a.json"), fs::path("/base/a.json"));
  EXPECT_EQ(cfg.input_path("/abs.json"), fs::path("/abs.json"));
  const RunConfig plain = make_run_config(json{{"seed", 1}, {"out", "here"}, {"k", 2}}, "/base", {});
  EXPECT_EQ(plain.seed, 1u);
  EXPECT_EQ(plain.out_dir, "here");
  EXPECT_EQ(plain.k, 2);
}

TEST(RunCommandTest, ConfigErrorsExitTwo) {
  const fs::path dir = scratch("config_errors");
  std::ostringstream log;
  EXPECT_EQ(run_command("verify", dir / "missing.json", {}, log), kExitConfigError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_command("verify", dir / "broken.json", {}, log), kExitConfigError);
  const fs::path no_seed = write_config(dir, json{{"fixtures", {"x.json"}}});
  EXPECT_EQ(run_command("verify", no_seed, {}, log), kExitConfigError);
  EXPECT_NE(log.str().find("seed"), std::string::npos);
  EXPECT_EQ(run_command("frobnicate", no_seed, {.seed = 1}, log), kExitConfigError);
  Overrides bad_k;
  bad_k.seed = 1;
  bad_k.k = 0;
  const fs::path sample = write_config(
      dir, json{{"seed", 1}, {"model", {{"kind", "tabular"}, {"path", (kSource / "fixtures/random_n3_v2.json").string()}}}});
  EXPECT_EQ(run_command("sample", sample, bad_k, log), kExitConfigError);
  fs::remove_all(dir);
}

json tabular_sample_config(const std::string& prompt) {
  return {{"seed", 3},
          {"model", {{"kind", "tabular"}, {"path", (kSource / "fixtures/correlated_n3_v3.json").string()}}},
          {"decoder", "assd-self"},
          {"prompt", prompt},
          {"samples", 20}};
}

TEST(SampleCommandTest, MaskMarkersInPrompt) {
  const fs::path dir = scratch("sample_prompt");
  const fs::path cfg = write_config(dir, tabular_sample_config("_MASK_2_MASK_"));
  std::ostringstream log;
  Overrides o;
  o.out = (dir / "out").string();
  ASSERT_EQ(run_command("sample", cfg, o, log), kExitOk) << log.str();
  std::istringstream lines(read_file(dir / "out/samples.txt"));
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    EXPECT_EQ(line, "222");
    ++count;
  }
  EXPECT_EQ(count, 20);
  std::istringstream traces(read_file(dir / "out/traces.jsonl"));
  ASSERT_TRUE(std::getline(traces, line));
  const json t = json::parse(line);
  EXPECT_EQ(t.at("m"), 1);
  EXPECT_EQ(t.at("n"), 3);
  fs::remove_all(dir);
}

TEST(SampleCommandTest, PromptErrorsExitTwo) {
  const fs::path dir = scratch("sample_errors");
  std::ostringstream log;
  Overrides o;
  o.out = (dir / "out").string();
  EXPECT_EQ(run_command("sample", write_config(dir, tabular_sample_config("0000")), o, log), kExitConfigError);
  EXPECT_NE(log.str().find("model length"), std::string::npos);
  EXPECT_EQ(run_command("sample", write_config(dir, tabular_sample_config("x")), o, log), kExitConfigError);
  fs::remove_all(dir);
}

TEST(SampleCommandTest, KWarningIsLogged) {
  const fs::path dir = scratch("sample_warning");
  std::ostringstream log;
  Overrides o;
  o.out = (dir / "out").string();
  o.k = 1;
  EXPECT_EQ(run_command("sample", write_config(dir, tabular_sample_config("_MASK_")), o, log), kExitOk);
  EXPECT_NE(log.str().find("warning"), std::string::npos);
  fs::remove_all(dir);
}

TEST(ParallelBlocksTest, CoversEveryBlockOnce) {
  for (int threads : {1, 3}) {
    std::vector<std::atomic<int>> hits(10);
    std::atomic<std::int64_t> covered{0};
    parallel_blocks(95, 10, threads, [&](std::int64_t b, std::int64_t begin, std::int64_t end) {
      ++hits[static_cast<std::size_t>(b)];
      EXPECT_EQ(begin, b * 10);
      EXPECT_EQ(end, std::min<std::int64_t>(95, begin + 10));
      covered += end - begin;
    });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_EQ(covered.load(), 95);
  }
}

TEST(VerificationTest, SmokeMatrixPasses) {
  const VerificationReport report = run_verification(smoke_options());
  EXPECT_TRUE(report.passed) << report.to_json().dump(2);
  EXPECT_EQ(report.cases.size(), 2u * 2u * 2u * 2u);
  for (const char* name : {"single_step", "distribution", "nfe_bound", "first_rank", "mean_field", "ngram_safety"}) {
    ASSERT_NE(report.suite(name), nullptr) << name;
    EXPECT_TRUE(report.suite(name)->passed) << name << ": " << report.suite(name)->message;
  }
  EXPECT_TRUE(report.warnings.empty());
}

TEST(VerificationTest, TamperedAcceptanceFailsDistributionSuite) {
  VerifyOptions opts = smoke_options();
  opts.fault_accept_offset = 1e-2;
  opts.only_suites = {"distribution"};
  const VerificationReport report = run_verification(opts);
  EXPECT_FALSE(report.passed);
  ASSERT_NE(report.suite("distribution"), nullptr);
  EXPECT_FALSE(report.suite("distribution")->passed);
  const auto failed = report.failed_suites();
  EXPECT_NE(std::find(failed.begin(), failed.end(), "distribution"), failed.end());
}

TEST(VerificationTest, SmallKWarnsButStillRuns) {
  VerifyOptions opts = smoke_options();
  opts.ks = {1};
  opts.only_suites = {"distribution", "nfe_bound"};
  const VerificationReport report = run_verification(opts);
  EXPECT_EQ(report.warnings.size(), 1u);
  ASSERT_NE(report.suite("distribution"), nullptr);
  EXPECT_TRUE(report.suite("distribution")->passed) << report.suite("distribution")->message;
  EXPECT_FALSE(report.cases.empty());
}

TEST(VerificationTest, ReproducibleAcrossThreadCounts) {
  VerifyOptions a = smoke_options();
  a.only_suites = {"distribution"};
  a.threads = 1;
  VerifyOptions b = a;
  b.threads = 3;
  const auto ra = run_verification(a);
  const auto rb = run_verification(b);
  ASSERT_EQ(ra.cases.size(), rb.cases.size());
  for (std::size_t i = 0; i < ra.cases.size(); ++i) EXPECT_EQ(ra.cases[i].to_json(), rb.cases[i].to_json());
}

TEST(VerifyCommandTest, WritesReport) {
  const fs::path dir = scratch("verify_cmd");
  const json cfg = {{"seed", 11},
                    {"fixtures", {(kSource / "fixtures/product_n4_v2.json").string()}},
                    {"k", {3}},
                    {"draft_kinds", {"self"}},
                    {"suites", {"distribution", "nfe_bound", "first_rank"}},
                    {"samples_min", 20000},
                    {"samples_per_outcome", 100},
                    {"tv_threshold", 0.03}};
  std::ostringstream log;
  Overrides o;
  o.out = (dir / "out").string();
  ASSERT_EQ(run_command("verify", write_config(dir, cfg), o, log), kExitOk) << log.str();
  const json report = json::parse(read_file(dir / "out/verification_report.json"));
  EXPECT_TRUE(report.at("passed").get<bool>());
  EXPECT_EQ(report.at("cases").size(), 2u);
  EXPECT_TRUE(report.contains("timing"));
  fs::remove_all(dir);
}

TEST(BenchCommandTest, TabularBenchReportsNfeFlags) {
  const fs::path dir = scratch("bench_cmd");
  const json cfg = {{"seed", 5},
                    {"model", {{"kind", "tabular"}, {"path", (kSource / "fixtures/random_n5_v2.json").string()}}},
                    {"decoders", {"sequential", "assd-self"}},
                    {"prompt_tokens", {-1, -1, -1, -1, -1}},
                    {"trials", 200}};
  std::ostringstream log;
  Overrides o;
  o.out = (dir / "out").string();
  ASSERT_EQ(run_command("bench", write_config(dir, cfg), o, log), kExitOk) << log.str();
  const json metrics = json::parse(read_file(dir / "out/metrics.json"));
  const auto flags = metrics.at("flags").get<std::vector<std::string>>();
  EXPECT_NE(std::find(flags.begin(), flags.end(), "sequential_nfe_equals_masked_tokens"), flags.end());
  EXPECT_NE(std::find(flags.begin(), flags.end(), "assd_nfe_strictly_below_sequential"), flags.end());
  EXPECT_TRUE(metrics.contains("tv_distance"));
  EXPECT_EQ(read_file(dir / "out/metrics.csv").rfind("decoder,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir / "out/timing.csv"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace assd::harness
