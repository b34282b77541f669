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

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "assd/harness.h"

int main(int argc, char** argv) {
  CLI::App app{"Any-subset speculative decoding: verification, training, sampling and benchmarks"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> k;
  for (const char* name : {"verify", "train", "sample", "bench"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--out", out, "Output directory");
    sub->add_option("--k", k, "Speculation window");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : assd::harness::kExitConfigError;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  return assd::harness::run_command(command, config, {seed, out, k}, std::cerr);
}
