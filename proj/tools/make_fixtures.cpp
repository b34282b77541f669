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

// Regenerates the tabular fixtures under fixtures/. Each file records the
// generator and seed that produced it.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>

#include "assd/rng.h"
#include "assd/tabular.h"

namespace {

struct Spec {
  std::string id;
  std::string generator;
  std::uint64_t seed;
  std::function<assd::TabularJointModel(assd::Rng&)> make;
};

}  // namespace

int main(int argc, char** argv) {
  using assd::Rng;
  namespace fx = assd::fixtures;
  const std::filesystem::path dir = argc > 1 ? argv[1] : "fixtures";
  const Spec specs[] = {
      {"random_n3_v2", "dirichlet(alpha=1)", 101, [](Rng& r) { return fx::random_dirichlet(2, 3, 1.0, r); }},
      {"correlated_n3_v3", "fully-correlated", 0, [](Rng&) { return fx::fully_correlated(3, 3); }},
      {"product_n4_v2", "random-product", 103, [](Rng& r) { return fx::random_product(2, 4, r); }},
      {"near_det_n4_v3", "near-deterministic(peak=0.9)", 104,
       [](Rng& r) { return fx::near_deterministic(3, 4, 0.9, r); }},
      {"random_n5_v2", "dirichlet(alpha=0.5)", 105, [](Rng& r) { return fx::random_dirichlet(2, 5, 0.5, r); }},
      {"random_n3_v4", "dirichlet(alpha=1)", 106, [](Rng& r) { return fx::random_dirichlet(4, 3, 1.0, r); }},
      {"sparse_markov_n4_v3", "sparse-markov", 107, [](Rng& r) { return fx::sparse_markov(3, 4, r); }},
  };
  std::filesystem::create_directories(dir);
  for (const auto& s : specs) {
    Rng rng(s.seed);
    nlohmann::json j = s.make(rng).to_json();
    j["id"] = s.id;
    j["generator"] = s.generator;
    j["seed"] = s.seed;
    std::ofstream out(dir / (s.id + ".json"));
    out << j.dump(2) << "\n";
    std::cout << "wrote " << (dir / (s.id + ".json")).string() << "\n";
  }
  return 0;
}
