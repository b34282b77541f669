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

#include "assd/tabular.h"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include "assd/error.h"

namespace assd {
namespace {

constexpr std::uint64_t kMaxPrecomputedStates = std::uint64_t{1} << 21;

// Returns 0 on overflow past `cap`.
std::uint64_t checked_power(std::uint64_t base, int exp, std::uint64_t cap) {
  std::uint64_t value = 1;
  for (int i = 0; i < exp; ++i) {
    if (value > cap / base) return 0;
    value *= base;
  }
  return value;
}

}  // namespace

TabularJointModel::TabularJointModel(int vocab, int n, std::vector<double> table, std::size_t cell_cap)
    : vocab_(vocab), n_(n), table_(std::move(table)) {
  require(vocab >= 1 && n >= 1, ErrorCode::kInvalidInput, "tabular model needs V >= 1 and N >= 1");
  const std::uint64_t cells = checked_power(static_cast<std::uint64_t>(vocab), n, cell_cap);
  if (!(cells != 0)) fail(ErrorCode::kInvalidInput, "V^N exceeds the tabular cell cap of " + std::to_string(cell_cap));
  if (!(table_.size() == cells))
    fail(ErrorCode::kInvalidInput,
         "table has " + std::to_string(table_.size()) + " cells, expected " + std::to_string(cells));
  double sum = 0.0;
  for (double p : table_) {
    require(p >= 0.0 && std::isfinite(p), ErrorCode::kInvalidInput, "negative or non-finite table entry");
    sum += p;
  }
  if (!(std::abs(sum - 1.0) <= kNormTolerance)) fail(ErrorCode::kInvalidInput, "table sums to " + std::to_string(sum));

  const auto base = static_cast<std::uint64_t>(vocab) + 1;
  digit_weight_.assign(static_cast<std::size_t>(n), 1);
  for (int p = n - 2; p >= 0; --p) {
    digit_weight_[static_cast<std::size_t>(p)] = digit_weight_[static_cast<std::size_t>(p) + 1] * base;
  }
  for (int p = 0; p < n; ++p)
    all_mask_code_ += static_cast<std::uint64_t>(vocab) * digit_weight_[static_cast<std::size_t>(p)];

  const std::uint64_t states = checked_power(base, n, kMaxPrecomputedStates);
  if (states == 0) return;
  // Every state's mass is the sum over its first MASK digit; replacing a MASK
  // digit (the largest digit) always lowers the code, so one increasing pass
  // sees children first.
  state_mass_.assign(states, 0.0);
  std::vector<int> digits(static_cast<std::size_t>(n), 0);
  for (std::uint64_t code = 0; code < states; ++code) {
    int first_mask = -1;
    std::size_t cell = 0;
    for (int p = 0; p < n; ++p) {
      const int d = digits[static_cast<std::size_t>(p)];
      if (d == vocab) {
        first_mask = p;
        break;
      }
      cell = cell * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(d);
    }
    if (first_mask < 0) {
      state_mass_[code] = table_[cell];
    } else {
      const std::uint64_t w = digit_weight_[static_cast<std::size_t>(first_mask)];
      double mass = 0.0;
      for (int v = 0; v < vocab; ++v) mass += state_mass_[code - static_cast<std::uint64_t>(vocab - v) * w];
      state_mass_[code] = mass;
    }
    for (int p = n - 1; p >= 0; --p) {
      auto& d = digits[static_cast<std::size_t>(p)];
      if (++d <= vocab) break;
      d = 0;
    }
  }
}

TabularJointModel TabularJointModel::from_json(const nlohmann::json& j, std::size_t cell_cap) {
  try {
    return TabularJointModel(j.at("v").get<int>(), j.at("n").get<int>(), j.at("probs").get<std::vector<double>>(),
                             cell_cap);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidInput, std::string("malformed tabular model: ") + e.what());
  }
}

TabularJointModel TabularJointModel::load(const std::string& path, std::size_t cell_cap) {
  std::ifstream in(path);
  if (!(in.good())) fail(ErrorCode::kIo, "cannot open tabular model '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidInput, "'" + path + "': " + e.what());
  }
  return from_json(j, cell_cap);
}

nlohmann::json TabularJointModel::to_json() const { return {{"v", vocab_}, {"n", n_}, {"probs", table_}}; }

std::size_t TabularJointModel::cell_index(std::span<const int> tokens) const {
  require(static_cast<int>(tokens.size()) == n_, ErrorCode::kInvalidInput, "tuple length mismatch");
  std::size_t index = 0;
  for (int t : tokens) {
    require(t >= 0 && t < vocab_, ErrorCode::kInvalidInput, "tuple entry outside vocabulary");
    index = index * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(t);
  }
  return index;
}

std::vector<int> TabularJointModel::cell_tokens(std::size_t index) const {
  std::vector<int> tokens(static_cast<std::size_t>(n_));
  for (int p = n_ - 1; p >= 0; --p) {
    tokens[static_cast<std::size_t>(p)] = static_cast<int>(index % static_cast<std::size_t>(vocab_));
    index /= static_cast<std::size_t>(vocab_);
  }
  return tokens;
}

std::uint64_t TabularJointModel::state_code(const TokenSequence& seq) const {
  std::uint64_t code = 0;
  for (int p = 0; p < n_; ++p) {
    const int d = seq.is_mask(p) ? vocab_ : seq[p];
    code += static_cast<std::uint64_t>(d) * digit_weight_[static_cast<std::size_t>(p)];
  }
  return code;
}

double TabularJointModel::state_mass(std::uint64_t code) const {
  if (!state_mass_.empty()) return state_mass_[code];
  // Brute force over the masked digits.
  std::vector<int> fixed(static_cast<std::size_t>(n_));
  std::vector<int> free_positions;
  for (int p = 0; p < n_; ++p) {
    const auto w = digit_weight_[static_cast<std::size_t>(p)];
    const int d = static_cast<int>((code / w) % (static_cast<std::uint64_t>(vocab_) + 1));
    fixed[static_cast<std::size_t>(p)] = d;
    if (d == vocab_) free_positions.push_back(p);
  }
  std::vector<int> current = fixed;
  for (int p : free_positions) current[static_cast<std::size_t>(p)] = 0;
  double mass = 0.0;
  for (;;) {
    mass += table_[cell_index(current)];
    std::size_t k = free_positions.size();
    while (k > 0) {
      auto& d = current[static_cast<std::size_t>(free_positions[k - 1])];
      if (++d < vocab_) break;
      d = 0;
      --k;
    }
    if (k == 0) break;
  }
  return mass;
}

bool TabularJointModel::conditional_at(std::uint64_t code, int position, std::vector<double>& out) const {
  const std::uint64_t w = digit_weight_[static_cast<std::size_t>(position)];
  out.assign(static_cast<std::size_t>(vocab_), 0.0);
  double denom = 0.0;
  for (int v = 0; v < vocab_; ++v) {
    out[static_cast<std::size_t>(v)] = state_mass(code - static_cast<std::uint64_t>(vocab_ - v) * w);
    denom += out[static_cast<std::size_t>(v)];
  }
  if (!(denom > 0.0)) return false;
  for (double& x : out) x /= denom;
  return true;
}

std::vector<ProbVector> TabularJointModel::do_marginals(const TokenSequence& seq, const Ordering& ord, int n,
                                                        std::span<const int> queries) const {
  std::uint64_t code = all_mask_code_;
  for (int i = 0; i < n; ++i) {
    const int pos = ord[i];
    code -= static_cast<std::uint64_t>(vocab_ - seq[pos]) * digit_weight_[static_cast<std::size_t>(pos)];
  }
  std::vector<ProbVector> out;
  out.reserve(queries.size());
  std::vector<double> buf;
  for (int q : queries) {
    require(conditional_at(code, q, buf), ErrorCode::kZeroConditioning, "visible tokens have zero mass");
    out.emplace_back(buf);
  }
  return out;
}

std::vector<ProbVector> TabularJointModel::do_chained(const TokenSequence& seq, const Ordering& ord, int n,
                                                      int t) const {
  std::uint64_t code = all_mask_code_;
  for (int i = 0; i < n; ++i) {
    const int pos = ord[i];
    code -= static_cast<std::uint64_t>(vocab_ - seq[pos]) * digit_weight_[static_cast<std::size_t>(pos)];
  }
  std::vector<ProbVector> out;
  out.reserve(static_cast<std::size_t>(t - n));
  std::vector<double> buf;
  for (int i = n; i < t; ++i) {
    const int pos = ord[i];
    if (conditional_at(code, pos, buf)) {
      out.emplace_back(buf);
    } else {
      // The prefix sigma(<i) has zero mass, so an earlier draft in this window
      // had zero oracle density and is rejected before rank i is read.
      out.push_back(ProbVector::uniform(static_cast<std::size_t>(vocab_)));
    }
    code -= static_cast<std::uint64_t>(vocab_ - seq[pos]) * digit_weight_[static_cast<std::size_t>(pos)];
  }
  return out;
}

double TabularJointModel::mass(const TokenSequence& partial) const {
  require(partial.n() == n_ && partial.vocab() == vocab_, ErrorCode::kInvalidInput, "shape mismatch");
  return state_mass(state_code(partial));
}

double TabularJointModel::exact_joint_conditional(const Ordering& ord, const TokenSequence& fill) const {
  require(ord.n() == n_ && fill.n() == n_, ErrorCode::kInvalidInput, "shape mismatch");
  require(fill.mask_count() == 0, ErrorCode::kInvalidInput, "fill must specify every position");
  TokenSequence prompt = TokenSequence::masked(n_, vocab_);
  for (int pos : ord.prompt()) prompt.set(pos, fill[pos]);
  const double prompt_mass = mass(prompt);
  require(prompt_mass > 0.0, ErrorCode::kZeroConditioning, "prompt has zero mass");
  const double joint = table_[cell_index(fill.tokens())];
  if (ord.m() == n_) return 0.0;
  return std::log(joint) - std::log(prompt_mass);
}

std::vector<std::pair<std::size_t, double>> TabularJointModel::completion_distribution(
    const TokenSequence& prompt) const {
  const double prompt_mass = mass(prompt);
  require(prompt_mass > 0.0, ErrorCode::kZeroConditioning, "prompt has zero mass");
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t cell = 0; cell < table_.size(); ++cell) {
    if (table_[cell] <= 0.0) continue;
    const auto tokens = cell_tokens(cell);
    bool consistent = true;
    for (int p = 0; p < n_ && consistent; ++p) {
      consistent = prompt.is_mask(p) || prompt[p] == tokens[static_cast<std::size_t>(p)];
    }
    if (consistent) out.emplace_back(cell, table_[cell] / prompt_mass);
  }
  return out;
}

TokenSequence TabularJointModel::sample_joint(Rng& rng) const {
  const double u = rng.uniform();
  double cumulative = 0.0;
  std::size_t chosen = 0;
  for (std::size_t cell = 0; cell < table_.size(); ++cell) {
    if (table_[cell] <= 0.0) continue;
    chosen = cell;
    cumulative += table_[cell];
    if (u < cumulative) break;
  }
  return TokenSequence(cell_tokens(chosen), vocab_);
}

double TabularJointModel::left_to_right_conditional(std::span<const int> prefix, int token) const {
  const int i = static_cast<int>(prefix.size());
  require(i < n_, ErrorCode::kInvalidInput, "prefix covers the whole sequence");
  require(token >= 0 && token < vocab_, ErrorCode::kInvalidInput, "token outside vocabulary");
  std::uint64_t code = all_mask_code_;
  for (int p = 0; p < i; ++p) {
    code -= static_cast<std::uint64_t>(vocab_ - prefix[static_cast<std::size_t>(p)]) *
            digit_weight_[static_cast<std::size_t>(p)];
  }
  std::vector<double> buf;
  if (!conditional_at(code, i, buf)) return 0.0;
  return buf[static_cast<std::size_t>(token)];
}

namespace fixtures {
namespace {

// Marsaglia-Tsang; boosts shape < 1 with a uniform power.
double sample_gamma(double shape, Rng& rng) {
  if (shape < 1.0) return sample_gamma(shape + 1.0, rng) * std::pow(1.0 - rng.uniform(), 1.0 / shape);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    const double x = rng.normal();
    const double v = std::pow(1.0 + c * x, 3);
    if (v <= 0.0) continue;
    const double u = 1.0 - rng.uniform();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

std::vector<double> dirichlet(std::size_t size, double concentration, Rng& rng) {
  std::vector<double> w(size);
  double sum = 0.0;
  for (double& x : w) {
    x = sample_gamma(concentration, rng);
    sum += x;
  }
  for (double& x : w) x /= sum;
  return w;
}

std::size_t cell_count(int vocab, int n) {
  const std::uint64_t cells = checked_power(static_cast<std::uint64_t>(vocab), n, kDefaultCellCap);
  require(cells != 0, ErrorCode::kInvalidInput, "fixture exceeds the cell cap");
  return cells;
}

void normalize(std::vector<double>& table) {
  const double sum = std::accumulate(table.begin(), table.end(), 0.0);
  for (double& x : table) x /= sum;
}

}  // namespace

TabularJointModel random_dirichlet(int vocab, int n, double concentration, Rng& rng) {
  return TabularJointModel(vocab, n, dirichlet(cell_count(vocab, n), concentration, rng));
}

TabularJointModel product(const std::vector<std::vector<double>>& marginals) {
  require(!marginals.empty(), ErrorCode::kInvalidInput, "product needs at least one marginal");
  const int n = static_cast<int>(marginals.size());
  const int vocab = static_cast<int>(marginals.front().size());
  std::vector<double> table(cell_count(vocab, n), 1.0);
  for (std::size_t cell = 0; cell < table.size(); ++cell) {
    std::size_t rest = cell;
    for (int p = n - 1; p >= 0; --p) {
      table[cell] *= marginals[static_cast<std::size_t>(p)].at(rest % static_cast<std::size_t>(vocab));
      rest /= static_cast<std::size_t>(vocab);
    }
  }
  normalize(table);
  return TabularJointModel(vocab, n, std::move(table));
}

TabularJointModel random_product(int vocab, int n, Rng& rng) {
  std::vector<std::vector<double>> marginals;
  for (int p = 0; p < n; ++p) marginals.push_back(dirichlet(static_cast<std::size_t>(vocab), 1.0, rng));
  return product(marginals);
}

TabularJointModel fully_correlated(int vocab, int n) {
  std::vector<double> table(cell_count(vocab, n), 0.0);
  for (int v = 0; v < vocab; ++v) {
    std::size_t cell = 0;
    for (int p = 0; p < n; ++p) cell = cell * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(v);
    table[cell] = 1.0 / vocab;
  }
  return TabularJointModel(vocab, n, std::move(table));
}

TabularJointModel near_deterministic(int vocab, int n, double peak, Rng& rng) {
  require(peak > 0.0 && peak < 1.0, ErrorCode::kInvalidInput, "peak must lie in (0, 1)");
  const std::size_t cells = cell_count(vocab, n);
  std::vector<double> table = dirichlet(cells, 1.0, rng);
  for (double& x : table) x *= (1.0 - peak);
  table[rng.below(cells)] += peak;
  normalize(table);
  return TabularJointModel(vocab, n, std::move(table));
}

TabularJointModel sparse_markov(int vocab, int n, Rng& rng) {
  const auto v = static_cast<std::size_t>(vocab);
  const std::vector<double> initial = dirichlet(v, 1.0, rng);
  std::vector<std::vector<double>> transition;
  for (std::size_t b = 0; b < v; ++b) {
    std::vector<double> row = dirichlet(v, 1.0, rng);
    if (vocab >= 3) {
      row[rng.below(v)] = 0.0;
      normalize(row);
    }
    transition.push_back(std::move(row));
  }
  std::vector<double> table(cell_count(vocab, n), 0.0);
  for (std::size_t cell = 0; cell < table.size(); ++cell) {
    std::vector<std::size_t> tokens(static_cast<std::size_t>(n));
    std::size_t rest = cell;
    for (int p = n - 1; p >= 0; --p) {
      tokens[static_cast<std::size_t>(p)] = rest % v;
      rest /= v;
    }
    double prob = initial[tokens[0]];
    for (std::size_t p = 1; p < tokens.size(); ++p) prob *= transition[tokens[p - 1]][tokens[p]];
    table[cell] = prob;
  }
  normalize(table);
  return TabularJointModel(vocab, n, std::move(table));
}

}  // namespace fixtures
}  // namespace assd
