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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "assd/error.h"

namespace assd {

MeanSe mean_se(std::span<const double> values) {
  MeanSe out;
  out.count = static_cast<int>(values.size());
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  out.se = sd / std::sqrt(static_cast<double>(values.size()));
  return out;
}

double shannon_entropy(std::span<const int> tokens) {
  require(!tokens.empty(), ErrorCode::kInvalidInput, "entropy of an empty sequence");
  std::map<int, std::int64_t> freq;
  for (int t : tokens) ++freq[t];
  const double n = static_cast<double>(tokens.size());
  double h = 0.0;
  for (const auto& [_, c] : freq) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  // A single symbol yields -0.0 from the sum above.
  return h <= 0.0 ? 0.0 : h;
}

double TabularReference::conditional(std::span<const int> prefix, int token) const {
  return model_.left_to_right_conditional(prefix, token);
}

BigramReference::BigramReference(int vocab, std::span<const TokenSequence> corpus, double smoothing)
    : vocab_(vocab), smoothing_(smoothing), counts_(vocab), unigram_(static_cast<std::size_t>(vocab), 0) {
  require(vocab >= 1, ErrorCode::kInvalidInput, "reference vocabulary must be positive");
  require(smoothing > 0.0, ErrorCode::kInvalidInput, "bigram smoothing must be positive");
  for (const auto& seq : corpus) {
    require(seq.vocab() == vocab, ErrorCode::kInvalidInput, "reference corpus vocabulary mismatch");
    counts_.merge(BigramCounts::build(seq));
    for (int p = 0; p < seq.n(); ++p) {
      if (!seq.is_mask(p)) {
        ++unigram_[static_cast<std::size_t>(seq[p])];
        ++unigram_total_;
      }
    }
  }
}

double BigramReference::conditional(std::span<const int> prefix, int token) const {
  require(token >= 0 && token < vocab_, ErrorCode::kInvalidInput, "reference token out of range");
  const double v = vocab_;
  if (prefix.empty()) {
    return (static_cast<double>(unigram_[static_cast<std::size_t>(token)]) + smoothing_) /
           (static_cast<double>(unigram_total_) + smoothing_ * v);
  }
  const int prev = prefix.back();
  require(prev >= 0 && prev < vocab_, ErrorCode::kInvalidInput, "reference prefix token out of range");
  return (static_cast<double>(counts_.pair(prev, token)) + smoothing_) /
         (static_cast<double>(counts_.left(prev)) + smoothing_ * v);
}

PerplexityResult generative_perplexity(std::span<const int> tokens, const LeftToRightReference& reference) {
  require(!tokens.empty(), ErrorCode::kInvalidInput, "perplexity of an empty sequence");
  PerplexityResult out;
  double sum = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double q = reference.conditional(tokens.first(i), tokens[i]);
    if (!(q > 0.0)) {
      out.value = std::numeric_limits<double>::infinity();
      out.finite = false;
      out.zero_density_index = static_cast<int>(i);
      out.diagnostic =
          "reference assigns zero density to token " + std::to_string(tokens[i]) + " at index " + std::to_string(i);
      return out;
    }
    sum += std::log(q);
  }
  out.value = std::exp(-sum / static_cast<double>(tokens.size()));
  return out;
}

void EmpiricalDistribution::add(const OutcomeKey& outcome, std::int64_t count) {
  require(count > 0, ErrorCode::kContractViolation, "empirical counts must be positive");
  counts_[outcome] += count;
  total_ += count;
}

void EmpiricalDistribution::merge(const EmpiricalDistribution& other) {
  for (const auto& [k, c] : other.counts_) counts_[k] += c;
  total_ += other.total_;
}

std::int64_t EmpiricalDistribution::count(const OutcomeKey& outcome) const {
  const auto it = counts_.find(outcome);
  return it == counts_.end() ? 0 : it->second;
}

ExactDistribution EmpiricalDistribution::normalized() const {
  ExactDistribution out;
  if (total_ == 0) return out;
  for (const auto& [k, c] : counts_) out[k] = static_cast<double>(c) / static_cast<double>(total_);
  return out;
}

double total_variation(const ExactDistribution& a, const ExactDistribution& b) {
  double sum = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      sum += std::abs(ia->second);
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      sum += std::abs(ib->second);
      ++ib;
    } else {
      sum += std::abs(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return std::min(1.0, 0.5 * sum);
}

double total_variation(const EmpiricalDistribution& a, const ExactDistribution& b) {
  return total_variation(a.normalized(), b);
}

double total_variation(const EmpiricalDistribution& a, const EmpiricalDistribution& b) {
  return total_variation(a.normalized(), b.normalized());
}

double regularized_gamma_q(double a, double x) {
  require(a > 0.0 && x >= 0.0, ErrorCode::kInvalidInput, "incomplete gamma needs a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  constexpr int kMaxIter = 100000;
  constexpr double kEps = 1e-16;
  const double log_prefix = a * std::log(x) - x - std::lgamma(a);
  if (x < a + 1.0) {
    // Series for P(a, x).
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < kMaxIter; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return std::clamp(1.0 - sum * std::exp(log_prefix), 0.0, 1.0);
  }
  // Modified Lentz continued fraction for Q(a, x).
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::clamp(std::exp(log_prefix) * h, 0.0, 1.0);
}

double chi_square_survival(double statistic, int dof) {
  if (dof <= 0) return 1.0;
  if (std::isinf(statistic)) return 0.0;
  if (statistic <= 0.0) return 1.0;
  return regularized_gamma_q(0.5 * dof, 0.5 * statistic);
}

namespace {

// One row of expected counts per sample plus the observed counts, indexed by
// cell. Returns the pooled cell groups.
struct Cell {
  std::vector<double> expected;
  std::vector<double> observed;
  double weight() const { return *std::min_element(expected.begin(), expected.end()); }
};

ChiSquareResult pooled_statistic(std::vector<Cell> cells, double min_expected) {
  ChiSquareResult out;
  if (cells.empty()) return out;
  const std::size_t rows = cells.front().expected.size();
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.weight() < b.weight(); });
  Cell pool{std::vector<double>(rows, 0.0), std::vector<double>(rows, 0.0)};
  std::size_t next = 0;
  const auto absorb = [&](const Cell& c) {
    for (std::size_t r = 0; r < rows; ++r) {
      pool.expected[r] += c.expected[r];
      pool.observed[r] += c.observed[r];
    }
    ++out.pooled_cells;
  };
  while (next < cells.size() && cells[next].weight() < min_expected) absorb(cells[next++]);
  while (out.pooled_cells > 0 && pool.weight() < min_expected && next < cells.size()) absorb(cells[next++]);
  std::vector<Cell> kept(cells.begin() + static_cast<std::ptrdiff_t>(next), cells.end());
  if (out.pooled_cells > 0) kept.push_back(pool);
  if (out.pooled_cells == 1) out.pooled_cells = 0;  // a lone small cell is not merged with anything

  for (const auto& c : kept) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (c.expected[r] <= 0.0) {
        if (c.observed[r] > 0.0) out.statistic = std::numeric_limits<double>::infinity();
        continue;
      }
      const double d = c.observed[r] - c.expected[r];
      out.statistic += d * d / c.expected[r];
    }
  }
  out.cells = static_cast<int>(kept.size());
  out.dof = std::max(0, out.cells - 1);
  out.p_value = chi_square_survival(out.statistic, out.dof);
  if (std::isinf(out.statistic)) out.p_value = 0.0;
  return out;
}

}  // namespace

ChiSquareResult chi_square_gof(const EmpiricalDistribution& observed, const ExactDistribution& expected,
                               double min_expected) {
  require(observed.total() > 0, ErrorCode::kInvalidInput, "chi-square needs at least one observation");
  const double n = static_cast<double>(observed.total());
  std::vector<Cell> cells;
  bool impossible = false;
  for (const auto& [k, p] : expected) {
    if (p <= 0.0) {
      impossible = impossible || observed.count(k) > 0;
      continue;
    }
    cells.push_back({{p * n}, {static_cast<double>(observed.count(k))}});
  }
  for (const auto& [k, c] : observed.counts()) {
    if (!expected.contains(k)) impossible = true;
  }
  ChiSquareResult out = pooled_statistic(std::move(cells), min_expected);
  if (impossible) {
    out.statistic = std::numeric_limits<double>::infinity();
    out.p_value = 0.0;
  }
  return out;
}

ChiSquareResult chi_square_homogeneity(const EmpiricalDistribution& a, const EmpiricalDistribution& b,
                                       double min_expected) {
  require(a.total() > 0 && b.total() > 0, ErrorCode::kInvalidInput, "homogeneity test needs two nonempty samples");
  const double na = static_cast<double>(a.total());
  const double nb = static_cast<double>(b.total());
  std::map<OutcomeKey, std::pair<double, double>> joint;
  for (const auto& [k, c] : a.counts()) joint[k].first = static_cast<double>(c);
  for (const auto& [k, c] : b.counts()) joint[k].second = static_cast<double>(c);
  std::vector<Cell> cells;
  for (const auto& [k, oc] : joint) {
    const double total = oc.first + oc.second;
    cells.push_back({{total * na / (na + nb), total * nb / (na + nb)}, {oc.first, oc.second}});
  }
  return pooled_statistic(std::move(cells), min_expected);
}

namespace {

nlohmann::json mean_se_json(const MeanSe& m) { return {{"mean", m.mean}, {"se", m.se}, {"count", m.count}}; }

double json_number(double x) { return std::isfinite(x) ? x : -1.0; }

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json out;
  nlohmann::json decs = nlohmann::json::array();
  nlohmann::json timing = nlohmann::json::object();
  for (const auto& d : decoders) {
    decs.push_back({{"decoder", d.decoder},
                    {"gen_ppl", mean_se_json(d.gen_ppl)},
                    {"entropy", mean_se_json(d.entropy)},
                    {"model_nfe", mean_se_json(d.model_nfe)},
                    {"aux_nfe", mean_se_json(d.aux_nfe)},
                    {"tokens_per_iteration", mean_se_json(d.tokens_per_iteration)},
                    {"masked_tokens", mean_se_json(d.masked_tokens)},
                    {"infinite_ppl", d.infinite_ppl}});
    timing[d.decoder] = {{"wall_ms", mean_se_json(d.wall_ms)}};
  }
  out["decoders"] = std::move(decs);
  if (tv_distance) out["tv_distance"] = *tv_distance;
  if (chi_square) {
    out["chi_square"] = {{"statistic", json_number(chi_square->statistic)},
                         {"dof", chi_square->dof},
                         {"p_value", chi_square->p_value},
                         {"cells", chi_square->cells},
                         {"pooled_cells", chi_square->pooled_cells}};
  }
  out["flags"] = flags;
  out["timing"] = std::move(timing);
  return out;
}

void MetricsReport::write_csv(std::ostream& out) const {
  out << "decoder,gen_ppl_mean,gen_ppl_se,entropy_mean,entropy_se,model_nfe_mean,model_nfe_se,aux_nfe_mean,"
         "aux_nfe_se,tokens_per_iteration_mean,tokens_per_iteration_se,masked_tokens_mean,infinite_ppl\n";
  std::ostringstream row;
  row.precision(10);
  for (const auto& d : decoders) {
    row << d.decoder << ',' << d.gen_ppl.mean << ',' << d.gen_ppl.se << ',' << d.entropy.mean << ',' << d.entropy.se
        << ',' << d.model_nfe.mean << ',' << d.model_nfe.se << ',' << d.aux_nfe.mean << ',' << d.aux_nfe.se << ','
        << d.tokens_per_iteration.mean << ',' << d.tokens_per_iteration.se << ',' << d.masked_tokens.mean << ','
        << d.infinite_ppl << '\n';
  }
  out << row.str();
}

void MetricsReport::write_timing_csv(std::ostream& out) const {
  out << "decoder,wall_ms_mean,wall_ms_se\n";
  std::ostringstream row;
  row.precision(10);
  for (const auto& d : decoders) row << d.decoder << ',' << d.wall_ms.mean << ',' << d.wall_ms.se << '\n';
  out << row.str();
}

}  // namespace assd
