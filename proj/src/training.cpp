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

#include "assd/training.h"

#include <algorithm>
#include <climits>
#include <cmath>
#include <numeric>
#include <set>

#include "assd/error.h"
#include "assd/rng.h"

namespace assd {

CharTokenizer::CharTokenizer(std::string alphabet) : alphabet_(std::move(alphabet)), lookup_(256, -1) {
  require(!alphabet_.empty(), ErrorCode::kInvalidInput, "empty alphabet");
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    auto& slot = lookup_[static_cast<unsigned char>(alphabet_[i])];
    require(slot == -1, ErrorCode::kInvalidInput, "duplicate character in alphabet");
    slot = static_cast<int>(i);
  }
}

CharTokenizer CharTokenizer::from_documents(std::span<const std::string> docs) {
  std::set<char> chars;
  for (const auto& doc : docs) chars.insert(doc.begin(), doc.end());
  return CharTokenizer(std::string(chars.begin(), chars.end()));
}

int CharTokenizer::encode(char c) const { return lookup_[static_cast<unsigned char>(c)]; }

std::string CharTokenizer::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == kMask) {
      out += '_';
    } else if (id == sep_id()) {
      out += '|';
    } else {
      if (!(id >= 0 && id < sep_id())) fail(ErrorCode::kInvalidInput, "token id out of range: " + std::to_string(id));
      out += alphabet_[static_cast<std::size_t>(id)];
    }
  }
  return out;
}

std::vector<std::string> split_documents(const std::string& text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  bool blank_run = false;
  const auto flush = [&] {
    while (!current.empty() && current.back() == '\n') current.pop_back();
    const auto first = current.find_first_not_of('\n');
    if (first != std::string::npos) docs.push_back(current.substr(first));
    current.clear();
  };
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const bool blank = line.find_first_not_of(" \t") == std::string::npos;
    if (blank) {
      if (!blank_run) flush();
      blank_run = true;
    } else {
      if (!current.empty()) current += '\n';
      current += line;
      blank_run = false;
    }
    pos = end + 1;
  }
  flush();
  return docs;
}

std::vector<TokenSequence> tokenize_and_pack(std::span<const std::string> docs, const CharTokenizer& tok, int n,
                                             UnknownCharPolicy policy) {
  require(n >= 1, ErrorCode::kInvalidInput, "chunk length must be positive");
  require(!docs.empty(), ErrorCode::kInvalidInput, "empty corpus");
  std::vector<int> stream;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d > 0) stream.push_back(tok.sep_id());
    for (char c : docs[d]) {
      const int id = tok.encode(c);
      if (id < 0) {
        if (!(policy == UnknownCharPolicy::kSkip))
          fail(ErrorCode::kInvalidInput, std::string("character '") + c + "' is outside the alphabet");
        continue;
      }
      stream.push_back(id);
    }
  }
  std::vector<TokenSequence> chunks;
  for (std::size_t start = 0; start + static_cast<std::size_t>(n) <= stream.size();
       start += static_cast<std::size_t>(n)) {
    chunks.emplace_back(std::vector<int>(stream.begin() + static_cast<std::ptrdiff_t>(start),
                                         stream.begin() + static_cast<std::ptrdiff_t>(start) + n),
                        tok.vocab());
  }
  return chunks;
}

JointLoss joint_loss(const AnyOrderModel& model, const TokenSequence& chunk, const Ordering& ord) {
  require(ord.is_canonical(), ErrorCode::kContractViolation, "joint loss needs a canonical ordering");
  require(chunk.mask_count() == 0, ErrorCode::kContractViolation, "teacher forcing needs a fully observed chunk");
  JointLoss out;
  out.tokens = ord.n() - ord.m();
  if (out.tokens == 0) {
    out.empty_target = true;
    return out;
  }
  const auto conditionals = model.chained_conditionals(chunk, ord, ord.m(), ord.n());
  for (int i = ord.m(); i < ord.n(); ++i) {
    out.total -= std::log(conditionals[static_cast<std::size_t>(i - ord.m())][static_cast<std::size_t>(chunk[ord[i]])]);
  }
  out.mean = out.total / out.tokens;
  return out;
}

GradientCheckReport gradient_check(const TwoStreamTransformer& model, const TokenSequence& chunk, const Ordering& ord,
                                   double tolerance, std::uint64_t seed, double fraction, double step) {
  constexpr int kMinPerTensor = 3;
  // Relative errors are measured against max(|analytic|, |numeric|, floor)
  // so that gradients at round-off scale do not dominate.
  constexpr double kFloor = 1e-6;
  std::vector<double> analytic(model.parameter_count(), 0.0);
  model.loss_and_gradient(chunk, ord, 1.0, analytic);

  TwoStreamTransformer probe(model.config(), std::vector<double>(model.params().begin(), model.params().end()));
  auto params = probe.mutable_params();
  Rng rng(seed);
  GradientCheckReport report;
  for (const auto& t : model.tensors()) {
    const int size = static_cast<int>(t.size());
    const int want = std::min(size, std::max(kMinPerTensor, static_cast<int>(std::ceil(fraction * size))));
    std::vector<int> idx(static_cast<std::size_t>(size));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < want; ++i) {
      const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    GradientCheckReport::TensorResult tr{t.name, want, 0.0};
    for (int i = 0; i < want; ++i) {
      const std::size_t k = t.offset + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
      const double saved = params[k];
      params[k] = saved + step;
      const double up = probe.joint_nll(chunk, ord);
      params[k] = saved - step;
      const double down = probe.joint_nll(chunk, ord);
      params[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double abs_err = std::abs(numeric - analytic[k]);
      const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic[k]), kFloor});
      tr.max_rel_error = std::max(tr.max_rel_error, rel);
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
    }
    report.max_rel_error = std::max(report.max_rel_error, tr.max_rel_error);
    report.checked += want;
    report.per_tensor.push_back(std::move(tr));
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

double LrSchedule::at(int step) const {
  if (warmup_steps > 0 && step < warmup_steps) return peak * static_cast<double>(step + 1) / warmup_steps;
  if (decay_steps <= 0) return peak;
  const int into = step - warmup_steps;
  return peak * std::max(0.0, 1.0 - static_cast<double>(into) / decay_steps);
}

MaskDistributionConfig MaskWarmup::at(int step, const MaskDistributionConfig& base) const {
  if (!enabled) return base;
  const double frac = steps <= 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / steps);
  const double rate_min = start + (end_min - start) * frac;
  const double rate_max = start + (end_max - start) * frac;
  MaskDistributionConfig out = base;
  out.prompt_frac_min = 1.0 - rate_max;
  out.prompt_frac_max = 1.0 - rate_min;
  return out;
}

void TrainConfig::validate() const {
  require(steps >= 1, ErrorCode::kInvalidConfig, "steps must be positive");
  require(batch_size >= 1, ErrorCode::kInvalidConfig, "batch_size must be positive");
  require(lr.peak >= 0.0 && lr.warmup_steps >= 0 && lr.decay_steps >= 0, ErrorCode::kInvalidConfig,
          "invalid learning-rate schedule");
  require(clip_norm >= 0.0 && momentum >= 0.0 && momentum < 1.0 && weight_decay >= 0.0, ErrorCode::kInvalidConfig,
          "invalid optimizer settings");
  require(val_every >= 1 && val_chunks >= 1, ErrorCode::kInvalidConfig, "invalid validation cadence");
  const auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  require(in_unit(mask_warmup.start) && in_unit(mask_warmup.end_min) && in_unit(mask_warmup.end_max) &&
              mask_warmup.end_min <= mask_warmup.end_max && mask_warmup.steps >= 0,
          ErrorCode::kInvalidConfig, "mask warmup fractions must lie in [0,1] with end_min <= end_max");
  mask.validate();
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  if (j.contains("lr")) {
    const auto& lr = j.at("lr");
    if (lr.is_number()) {
      cfg.lr.peak = lr.get<double>();
    } else {
      cfg.lr.peak = lr.value("peak", cfg.lr.peak);
      cfg.lr.warmup_steps = lr.value("warmup_steps", cfg.lr.warmup_steps);
      cfg.lr.decay_steps = lr.value("decay_steps", cfg.lr.decay_steps);
    }
  }
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.steps = j.value("steps", cfg.steps);
  if (j.contains("mask")) cfg.mask = mask_config_from_json(j.at("mask"));
  if (j.contains("mask_warmup")) {
    const auto& w = j.at("mask_warmup");
    cfg.mask_warmup.enabled = w.value("enabled", true);
    cfg.mask_warmup.start = w.value("start", cfg.mask_warmup.start);
    cfg.mask_warmup.end_min = w.value("end_min", cfg.mask_warmup.end_min);
    cfg.mask_warmup.end_max = w.value("end_max", cfg.mask_warmup.end_max);
    cfg.mask_warmup.steps = w.value("steps", cfg.mask_warmup.steps);
  }
  const std::string opt = j.value("optimizer", std::string("momentum-sgd"));
  if (opt == "momentum-sgd" || opt == "sgd") {
    cfg.optimizer = OptimizerKind::kMomentumSgd;
  } else if (opt == "adamw") {
    cfg.optimizer = OptimizerKind::kAdamW;
  } else {
    fail(ErrorCode::kInvalidConfig, "unknown optimizer '" + opt + "'");
  }
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.val_every = j.value("val_every", cfg.val_every);
  cfg.val_chunks = j.value("val_chunks", cfg.val_chunks);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

double validation_nll(const TwoStreamTransformer& model, std::span<const TokenSequence> chunks,
                      std::span<const Ordering> orders) {
  require(chunks.size() == orders.size() && !chunks.empty(), ErrorCode::kContractViolation,
          "validation needs one ordering per chunk");
  double total = 0.0;
  long tokens = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    total += model.joint_nll(chunks[i], orders[i]);
    tokens += orders[i].n() - orders[i].m();
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

namespace {

constexpr std::uint64_t kBatchStream = 1;
constexpr std::uint64_t kValidationStream = 2;

}  // namespace

TrainResult train(TwoStreamTransformer& model, std::span<const TokenSequence> train_chunks,
                  std::span<const TokenSequence> val_chunks, const TrainConfig& cfg) {
  cfg.validate();
  require(!train_chunks.empty(), ErrorCode::kInvalidInput, "no training chunks");
  require(!val_chunks.empty(), ErrorCode::kInvalidInput, "no validation chunks");
  const int n = model.length();

  const std::size_t n_val = std::min(val_chunks.size(), static_cast<std::size_t>(cfg.val_chunks));
  const auto val = val_chunks.first(n_val);
  std::vector<Ordering> val_orders;
  {
    Rng rng(Rng::derive(cfg.seed, kValidationStream));
    MaskDistributionConfig final_mask = cfg.mask_warmup.at(cfg.steps, cfg.mask);
    final_mask.stratified = false;
    val_orders = sample_mask_batch(final_mask, n, static_cast<int>(n_val), rng);
  }

  TrainResult result;
  result.initial_val_nll = validation_nll(model, val, val_orders);
  result.curve.push_back({0, std::nan(""), result.initial_val_nll});

  auto params = model.mutable_params();
  const std::size_t count = params.size();
  std::vector<double> grad(count);
  std::vector<double> m1(count, 0.0);
  std::vector<double> m2(cfg.optimizer == OptimizerKind::kAdamW ? count : 0, 0.0);
  Rng rng(Rng::derive(cfg.seed, kBatchStream));

  for (int step = 0; step < cfg.steps; ++step) {
    const MaskDistributionConfig mask = cfg.mask_warmup.at(step, cfg.mask);
    const auto orders = sample_mask_batch(mask, n, cfg.batch_size, rng);
    std::vector<std::size_t> picks(static_cast<std::size_t>(cfg.batch_size));
    int tokens = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      picks[static_cast<std::size_t>(b)] = static_cast<std::size_t>(rng.below(train_chunks.size()));
      tokens += n - orders[static_cast<std::size_t>(b)].m();
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    double total = 0.0;
    if (tokens > 0) {
      const double scale = 1.0 / tokens;
      for (int b = 0; b < cfg.batch_size; ++b) {
        total += model.loss_and_gradient(train_chunks[picks[static_cast<std::size_t>(b)]],
                                         orders[static_cast<std::size_t>(b)], scale, grad);
      }
    }
    const double train_nll = tokens > 0 ? total / tokens : 0.0;
    if (!(std::isfinite(train_nll)))
      fail(ErrorCode::kDivergence, "training diverged at step " + std::to_string(step + 1) + " (non-finite loss)");

    double norm2 = 0.0;
    for (double g : grad) norm2 += g * g;
    const double norm = std::sqrt(norm2);
    if (!(std::isfinite(norm)))
      fail(ErrorCode::kDivergence, "training diverged at step " + std::to_string(step + 1) + " (non-finite gradient)");
    const double clip = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    const double lr = cfg.lr.at(step);

    if (lr != 0.0) {
      if (cfg.optimizer == OptimizerKind::kMomentumSgd) {
        for (std::size_t i = 0; i < count; ++i) {
          const double g = grad[i] * clip + cfg.weight_decay * params[i];
          m1[i] = cfg.momentum * m1[i] + g;
          params[i] -= lr * m1[i];
        }
      } else {
        const double t = step + 1;
        const double c1 = 1.0 - std::pow(cfg.beta1, t);
        const double c2 = 1.0 - std::pow(cfg.beta2, t);
        for (std::size_t i = 0; i < count; ++i) {
          const double g = grad[i] * clip;
          m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
          m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
          params[i] -= lr * ((m1[i] / c1) / (std::sqrt(m2[i] / c2) + cfg.adam_eps) + cfg.weight_decay * params[i]);
        }
      }
    }

    LossPoint point{step + 1, train_nll, std::nullopt};
    if ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps) {
      point.val_nll = validation_nll(model, val, val_orders);
      require(std::isfinite(*point.val_nll), ErrorCode::kDivergence, "validation NLL is not finite");
    }
    result.curve.push_back(point);
  }
  result.final_val_nll = *result.curve.back().val_nll;
  return result;
}

void write_loss_curve_csv(std::ostream& out, std::span<const LossPoint> curve) {
  out << "step,train_nll,val_nll\n";
  out.precision(10);
  for (const auto& p : curve) {
    out << p.step << ',';
    if (std::isfinite(p.train_nll)) out << p.train_nll;
    out << ',';
    if (p.val_nll) out << *p.val_nll;
    out << '\n';
  }
}

}  // namespace assd
