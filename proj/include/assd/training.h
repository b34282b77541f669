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
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "assd/model.h"
#include "assd/ordering.h"
#include "assd/transformer.h"

namespace assd {

enum class UnknownCharPolicy { kSkip, kError };

// Character-level vocabulary: alphabet characters get ids [0, A), the
// document separator gets id A. MASK stays the out-of-vocabulary sentinel.
class CharTokenizer {
 public:
  explicit CharTokenizer(std::string alphabet);
  // Sorted set of distinct characters in the documents.
  static CharTokenizer from_documents(std::span<const std::string> docs);

  const std::string& alphabet() const { return alphabet_; }
  int vocab() const { return static_cast<int>(alphabet_.size()) + 1; }
  int sep_id() const { return static_cast<int>(alphabet_.size()); }
  // -1 if the character is not in the alphabet.
  int encode(char c) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::string alphabet_;
  std::vector<int> lookup_;
};

// Documents are separated by blank lines; surrounding newlines are trimmed.
std::vector<std::string> split_documents(const std::string& text);

// Joins documents with separator tokens and cuts exact-length chunks,
// dropping the tail.
std::vector<TokenSequence> tokenize_and_pack(std::span<const std::string> docs, const CharTokenizer& tok, int n,
                                             UnknownCharPolicy policy = UnknownCharPolicy::kError);

struct JointLoss {
  double total = 0.0;  // summed NLL over the masked block
  double mean = 0.0;   // per masked token
  int tokens = 0;
  bool empty_target = false;  // m == N; loss defined as 0
};

// Teacher-forced joint NLL along the ordering, one evaluation.
JointLoss joint_loss(const AnyOrderModel& model, const TokenSequence& chunk, const Ordering& ord);

struct GradientCheckReport {
  struct TensorResult {
    std::string name;
    int checked = 0;
    double max_rel_error = 0.0;
  };
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int checked = 0;
  std::vector<TensorResult> per_tensor;
  bool passed = false;
};

// Central differences on a random subset of parameters (at least a few per
// tensor) against the analytic gradient.
GradientCheckReport gradient_check(const TwoStreamTransformer& model, const TokenSequence& chunk, const Ordering& ord,
                                   double tolerance, std::uint64_t seed, double fraction = 0.01, double step = 1e-4);

enum class OptimizerKind { kMomentumSgd, kAdamW };

struct LrSchedule {
  double peak = 0.05;
  int warmup_steps = 0;
  int decay_steps = 0;  // 0 keeps the peak after warmup
  double at(int step) const;
};

// Masking-rate warmup: both bounds of the masking rate (1 - prompt fraction)
// start at `start` and move linearly to their end values over `steps`.
struct MaskWarmup {
  bool enabled = false;
  double start = 0.15;
  double end_min = 0.90;
  double end_max = 0.99;
  int steps = 0;
  MaskDistributionConfig at(int step, const MaskDistributionConfig& base) const;
};

struct TrainConfig {
  LrSchedule lr;
  int batch_size = 8;
  int steps = 1000;
  MaskDistributionConfig mask;
  MaskWarmup mask_warmup;
  OptimizerKind optimizer = OptimizerKind::kMomentumSgd;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int val_every = 500;
  int val_chunks = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);

struct LossPoint {
  int step = 0;
  double train_nll = 0.0;  // per masked token, batch mean
  std::optional<double> val_nll;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  double initial_val_nll = 0.0;
  double final_val_nll = 0.0;
};

// Held-out per-token joint NLL on fixed seeded orderings.
double validation_nll(const TwoStreamTransformer& model, std::span<const TokenSequence> chunks,
                      std::span<const Ordering> orders);

TrainResult train(TwoStreamTransformer& model, std::span<const TokenSequence> train_chunks,
                  std::span<const TokenSequence> val_chunks, const TrainConfig& cfg);

// CSV columns: step,train_nll,val_nll (val_nll empty when not evaluated).
void write_loss_curve_csv(std::ostream& out, std::span<const LossPoint> curve);

}  // namespace assd
