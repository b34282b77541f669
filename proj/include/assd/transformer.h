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

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "assd/model.h"
#include "assd/rng.h"

namespace assd {

struct TransformerConfig {
  int vocab = 0;
  int seq_len = 16;
  int d_model = 64;
  int layers = 2;
  int heads = 2;
  int ffn = 0;  // 0 means 4 * d_model

  int ffn_width() const { return ffn > 0 ? ffn : 4 * d_model; }
  void validate() const;
};

nlohmann::json to_json(const TransformerConfig& cfg);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);

// Named slice of the flat parameter vector (row-major rows x cols).
struct TensorSpec {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Row-major N x V logits.
struct Logits {
  int n = 0;
  int vocab = 0;
  std::vector<double> values;
  std::span<const double> row(int pos) const {
    return std::span(values).subspan(static_cast<std::size_t>(pos) * vocab, static_cast<std::size_t>(vocab));
  }
};

// Two-stream any-order transformer. The content stream embeds token values
// plus positions and attends under the content mask; the query stream starts
// from positions only and attends to the content stream under the query mask,
// so the output at a position never sees that position's own token. Weights
// are shared between the streams. MASK tokens contribute a zero token
// embedding.
class TwoStreamTransformer final : public AnyOrderModel {
 public:
  TwoStreamTransformer(const TransformerConfig& cfg, Rng& init_rng);
  TwoStreamTransformer(const TransformerConfig& cfg, std::vector<double> params);

  int vocab_size() const override { return cfg_.vocab; }
  int length() const override { return cfg_.seq_len; }
  const TransformerConfig& config() const { return cfg_; }

  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() { return params_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::size_t parameter_count() const { return params_.size(); }

  Logits forward(const TokenSequence& seq, const MaskMatrix& query_mask, const MaskMatrix& content_mask) const;
  Logits forward(const TokenSequence& seq, const Ordering& ord) const;

  // -sum_{i >= m} log p(x_{sigma(i)} | x_{sigma(<i)}) in one forward pass.
  double joint_nll(const TokenSequence& chunk, const Ordering& ord) const;

  // Returns the joint NLL and accumulates d(scale * NLL)/d(params) into grad.
  double loss_and_gradient(const TokenSequence& chunk, const Ordering& ord, double scale, std::span<double> grad) const;

  // Writes <prefix>.bin (little-endian float32, tensor order) and
  // <prefix>.json (shapes plus `metadata`).
  void save(const std::string& prefix, const nlohmann::json& metadata = nlohmann::json::object()) const;
  static TwoStreamTransformer load(const std::string& prefix, nlohmann::json* metadata = nullptr);

 protected:
  std::vector<ProbVector> do_marginals(const TokenSequence& seq, const Ordering& ord, int n,
                                       std::span<const int> queries) const override;
  std::vector<ProbVector> do_chained(const TokenSequence& seq, const Ordering& ord, int n, int t) const override;

 private:
  struct Workspace;
  void layout();
  void init(Rng& rng);
  void run_forward(const TokenSequence& seq, const MaskMatrix& qmask, const MaskMatrix& cmask, Workspace& ws) const;
  void run_backward(const TokenSequence& seq, const MaskMatrix& qmask, const MaskMatrix& cmask, Workspace& ws,
                    std::span<const double> dlogits, std::span<double> grad) const;
  const TensorSpec& tensor(const std::string& name) const;

  TransformerConfig cfg_;
  std::vector<TensorSpec> tensors_;
  std::vector<double> params_;
};

}  // namespace assd
