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

#include "assd/error.h"

namespace assd {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput: return "invalid-input";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kContractViolation: return "contract-violation";
    case ErrorCode::kZeroConditioning: return "zero-conditioning";
    case ErrorCode::kImpossibleDraft: return "impossible-draft";
    case ErrorCode::kZeroResidual: return "zero-residual";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

}  // namespace assd
