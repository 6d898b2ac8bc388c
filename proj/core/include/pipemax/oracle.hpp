/* Copyright 2026 The pipemax-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <span>
#include <string>
#include <vector>

#include "pipemax/scheduler.hpp"
#include "pipemax/types.hpp"

namespace pipemax {

/// Completion-time recurrence over (request, stage):
/// C[k][s] = max(C[k-1][s], C[k][s-1]) + t_k.
Seconds prefill_makespan_dp(const PrefillInstance& inst);

inline constexpr std::size_t kExhaustivePoolCap = 20;

struct ExhaustiveResult {
  std::vector<RequestId> set;  // ascending ids
  Seconds error = 0.0;         // |alpha*|P| + beta*sum(L) - gap|
  bool saturating = false;     // sum(L) >= theta * budget
  Tokens total_len = 0;
};

/// Optimum over all subsets under the ordering: within budget, then
/// saturating, then smallest error, then fewest requests, then the
/// lexicographically smallest sorted id list. Throws PoolTooLarge above
/// kExhaustivePoolCap requests.
ExhaustiveResult exhaustive_prefetch_select(std::span<const PoolEntry> pool, Tokens budget_tokens,
                                            Seconds gap_seconds, const EstimatorParams& params, double theta);

struct BudgetCheckReport {
  Tokens expected_capacity = 0;
  Tokens expected_per_batch = 0;
  Tokens actual_capacity = 0;
  Tokens actual_per_batch = 0;
  std::vector<std::string> diffs;

  bool ok() const { return diffs.empty(); }
};

/// Recomputes pipeline token capacity and the per-batch budget from
/// per-GPU quantities and compares them with the cost model.
BudgetCheckReport closed_form_decode_budget_check(const ClusterConfig& cfg);

}  // namespace pipemax
