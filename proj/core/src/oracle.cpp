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

#include "pipemax/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"

namespace pipemax {

__extension__ typedef __int128 Wide;

Seconds prefill_makespan_dp(const PrefillInstance& inst) {
  if (inst.n < 1 || inst.stage_times.empty()) throw ConfigError("prefill instance needs n >= 1 and m >= 1");
  const std::size_t stages = static_cast<std::size_t>(inst.n);
  // Row k holds completion times of request k on every stage.
  std::vector<Seconds> row(stages, 0.0);
  for (Seconds t : inst.stage_times) {
    Seconds left = 0.0;
    for (std::size_t s = 0; s < stages; ++s) {
      row[s] = std::max(row[s], left) + t;
      left = row[s];
    }
  }
  return row.back();
}

ExhaustiveResult exhaustive_prefetch_select(std::span<const PoolEntry> pool, Tokens budget_tokens,
                                            Seconds gap_seconds, const EstimatorParams& params, double theta) {
  if (pool.size() > kExhaustivePoolCap) {
    throw PoolTooLarge("exhaustive selection is capped at " + std::to_string(kExhaustivePoolCap) +
                       " requests, got " + std::to_string(pool.size()));
  }
  std::vector<PoolEntry> items(pool.begin(), pool.end());
  std::sort(items.begin(), items.end(), [](const PoolEntry& a, const PoolEntry& b) { return a.id < b.id; });
  const std::size_t m = items.size();
  const double floor_len = theta * static_cast<double>(budget_tokens);

  bool have = false;
  ExhaustiveResult best;
  std::vector<RequestId> ids;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    Tokens total = 0;
    ids.clear();
    for (std::size_t b = 0; b < m; ++b) {
      if (mask >> b & 1U) {
        total += items[b].prefix_len;
        ids.push_back(items[b].id);
      }
    }
    if (total > budget_tokens) continue;
    const bool sat = static_cast<double>(total) >= floor_len;
    const double modeled = params.alpha * static_cast<double>(ids.size()) + params.beta * static_cast<double>(total);
    const double err = std::abs(modeled - gap_seconds);

    bool better = !have;
    if (have) {
      if (sat != best.saturating) {
        better = sat;
      } else if (err != best.error) {
        better = err < best.error;
      } else if (ids.size() != best.set.size()) {
        better = ids.size() < best.set.size();
      } else {
        better = ids < best.set;
      }
    }
    if (better) {
      have = true;
      best.set = ids;
      best.error = err;
      best.saturating = sat;
      best.total_len = total;
    }
  }
  return best;
}

BudgetCheckReport closed_form_decode_budget_check(const ClusterConfig& cfg) {
  BudgetCheckReport rep;
  // Each GPU holds W/n of the weights and T/n bytes of every token.
  const long double n = cfg.n;
  const long double free_per_gpu = static_cast<long double>(cfg.mem_per_gpu) - cfg.model_bytes / n;
  const long double shard = cfg.kv_bytes_per_token / n;
  Tokens cap = free_per_gpu > 0 ? static_cast<Tokens>(std::floor(free_per_gpu / shard)) : 0;
  // Settle long double rounding against the exact integer inequality
  // cap * (T/n) <= M - W/n, scaled by n.
  const Wide room = static_cast<Wide>(cfg.mem_per_gpu) * cfg.n - cfg.model_bytes;
  while (cap > 0 && static_cast<Wide>(cap) * cfg.kv_bytes_per_token > room) --cap;
  while (static_cast<Wide>(cap + 1) * cfg.kv_bytes_per_token <= room) ++cap;
  rep.expected_capacity = cap;
  rep.expected_per_batch = cap / cfg.n;

  try {
    rep.actual_capacity = system_token_capacity(cfg);
    rep.actual_per_batch = per_batch_token_budget(cfg);
  } catch (const Error& e) {
    rep.diffs.push_back(std::string("cost model raised: ") + e.what());
    return rep;
  }
  if (rep.actual_capacity != rep.expected_capacity) {
    rep.diffs.push_back("system capacity " + std::to_string(rep.actual_capacity) + " != expected " +
                        std::to_string(rep.expected_capacity));
  }
  if (rep.actual_per_batch != rep.expected_per_batch) {
    rep.diffs.push_back("per-batch budget " + std::to_string(rep.actual_per_batch) + " != expected " +
                        std::to_string(rep.expected_per_batch));
  }
  return rep;
}

}  // namespace pipemax
