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

#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "pipemax/types.hpp"

namespace pipemax {

// ---------------------------------------------------------------------------
// Pure helpers
// ---------------------------------------------------------------------------

struct BatchIndices {
  int exec = 0;   // i_t, batch executing this iteration
  int next = 0;   // j_t, batch receiving prefetched KV
  int evict = 0;  // k_t, inactive batch whose blocks may be overwritten
  bool operator==(const BatchIndices&) const = default;
};

BatchIndices batch_indices(std::int64_t t, int n);

/// Splits requests into n batches whose sizes differ by at most one, placing
/// requests longest first into the batch with the smallest total prefix
/// length (ties to the lowest batch index). Ids within a batch are sorted.
std::vector<std::vector<RequestId>> initial_partition(std::span<const Request> requests, int n);

/// Tokens transferable during `predicted_seconds` over a link of `bandwidth`
/// bytes/s. Infinite bandwidth yields the largest representable budget.
Tokens prefetch_budget(double bandwidth, Seconds predicted_seconds, Bytes kv_bytes_per_token);

std::vector<RequestId> residual_set(std::span<const RequestId> next_batch,
                                    const std::set<RequestId>& gpu_resident);

struct PoolEntry {
  RequestId id = 0;
  Tokens prefix_len = 0;
};

/// Shortest-first fill: ascending prefix length (ties by id) while the
/// running total stays within budget.
std::vector<RequestId> select_prefetch_warmup(std::span<const PoolEntry> pool, Tokens budget_tokens);

struct SteadySelectOptions {
  Tokens budget_tokens = 0;
  Seconds gap_seconds = 0.0;
  EstimatorParams params;
  double theta = 0.9;
  int max_refine_steps = 32;
  double match_epsilon = 0.0;
  // Exchange candidates examined per refinement step, and the scan length
  // of the longest-first group fill.
  int max_candidates = 32;
  int max_fill_scan = 256;
};

/// Greedy longest-first fill followed by bounded exchange refinement that
/// moves alpha*|P| + beta*sum(L) toward the gap while keeping the total
/// length within [theta * budget, budget].
std::vector<RequestId> select_prefetch_steady(std::span<const PoolEntry> pool,
                                              const SteadySelectOptions& opts);

/// Modeled execution-time contribution of a prefetch set.
Seconds modeled_prefetch_time(const EstimatorParams& params, std::int64_t count, Tokens total_len);

/// True once the last `window_w` budgets vary by at most `stability_threshold`
/// relative to their maximum.
bool detect_steady(std::span<const Tokens> budget_history, int window_w, double stability_threshold);

// ---------------------------------------------------------------------------
// Stateful scheduler
// ---------------------------------------------------------------------------

enum class PrefetchMode {
  dynamic,      // bandwidth x predicted time, warm-up then steady selection
  fixed_quota,  // fixed token quota per iteration, shortest first
  disabled,     // closed GPU-resident set
};

struct SchedulerOptions {
  PrefetchMode mode = PrefetchMode::dynamic;
  Tokens fixed_quota_tokens = 0;
  double theta = 0.9;
  int window_w = 8;
  double stability_threshold = 0.1;
  int max_refine_steps = 32;
  std::optional<double> match_epsilon;  // defaults to alpha / 2
  // Exponential smoothing of the predicted time used for the budget.
  bool smooth_budget = false;
  double smoothing_weight = 0.25;
  std::size_t history_capacity = 256;
  // Allocate blocks for input_len + output_len on admission so residents
  // never need to grow. Used by the closed-set baseline.
  bool reserve_to_completion = false;

  void validate() const;
};

struct SchedulerState {
  std::vector<std::vector<RequestId>> batches;
  std::int64_t t = 0;
  std::set<RequestId> gpu_resident;
  std::set<RequestId> cpu_pool;
  std::set<RequestId> prefetching;
  std::deque<Tokens> budget_history;
  bool steady = false;
  std::optional<Seconds> smoothed_time;

  // Every live request the scheduler may reference, keyed by id.
  std::map<RequestId, Request> requests;
  // GPU blocks held by resident or prefetching requests.
  std::map<RequestId, std::int64_t> allocated_blocks;
  std::int64_t capacity_blocks = std::numeric_limits<std::int64_t>::max() / 4;
  // Blocks held outside the batches, e.g. by requests generating their
  // final token.
  std::int64_t reserved_blocks = 0;
  Tokens block_size = 16;
  // Effective CPU->GPU bandwidth used for budgets; 0 means cfg.h2d_bandwidth.
  double budget_bandwidth = 0.0;

  SchedulerOptions options;

  /// Builds a state with `resident` partitioned into cfg.n batches and
  /// `pool` waiting in CPU memory. Capacity is the pipeline token capacity
  /// rounded down to whole blocks.
  static SchedulerState create(std::span<const Request> resident, std::span<const Request> pool,
                               const ClusterConfig& cfg, SchedulerOptions options = {});

  int n() const { return static_cast<int>(batches.size()); }
  std::int64_t used_blocks() const;
  std::int64_t free_blocks() const { return capacity_blocks - used_blocks() - reserved_blocks; }
  Tokens batch_tokens(int k) const;
  Tokens resident_tokens() const;
  Tokens live_tokens() const;
  std::int64_t blocks_needed(const Request& r) const;
  bool empty() const;

  /// Throws std::logic_error when a structural invariant is broken.
  void check_invariants() const;

  /// Prefetched requests whose KV has landed become GPU resident.
  void mark_resident(std::span<const RequestId> ids);

  /// Executes one decode step of batch `k`: every member not in `skip`
  /// gains a token, growth blocks are allocated, finished members leave the
  /// batch and their blocks move to `reserved_blocks`. Returns ids that
  /// finished. Throws OutOfMemory when growth cannot be satisfied.
  std::vector<RequestId> advance_batch(int k, std::span<const RequestId> skip = {});

  void release_reserved(std::int64_t blocks);
};

struct StepPlan {
  std::int64_t t = 0;
  BatchIndices indices;
  Tokens prefetch_budget_tokens = 0;
  Seconds predicted_exec_seconds = 0.0;
  Seconds predicted_residual_seconds = 0.0;
  Seconds gap_seconds = 0.0;
  bool steady = false;
  std::vector<RequestId> residual;
  std::vector<RequestId> prefetch_set;
  std::vector<RequestId> updated_next_batch;
  std::vector<RequestId> evicted;
  std::vector<RequestId> preempted;
  std::vector<RequestId> finishing;
  std::int64_t growth_blocks = 0;
  std::int64_t prefetch_blocks = 0;
  std::int64_t available_blocks = 0;
  Tokens prefetch_tokens = 0;
  Tokens residual_tokens = 0;
  std::optional<Seconds> smoothed_time;
  // P_t refills an otherwise empty next batch and may exceed the budget.
  bool forced = false;

  bool operator==(const StepPlan&) const = default;
};

/// Plans iteration state.t without mutating the state. Throws EmptySystem
/// when every batch and the CPU pool are empty.
StepPlan schedule_step(const SchedulerState& state, const EstimatorParams& params,
                       const ClusterConfig& cfg);

/// Applies a plan: evictions, preemptions, the updated next batch, budget
/// history, phase flag, and t + 1.
void commit_step(SchedulerState& state, const StepPlan& plan);

}  // namespace pipemax
