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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipemax/event_trace.hpp"
#include "pipemax/scheduler.hpp"
#include "pipemax/transfer.hpp"
#include "pipemax/types.hpp"

namespace pipemax {

// Multiplicative execution-time noise: actual = predicted * (1 + e), with
// e ~ N(0, sigma) truncated at +-truncate_sigmas * sigma.
struct NoiseSpec {
  double sigma = 0.02;
  double truncate_sigmas = 3.0;
  std::uint64_t seed = 0;

  static NoiseSpec none() { return NoiseSpec{0.0, 3.0, 0}; }
  /// Deterministic factor for (batch, iteration).
  double factor(int batch, std::int64_t iteration) const;
};

enum class PolicyKind { dynamic, static_prefetch, no_prefetch };

struct Policy {
  PolicyKind kind = PolicyKind::dynamic;
  double static_ratio = 0.0;  // fraction of pipeline KV capacity per iteration

  static Policy dynamic() { return {}; }
  static Policy no_prefetch() { return {PolicyKind::no_prefetch, 0.0}; }
  static Policy static_prefetch(double ratio);
  /// "dynamic", "no_prefetch" or "static:<ratio>". Throws ConfigError.
  static Policy parse(const std::string& name);
  std::string name() const;
};

struct SimOptions {
  SchedulerOptions scheduler;
  NoiseSpec noise;
  // Parameters that drive actual execution; the scheduler's parameters are
  // used when unset.
  std::optional<EstimatorParams> true_params;
  LayoutKind layout = LayoutKind::block_first;
  int kv_tensors_per_layer = 2;
  bool priority_transfers = true;
  // Low-priority KV chunk size per GPU; defaults to one block's shard.
  std::optional<Bytes> chunk_bytes;
  double rho_hi = 0.9;
  double rho_lo = 0.5;
  // Fraction of a layer's compute after which its KV may be offloaded.
  double qkv_fraction = 0.2;
  bool prefill_offload = true;
  // Per-GPU staging bytes for prefill KV awaiting offload; defaults to two
  // requests of the longest input.
  std::optional<Bytes> staging_bytes;
  bool record_trace = false;
  bool check_invariants = false;
  std::int64_t max_decode_iterations = 100'000'000;

  void validate() const;
};

struct IterationRecord {
  std::int64_t iteration = 0;        // across all decode phases
  std::int64_t phase_iteration = 0;  // scheduler t
  int batch = 0;
  Seconds start = 0.0;
  Seconds exec_seconds = 0.0;
  Seconds predicted_seconds = 0.0;
  std::int64_t batch_size = 0;
  Tokens resident_tokens = 0;    // executing batch, resident before this step
  Tokens prefetched_tokens = 0;  // executing batch, prefetched for this step
  Tokens budget_tokens = 0;
  Tokens prefetch_tokens = 0;  // P_t issued at this step
  bool steady = false;
  bool pool_nonempty = false;
};

struct EpisodeMetrics {
  std::string policy;
  std::int64_t total_tokens_generated = 0;
  Seconds wall_seconds = 0.0;
  double tokens_per_second = 0.0;
  Seconds prefill_seconds = 0.0;
  Seconds decode_seconds = 0.0;
  Seconds stall_seconds = 0.0;   // decode time lost waiting for prefetched KV
  Seconds bubble_seconds = 0.0;  // stage idle time inside decode phases
  Seconds exposed_offload_seconds = 0.0;
  Seconds reload_seconds = 0.0;
  double prefetched_token_fraction = 0.0;  // mean over steady iterations
  std::int64_t steady_iterations = 0;
  std::int64_t first_steady_iteration = -1;
  std::int64_t decode_iterations = 0;
  std::int64_t prefill_phases = 0;
  std::int64_t decode_phases = 0;
  std::int64_t phase_switches = 0;
  std::int64_t requests_prefilled = 0;
  std::int64_t requests_completed = 0;
  std::int64_t duplicate_prefills = 0;
  std::int64_t expected_tokens = 0;
  std::int64_t leaked_blocks = 0;
  std::int64_t evicted_requests = 0;
  std::int64_t preempted_requests = 0;
  std::int64_t pool_exhausted_events = 0;
  Tokens prefetched_tokens_total = 0;
  std::int64_t activation_transfers = 0;
  std::int64_t activation_delay_violations = 0;
  Seconds max_activation_delay = 0.0;
  Seconds kv_chunk_seconds = 0.0;
  Tokens max_active_batch_tokens = 0;
  Tokens peak_resident_tokens = 0;
  double max_composition = 0.0;  // max (resident + prefetched) / capacity
  Bytes peak_cpu_kv_bytes = 0;
  Tokens per_batch_budget = 0;
  Tokens system_capacity = 0;
  std::vector<Seconds> exec_time_series;
  std::vector<IterationRecord> iterations;

  bool conserved() const {
    return duplicate_prefills == 0 && total_tokens_generated == expected_tokens && leaked_blocks == 0;
  }
  /// Flat JSON object of the scalar fields.
  std::string to_json(bool with_timestamp = false) const;
};

struct PrefillResult {
  EventTrace trace;
  Seconds makespan = 0.0;
  Seconds exposed_offload_seconds = 0.0;
  Seconds offload_end = 0.0;  // last offload completion
  std::int64_t offload_transfers = 0;
  std::int64_t activation_transfers = 0;
  std::int64_t activation_delay_violations = 0;
  Seconds max_activation_delay = 0.0;
  std::vector<Seconds> completion;  // per request, last stage end
};

/// Pipelined prefill of `requests` in order; stage time per request is
/// input_len * cfg.prefill_seconds_per_token.
PrefillResult simulate_prefill(std::span<const Request> requests, const ClusterConfig& cfg,
                               const SimOptions& opts = {});

/// Prefill with explicit homogeneous stage times and no offload or
/// activation traffic.
PrefillResult simulate_prefill(const PrefillInstance& inst);

struct DecodeResult {
  EventTrace trace;
  EpisodeMetrics metrics;
};

/// Runs decode on `state` until every request completes or `horizon`
/// iterations have launched.
DecodeResult simulate_decode(SchedulerState& state, const ClusterConfig& cfg, const EstimatorParams& params,
                             const SimOptions& opts, std::int64_t horizon);

/// Full workflow with alternating prefill and decode phases.
EpisodeMetrics run_episode(std::span<const Request> workload, const ClusterConfig& cfg,
                           const EstimatorParams& params, const Policy& policy, std::uint64_t seed,
                           const SimOptions& opts = {}, EventTrace* trace = nullptr);

/// run_episode with a baseline policy (no_prefetch or static_prefetch).
EpisodeMetrics run_baseline(std::span<const Request> workload, const ClusterConfig& cfg,
                            const EstimatorParams& params, const Policy& baseline, std::uint64_t seed,
                            const SimOptions& opts = {}, EventTrace* trace = nullptr);

}  // namespace pipemax
