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

#include "pipemax/scheduler.hpp"

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>

#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"

namespace pipemax {

void SchedulerOptions::validate() const {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("scheduler.theta must lie in [0, 1]");
  if (window_w < 2) throw ConfigError("scheduler.window_w must be >= 2");
  if (!(stability_threshold >= 0.0)) throw ConfigError("scheduler.stability_threshold must be >= 0");
  if (max_refine_steps < 0) throw ConfigError("scheduler.max_refine_steps must be >= 0");
  if (match_epsilon && !(*match_epsilon >= 0.0)) {
    throw ConfigError("scheduler.match_epsilon must be >= 0");
  }
  if (!(smoothing_weight > 0.0 && smoothing_weight <= 1.0)) {
    throw ConfigError("scheduler.smoothing_weight must lie in (0, 1]");
  }
  if (fixed_quota_tokens < 0) throw ConfigError("scheduler.fixed_quota_tokens must be >= 0");
  if (history_capacity < static_cast<std::size_t>(window_w)) {
    throw ConfigError("scheduler.history_capacity must be >= window_w");
  }
}

SchedulerState SchedulerState::create(std::span<const Request> resident, std::span<const Request> pool,
                                       const ClusterConfig& cfg, SchedulerOptions options) {
  cfg.validate();
  options.validate();
  SchedulerState s;
  s.options = options;
  s.block_size = cfg.block_size;
  s.capacity_blocks = system_token_capacity(cfg) / cfg.block_size;
  s.batches = initial_partition(resident, cfg.n);
  for (const auto& r : resident) {
    if (!r.valid() || r.finished()) throw ConfigError("resident request " + std::to_string(r.id) + " is not live");
    if (!s.requests.emplace(r.id, r).second) {
      throw ConfigError("duplicate request id " + std::to_string(r.id));
    }
    s.gpu_resident.insert(r.id);
    s.allocated_blocks[r.id] = s.blocks_needed(r);
  }
  for (const auto& r : pool) {
    if (!r.valid() || r.finished()) throw ConfigError("pool request " + std::to_string(r.id) + " is not live");
    if (!s.requests.emplace(r.id, r).second) {
      throw ConfigError("duplicate request id " + std::to_string(r.id));
    }
    s.cpu_pool.insert(r.id);
  }
  if (s.used_blocks() > s.capacity_blocks) {
    throw OutOfMemory("initial resident set needs " + std::to_string(s.used_blocks()) +
                      " blocks, capacity is " + std::to_string(s.capacity_blocks));
  }
  return s;
}

std::int64_t SchedulerState::blocks_needed(const Request& r) const {
  const Tokens tokens = options.reserve_to_completion ? r.input_len + r.output_len : r.prefix_len();
  return blocks_for(tokens, block_size);
}

std::int64_t SchedulerState::used_blocks() const {
  std::int64_t used = 0;
  for (const auto& [id, blocks] : allocated_blocks) used += blocks;
  return used;
}

Tokens SchedulerState::batch_tokens(int k) const {
  Tokens total = 0;
  for (RequestId id : batches.at(static_cast<std::size_t>(k))) total += requests.at(id).prefix_len();
  return total;
}

Tokens SchedulerState::resident_tokens() const {
  Tokens total = 0;
  for (RequestId id : gpu_resident) total += requests.at(id).prefix_len();
  for (RequestId id : prefetching) total += requests.at(id).prefix_len();
  return total;
}

Tokens SchedulerState::live_tokens() const {
  Tokens total = 0;
  for (const auto& [id, r] : requests) total += r.prefix_len();
  return total;
}

bool SchedulerState::empty() const {
  if (!cpu_pool.empty()) return false;
  return std::all_of(batches.begin(), batches.end(), [](const auto& b) { return b.empty(); });
}

void SchedulerState::check_invariants() const {
  const auto fail = [](const std::string& what) { throw std::logic_error("scheduler invariant: " + what); };
  std::set<RequestId> seen;
  for (const auto& batch : batches) {
    for (RequestId id : batch) {
      if (!seen.insert(id).second) fail("request " + std::to_string(id) + " is in two batches");
      if (!gpu_resident.contains(id) && !prefetching.contains(id)) {
        fail("batch member " + std::to_string(id) + " is neither resident nor prefetching");
      }
      if (!allocated_blocks.contains(id)) fail("batch member " + std::to_string(id) + " has no blocks");
    }
  }
  for (RequestId id : cpu_pool) {
    if (gpu_resident.contains(id) || prefetching.contains(id)) {
      fail("request " + std::to_string(id) + " is both in the CPU pool and on the GPU");
    }
    if (seen.contains(id)) fail("pool request " + std::to_string(id) + " is in a batch");
  }
  for (const auto& [id, blocks] : allocated_blocks) {
    if (!seen.contains(id)) fail("blocks allocated to request " + std::to_string(id) + " outside any batch");
    if (blocks < blocks_for(requests.at(id).prefix_len(), block_size)) {
      fail("request " + std::to_string(id) + " holds fewer blocks than its prefix needs");
    }
  }
  if (used_blocks() + reserved_blocks > capacity_blocks) fail("block capacity exceeded");
  if (t < 0) fail("negative iteration counter");
}

void SchedulerState::mark_resident(std::span<const RequestId> ids) {
  for (RequestId id : ids) {
    if (prefetching.erase(id) != 0) gpu_resident.insert(id);
  }
}

std::vector<RequestId> SchedulerState::advance_batch(int k, std::span<const RequestId> skip) {
  auto& batch = batches.at(static_cast<std::size_t>(k));
  std::vector<RequestId> done;
  std::vector<RequestId> keep;
  for (RequestId id : batch) {
    if (std::find(skip.begin(), skip.end(), id) != skip.end()) {
      keep.push_back(id);
      continue;
    }
    auto& r = requests.at(id);
    ++r.generated;
    auto& blocks = allocated_blocks.at(id);
    if (r.finished()) {
      reserved_blocks += blocks;
      allocated_blocks.erase(id);
      gpu_resident.erase(id);
      prefetching.erase(id);
      requests.erase(id);
      done.push_back(id);
      continue;
    }
    const std::int64_t need = blocks_needed(r);
    if (need > blocks) {
      if (free_blocks() < need - blocks) {
        throw OutOfMemory("no free block for request " + std::to_string(id) + " to grow");
      }
      blocks = need;
    }
    keep.push_back(id);
  }
  batch = std::move(keep);
  return done;
}

void SchedulerState::release_reserved(std::int64_t blocks) {
  reserved_blocks -= blocks;
  if (reserved_blocks < 0) throw std::logic_error("released more reserved blocks than held");
}

namespace {

struct ByLengthDesc {
  const SchedulerState* s;
  bool operator()(RequestId a, RequestId b) const {
    const Tokens la = s->requests.at(a).prefix_len();
    const Tokens lb = s->requests.at(b).prefix_len();
    if (la != lb) return la > lb;
    return a < b;
  }
};

}  // namespace

StepPlan schedule_step(const SchedulerState& state, const EstimatorParams& params,
                       const ClusterConfig& cfg) {
  if (state.empty()) throw EmptySystem("no requests in any batch or in the CPU pool");
  if (state.n() != cfg.n) throw ConfigError("scheduler state has a different pipeline depth than cfg");

  const auto& opt = state.options;
  StepPlan plan;
  plan.t = state.t;
  plan.indices = batch_indices(state.t, state.n());
  const int i = plan.indices.exec;
  const int j = plan.indices.next;
  const int k = plan.indices.evict;
  const auto& exec = state.batches[static_cast<std::size_t>(i)];

  // Members of the executing batch that produce their last token now, and
  // the new blocks the others need for this iteration's token.
  std::int64_t growth = 0;
  std::vector<RequestId> growers;
  for (RequestId id : exec) {
    const auto& r = state.requests.at(id);
    if (r.generated + 1 >= r.output_len) {
      plan.finishing.push_back(id);
      continue;
    }
    Request next = r;
    ++next.generated;
    if (state.blocks_needed(next) > state.allocated_blocks.at(id)) {
      ++growth;
      growers.push_back(id);
    }
  }

  Tokens exec_tokens = 0;
  for (RequestId id : exec) exec_tokens += state.requests.at(id).prefix_len();
  plan.predicted_exec_seconds =
      estimate_decode_time(params, static_cast<std::int64_t>(exec.size()), exec_tokens);

  Seconds budget_time = plan.predicted_exec_seconds;
  if (opt.smooth_budget) {
    const Seconds prev = state.smoothed_time.value_or(plan.predicted_exec_seconds);
    budget_time = opt.smoothing_weight * plan.predicted_exec_seconds + (1.0 - opt.smoothing_weight) * prev;
    plan.smoothed_time = budget_time;
  }

  const double bandwidth = state.budget_bandwidth > 0.0 ? state.budget_bandwidth : cfg.h2d_bandwidth;
  switch (opt.mode) {
    case PrefetchMode::dynamic:
      plan.prefetch_budget_tokens = prefetch_budget(bandwidth, budget_time, cfg.kv_bytes_per_token);
      break;
    case PrefetchMode::fixed_quota:
      plan.prefetch_budget_tokens = opt.fixed_quota_tokens;
      break;
    case PrefetchMode::disabled:
      plan.prefetch_budget_tokens = 0;
      break;
  }

  // Phase update uses the history including this iteration's budget.
  plan.steady = state.steady;
  if (opt.mode == PrefetchMode::dynamic && !plan.steady) {
    std::vector<Tokens> hist(state.budget_history.begin(), state.budget_history.end());
    hist.push_back(plan.prefetch_budget_tokens);
    plan.steady = detect_steady(hist, opt.window_w, opt.stability_threshold);
  }

  // Residual of the next batch; finishing members never carry over.
  const auto& next_batch = state.batches[static_cast<std::size_t>(j)];
  plan.residual = residual_set(next_batch, state.gpu_resident);
  std::erase_if(plan.residual, [&](RequestId id) {
    return std::find(plan.finishing.begin(), plan.finishing.end(), id) != plan.finishing.end();
  });

  // Blocks that may be overwritten: free blocks plus the inactive batch,
  // unless that batch is executing or about to execute.
  const bool can_evict = k != i && k != j;
  std::int64_t evictable = 0;
  if (can_evict) {
    for (RequestId id : state.batches[static_cast<std::size_t>(k)]) evictable += state.allocated_blocks.at(id);
  }
  const std::int64_t free = state.free_blocks();
  std::int64_t available = free + evictable - growth;

  std::vector<RequestId> eviction_order;
  if (can_evict) {
    eviction_order = state.batches[static_cast<std::size_t>(k)];
    std::sort(eviction_order.begin(), eviction_order.end(), ByLengthDesc{&state});
  }

  if (available < 0) {
    // Growth alone exceeds reclaimable memory: evict all of D_k and preempt
    // the longest growing members of the executing batch back to CPU.
    plan.evicted = eviction_order;
    std::sort(growers.begin(), growers.end(), ByLengthDesc{&state});
    std::int64_t deficit = -available;
    for (RequestId id : growers) {
      if (deficit <= 0) break;
      plan.preempted.push_back(id);
      deficit -= state.allocated_blocks.at(id) + 1;
    }
    if (deficit > 0) throw OutOfMemory("cannot satisfy decode growth even after preemption");
    std::erase_if(plan.residual, [&](RequestId id) {
      return std::find(plan.preempted.begin(), plan.preempted.end(), id) != plan.preempted.end();
    });
    plan.growth_blocks = growth - static_cast<std::int64_t>(plan.preempted.size());
    available = 0;
  } else {
    plan.growth_blocks = growth;
  }
  plan.available_blocks = available;

  for (RequestId id : plan.residual) plan.residual_tokens += state.requests.at(id).prefix_len();
  plan.predicted_residual_seconds =
      estimate_decode_time(params, static_cast<std::int64_t>(plan.residual.size()), plan.residual_tokens);
  plan.gap_seconds = plan.predicted_exec_seconds - plan.predicted_residual_seconds;

  // Select P_t under both the prefetch budget and the block-limited memory.
  const Tokens memory_tokens = available * state.block_size;
  const Tokens select_budget = std::min(plan.prefetch_budget_tokens, memory_tokens);
  if (select_budget > 0 && !state.cpu_pool.empty()) {
    std::vector<PoolEntry> pool;
    pool.reserve(state.cpu_pool.size());
    for (RequestId id : state.cpu_pool) pool.push_back({id, state.requests.at(id).prefix_len()});

    std::vector<RequestId> chosen;
    if (opt.mode == PrefetchMode::dynamic && plan.steady) {
      SteadySelectOptions so;
      so.budget_tokens = select_budget;
      so.gap_seconds = plan.gap_seconds;
      so.params = params;
      so.theta = opt.theta;
      so.max_refine_steps = opt.max_refine_steps;
      so.match_epsilon = opt.match_epsilon.value_or(params.alpha / 2.0);
      chosen = select_prefetch_steady(pool, so);
    } else {
      chosen = select_prefetch_warmup(pool, select_budget);
    }
    // Block rounding can exceed the token-level fit; keep what fits.
    std::int64_t blocks = 0;
    for (RequestId id : chosen) {
      const std::int64_t need = state.blocks_needed(state.requests.at(id));
      if (blocks + need > available) continue;
      blocks += need;
      plan.prefetch_set.push_back(id);
      plan.prefetch_tokens += state.requests.at(id).prefix_len();
    }
    plan.prefetch_blocks = blocks;
  }

  // An empty next batch with work waiting in the pool would idle the
  // pipeline indefinitely; refill it with the shortest pool request even
  // when that request exceeds the budget.
  if (opt.mode != PrefetchMode::disabled && plan.prefetch_set.empty() && plan.residual.empty() &&
      !state.cpu_pool.empty()) {
    std::optional<RequestId> best;
    for (RequestId id : state.cpu_pool) {
      const auto& r = state.requests.at(id);
      if (state.blocks_needed(r) > available) continue;
      if (!best || r.prefix_len() < state.requests.at(*best).prefix_len()) best = id;
    }
    if (best) {
      plan.forced = true;
      plan.prefetch_set.push_back(*best);
      plan.prefetch_tokens = state.requests.at(*best).prefix_len();
      plan.prefetch_blocks = state.blocks_needed(state.requests.at(*best));
    }
  }

  // Overwrite the inactive batch only as far as needed.
  if (plan.preempted.empty()) {
    std::int64_t need = plan.growth_blocks + plan.prefetch_blocks - free;
    for (RequestId id : eviction_order) {
      if (need <= 0) break;
      plan.evicted.push_back(id);
      need -= state.allocated_blocks.at(id);
    }
  }

  plan.updated_next_batch = plan.residual;
  plan.updated_next_batch.insert(plan.updated_next_batch.end(), plan.prefetch_set.begin(),
                                 plan.prefetch_set.end());
  std::sort(plan.updated_next_batch.begin(), plan.updated_next_batch.end());
  return plan;
}

void commit_step(SchedulerState& state, const StepPlan& plan) {
  if (plan.t != state.t) throw std::logic_error("plan was made for a different iteration");
  const auto to_pool = [&](int batch, const std::vector<RequestId>& ids) {
    auto& b = state.batches[static_cast<std::size_t>(batch)];
    for (RequestId id : ids) {
      std::erase(b, id);
      state.gpu_resident.erase(id);
      state.prefetching.erase(id);
      state.allocated_blocks.erase(id);
      state.cpu_pool.insert(id);
    }
  };
  to_pool(plan.indices.evict, plan.evicted);
  to_pool(plan.indices.exec, plan.preempted);

  auto& next = state.batches[static_cast<std::size_t>(plan.indices.next)];
  if (plan.indices.next == plan.indices.exec) {
    // Single-stage pipeline: the executing batch keeps its finishing members
    // until advance_batch retires them.
    for (RequestId id : plan.prefetch_set) next.push_back(id);
    std::sort(next.begin(), next.end());
  } else {
    // Members not in the residual lost GPU residency; they return to the pool.
    for (RequestId id : next) {
      if (!std::binary_search(plan.residual.begin(), plan.residual.end(), id)) {
        state.gpu_resident.erase(id);
        state.prefetching.erase(id);
        state.allocated_blocks.erase(id);
        state.cpu_pool.insert(id);
      }
    }
    next = plan.updated_next_batch;
  }
  for (RequestId id : plan.prefetch_set) {
    state.cpu_pool.erase(id);
    state.prefetching.insert(id);
    state.allocated_blocks[id] = state.blocks_needed(state.requests.at(id));
  }

  state.budget_history.push_back(plan.prefetch_budget_tokens);
  while (state.budget_history.size() > state.options.history_capacity) state.budget_history.pop_front();
  state.steady = plan.steady;
  if (plan.smoothed_time) state.smoothed_time = plan.smoothed_time;
  ++state.t;
}

}  // namespace pipemax
