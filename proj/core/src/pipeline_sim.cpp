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

#include "pipemax/pipeline_sim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"
#include "pipemax/rng.hpp"
#include "sim_internal.hpp"

namespace pipemax {

__extension__ typedef __int128 Wide;

namespace detail {

Bytes shard_bytes(Tokens tokens, Bytes per_token, int n) {
  const Wide total = static_cast<Wide>(tokens) * per_token;
  return static_cast<Bytes>((total + n - 1) / n);
}

LinkPlan plan_links(const ClusterConfig& cfg, const SimOptions& opts) {
  LinkPlan p;
  p.chunk_bytes = opts.chunk_bytes.value_or(shard_bytes(cfg.block_size, cfg.kv_bytes_per_token, cfg.n));
  p.chunk_bytes = std::max<Bytes>(p.chunk_bytes, 1);
  p.prefetch_fragments = fragments_per_block(Layout{opts.layout, cfg.layers_per_stage, opts.kv_tensors_per_layer});
  p.offload_fragments = cfg.layers_per_stage;
  const LinkChannel h2d{Direction::h2d, cfg.h2d_bandwidth, cfg.per_transfer_overhead, 0.0};
  p.budget_bandwidth = effective_bandwidth(p.chunk_bytes, p.prefetch_fragments, h2d);
  p.kv_chunk_seconds = transfer_time(p.chunk_bytes, p.prefetch_fragments, h2d);
  return p;
}

void merge_channel_stats(const ChannelStats& s, EpisodeMetrics& m) {
  m.activation_transfers += s.activation_transfers;
  m.activation_delay_violations += s.activation_delay_violations;
  m.max_activation_delay = std::max(m.max_activation_delay, s.max_activation_delay);
  m.kv_chunk_seconds = std::max(m.kv_chunk_seconds, s.max_kv_chunk_seconds);
}

Seconds Channel::chunk_seconds(const Stream& s, Bytes bytes) const {
  if (bytes <= 0) return 0.0;
  const Seconds payload = std::isinf(bw_) ? 0.0 : static_cast<double>(bytes) / bw_;
  return static_cast<double>(s.fragments) * o_ + payload;
}

std::int64_t Channel::chunk_count(const Stream& s) const {
  if (s.chunk <= 0 || s.chunk >= s.remaining) return 1;
  return (s.remaining + s.chunk - 1) / s.chunk;
}

Bytes Channel::bytes_for(const Stream& s, std::int64_t m) const {
  if (s.chunk <= 0) return s.remaining;
  const Wide b = static_cast<Wide>(m) * s.chunk;
  return b >= s.remaining ? s.remaining : static_cast<Bytes>(b);
}

Seconds Channel::time_for(const Stream& s, std::int64_t m) const {
  if (s.chunk <= 0 || s.chunk >= s.remaining) return chunk_seconds(s, s.remaining);
  const std::int64_t full = s.remaining / s.chunk;
  const Bytes last = s.remaining % s.chunk;
  if (m <= full) return static_cast<double>(m) * chunk_seconds(s, s.chunk);
  return static_cast<double>(full) * chunk_seconds(s, s.chunk) + chunk_seconds(s, last);
}

void Channel::emit(EventKind kind, Seconds now, const Stream& s, Bytes bytes) {
  if (trace_ == nullptr) return;
  trace_->add(SimEvent{now,
                       kind,
                       phase_,
                       gpu_,
                       -1,
                       -1,
                       s.owner.a,
                       s.tag,
                       {{"bytes", static_cast<double>(bytes)}, {"h2d", dir_ == Direction::h2d ? 1.0 : 0.0}}});
}

void Channel::submit(Stream s, Seconds now, std::vector<StreamOwner>& done) {
  if (s.remaining <= 0) {
    done.push_back(s.owner);
    return;
  }
  s.submit_time = now;
  const bool high = priority_ && s.priority == Priority::activation;
  if (s.priority == Priority::kv) {
    const Bytes first = s.chunk > 0 ? std::min(s.chunk, s.remaining) : s.remaining;
    stats_.max_kv_chunk_seconds = std::max(stats_.max_kv_chunk_seconds, chunk_seconds(s, first));
  }
  (high ? high_ : low_).push_back(s);
  if (!busy_) {
    start_next(now);
    return;
  }
  if (high && cur_.priority == Priority::kv && seg_chunks_ > 1) {
    const Seconds per_chunk = chunk_seconds(cur_, std::min(cur_.chunk, cur_.remaining));
    std::int64_t m = seg_chunks_;
    if (per_chunk > 0.0) {
      m = static_cast<std::int64_t>(std::floor((now - seg_start_) / per_chunk)) + 1;
      m = std::clamp<std::int64_t>(m, 1, seg_chunks_);
    }
    if (m < seg_chunks_) {
      seg_chunks_ = m;
      seg_end_ = seg_start_ + time_for(cur_, m);
      ++gen_;
      queue_->push(seg_end_, kTransferEnd, gpu_, end_type_, index_, static_cast<std::int64_t>(gen_));
    }
  }
}

void Channel::start_next(Seconds now) {
  std::deque<Stream>* lane = !high_.empty() ? &high_ : (!low_.empty() ? &low_ : nullptr);
  if (lane == nullptr) {
    busy_ = false;
    return;
  }
  cur_ = lane->front();
  lane->pop_front();
  busy_ = true;
  seg_start_ = now;
  seg_chunks_ = chunk_count(cur_);
  seg_end_ = now + time_for(cur_, seg_chunks_);
  ++gen_;
  if (cur_.priority == Priority::activation) {
    // Waiting behind earlier activations is not charged.
    const Seconds delay = now - std::max(cur_.submit_time, last_activation_end_);
    ++stats_.activation_transfers;
    stats_.max_activation_delay = std::max(stats_.max_activation_delay, delay);
    if (delay > stats_.max_kv_chunk_seconds * (1.0 + 1e-9) + 1e-12) ++stats_.activation_delay_violations;
  }
  emit(EventKind::transfer_start, now, cur_, bytes_for(cur_, seg_chunks_));
  queue_->push(seg_end_, kTransferEnd, gpu_, end_type_, index_, static_cast<std::int64_t>(gen_));
}

void Channel::on_end(std::uint64_t generation, Seconds now, std::vector<StreamOwner>& done) {
  if (!busy_ || generation != gen_) return;
  const Bytes moved = bytes_for(cur_, seg_chunks_);
  stats_.busy_seconds += seg_end_ - seg_start_;
  emit(EventKind::transfer_end, now, cur_, moved);
  cur_.remaining -= moved;
  busy_ = false;
  if (cur_.remaining > 0) {
    low_.push_front(cur_);
  } else {
    if (cur_.priority == Priority::activation) last_activation_end_ = now;
    done.push_back(cur_.owner);
  }
  start_next(now);
}

}  // namespace detail

double NoiseSpec::factor(int batch, std::int64_t iteration) const {
  if (sigma == 0.0) return 1.0;
  auto rng = substream(seed, "noise", (static_cast<std::uint64_t>(iteration) << 16) ^ static_cast<std::uint64_t>(batch));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    const double z = normal(rng);
    if (std::abs(z) <= truncate_sigmas) return 1.0 + sigma * z;
  }
}

Policy Policy::static_prefetch(double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("static prefetch ratio must lie in (0, 1]");
  return Policy{PolicyKind::static_prefetch, ratio};
}

Policy Policy::parse(const std::string& name) {
  if (name == "dynamic") return dynamic();
  if (name == "no_prefetch") return no_prefetch();
  const std::string prefix = "static:";
  if (name.rfind(prefix, 0) == 0) {
    const std::string num = name.substr(prefix.size());
    std::size_t used = 0;
    double ratio = 0.0;
    try {
      ratio = std::stod(num, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad static ratio in policy '" + name + "'");
    }
    if (used != num.size()) throw ConfigError("bad static ratio in policy '" + name + "'");
    return static_prefetch(ratio);
  }
  throw ConfigError("unknown policy '" + name + "'");
}

std::string Policy::name() const {
  switch (kind) {
    case PolicyKind::dynamic:
      return "dynamic";
    case PolicyKind::no_prefetch:
      return "no_prefetch";
    case PolicyKind::static_prefetch: {
      std::ostringstream os;
      os << "static:" << static_ratio;
      return os.str();
    }
  }
  return "unknown";
}

void SimOptions::validate() const {
  scheduler.validate();
  if (!(noise.sigma >= 0.0)) throw ConfigError("noise.sigma must be >= 0");
  if (!(noise.truncate_sigmas > 0.0)) throw ConfigError("noise.truncate_sigmas must be > 0");
  if (true_params && !true_params->valid()) throw ConfigError("true estimator parameters must be >= 0");
  if (kv_tensors_per_layer < 1) throw ConfigError("kv_tensors_per_layer must be >= 1");
  if (chunk_bytes && *chunk_bytes <= 0) throw ConfigError("chunk_bytes must be > 0");
  if (!(rho_hi > 0.0 && rho_hi <= 1.0)) throw ConfigError("rho_hi must lie in (0, 1]");
  if (!(rho_lo >= 0.0 && rho_lo <= 1.0)) throw ConfigError("rho_lo must lie in [0, 1]");
  if (!(qkv_fraction >= 0.0 && qkv_fraction <= 1.0)) throw ConfigError("qkv_fraction must lie in [0, 1]");
  if (staging_bytes && *staging_bytes <= 0) throw ConfigError("staging_bytes must be > 0");
  if (max_decode_iterations < 1) throw ConfigError("max_decode_iterations must be >= 1");
}

std::string EpisodeMetrics::to_json(bool with_timestamp) const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  if (with_timestamp) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    j["timestamp"] = buf;
  }
  j["policy"] = policy;
  j["total_tokens_generated"] = total_tokens_generated;
  j["wall_seconds"] = wall_seconds;
  j["tokens_per_second"] = tokens_per_second;
  j["prefill_seconds"] = prefill_seconds;
  j["decode_seconds"] = decode_seconds;
  j["stall_seconds"] = stall_seconds;
  j["bubble_seconds"] = bubble_seconds;
  j["exposed_offload_seconds"] = exposed_offload_seconds;
  j["reload_seconds"] = reload_seconds;
  j["prefetched_token_fraction"] = prefetched_token_fraction;
  j["steady_iterations"] = steady_iterations;
  j["first_steady_iteration"] = first_steady_iteration;
  j["decode_iterations"] = decode_iterations;
  j["prefill_phases"] = prefill_phases;
  j["decode_phases"] = decode_phases;
  j["phase_switches"] = phase_switches;
  j["requests_prefilled"] = requests_prefilled;
  j["requests_completed"] = requests_completed;
  j["duplicate_prefills"] = duplicate_prefills;
  j["expected_tokens"] = expected_tokens;
  j["leaked_blocks"] = leaked_blocks;
  j["evicted_requests"] = evicted_requests;
  j["preempted_requests"] = preempted_requests;
  j["pool_exhausted_events"] = pool_exhausted_events;
  j["prefetched_tokens_total"] = prefetched_tokens_total;
  j["activation_transfers"] = activation_transfers;
  j["activation_delay_violations"] = activation_delay_violations;
  j["max_activation_delay"] = max_activation_delay;
  j["kv_chunk_seconds"] = kv_chunk_seconds;
  j["max_active_batch_tokens"] = max_active_batch_tokens;
  j["peak_resident_tokens"] = peak_resident_tokens;
  j["max_composition"] = max_composition;
  j["peak_cpu_kv_bytes"] = peak_cpu_kv_bytes;
  j["per_batch_budget"] = per_batch_budget;
  j["system_capacity"] = system_capacity;
  j["conserved"] = conserved();
  return j.dump();
}

namespace {

struct EpisodeContext {
  std::span<const Request> workload;
  const ClusterConfig& cfg;
  const EstimatorParams& params;
  SimOptions sim;
  EventTrace* trace;
  EpisodeMetrics& m;
  Tokens capacity = 0;
  Tokens per_batch = 0;
  Seconds now = 0.0;
  std::size_t next = 0;
  std::set<RequestId> prefilled;
  int last_phase = -1;  // 0 prefill, 1 decode

  void switch_to(int phase) {
    if (last_phase >= 0 && last_phase != phase) {
      ++m.phase_switches;
      if (trace) {
        trace->add(SimEvent{now, EventKind::phase_switch, phase == 0 ? "prefill" : "decode", -1, -1, -1, -1,
                            phase == 0 ? "to_prefill" : "to_decode", {}});
      }
    }
    last_phase = phase;
  }

  void prefill(const std::vector<Request>& batch, bool offload) {
    switch_to(0);
    SimOptions o = sim;
    o.prefill_offload = offload;
    const PrefillResult res = simulate_prefill(batch, cfg, o);
    const Seconds span = std::max(res.makespan, res.offload_end);
    if (trace) trace->append(res.trace, now);
    now += span;
    m.prefill_seconds += span;
    m.exposed_offload_seconds += res.exposed_offload_seconds;
    m.activation_transfers += res.activation_transfers;
    m.activation_delay_violations += res.activation_delay_violations;
    m.max_activation_delay = std::max(m.max_activation_delay, res.max_activation_delay);
    ++m.prefill_phases;
    for (const auto& r : batch) {
      ++m.requests_prefilled;
      if (!prefilled.insert(r.id).second) ++m.duplicate_prefills;
    }
  }

  void decode(SchedulerState& st, const detail::StopPredicate& stop) {
    switch_to(1);
    const Seconds start = now;
    const auto run = detail::run_decode(st, cfg, params, sim, now, stop, sim.max_decode_iterations, trace, m);
    now = run.end_time;
    m.decode_seconds += now - start;
    ++m.decode_phases;
  }

  void finish(const SchedulerState& st) {
    m.wall_seconds = now;
    m.tokens_per_second = now > 0.0 ? static_cast<double>(m.total_tokens_generated) / now : 0.0;
    m.leaked_blocks = st.used_blocks() + st.reserved_blocks;
    for (const auto& r : workload) m.expected_tokens += r.output_len;
  }
};

void check_workload(std::span<const Request> workload) {
  if (workload.empty()) throw EmptyWorkload("episode needs at least one request");
  std::set<RequestId> ids;
  for (const auto& r : workload) {
    if (!r.valid() || r.generated != 0) throw ConfigError("workload request " + std::to_string(r.id) + " is invalid");
    if (!ids.insert(r.id).second) throw ConfigError("duplicate workload id " + std::to_string(r.id));
  }
}

EpisodeMetrics run_offloading(std::span<const Request> workload, const ClusterConfig& cfg,
                              const EstimatorParams& params, const Policy& policy, std::uint64_t seed,
                              const SimOptions& opts, EventTrace* trace) {
  EpisodeMetrics m;
  m.policy = policy.name();
  EpisodeContext ctx{workload, cfg, params, opts, trace, m, 0, 0, 0.0, 0, {}, -1};
  ctx.capacity = system_token_capacity(cfg);
  ctx.per_batch = per_batch_token_budget(cfg);
  m.system_capacity = ctx.capacity;
  m.per_batch_budget = ctx.per_batch;
  ctx.sim.noise.seed = substream_seed(seed, "noise");
  ctx.sim.record_trace = trace != nullptr;

  SchedulerOptions so = opts.scheduler;
  if (policy.kind == PolicyKind::static_prefetch) {
    so.mode = PrefetchMode::fixed_quota;
    so.fixed_quota_tokens =
        static_cast<Tokens>(std::floor(policy.static_ratio * static_cast<double>(ctx.capacity)));
  } else {
    so.mode = PrefetchMode::dynamic;
  }
  so.reserve_to_completion = false;

  const Bytes T = cfg.kv_bytes_per_token;
  const auto cpu_cap = static_cast<long double>(cfg.cpu_kv_capacity);
  for (const auto& r : workload) {
    if (static_cast<long double>(r.input_len + r.output_len) * T > cpu_cap) {
      throw CapacityError("request " + std::to_string(r.id) + " needs more KV than the CPU capacity");
    }
    if (blocks_for(r.input_len + r.output_len, cfg.block_size) > ctx.capacity / cfg.block_size) {
      throw CapacityError("request " + std::to_string(r.id) + " cannot fit in GPU KV memory");
    }
  }

  std::map<RequestId, Request> live;
  std::vector<RequestId> order;  // prefill order of live requests
  SchedulerState st = SchedulerState::create({}, {}, cfg, so);

  const auto live_tokens = [&] {
    Tokens total = 0;
    for (const auto& [id, r] : live) total += r.prefix_len();
    return total;
  };
  const detail::StopPredicate stop = [&](const SchedulerState& s, std::int64_t) {
    if (ctx.next >= workload.size()) return false;
    const Tokens tokens = s.live_tokens();
    if (tokens > ctx.capacity) return false;
    return static_cast<long double>(tokens + workload[ctx.next].input_len) * T <= cpu_cap;
  };

  while (ctx.next < workload.size() || !live.empty()) {
    std::vector<Request> batch;
    Tokens cpu_tokens = live_tokens();
    while (ctx.next < workload.size()) {
      const Request& r = workload[ctx.next];
      if (static_cast<long double>(cpu_tokens + r.input_len) * T > cpu_cap) break;
      batch.push_back(r);
      cpu_tokens += r.input_len;
      ++ctx.next;
      if (static_cast<long double>(cpu_tokens) * T >= opts.rho_hi * cpu_cap) break;
    }
    m.peak_cpu_kv_bytes = std::max<Bytes>(m.peak_cpu_kv_bytes, cpu_tokens * T);
    if (!batch.empty()) {
      ctx.prefill(batch, opts.prefill_offload);
      for (const auto& r : batch) {
        live.emplace(r.id, r);
        order.push_back(r.id);
      }
    }
    if (live.empty()) continue;

    // Most recently prefilled requests stay on the GPU while they fit.
    std::vector<Request> resident;
    std::vector<Request> pool;
    std::int64_t blocks = 0;
    bool full = false;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Request& r = live.at(*it);
      const std::int64_t need = blocks_for(r.prefix_len(), cfg.block_size);
      if (!full && blocks + need <= st.capacity_blocks) {
        blocks += need;
        resident.push_back(r);
      } else {
        full = true;
        pool.push_back(r);
      }
    }
    st = SchedulerState::create(resident, pool, cfg, so);
    ctx.decode(st, stop);

    live.clear();
    for (const auto& [id, r] : st.requests) live.emplace(id, r);
    std::erase_if(order, [&](RequestId id) { return !live.contains(id); });
    m.peak_cpu_kv_bytes = std::max<Bytes>(m.peak_cpu_kv_bytes, live_tokens() * T);
  }
  ctx.finish(st);
  return m;
}

EpisodeMetrics run_closed_set(std::span<const Request> workload, const ClusterConfig& cfg,
                              const EstimatorParams& params, std::uint64_t seed, const SimOptions& opts,
                              EventTrace* trace) {
  EpisodeMetrics m;
  m.policy = Policy::no_prefetch().name();
  EpisodeContext ctx{workload, cfg, params, opts, trace, m, 0, 0, 0.0, 0, {}, -1};
  ctx.capacity = system_token_capacity(cfg);
  ctx.per_batch = per_batch_token_budget(cfg);
  m.system_capacity = ctx.capacity;
  m.per_batch_budget = ctx.per_batch;
  ctx.sim.noise.seed = substream_seed(seed, "noise");
  ctx.sim.record_trace = trace != nullptr;

  SchedulerOptions so = opts.scheduler;
  so.mode = PrefetchMode::disabled;
  so.reserve_to_completion = true;
  SchedulerState st = SchedulerState::create({}, {}, cfg, so);
  const std::int64_t batch_cap = ctx.per_batch / cfg.block_size;
  const int n = cfg.n;

  for (const auto& r : workload) {
    if (blocks_for(r.input_len + r.output_len, cfg.block_size) > batch_cap) {
      throw CapacityError("request " + std::to_string(r.id) + " exceeds the per-batch KV budget");
    }
  }

  const auto batch_blocks = [&](const SchedulerState& s, int k) {
    std::int64_t total = 0;
    for (RequestId id : s.batches[static_cast<std::size_t>(k)]) total += s.allocated_blocks.at(id);
    return total;
  };
  // Batch with the most room, ties to the lowest index.
  const auto roomiest = [&](const SchedulerState& s) {
    int best = 0;
    std::int64_t room = -1;
    for (int k = 0; k < n; ++k) {
      const std::int64_t r = batch_cap - batch_blocks(s, k);
      if (r > room) {
        room = r;
        best = k;
      }
    }
    return std::make_pair(best, room);
  };
  const auto fits = [&](const SchedulerState& s, const Request& r) {
    const std::int64_t need = blocks_for(r.input_len + r.output_len, cfg.block_size);
    return need <= roomiest(s).second && need <= s.free_blocks();
  };
  const detail::StopPredicate stop = [&](const SchedulerState& s, std::int64_t) {
    if (ctx.next >= workload.size()) return false;
    if (static_cast<double>(s.resident_tokens()) > opts.rho_lo * static_cast<double>(ctx.capacity)) return false;
    return fits(s, workload[ctx.next]);
  };

  while (ctx.next < workload.size() || !st.empty()) {
    std::vector<Request> batch;
    while (ctx.next < workload.size() && fits(st, workload[ctx.next])) {
      const Request& r = workload[ctx.next++];
      const int k = roomiest(st).first;
      st.requests.emplace(r.id, r);
      st.gpu_resident.insert(r.id);
      st.allocated_blocks[r.id] = st.blocks_needed(r);
      auto& b = st.batches[static_cast<std::size_t>(k)];
      b.insert(std::upper_bound(b.begin(), b.end(), r.id), r.id);
      batch.push_back(r);
    }
    if (!batch.empty()) {
      ctx.prefill(batch, false);
    } else if (st.empty()) {
      throw CapacityError("request " + std::to_string(workload[ctx.next].id) + " never fits in GPU memory");
    }
    if (st.empty()) continue;
    ctx.decode(st, stop);
  }
  ctx.finish(st);
  return m;
}

}  // namespace

EpisodeMetrics run_episode(std::span<const Request> workload, const ClusterConfig& cfg,
                           const EstimatorParams& params, const Policy& policy, std::uint64_t seed,
                           const SimOptions& opts, EventTrace* trace) {
  cfg.validate();
  opts.validate();
  if (!params.valid()) throw ConfigError("estimator parameters must be >= 0");
  check_workload(workload);
  if (policy.kind == PolicyKind::no_prefetch) return run_closed_set(workload, cfg, params, seed, opts, trace);
  return run_offloading(workload, cfg, params, policy, seed, opts, trace);
}

EpisodeMetrics run_baseline(std::span<const Request> workload, const ClusterConfig& cfg,
                            const EstimatorParams& params, const Policy& baseline, std::uint64_t seed,
                            const SimOptions& opts, EventTrace* trace) {
  if (baseline.kind == PolicyKind::dynamic) throw ConfigError("run_baseline needs a baseline policy");
  return run_episode(workload, cfg, params, baseline, seed, opts, trace);
}

}  // namespace pipemax
