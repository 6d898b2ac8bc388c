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

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "sim_internal.hpp"

namespace pipemax {

namespace detail {

namespace {

enum EvType : int { kChannelEnd = 1, kStageEnd = 2 };
enum OwnerKind : int { kPrefetchShard = 1, kHop = 2, kOffload = 3 };

class DecodeEngine {
 public:
  DecodeEngine(SchedulerState& st, const ClusterConfig& cfg, const EstimatorParams& params, const SimOptions& opts,
               Seconds t0, EventTrace* trace, EpisodeMetrics& m)
      : st_(st),
        cfg_(cfg),
        params_(params),
        true_(opts.true_params.value_or(params)),
        opts_(opts),
        trace_(trace),
        m_(m),
        n_(cfg.n),
        links_(plan_links(cfg, opts)),
        capacity_(system_token_capacity(cfg)),
        now_(t0),
        t0_(t0) {
    if (st_.n() != n_) throw ConfigError("scheduler state depth differs from cluster.n");
    if (st_.budget_bandwidth <= 0.0) st_.budget_bandwidth = links_.budget_bandwidth;
    for (int g = 0; g < n_; ++g) {
      channels_.emplace_back(2 * g, g, Direction::h2d, cfg.h2d_bandwidth, cfg.per_transfer_overhead,
                             opts.priority_transfers);
      channels_.emplace_back(2 * g + 1, g, Direction::d2h, cfg.d2h_bandwidth, cfg.per_transfer_overhead,
                             opts.priority_transfers);
    }
    for (auto& c : channels_) c.attach(&q_, kChannelEnd, trace_, "decode");
    stage_busy_.assign(static_cast<std::size_t>(n_), 0);
    busy_time_.assign(static_cast<std::size_t>(n_), 0.0);
    next_t_.assign(static_cast<std::size_t>(n_), 0);
    stall_since_.assign(static_cast<std::size_t>(n_), -1.0);
    returned_.assign(static_cast<std::size_t>(n_), 1);
    pool_was_nonempty_ = !st_.cpu_pool.empty();
  }

  DecodeRun run(const StopPredicate& stop, std::int64_t horizon) {
    stop_ = &stop;
    horizon_ = horizon;
    try_start_all();
    while (!q_.empty()) {
      const Ev ev = q_.pop();
      now_ = ev.time;
      if (ev.type == kChannelEnd) {
        done_.clear();
        channels_[static_cast<std::size_t>(ev.a)].on_end(static_cast<std::uint64_t>(ev.b), now_, done_);
        handle_done();
      } else if (ev.type == kStageEnd) {
        on_stage_end(ev.a, static_cast<int>(ev.b));
      }
      try_start_all();
    }
    for (const auto& c : channels_) merge_channel_stats(c.stats(), m_);
    const Seconds span = now_ - t0_;
    Seconds busy = 0.0;
    for (Seconds b : busy_time_) busy += b;
    if (launched_ > 0) m_.bubble_seconds += std::max(0.0, span - busy / n_);
    return DecodeRun{now_, reason_, launched_};
  }

  bool restart_needed() const { return restart_; }

 private:
  struct Iter {
    std::int64_t t = 0;
    int batch = 0;
    std::int64_t size = 0;
    Seconds stage_seconds = 0.0;
    std::vector<RequestId> finished;
    std::int64_t reserved = 0;
    std::vector<char> hop_ready;
    bool has_prefetch = false;
    Tokens prefetch_tokens = 0;
    std::vector<RequestId> prefetch_ids;  // sorted
    std::vector<char> shard_landed;
  };

  void try_start_all() {
    for (int s = 0; s < n_; ++s) try_start(s);
  }

  // True when iteration t may not start stage s because P_{t-1} has not
  // landed on GPU s.
  bool gated(std::int64_t t, int s) const {
    if (t == 0) return false;
    const auto it = iters_.find(t - 1);
    if (it == iters_.end() || !it->second.has_prefetch) return false;
    return !it->second.shard_landed[static_cast<std::size_t>(s)];
  }

  void begin_stall(int s, std::int64_t t) {
    if (stall_since_[static_cast<std::size_t>(s)] >= 0.0) return;
    stall_since_[static_cast<std::size_t>(s)] = now_;
    if (trace_) trace_->add(SimEvent{now_, EventKind::stall_start, "decode", s, -1, -1, t, "prefetch", {}});
  }

  void end_stall(int s, std::int64_t t) {
    Seconds& since = stall_since_[static_cast<std::size_t>(s)];
    if (since < 0.0) return;
    m_.stall_seconds += now_ - since;
    if (trace_) {
      trace_->add(SimEvent{now_, EventKind::stall_end, "decode", s, -1, -1, t, "prefetch", {{"seconds", now_ - since}}});
    }
    since = -1.0;
  }

  void try_start(int s) {
    const auto su = static_cast<std::size_t>(s);
    if (stage_busy_[su]) return;
    const std::int64_t t = next_t_[su];
    if (s == 0) {
      if (stopped_) return;
      const int batch = batch_indices(t, n_).exec;
      if (!returned_[static_cast<std::size_t>(batch)]) return;
      if (checked_t_ != t) {
        checked_t_ = t;
        if (should_stop()) {
          stopped_ = true;
          return;
        }
      }
      if (gated(t, 0)) {
        begin_stall(0, t);
        return;
      }
      end_stall(0, t);
      launch(t);
      return;
    }
    const auto it = iters_.find(t);
    if (it == iters_.end() || !it->second.hop_ready[su]) return;
    if (gated(t, s)) {
      begin_stall(s, t);
      return;
    }
    end_stall(s, t);
    start_stage(it->second, s);
  }

  bool should_stop() {
    if (st_.empty()) {
      reason_ = DecodeStop::finished;
      return true;
    }
    if (launched_ >= horizon_ || m_.decode_iterations >= opts_.max_decode_iterations) {
      reason_ = DecodeStop::horizon;
      return true;
    }
    const bool batches_empty =
        std::all_of(st_.batches.begin(), st_.batches.end(), [](const auto& b) { return b.empty(); });
    if (batches_empty) {
      // Only the CPU pool is left; the caller reloads it.
      restart_ = true;
      reason_ = DecodeStop::predicate;
      return true;
    }
    if (launched_ >= 1 && (*stop_)(st_, launched_)) {
      reason_ = DecodeStop::predicate;
      return true;
    }
    return false;
  }

  void launch(std::int64_t t) {
    const int i = batch_indices(t, n_).exec;
    const bool pool_nonempty = !st_.cpu_pool.empty();
    if (pool_was_nonempty_ && !pool_nonempty) {
      ++m_.pool_exhausted_events;
      if (trace_) trace_->add(SimEvent{now_, EventKind::pool_exhausted, "decode", 0, i, -1, t, "", {}});
    }
    pool_was_nonempty_ = pool_nonempty;

    const StepPlan plan = schedule_step(st_, params_, cfg_);

    std::vector<RequestId> prev_prefetch;
    if (const auto prev = iters_.find(t - 1); prev != iters_.end()) prev_prefetch = prev->second.prefetch_ids;

    std::int64_t b = 0;
    Tokens tokens = 0;
    Tokens prefetched = 0;
    for (RequestId id : st_.batches[static_cast<std::size_t>(i)]) {
      if (std::find(plan.preempted.begin(), plan.preempted.end(), id) != plan.preempted.end()) continue;
      const Tokens len = st_.requests.at(id).prefix_len();
      ++b;
      tokens += len;
      if (std::binary_search(prev_prefetch.begin(), prev_prefetch.end(), id)) prefetched += len;
    }

    commit_step(st_, plan);
    st_.mark_resident(plan.prefetch_set);
    const std::int64_t reserved_before = st_.reserved_blocks;
    std::vector<RequestId> finished = st_.advance_batch(i, plan.prefetch_set);
    m_.total_tokens_generated += b;
    if (opts_.check_invariants) st_.check_invariants();

    const std::int64_t global_iter = m_.decode_iterations++;
    const Seconds predicted = estimate_decode_time(params_, b, tokens);
    const Seconds actual =
        b > 0 ? estimate_decode_time(true_, b, tokens) * opts_.noise.factor(i, global_iter) : 0.0;

    IterationRecord rec;
    rec.iteration = global_iter;
    rec.phase_iteration = t;
    rec.batch = i;
    rec.start = now_;
    rec.exec_seconds = actual;
    rec.predicted_seconds = predicted;
    rec.batch_size = b;
    rec.resident_tokens = tokens - prefetched;
    rec.prefetched_tokens = prefetched;
    rec.budget_tokens = plan.prefetch_budget_tokens;
    rec.prefetch_tokens = plan.prefetch_tokens;
    rec.steady = plan.steady;
    rec.pool_nonempty = pool_nonempty;
    m_.exec_time_series.push_back(actual);
    m_.iterations.push_back(rec);
    if (plan.steady) {
      if (m_.first_steady_iteration < 0) m_.first_steady_iteration = global_iter;
      if (pool_nonempty && tokens > 0) {
        ++m_.steady_iterations;
      }
    }
    m_.max_active_batch_tokens = std::max(m_.max_active_batch_tokens, tokens + b);
    const Tokens resident_now = st_.resident_tokens();
    m_.peak_resident_tokens = std::max(m_.peak_resident_tokens, resident_now);
    if (capacity_ > 0) {
      m_.max_composition =
          std::max(m_.max_composition, static_cast<double>(resident_now) / static_cast<double>(capacity_));
    }
    m_.evicted_requests += static_cast<std::int64_t>(plan.evicted.size());
    m_.preempted_requests += static_cast<std::int64_t>(plan.preempted.size());
    m_.prefetched_tokens_total += plan.prefetch_tokens;

    Iter it;
    it.t = t;
    it.batch = i;
    it.size = b;
    it.stage_seconds = actual / n_;
    it.finished = std::move(finished);
    it.reserved = st_.reserved_blocks - reserved_before;
    it.hop_ready.assign(static_cast<std::size_t>(n_), 0);
    it.hop_ready[0] = 1;
    it.has_prefetch = plan.prefetch_tokens > 0;
    it.prefetch_tokens = plan.prefetch_tokens;
    it.prefetch_ids = plan.prefetch_set;
    std::sort(it.prefetch_ids.begin(), it.prefetch_ids.end());
    it.shard_landed.assign(static_cast<std::size_t>(n_), it.has_prefetch ? 0 : 1);
    returned_[static_cast<std::size_t>(i)] = 0;
    ++launched_;

    if (trace_) {
      trace_->add(SimEvent{now_,
                           EventKind::stage_compute_start,
                           "decode",
                           0,
                           i,
                           -1,
                           global_iter,
                           "decode",
                           {{"exec_seconds", actual},
                            {"predicted_seconds", predicted},
                            {"batch_size", static_cast<double>(b)},
                            {"resident_tokens", static_cast<double>(tokens - prefetched)},
                            {"prefetched_tokens", static_cast<double>(prefetched)},
                            {"capacity_tokens", static_cast<double>(capacity_)},
                            {"budget_tokens", static_cast<double>(plan.prefetch_budget_tokens)},
                            {"prefetch_tokens", static_cast<double>(plan.prefetch_tokens)},
                            {"steady", plan.steady ? 1.0 : 0.0}}});
    }
    auto [pos, inserted] = iters_.emplace(t, std::move(it));
    start_stage(pos->second, 0, /*traced=*/true);
  }

  void start_stage(Iter& it, int s, bool traced = false) {
    const auto su = static_cast<std::size_t>(s);
    stage_busy_[su] = 1;
    next_t_[su] = it.t + 1;
    if (trace_ && !traced) {
      trace_->add(SimEvent{now_, EventKind::stage_compute_start, "decode", s, it.batch, -1, it.t, "decode", {}});
    }
    if (it.has_prefetch) {
      Stream shard;
      shard.priority = Priority::kv;
      shard.remaining = shard_bytes(it.prefetch_tokens, cfg_.kv_bytes_per_token, n_);
      shard.chunk = links_.chunk_bytes;
      shard.fragments = links_.prefetch_fragments;
      shard.owner = StreamOwner{kPrefetchShard, it.t, s, 0};
      shard.tag = "prefetch";
      done_.clear();
      channel(s, Direction::h2d).submit(shard, now_, done_);
      handle_done();
    }
    q_.push(now_ + it.stage_seconds, kComputeEnd, s, kStageEnd, it.t, s);
  }

  void on_stage_end(std::int64_t t, int s) {
    const auto su = static_cast<std::size_t>(s);
    Iter& it = iters_.at(t);
    stage_busy_[su] = 0;
    busy_time_[su] += it.stage_seconds;
    if (trace_) trace_->add(SimEvent{now_, EventKind::stage_compute_end, "decode", s, it.batch, -1, t, "decode", {}});

    done_.clear();
    Stream off;
    off.priority = Priority::kv;
    off.remaining = shard_bytes(it.size, cfg_.kv_bytes_per_token, n_);
    off.chunk = links_.chunk_bytes;
    off.fragments = links_.offload_fragments;
    off.owner = StreamOwner{kOffload, t, s, 0};
    off.tag = "offload";
    channel(s, Direction::d2h).submit(off, now_, done_);

    if (s == n_ - 1) {
      if (it.reserved > 0) st_.release_reserved(it.reserved);
      it.reserved = 0;
      for (RequestId id : it.finished) {
        ++m_.requests_completed;
        if (trace_) trace_->add(SimEvent{now_, EventKind::request_complete, "decode", s, it.batch, id, t, "", {}});
      }
      const int batch = it.batch;
      iters_.erase(t - 1);
      if (n_ == 1) {
        returned_[static_cast<std::size_t>(batch)] = 1;
      } else {
        issue_hop(t, s, 0, batch, it.size);
      }
    } else {
      issue_hop(t, s, s + 1, it.batch, it.size);
    }
    handle_done();
  }

  void issue_hop(std::int64_t t, int from, int to, int batch, std::int64_t size) {
    hop_parts_[{t, from}] = 0;
    const Bytes bytes = size * cfg_.activation_bytes_per_token;
    Stream out;
    out.priority = Priority::activation;
    out.remaining = bytes;
    out.owner = StreamOwner{kHop, t, from, batch};
    out.tag = "activation";
    Stream in = out;
    channel(from, Direction::d2h).submit(out, now_, done_);
    channel(to, Direction::h2d).submit(in, now_, done_);
  }

  void handle_done() {
    // Completions can trigger no further submissions, so one pass suffices.
    for (const StreamOwner& o : done_) {
      if (o.kind == kPrefetchShard) {
        iters_.at(o.a).shard_landed[static_cast<std::size_t>(o.b)] = 1;
      } else if (o.kind == kHop) {
        const auto key = std::make_pair(o.a, static_cast<int>(o.b));
        if (++hop_parts_[key] < 2) continue;
        hop_parts_.erase(key);
        const int from = static_cast<int>(o.b);
        if (from == n_ - 1) {
          returned_[static_cast<std::size_t>(o.c)] = 1;
        } else {
          iters_.at(o.a).hop_ready[static_cast<std::size_t>(from + 1)] = 1;
        }
      }
    }
    done_.clear();
  }

  Channel& channel(int gpu, Direction d) {
    return channels_[static_cast<std::size_t>(2 * gpu + (d == Direction::h2d ? 0 : 1))];
  }

  SchedulerState& st_;
  const ClusterConfig& cfg_;
  EstimatorParams params_;
  EstimatorParams true_;
  const SimOptions& opts_;
  EventTrace* trace_;
  EpisodeMetrics& m_;
  int n_;
  LinkPlan links_;
  Tokens capacity_;
  Seconds now_;
  Seconds t0_;

  EventQueue q_;
  std::vector<Channel> channels_;
  std::vector<StreamOwner> done_;
  std::vector<char> stage_busy_;
  std::vector<Seconds> busy_time_;
  std::vector<std::int64_t> next_t_;
  std::vector<Seconds> stall_since_;
  std::vector<char> returned_;
  std::map<std::int64_t, Iter> iters_;
  std::map<std::pair<std::int64_t, int>, int> hop_parts_;

  const StopPredicate* stop_ = nullptr;
  std::int64_t horizon_ = 0;
  std::int64_t launched_ = 0;
  std::int64_t checked_t_ = -1;
  bool stopped_ = false;
  bool restart_ = false;
  bool pool_was_nonempty_ = false;
  DecodeStop reason_ = DecodeStop::finished;
};

// Moves pool requests (ascending id) onto the GPU until capacity is reached
// and returns the reload time charged to the pipeline.
Seconds reload_from_pool(SchedulerState& st, const ClusterConfig& cfg, const LinkPlan& links) {
  std::vector<Request> resident;
  std::vector<Request> pool;
  std::int64_t blocks = 0;
  Tokens tokens = 0;
  bool full = false;
  for (RequestId id : st.cpu_pool) {
    const Request& r = st.requests.at(id);
    const std::int64_t need = st.blocks_needed(r);
    if (!full && blocks + need <= st.capacity_blocks) {
      blocks += need;
      tokens += r.prefix_len();
      resident.push_back(r);
    } else {
      full = true;
      pool.push_back(r);
    }
  }
  if (resident.empty()) throw OutOfMemory("a pooled request does not fit in GPU memory");
  const double bw = st.budget_bandwidth;
  const SchedulerOptions options = st.options;
  st = SchedulerState::create(resident, pool, cfg, options);
  st.budget_bandwidth = bw;
  const Bytes bytes = shard_bytes(tokens, cfg.kv_bytes_per_token, cfg.n);
  return std::isinf(links.budget_bandwidth) ? 0.0 : static_cast<double>(bytes) / links.budget_bandwidth;
}

}  // namespace

DecodeRun run_decode(SchedulerState& state, const ClusterConfig& cfg, const EstimatorParams& params,
                     const SimOptions& opts, Seconds t0, const StopPredicate& stop, std::int64_t horizon,
                     EventTrace* trace, EpisodeMetrics& m) {
  const LinkPlan links = plan_links(cfg, opts);
  Seconds now = t0;
  DecodeRun total{t0, DecodeStop::finished, 0};
  for (;;) {
    DecodeEngine engine(state, cfg, params, opts, now, trace, m);
    const DecodeRun run = engine.run(stop, horizon - total.launched);
    total.launched += run.launched;
    now = run.end_time;
    total.end_time = now;
    total.reason = run.reason;
    if (!engine.restart_needed()) break;
    const Seconds reload = reload_from_pool(state, cfg, links);
    m.stall_seconds += reload;
    m.reload_seconds += reload;
    if (trace) {
      trace->add(SimEvent{now, EventKind::stall_start, "decode", 0, -1, -1, -1, "reload", {}});
      trace->add(SimEvent{now + reload, EventKind::stall_end, "decode", 0, -1, -1, -1, "reload", {{"seconds", reload}}});
    }
    now += reload;
    total.end_time = now;
    if (stop(state, 1)) break;
  }
  double sum = 0.0;
  std::int64_t count = 0;
  for (const auto& rec : m.iterations) {
    const Tokens tokens = rec.resident_tokens + rec.prefetched_tokens;
    if (!rec.steady || !rec.pool_nonempty || tokens <= 0) continue;
    sum += static_cast<double>(rec.prefetched_tokens) / static_cast<double>(tokens);
    ++count;
  }
  m.prefetched_token_fraction = count > 0 ? sum / static_cast<double>(count) : 0.0;
  return total;
}

}  // namespace detail

DecodeResult simulate_decode(SchedulerState& state, const ClusterConfig& cfg, const EstimatorParams& params,
                             const SimOptions& opts, std::int64_t horizon) {
  cfg.validate();
  opts.validate();
  if (horizon < 1) throw ConfigError("decode horizon must be >= 1");
  DecodeResult out;
  out.metrics.policy = "decode";
  out.metrics.per_batch_budget = per_batch_token_budget(cfg);
  out.metrics.system_capacity = system_token_capacity(cfg);
  std::int64_t expected = 0;
  for (const auto& [id, r] : state.requests) expected += r.remaining();
  const detail::StopPredicate never = [](const SchedulerState&, std::int64_t) { return false; };
  const auto run = detail::run_decode(state, cfg, params, opts, 0.0, never, horizon,
                                      opts.record_trace ? &out.trace : nullptr, out.metrics);
  auto& m = out.metrics;
  m.decode_phases = 1;
  m.decode_seconds = run.end_time;
  m.wall_seconds = run.end_time;
  m.tokens_per_second = m.wall_seconds > 0.0 ? static_cast<double>(m.total_tokens_generated) / m.wall_seconds : 0.0;
  m.expected_tokens = run.reason == detail::DecodeStop::finished ? expected : m.total_tokens_generated;
  m.leaked_blocks = state.used_blocks() + state.reserved_blocks;
  return out;
}

}  // namespace pipemax
