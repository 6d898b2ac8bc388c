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
#include <queue>
#include <string>
#include <vector>

#include <functional>

#include "pipemax/event_trace.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "pipemax/scheduler.hpp"
#include "pipemax/transfer.hpp"
#include "pipemax/types.hpp"

namespace pipemax::detail {

// Ranks order simultaneous events: completions of compute, then of
// transfers, then anything that starts work.
enum Rank : int { kComputeEnd = 0, kTransferEnd = 1, kStart = 2 };

struct Ev {
  Seconds time = 0.0;
  int rank = 0;
  int stage = 0;
  std::uint64_t seq = 0;
  int type = 0;
  std::int64_t a = 0;
  std::int64_t b = 0;
  std::int64_t c = 0;
};

class EventQueue {
 public:
  void push(Seconds time, int rank, int stage, int type, std::int64_t a = 0, std::int64_t b = 0,
            std::int64_t c = 0) {
    q_.push(Ev{time, rank, stage, seq_++, type, a, b, c});
  }
  bool empty() const { return q_.empty(); }
  Ev pop() {
    Ev e = q_.top();
    q_.pop();
    return e;
  }

 private:
  struct Later {
    bool operator()(const Ev& x, const Ev& y) const {
      if (x.time != y.time) return x.time > y.time;
      if (x.rank != y.rank) return x.rank > y.rank;
      if (x.stage != y.stage) return x.stage > y.stage;
      return x.seq > y.seq;
    }
  };
  std::priority_queue<Ev, std::vector<Ev>, Later> q_;
  std::uint64_t seq_ = 0;
};

struct StreamOwner {
  int kind = 0;
  std::int64_t a = 0;
  std::int64_t b = 0;
  std::int64_t c = 0;
};

struct Stream {
  Priority priority = Priority::kv;
  Bytes remaining = 0;
  Bytes chunk = 0;  // <= 0: one chunk of the whole stream
  std::int64_t fragments = 1;  // per chunk
  Seconds submit_time = 0.0;
  StreamOwner owner;
  const char* tag = "";
};

struct ChannelStats {
  std::int64_t activation_transfers = 0;
  std::int64_t activation_delay_violations = 0;
  Seconds max_activation_delay = 0.0;
  Seconds max_kv_chunk_seconds = 0.0;
  Seconds busy_seconds = 0.0;
};

// One direction of one GPU's host link. Non-preemptive at chunk
// granularity: a low-priority stream runs as one segment that is cut at
// the next chunk boundary when an activation arrives.
class Channel {
 public:
  Channel(int index, int gpu, Direction dir, double bandwidth, Seconds overhead, bool priority)
      : index_(index), gpu_(gpu), dir_(dir), bw_(bandwidth), o_(overhead), priority_(priority) {}

  void attach(EventQueue* queue, int end_event_type, EventTrace* trace, const char* phase) {
    queue_ = queue;
    end_type_ = end_event_type;
    trace_ = trace;
    phase_ = phase;
  }

  // Zero-byte streams complete at once and are appended to `done`.
  void submit(Stream s, Seconds now, std::vector<StreamOwner>& done);
  void on_end(std::uint64_t generation, Seconds now, std::vector<StreamOwner>& done);

  bool idle() const { return !busy_ && high_.empty() && low_.empty(); }
  const ChannelStats& stats() const { return stats_; }
  Seconds chunk_seconds(const Stream& s, Bytes bytes) const;

 private:
  std::int64_t chunk_count(const Stream& s) const;
  Bytes bytes_for(const Stream& s, std::int64_t m) const;
  Seconds time_for(const Stream& s, std::int64_t m) const;
  void start_next(Seconds now);
  void emit(EventKind kind, Seconds now, const Stream& s, Bytes bytes);

  int index_;
  int gpu_;
  Direction dir_;
  double bw_;
  Seconds o_;
  bool priority_;
  EventQueue* queue_ = nullptr;
  int end_type_ = 0;
  EventTrace* trace_ = nullptr;
  const char* phase_ = "";

  std::deque<Stream> high_;
  std::deque<Stream> low_;
  bool busy_ = false;
  Stream cur_;
  Seconds seg_start_ = 0.0;
  Seconds seg_end_ = 0.0;
  std::int64_t seg_chunks_ = 0;
  std::uint64_t gen_ = 0;
  Seconds last_activation_end_ = -1.0;
  ChannelStats stats_;
};

// Bytes of `tokens` tokens held by one of n GPUs, rounded up.
Bytes shard_bytes(Tokens tokens, Bytes per_token, int n);

// Per-GPU chunking and fragment counts shared by both engines.
struct LinkPlan {
  Bytes chunk_bytes = 1;
  std::int64_t prefetch_fragments = 1;
  std::int64_t offload_fragments = 1;
  double budget_bandwidth = 0.0;
  Seconds kv_chunk_seconds = 0.0;
};
LinkPlan plan_links(const ClusterConfig& cfg, const SimOptions& opts);

enum class DecodeStop { finished, predicate, horizon };

// Evaluated before each launch with the number of iterations launched in
// the current decode phase.
using StopPredicate = std::function<bool(const SchedulerState&, std::int64_t)>;

struct DecodeRun {
  Seconds end_time = 0.0;
  DecodeStop reason = DecodeStop::finished;
  std::int64_t launched = 0;
};

// Decode from `t0` until the predicate, the horizon or completion stops
// launches, then drains. When every batch empties with requests left in
// the CPU pool the state is rebuilt from the pool and the reload time is
// charged as stall. Metrics accumulate into `m`.
DecodeRun run_decode(SchedulerState& state, const ClusterConfig& cfg, const EstimatorParams& params,
                     const SimOptions& opts, Seconds t0, const StopPredicate& stop, std::int64_t horizon,
                     EventTrace* trace, EpisodeMetrics& m);

void merge_channel_stats(const ChannelStats& s, EpisodeMetrics& m);

}  // namespace pipemax::detail
