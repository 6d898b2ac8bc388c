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
#include <limits>
#include <map>

#include "pipemax/errors.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "sim_internal.hpp"

namespace pipemax {

namespace {

using detail::Channel;
using detail::EventQueue;
using detail::Ev;
using detail::Stream;
using detail::StreamOwner;

enum EvType : int { kChannelEnd = 1, kStageEnd = 2, kOffloadSubmit = 3 };
enum OwnerKind : int { kHop = 1, kLayerOffload = 2 };

class PrefillEngine {
 public:
  PrefillEngine(std::vector<Seconds> stage_times, std::vector<Tokens> input_lens, const ClusterConfig& cfg,
                const SimOptions& opts, bool offload, PrefillResult& out)
      : times_(std::move(stage_times)),
        inputs_(std::move(input_lens)),
        cfg_(cfg),
        opts_(opts),
        offload_(offload),
        out_(out),
        n_(cfg.n),
        m_(times_.size()),
        layers_(cfg.layers_per_stage) {
    const detail::LinkPlan links = detail::plan_links(cfg, opts);
    chunk_ = links.chunk_bytes;
    trace_ = opts.record_trace ? &out_.trace : nullptr;
    for (int g = 0; g < n_; ++g) {
      channels_.emplace_back(2 * g, g, Direction::h2d, cfg.h2d_bandwidth, cfg.per_transfer_overhead,
                             opts.priority_transfers);
      channels_.emplace_back(2 * g + 1, g, Direction::d2h, cfg.d2h_bandwidth, cfg.per_transfer_overhead,
                             opts.priority_transfers);
    }
    for (auto& c : channels_) c.attach(&q_, kChannelEnd, trace_, "prefill");
    busy_.assign(static_cast<std::size_t>(n_), 0);
    next_.assign(static_cast<std::size_t>(n_), 0);
    blocked_since_.assign(static_cast<std::size_t>(n_), -1.0);
    staging_used_.assign(static_cast<std::size_t>(n_), 0);
    hop_ready_.assign(m_ * static_cast<std::size_t>(n_), 0);
    for (std::size_t r = 0; r < m_; ++r) hop_ready_[r * static_cast<std::size_t>(n_)] = 1;
    out_.completion.assign(m_, 0.0);

    Tokens longest = 0;
    for (Tokens len : inputs_) longest = std::max(longest, len);
    const Bytes largest_shard = detail::shard_bytes(longest, cfg.kv_bytes_per_token, n_);
    staging_cap_ = opts.staging_bytes.value_or(2 * largest_shard);
    staging_cap_ = std::max(staging_cap_, largest_shard);
  }

  void run() {
    try_start_all();
    while (!q_.empty()) {
      const Ev ev = q_.pop();
      now_ = ev.time;
      if (ev.type == kChannelEnd) {
        done_.clear();
        channels_[static_cast<std::size_t>(ev.a)].on_end(static_cast<std::uint64_t>(ev.b), now_, done_);
        handle_done();
      } else if (ev.type == kStageEnd) {
        on_stage_end(static_cast<std::size_t>(ev.a), static_cast<int>(ev.b));
      } else if (ev.type == kOffloadSubmit) {
        submit_layer(static_cast<std::size_t>(ev.a), static_cast<int>(ev.b), static_cast<int>(ev.c));
      }
      try_start_all();
    }
    for (const auto& c : channels_) {
      const auto& s = c.stats();
      out_.activation_transfers += s.activation_transfers;
      out_.activation_delay_violations += s.activation_delay_violations;
      out_.max_activation_delay = std::max(out_.max_activation_delay, s.max_activation_delay);
    }
    out_.makespan = *std::max_element(out_.completion.begin(), out_.completion.end());
  }

 private:
  Bytes shard(std::size_t r) const { return detail::shard_bytes(inputs_[r], cfg_.kv_bytes_per_token, n_); }

  Bytes layer_bytes(std::size_t r, int layer) const {
    const Bytes total = shard(r);
    const Bytes base = total / layers_;
    return base + (layer < total % layers_ ? 1 : 0);
  }

  void try_start_all() {
    for (int s = 0; s < n_; ++s) try_start(s);
  }

  void try_start(int s) {
    const auto su = static_cast<std::size_t>(s);
    if (busy_[su] || next_[su] >= m_) return;
    const std::size_t r = next_[su];
    if (!hop_ready_[r * static_cast<std::size_t>(n_) + su]) return;
    if (offload_ && staging_used_[su] + shard(r) > staging_cap_) {
      if (blocked_since_[su] < 0.0) blocked_since_[su] = now_;
      return;
    }
    if (blocked_since_[su] >= 0.0) {
      out_.exposed_offload_seconds += now_ - blocked_since_[su];
      blocked_since_[su] = -1.0;
    }
    busy_[su] = 1;
    ++next_[su];
    const Seconds t = times_[r];
    if (trace_) {
      trace_->add(SimEvent{now_, EventKind::stage_compute_start, "prefill", s, -1, static_cast<RequestId>(r), -1,
                           "prefill", {{"stage_seconds", t}}});
    }
    if (offload_) {
      staging_used_[su] += shard(r);
      const Seconds per_layer = t / layers_;
      for (int l = 0; l < layers_; ++l) {
        q_.push(now_ + (l + opts_.qkv_fraction) * per_layer, detail::kStart, s, kOffloadSubmit,
                static_cast<std::int64_t>(r), s, l);
      }
    }
    q_.push(now_ + t, detail::kComputeEnd, s, kStageEnd, static_cast<std::int64_t>(r), s);
  }

  void submit_layer(std::size_t r, int s, int layer) {
    Stream st;
    st.priority = Priority::kv;
    st.remaining = layer_bytes(r, layer);
    st.chunk = chunk_;
    st.fragments = 1;
    st.owner = StreamOwner{kLayerOffload, static_cast<std::int64_t>(r), s, layer};
    st.tag = "prefill_offload";
    done_.clear();
    channel(s, Direction::d2h).submit(st, now_, done_);
    handle_done();
  }

  void on_stage_end(std::size_t r, int s) {
    busy_[static_cast<std::size_t>(s)] = 0;
    if (trace_) {
      trace_->add(SimEvent{now_, EventKind::stage_compute_end, "prefill", s, -1, static_cast<RequestId>(r), -1,
                           "prefill", {}});
    }
    if (s == n_ - 1) {
      out_.completion[r] = now_;
      return;
    }
    const Bytes bytes = inputs_[r] * cfg_.activation_bytes_per_token;
    Stream out;
    out.priority = Priority::activation;
    out.remaining = bytes;
    out.owner = StreamOwner{kHop, static_cast<std::int64_t>(r), s, 0};
    out.tag = "activation";
    Stream in = out;
    done_.clear();
    hop_parts_[{r, s}] = 0;
    channel(s, Direction::d2h).submit(out, now_, done_);
    channel(s + 1, Direction::h2d).submit(in, now_, done_);
    handle_done();
  }

  void handle_done() {
    for (const StreamOwner& o : done_) {
      const auto r = static_cast<std::size_t>(o.a);
      const int s = static_cast<int>(o.b);
      if (o.kind == kHop) {
        const auto key = std::make_pair(r, s);
        if (++hop_parts_[key] < 2) continue;
        hop_parts_.erase(key);
        hop_ready_[r * static_cast<std::size_t>(n_) + static_cast<std::size_t>(s + 1)] = 1;
      } else if (o.kind == kLayerOffload) {
        staging_used_[static_cast<std::size_t>(s)] -= layer_bytes(r, static_cast<int>(o.c));
        ++out_.offload_transfers;
        out_.offload_end = std::max(out_.offload_end, now_);
        if (trace_) {
          trace_->add(SimEvent{now_, EventKind::relayout, "prefill", s, -1, static_cast<RequestId>(r), -1,
                               "block_first", {{"layer", static_cast<double>(o.c)}}});
        }
      }
    }
    done_.clear();
  }

  Channel& channel(int gpu, Direction d) {
    return channels_[static_cast<std::size_t>(2 * gpu + (d == Direction::h2d ? 0 : 1))];
  }

  std::vector<Seconds> times_;
  std::vector<Tokens> inputs_;
  const ClusterConfig& cfg_;
  const SimOptions& opts_;
  bool offload_;
  PrefillResult& out_;
  int n_;
  std::size_t m_;
  int layers_;
  Bytes chunk_ = 1;
  Bytes staging_cap_ = 0;
  EventTrace* trace_ = nullptr;

  EventQueue q_;
  std::vector<Channel> channels_;
  std::vector<StreamOwner> done_;
  std::vector<char> busy_;
  std::vector<std::size_t> next_;
  std::vector<Seconds> blocked_since_;
  std::vector<Bytes> staging_used_;
  std::vector<char> hop_ready_;
  std::map<std::pair<std::size_t, int>, int> hop_parts_;
  Seconds now_ = 0.0;
};

}  // namespace

PrefillResult simulate_prefill(std::span<const Request> requests, const ClusterConfig& cfg, const SimOptions& opts) {
  cfg.validate();
  opts.validate();
  if (requests.empty()) throw ConfigError("prefill needs at least one request");
  std::vector<Seconds> times;
  std::vector<Tokens> inputs;
  for (const auto& r : requests) {
    if (!r.valid()) throw ConfigError("invalid request " + std::to_string(r.id));
    times.push_back(static_cast<double>(r.input_len) * cfg.prefill_seconds_per_token);
    inputs.push_back(r.input_len);
  }
  PrefillResult out;
  PrefillEngine engine(std::move(times), std::move(inputs), cfg, opts, opts.prefill_offload, out);
  engine.run();
  return out;
}

PrefillResult simulate_prefill(const PrefillInstance& inst) {
  inst.validate();
  ClusterConfig cfg;
  cfg.n = inst.n;
  cfg.mem_per_gpu = 2;
  cfg.model_bytes = 1;
  cfg.kv_bytes_per_token = 1;
  cfg.h2d_bandwidth = std::numeric_limits<double>::infinity();
  cfg.d2h_bandwidth = std::numeric_limits<double>::infinity();
  const SimOptions opts;
  std::vector<Tokens> inputs(inst.stage_times.size(), 1);
  PrefillResult out;
  PrefillEngine engine(inst.stage_times, std::move(inputs), cfg, opts, false, out);
  engine.run();
  return out;
}

}  // namespace pipemax
