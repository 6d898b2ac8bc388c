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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipemax/types.hpp"

namespace pipemax {

enum class LayoutKind { block_first, layer_first };

struct Layout {
  LayoutKind kind = LayoutKind::block_first;
  int layers = 1;
  int kv_tensors_per_layer = 2;  // K and V

  void validate() const;
};

enum class Direction { h2d, d2h };
enum class Priority { activation, kv };  // activation is the high lane

struct LinkChannel {
  Direction direction = Direction::h2d;
  double bandwidth = 1.0;  // bytes/s, may be +inf
  Seconds per_transfer_overhead = 0.0;
  Seconds busy_until = 0.0;
};

struct TransferTag {
  std::string kind;  // e.g. "prefetch", "offload", "activation"
  RequestId request = -1;
  int batch = -1;
  int layer = -1;
  int stage = -1;
};

struct TransferRequest {
  Priority priority = Priority::kv;
  Direction direction = Direction::h2d;
  Bytes bytes = 0;
  std::int64_t fragments = 1;
  TransferTag tag;
  Seconds submit_time = 0.0;
};

/// Contiguous fragments needed to move one KV block.
std::int64_t fragments_per_block(const Layout& layout);

/// fragments * o + bytes / bandwidth; zero-byte transfers take no time.
Seconds transfer_time(Bytes bytes, std::int64_t fragments, const LinkChannel& channel);

/// Fraction of transfer_time spent moving payload. 0 for zero bytes.
double utilization(Bytes bytes, std::int64_t fragments, const LinkChannel& channel);

/// Payload bytes per second achieved when moving `chunk_bytes` per request.
double effective_bandwidth(Bytes chunk_bytes, std::int64_t fragments, const LinkChannel& channel);

struct OffloadPlan {
  Seconds exposed_seconds = 0.0;
  bool hidden = true;
};

/// Asynchronous offload of one layer's KV that may overlap `overlap_window`
/// seconds of remaining compute.
OffloadPlan plan_layer_offload(Bytes layer_kv_bytes, Seconds overlap_window, const LinkChannel& channel);

/// Per-direction transfer queues with a high (activation) and a low (KV)
/// lane. With priority disabled both lanes drain in submission order.
class TransferQueues {
 public:
  explicit TransferQueues(bool priority_enabled = true) : priority_(priority_enabled) {}

  void submit(TransferRequest req);

  /// Pops the next request in `direction` submitted at or before `now`.
  std::optional<TransferRequest> next(Direction direction, Seconds now);

  bool empty(Direction direction) const;
  std::size_t size(Direction direction) const;
  bool priority_enabled() const { return priority_; }

 private:
  struct Entry {
    TransferRequest req;
    std::uint64_t seq;
  };
  struct Lanes {
    std::deque<Entry> high;
    std::deque<Entry> low;
  };
  Lanes& lanes(Direction d) { return d == Direction::h2d ? h2d_ : d2h_; }
  const Lanes& lanes(Direction d) const { return d == Direction::h2d ? h2d_ : d2h_; }

  bool priority_;
  std::uint64_t seq_ = 0;
  Lanes h2d_;
  Lanes d2h_;
};

/// Splits a KV stream into ceil(total / chunk) requests of at most
/// `chunk_bytes`, preserving order. Other fields are copied from `proto`.
std::vector<TransferRequest> chunk_kv_transfer(Bytes total_bytes, Bytes chunk_bytes,
                                               const TransferRequest& proto = {});

struct TransferRecord {
  TransferRequest request;
  Seconds start = 0.0;
  Seconds end = 0.0;
  Seconds queueing_delay() const { return start - request.submit_time; }
};

/// Runs one non-preemptive channel over requests with arrival times
/// (`submit_time`), dispatching through TransferQueues. Records are
/// returned in dispatch order.
std::vector<TransferRecord> simulate_link(std::span<const TransferRequest> requests, LinkChannel channel,
                                          bool priority_enabled = true);

}  // namespace pipemax
