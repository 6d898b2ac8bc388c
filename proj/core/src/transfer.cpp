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

#include "pipemax/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pipemax/errors.hpp"

namespace pipemax {

void Layout::validate() const {
  if (layers < 1) throw ConfigError("layout.layers must be >= 1");
  if (kv_tensors_per_layer < 1) throw ConfigError("layout.kv_tensors_per_layer must be >= 1");
}

std::int64_t fragments_per_block(const Layout& layout) {
  layout.validate();
  if (layout.kind == LayoutKind::block_first) return 1;
  return static_cast<std::int64_t>(layout.layers) * layout.kv_tensors_per_layer;
}

Seconds transfer_time(Bytes bytes, std::int64_t fragments, const LinkChannel& channel) {
  if (bytes <= 0) return 0.0;
  const Seconds payload = std::isinf(channel.bandwidth) ? 0.0 : static_cast<double>(bytes) / channel.bandwidth;
  return static_cast<double>(std::max<std::int64_t>(fragments, 1)) * channel.per_transfer_overhead + payload;
}

double utilization(Bytes bytes, std::int64_t fragments, const LinkChannel& channel) {
  const Seconds total = transfer_time(bytes, fragments, channel);
  if (total <= 0.0) return 0.0;
  if (std::isinf(channel.bandwidth)) return 0.0;
  return (static_cast<double>(bytes) / channel.bandwidth) / total;
}

double effective_bandwidth(Bytes chunk_bytes, std::int64_t fragments, const LinkChannel& channel) {
  const Seconds t = transfer_time(chunk_bytes, fragments, channel);
  if (t <= 0.0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(chunk_bytes) / t;
}

OffloadPlan plan_layer_offload(Bytes layer_kv_bytes, Seconds overlap_window, const LinkChannel& channel) {
  const Seconds t = transfer_time(layer_kv_bytes, 1, channel);
  const Seconds exposed = std::max(0.0, t - std::max(0.0, overlap_window));
  return OffloadPlan{exposed, exposed == 0.0};
}

void TransferQueues::submit(TransferRequest req) {
  auto& l = lanes(req.direction);
  const bool high = priority_ && req.priority == Priority::activation;
  (high ? l.high : l.low).push_back(Entry{std::move(req), seq_++});
}

std::optional<TransferRequest> TransferQueues::next(Direction direction, Seconds now) {
  auto& l = lanes(direction);
  const auto ready = [now](const std::deque<Entry>& q) { return !q.empty() && q.front().req.submit_time <= now; };
  std::deque<Entry>* pick = nullptr;
  if (ready(l.high)) {
    pick = &l.high;
  } else if (ready(l.low)) {
    pick = &l.low;
  }
  if (pick == nullptr) return std::nullopt;
  TransferRequest out = std::move(pick->front().req);
  pick->pop_front();
  return out;
}

bool TransferQueues::empty(Direction direction) const {
  const auto& l = lanes(direction);
  return l.high.empty() && l.low.empty();
}

std::size_t TransferQueues::size(Direction direction) const {
  const auto& l = lanes(direction);
  return l.high.size() + l.low.size();
}

std::vector<TransferRequest> chunk_kv_transfer(Bytes total_bytes, Bytes chunk_bytes, const TransferRequest& proto) {
  if (chunk_bytes <= 0) throw ConfigError("chunk_bytes must be > 0");
  std::vector<TransferRequest> out;
  if (total_bytes <= 0) return out;
  out.reserve(static_cast<std::size_t>((total_bytes + chunk_bytes - 1) / chunk_bytes));
  for (Bytes off = 0; off < total_bytes; off += chunk_bytes) {
    TransferRequest r = proto;
    r.bytes = std::min(chunk_bytes, total_bytes - off);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<TransferRecord> simulate_link(std::span<const TransferRequest> requests, LinkChannel channel,
                                          bool priority_enabled) {
  std::vector<TransferRequest> arrivals(requests.begin(), requests.end());
  std::stable_sort(arrivals.begin(), arrivals.end(),
                   [](const TransferRequest& a, const TransferRequest& b) { return a.submit_time < b.submit_time; });
  for (auto& r : arrivals) r.direction = channel.direction;

  TransferQueues queues(priority_enabled);
  std::vector<TransferRecord> out;
  std::size_t next_arrival = 0;
  Seconds now = 0.0;
  while (next_arrival < arrivals.size() || !queues.empty(channel.direction)) {
    if (queues.empty(channel.direction)) now = std::max(now, arrivals[next_arrival].submit_time);
    while (next_arrival < arrivals.size() && arrivals[next_arrival].submit_time <= now) {
      queues.submit(arrivals[next_arrival++]);
    }
    auto req = queues.next(channel.direction, now);
    if (!req) continue;
    TransferRecord rec{*req, now, now + transfer_time(req->bytes, req->fragments, channel)};
    now = rec.end;
    channel.busy_until = now;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace pipemax
