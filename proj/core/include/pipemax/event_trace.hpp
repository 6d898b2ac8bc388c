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

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pipemax/types.hpp"

namespace pipemax {

inline constexpr int kTraceSchemaVersion = 1;

enum class EventKind {
  stage_compute_start,
  stage_compute_end,
  transfer_start,
  transfer_end,
  stall_start,
  stall_end,
  phase_switch,
  request_complete,
  pool_exhausted,
  relayout,
};

std::string_view to_string(EventKind kind);
/// Throws ParseError(line 0) on an unknown name.
EventKind event_kind_from_string(std::string_view name);

struct SimEvent {
  Seconds time = 0.0;
  EventKind kind = EventKind::stage_compute_start;
  std::string phase;  // "prefill" or "decode"
  int stage = -1;
  int batch = -1;
  RequestId request = -1;
  std::int64_t iteration = -1;
  std::string tag;
  std::vector<std::pair<std::string, double>> values;

  std::optional<double> value(std::string_view key) const;
};

class EventTrace {
 public:
  std::vector<SimEvent> events;

  void add(SimEvent e) { events.push_back(std::move(e)); }
  std::size_t size() const { return events.size(); }
  void append(const EventTrace& other, Seconds offset = 0.0);

  /// One JSON object per line; absent payload fields are omitted.
  void write_jsonl(std::ostream& out) const;
  void write_jsonl(const std::string& path) const;
  /// Throws ParseError with the offending line number.
  static EventTrace read_jsonl(std::istream& in);
  static EventTrace read_jsonl(const std::string& path);
};

}  // namespace pipemax
