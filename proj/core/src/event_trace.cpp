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

#include "pipemax/event_trace.hpp"

#include <array>
#include <fstream>

#include "json.hpp"
#include "pipemax/errors.hpp"

namespace pipemax {

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 10> kKindNames{{
    {EventKind::stage_compute_start, "stage_compute_start"},
    {EventKind::stage_compute_end, "stage_compute_end"},
    {EventKind::transfer_start, "transfer_start"},
    {EventKind::transfer_end, "transfer_end"},
    {EventKind::stall_start, "stall_start"},
    {EventKind::stall_end, "stall_end"},
    {EventKind::phase_switch, "phase_switch"},
    {EventKind::request_complete, "request_complete"},
    {EventKind::pool_exhausted, "pool_exhausted"},
    {EventKind::relayout, "relayout"},
}};

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

EventKind event_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw ParseError(0, "unknown event kind '" + std::string(name) + "'");
}

std::optional<double> SimEvent::value(std::string_view key) const {
  for (const auto& [k, v] : values) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void EventTrace::append(const EventTrace& other, Seconds offset) {
  events.reserve(events.size() + other.events.size());
  for (SimEvent e : other.events) {
    e.time += offset;
    events.push_back(std::move(e));
  }
}

void EventTrace::write_jsonl(std::ostream& out) const {
  for (const auto& e : events) {
    nlohmann::ordered_json j;
    j["schema_version"] = kTraceSchemaVersion;
    j["time"] = e.time;
    j["kind"] = to_string(e.kind);
    if (!e.phase.empty()) j["phase"] = e.phase;
    if (e.stage >= 0) j["stage"] = e.stage;
    if (e.batch >= 0) j["batch"] = e.batch;
    if (e.request >= 0) j["request"] = e.request;
    if (e.iteration >= 0) j["iteration"] = e.iteration;
    if (!e.tag.empty()) j["tag"] = e.tag;
    for (const auto& [k, v] : e.values) j[k] = v;
    out << j.dump() << '\n';
  }
}

void EventTrace::write_jsonl(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  write_jsonl(out);
}

EventTrace EventTrace::read_jsonl(std::istream& in) {
  EventTrace trace;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw ParseError(lineno, ex.what());
    }
    if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
    try {
      const int version = j.at("schema_version").get<int>();
      if (version != kTraceSchemaVersion) {
        throw ParseError(lineno, "unsupported trace schema_version " + std::to_string(version));
      }
      SimEvent e;
      e.time = j.at("time").get<double>();
      try {
        e.kind = event_kind_from_string(j.at("kind").get<std::string>());
      } catch (const ParseError&) {
        throw ParseError(lineno, "unknown event kind");
      }
      for (const auto& [key, val] : j.items()) {
        if (key == "schema_version" || key == "time" || key == "kind") continue;
        if (key == "phase") {
          e.phase = val.get<std::string>();
        } else if (key == "stage") {
          e.stage = val.get<int>();
        } else if (key == "batch") {
          e.batch = val.get<int>();
        } else if (key == "request") {
          e.request = val.get<RequestId>();
        } else if (key == "iteration") {
          e.iteration = val.get<std::int64_t>();
        } else if (key == "tag") {
          e.tag = val.get<std::string>();
        } else if (val.is_number()) {
          e.values.emplace_back(key, val.get<double>());
        } else {
          throw ParseError(lineno, "unexpected field '" + key + "'");
        }
      }
      trace.add(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(lineno, ex.what());
    }
  }
  return trace;
}

EventTrace EventTrace::read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace '" + path + "'");
  return read_jsonl(in);
}

}  // namespace pipemax
