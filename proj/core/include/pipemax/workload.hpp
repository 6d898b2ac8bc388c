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
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pipemax/types.hpp"

namespace pipemax {

enum class DistFamily { lognormal, normal_truncated, constant };

std::string_view to_string(DistFamily family);
/// Throws SpecError on an unknown family name.
DistFamily dist_family_from_string(std::string_view name);

struct DistSpec {
  DistFamily family = DistFamily::constant;
  double target_avg = 1.0;
  double target_median = 1.0;
  Tokens min = 1;
  Tokens max = 8192;

  /// Throws SpecError; `what` names the field in messages.
  void validate(std::string_view what) const;
};

struct WorkloadSpec {
  std::int64_t count = 1;
  DistSpec input;
  DistSpec output;
  std::uint64_t seed = 0;

  void validate() const;
};

WorkloadSpec sharegpt_like(std::int64_t count, std::uint64_t seed);
WorkloadSpec longbench_like(std::int64_t count, std::uint64_t seed);

struct LognormalParams {
  double mu = 0.0;
  double sigma = 0.0;
};
/// mu = ln(median), sigma = sqrt(2 ln(avg / median)).
LognormalParams solve_lognormal(double avg, double median);

struct NormalParams {
  double mu = 0.0;
  double sigma = 0.0;
};
/// Parent normal whose truncation to [lo, hi] has the given mean and
/// median. Throws SpecError when no such parent exists.
NormalParams solve_truncated_normal(double avg, double median, double lo, double hi);

/// Requests with ids 0..count-1; deterministic in spec.seed.
std::vector<Request> generate_synthetic(const WorkloadSpec& spec);

/// JSONL with {id?, input_len, output_len} per line. Missing ids take the
/// request's 0-based position. Throws ParseError / ValueError with the line.
std::vector<Request> load_trace(std::istream& in);
std::vector<Request> load_trace(const std::string& path);
void save_trace(std::span<const Request> requests, std::ostream& out);
void save_trace(std::span<const Request> requests, const std::string& path);

struct LengthStats {
  double avg = 0.0;
  Tokens median = 0;  // lower middle for even counts
  Tokens min = 0;
  Tokens max = 0;
};

struct WorkloadStats {
  std::size_t count = 0;
  LengthStats input;
  LengthStats output;
};

/// Throws EmptyWorkload on an empty list.
WorkloadStats summarize(std::span<const Request> requests);

}  // namespace pipemax
