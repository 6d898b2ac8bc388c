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
#include <string>
#include <vector>

namespace pipemax::cli {

struct SuiteResult {
  std::string name;
  std::int64_t passed = 0;
  std::int64_t total = 0;
  bool ok = false;
  std::string detail;
};

struct ValidateOptions {
  std::uint64_t seed = 20260101;
  // Test fixture: evaluates the closed form with n in place of n - 1.
  bool inject_closed_form_fault = false;
};

/// Oracle suites: prefill makespan equivalence, token budget recomputation
/// and scheduler selection against exhaustive enumeration.
std::vector<SuiteResult> run_validation(const ValidateOptions& opts);

}  // namespace pipemax::cli
