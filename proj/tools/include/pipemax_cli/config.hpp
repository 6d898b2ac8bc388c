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
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pipemax/cost_model.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "pipemax/types.hpp"
#include "pipemax/workload.hpp"

namespace pipemax::cli {

inline constexpr int kConfigSchemaVersion = 1;

struct WorkloadSource {
  std::optional<WorkloadSpec> spec;
  std::optional<std::filesystem::path> trace;
};

struct RunConfig {
  ClusterConfig cluster;
  EstimatorParams estimator;
  std::optional<std::filesystem::path> calibration_csv;
  WorkloadSource workload;
  SimOptions sim;
  std::uint64_t seed = 0;
  std::string policy = "dynamic";
  std::vector<std::string> policies;
  std::optional<std::filesystem::path> trace_out;
  std::optional<std::filesystem::path> metrics_out;
  std::optional<std::filesystem::path> csv_out;
};

/// Parses a run config. Relative paths resolve against `base_dir`.
/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

/// Standalone workload document: {schema_version, seed?, workload}.
WorkloadSource load_workload_file(const std::filesystem::path& path, std::optional<std::uint64_t> seed);

/// Materializes the workload of a config with the given seed.
std::vector<Request> build_workload(const WorkloadSource& source, std::uint64_t seed);

/// Estimator from the config, calibrating from the CSV when one is given.
EstimatorParams resolve_estimator(const RunConfig& cfg);

/// Rows of "b,L,seconds"; an optional header line is skipped.
std::vector<DecodeSample> load_samples_csv(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

}  // namespace pipemax::cli
