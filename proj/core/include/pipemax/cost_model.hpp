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

#include <span>
#include <string>
#include <vector>

#include "pipemax/types.hpp"

namespace pipemax {

/// Predicted wall time of one decode iteration for a batch of `batch_size`
/// requests holding `prefix_tokens` tokens of KV in total.
Seconds estimate_decode_time(const EstimatorParams& params, std::int64_t batch_size,
                             Tokens prefix_tokens);

struct DecodeSample {
  std::int64_t batch_size = 0;
  Tokens prefix_tokens = 0;
  Seconds seconds = 0.0;
};

struct Calibration {
  EstimatorParams params;
  double residual_sum_squares = 0.0;
  // One entry per coefficient that fitted negative and was clamped to zero.
  std::vector<std::string> warnings;
};

/// Ordinary least squares fit of the decode-time model. Coefficients that
/// fit negative are clamped to zero and the rest refit. Throws
/// DegenerateSamples when the (1, b, L) design matrix is rank deficient.
Calibration calibrate_estimator(std::span<const DecodeSample> samples);

/// floor((M - W/n) / T): tokens one decode batch may hold when n batches stay
/// GPU resident. Throws NoKvHeadroom when M <= W/n.
Tokens per_batch_token_budget(const ClusterConfig& cfg);

/// floor((n*M - W) / T): tokens storable across the whole pipeline.
/// Throws NoKvHeadroom when n*M <= W.
Tokens system_token_capacity(const ClusterConfig& cfg);

Bytes kv_footprint(Tokens tokens, Bytes kv_bytes_per_token);

/// Whole blocks needed to hold `tokens` tokens.
std::int64_t blocks_for(Tokens tokens, Tokens block_size);

/// Pipelined prefill makespan: sum(t) + (n-1) * max(t).
Seconds prefill_makespan_closed_form(const PrefillInstance& inst);

}  // namespace pipemax
