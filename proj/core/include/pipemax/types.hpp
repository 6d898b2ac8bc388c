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
#include <vector>

namespace pipemax {

using Tokens = std::int64_t;
using Bytes = std::int64_t;
using Seconds = double;
using RequestId = std::int64_t;

// One inference request. Requests carry lengths only; token values are not
// modeled. A request is complete once generated == output_len.
struct Request {
  RequestId id = 0;
  Tokens input_len = 1;
  Tokens output_len = 1;
  Tokens generated = 0;

  Tokens prefix_len() const { return input_len + generated; }
  Tokens remaining() const { return output_len - generated; }
  bool finished() const { return generated >= output_len; }
  bool valid() const {
    return input_len >= 1 && output_len >= 1 && generated >= 0 &&
           generated <= output_len;
  }
};

// Hardware model. Bandwidths are per GPU link and per direction; memory and
// weights follow the pipeline-parallel convention that weights are split
// evenly over `n` stages and every token's KV is sharded over all stages.
struct ClusterConfig {
  int n = 1;
  Bytes mem_per_gpu = 0;
  Bytes model_bytes = 0;
  Bytes kv_bytes_per_token = 1;
  double h2d_bandwidth = 1.0;  // bytes/s, may be +inf
  double d2h_bandwidth = 1.0;  // bytes/s, may be +inf
  Bytes cpu_kv_capacity = 0;
  Bytes activation_bytes_per_token = 0;
  Seconds per_transfer_overhead = 0.0;
  int layers_per_stage = 1;
  Tokens block_size = 16;
  // Per-stage prefill time of a request is input_len times this scalar.
  Seconds prefill_seconds_per_token = 0.0;

  // Throws ConfigError naming the first violated invariant.
  void validate() const;

  Bytes block_bytes() const { return block_size * kv_bytes_per_token; }
};

// Coefficients of the affine decode-time model alpha*b + beta*L + delta.
struct EstimatorParams {
  double alpha = 0.0;
  double beta = 0.0;
  double delta = 0.0;

  bool valid() const { return alpha >= 0.0 && beta >= 0.0 && delta >= 0.0; }
  bool operator==(const EstimatorParams&) const = default;
};

// m requests on an n-stage homogeneous pipeline; stage_times[i] is the time
// request i spends on every stage.
struct PrefillInstance {
  std::vector<Seconds> stage_times;
  int n = 1;

  void validate() const;
};

}  // namespace pipemax
