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

#include "pipemax/cost_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "pipemax/errors.hpp"

namespace pipemax {

namespace {

__extension__ typedef __int128 Wide;

void require(bool ok, const char* what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void ClusterConfig::validate() const {
  require(n >= 1, "cluster.n must be >= 1");
  require(mem_per_gpu > 0, "cluster.mem_per_gpu must be > 0");
  require(model_bytes >= 0, "cluster.model_bytes must be >= 0");
  require(kv_bytes_per_token >= 1, "cluster.kv_bytes_per_token must be >= 1");
  require(static_cast<Wide>(mem_per_gpu) * n > model_bytes,
          "cluster weights do not fit: n * mem_per_gpu must exceed model_bytes");
  require(h2d_bandwidth > 0.0, "cluster.h2d_bandwidth must be > 0");
  require(d2h_bandwidth > 0.0, "cluster.d2h_bandwidth must be > 0");
  require(cpu_kv_capacity >= 0, "cluster.cpu_kv_capacity must be >= 0");
  require(activation_bytes_per_token >= 0, "cluster.activation_bytes_per_token must be >= 0");
  require(per_transfer_overhead >= 0.0, "cluster.per_transfer_overhead must be >= 0");
  require(layers_per_stage >= 1, "cluster.layers_per_stage must be >= 1");
  require(block_size >= 1, "cluster.block_size must be >= 1");
  require(prefill_seconds_per_token >= 0.0, "cluster.prefill_seconds_per_token must be >= 0");
}

void PrefillInstance::validate() const {
  require(n >= 1, "prefill instance needs n >= 1");
  require(!stage_times.empty(), "prefill instance needs at least one request");
  for (Seconds t : stage_times) {
    require(t > 0.0 && std::isfinite(t), "prefill stage times must be finite and > 0");
  }
}

Seconds estimate_decode_time(const EstimatorParams& params, std::int64_t batch_size,
                             Tokens prefix_tokens) {
  return params.alpha * static_cast<double>(batch_size) +
         params.beta * static_cast<double>(prefix_tokens) + params.delta;
}

Calibration calibrate_estimator(std::span<const DecodeSample> samples) {
  if (samples.size() < 3) {
    throw DegenerateSamples("calibration needs at least 3 samples, got " +
                            std::to_string(samples.size()));
  }
  const auto rows = static_cast<Eigen::Index>(samples.size());

  // Columns: delta (constant), alpha (batch size), beta (prefix tokens).
  Eigen::MatrixXd design(rows, 3);
  Eigen::VectorXd target(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& s = samples[static_cast<std::size_t>(r)];
    design(r, 0) = 1.0;
    design(r, 1) = static_cast<double>(s.batch_size);
    design(r, 2) = static_cast<double>(s.prefix_tokens);
    target(r) = s.seconds;
  }

  // Column scaling keeps the rank test meaningful when b and L differ by
  // orders of magnitude.
  std::array<double, 3> scale{};
  for (int c = 0; c < 3; ++c) {
    scale[c] = design.col(c).cwiseAbs().maxCoeff();
    if (scale[c] == 0.0) {
      throw DegenerateSamples("calibration design column " + std::to_string(c) + " is all zero");
    }
    design.col(c) /= scale[c];
  }
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < 3) {
      throw DegenerateSamples("calibration design matrix is rank deficient (rank " +
                              std::to_string(qr.rank()) + ")");
    }
  }

  static constexpr std::array<const char*, 3> kNames{"delta", "alpha", "beta"};
  std::array<bool, 3> active{true, true, true};
  std::array<double, 3> coef{};
  Calibration out;
  for (;;) {
    std::vector<int> cols;
    for (int c = 0; c < 3; ++c) {
      if (active[c]) cols.push_back(c);
    }
    coef = {0.0, 0.0, 0.0};
    if (!cols.empty()) {
      Eigen::MatrixXd sub(rows, static_cast<Eigen::Index>(cols.size()));
      for (std::size_t k = 0; k < cols.size(); ++k) {
        sub.col(static_cast<Eigen::Index>(k)) = design.col(cols[k]);
      }
      Eigen::VectorXd x = sub.colPivHouseholderQr().solve(target);
      for (std::size_t k = 0; k < cols.size(); ++k) {
        coef[static_cast<std::size_t>(cols[k])] = x(static_cast<Eigen::Index>(k)) / scale[cols[k]];
      }
    }
    int worst = -1;
    for (int c : cols) {
      if (coef[c] < 0.0 && (worst < 0 || coef[c] * scale[c] < coef[worst] * scale[worst])) {
        worst = c;
      }
    }
    if (worst < 0) break;
    out.warnings.push_back(std::string(kNames[worst]) + " fitted negative (" +
                           std::to_string(coef[worst]) + "); clamped to 0");
    active[worst] = false;
  }

  out.params = EstimatorParams{coef[1], coef[2], coef[0]};
  double rss = 0.0;
  for (const auto& s : samples) {
    const double r = s.seconds - estimate_decode_time(out.params, s.batch_size, s.prefix_tokens);
    rss += r * r;
  }
  out.residual_sum_squares = rss;
  return out;
}

Tokens per_batch_token_budget(const ClusterConfig& cfg) {
  const Wide headroom = static_cast<Wide>(cfg.n) * cfg.mem_per_gpu - cfg.model_bytes;
  if (headroom <= 0) {
    throw NoKvHeadroom("no KV headroom per GPU: mem_per_gpu <= model_bytes / n");
  }
  cfg.validate();
  return static_cast<Tokens>(headroom / (static_cast<Wide>(cfg.n) * cfg.kv_bytes_per_token));
}

Tokens system_token_capacity(const ClusterConfig& cfg) {
  const Wide headroom = static_cast<Wide>(cfg.n) * cfg.mem_per_gpu - cfg.model_bytes;
  if (headroom <= 0) {
    throw NoKvHeadroom("no KV headroom in the pipeline: n * mem_per_gpu <= model_bytes");
  }
  cfg.validate();
  return static_cast<Tokens>(headroom / cfg.kv_bytes_per_token);
}

Bytes kv_footprint(Tokens tokens, Bytes kv_bytes_per_token) {
  return tokens * kv_bytes_per_token;
}

std::int64_t blocks_for(Tokens tokens, Tokens block_size) {
  if (tokens <= 0) return 0;
  return (tokens + block_size - 1) / block_size;
}

Seconds prefill_makespan_closed_form(const PrefillInstance& inst) {
  inst.validate();
  const Seconds total = std::accumulate(inst.stage_times.begin(), inst.stage_times.end(), 0.0);
  const Seconds longest = *std::max_element(inst.stage_times.begin(), inst.stage_times.end());
  return total + static_cast<double>(inst.n - 1) * longest;
}

}  // namespace pipemax
