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

#include "pipemax_cli/validate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "pipemax/cost_model.hpp"
#include "pipemax/oracle.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "pipemax/rng.hpp"
#include "pipemax/scheduler.hpp"

namespace pipemax::cli {

namespace {

bool close(double a, double b, double rel) { return std::abs(a - b) <= rel * std::max({1.0, std::abs(a), std::abs(b)}); }

Seconds faulty_closed_form(const PrefillInstance& inst) {
  const Seconds sum = std::accumulate(inst.stage_times.begin(), inst.stage_times.end(), 0.0);
  const Seconds mx = *std::max_element(inst.stage_times.begin(), inst.stage_times.end());
  return sum + static_cast<double>(inst.n) * mx;
}

SuiteResult prefill_suite(const ValidateOptions& opts) {
  SuiteResult r{"prefill_makespan_equivalence", 0, 1000, false, ""};
  auto rng = substream(opts.seed, "validate.prefill");
  std::uniform_int_distribution<int> m_dist(1, 64);
  std::uniform_int_distribution<int> n_dist(1, 8);
  std::uniform_real_distribution<double> t_dist(0.0, 10.0);
  for (std::int64_t k = 0; k < r.total; ++k) {
    PrefillInstance inst;
    inst.n = n_dist(rng);
    inst.stage_times.resize(static_cast<std::size_t>(m_dist(rng)));
    for (auto& t : inst.stage_times) {
      do t = t_dist(rng);
      while (t <= 0.0);
    }
    const Seconds closed =
        opts.inject_closed_form_fault ? faulty_closed_form(inst) : prefill_makespan_closed_form(inst);
    const Seconds dp = prefill_makespan_dp(inst);
    const Seconds sim = simulate_prefill(inst).makespan;
    if (close(closed, dp, 1e-9) && close(dp, sim, 1e-9)) ++r.passed;
  }
  r.ok = r.passed == r.total;
  return r;
}

SuiteResult budget_suite(const ValidateOptions& opts) {
  SuiteResult r{"decode_budget_closed_form", 0, 100, false, ""};
  auto rng = substream(opts.seed, "validate.budget");
  std::uniform_int_distribution<int> n_dist(1, 16);
  std::uniform_int_distribution<Bytes> t_dist(1, 2'000'000);
  std::uniform_int_distribution<Bytes> w_dist(1'000'000'000, 400'000'000'000);
  for (std::int64_t k = 0; k < r.total; ++k) {
    ClusterConfig c;
    c.n = n_dist(rng);
    c.model_bytes = w_dist(rng);
    c.kv_bytes_per_token = t_dist(rng);
    std::uniform_int_distribution<Bytes> head(1, 80'000'000'000);
    c.mem_per_gpu = c.model_bytes / c.n + head(rng);
    if (closed_form_decode_budget_check(c).ok()) ++r.passed;
  }
  r.ok = r.passed == r.total;
  return r;
}

SuiteResult scheduler_suite(const ValidateOptions& opts) {
  SuiteResult r{"scheduler_vs_exhaustive", 0, 500, false, ""};
  auto rng = substream(opts.seed, "validate.scheduler");
  std::uniform_int_distribution<int> size_dist(0, 15);
  std::uniform_int_distribution<Tokens> len_dist(1, 2000);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::int64_t feasible = 0;
  std::int64_t within = 0;
  for (std::int64_t k = 0; k < r.total; ++k) {
    std::vector<PoolEntry> pool(static_cast<std::size_t>(size_dist(rng)));
    Tokens sum = 0;
    for (std::size_t q = 0; q < pool.size(); ++q) {
      pool[q] = {static_cast<RequestId>(q), len_dist(rng)};
      sum += pool[q].prefix_len;
    }
    EstimatorParams p{1e-4 + 1e-3 * u(rng), 1e-7 + 1e-5 * u(rng), 0.0};
    SteadySelectOptions so;
    so.budget_tokens = static_cast<Tokens>(u(rng) * static_cast<double>(sum + 1));
    so.gap_seconds = (u(rng) * 1.2 - 0.2) * modeled_prefetch_time(p, static_cast<std::int64_t>(pool.size()), sum);
    so.params = p;
    so.match_epsilon = p.alpha / 2.0;
    const auto chosen = select_prefetch_steady(pool, so);
    Tokens total = 0;
    for (RequestId id : chosen) total += pool[static_cast<std::size_t>(id)].prefix_len;
    const bool ok_budget = total <= so.budget_tokens;
    const Seconds err =
        std::abs(modeled_prefetch_time(p, static_cast<std::int64_t>(chosen.size()), total) - so.gap_seconds);
    const auto best = exhaustive_prefetch_select(pool, so.budget_tokens, so.gap_seconds, p, so.theta);
    feasible += ok_budget ? 1 : 0;
    const bool good = err <= 2.0 * best.error + p.alpha + 1e-12;
    within += good ? 1 : 0;
    if (ok_budget && good) ++r.passed;
  }
  std::ostringstream d;
  d << "feasible " << feasible << "/" << r.total << ", within bound " << within << "/" << r.total;
  r.detail = d.str();
  r.ok = feasible == r.total && within * 10 >= r.total * 9;
  return r;
}

}  // namespace

std::vector<SuiteResult> run_validation(const ValidateOptions& opts) {
  return {prefill_suite(opts), budget_suite(opts), scheduler_suite(opts)};
}

}  // namespace pipemax::cli
