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


#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "pipemax/cost_model.hpp"
#include "pipemax/oracle.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "pipemax/rng.hpp"
#include "pipemax/scheduler.hpp"
#include "pipemax/transfer.hpp"
#include "pipemax/workload.hpp"

using namespace pipemax;

namespace {

std::vector<PoolEntry> random_pool(std::int64_t size, std::uint64_t seed) {
  auto rng = substream(seed, "bench.pool");
  std::lognormal_distribution<double> len(5.0, 1.2);
  std::vector<PoolEntry> pool(static_cast<std::size_t>(size));
  for (std::size_t k = 0; k < pool.size(); ++k) {
    pool[k] = {static_cast<RequestId>(k), std::max<Tokens>(1, static_cast<Tokens>(len(rng)))};
  }
  return pool;
}

ClusterConfig reference_cluster() {
  ClusterConfig c;
  c.n = 4;
  c.model_bytes = 4'000'000'000;
  c.mem_per_gpu = 1'010'000'000;
  c.kv_bytes_per_token = 1000;
  c.h2d_bandwidth = 5e8;
  c.d2h_bandwidth = 5e8;
  c.cpu_kv_capacity = 400'000'000;
  c.activation_bytes_per_token = 100;
  c.per_transfer_overhead = 1e-6;
  c.layers_per_stage = 8;
  c.prefill_seconds_per_token = 2e-5;
  return c;
}

void BM_SelectWarmup(benchmark::State& state) {
  const auto pool = random_pool(state.range(0), 1);
  for (auto _ : state) benchmark::DoNotOptimize(select_prefetch_warmup(pool, 20'000));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SelectWarmup)->RangeMultiplier(4)->Range(16, 16384);

void BM_SelectSteady(benchmark::State& state) {
  const auto pool = random_pool(state.range(0), 2);
  SteadySelectOptions so;
  so.budget_tokens = 20'000;
  so.params = {1e-4, 1e-6, 5e-3};
  so.gap_seconds = 0.02;
  so.match_epsilon = so.params.alpha / 2.0;
  for (auto _ : state) benchmark::DoNotOptimize(select_prefetch_steady(pool, so));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SelectSteady)->RangeMultiplier(4)->Range(16, 16384);

void BM_ExhaustiveSelect(benchmark::State& state) {
  const auto pool = random_pool(state.range(0), 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(exhaustive_prefetch_select(pool, 2000, 0.02, {1e-4, 1e-6, 0.0}, 0.9));
  }
}
BENCHMARK(BM_ExhaustiveSelect)->DenseRange(8, 16, 4);

PrefillInstance random_instance(std::int64_t m, int n) {
  auto rng = substream(4, "bench.prefill");
  std::uniform_real_distribution<double> t(0.01, 10.0);
  PrefillInstance inst;
  inst.n = n;
  inst.stage_times.resize(static_cast<std::size_t>(m));
  for (auto& x : inst.stage_times) x = t(rng);
  return inst;
}

void BM_PrefillClosedForm(benchmark::State& state) {
  const auto inst = random_instance(state.range(0), 8);
  for (auto _ : state) benchmark::DoNotOptimize(prefill_makespan_closed_form(inst));
}
BENCHMARK(BM_PrefillClosedForm)->Range(8, 4096);

void BM_PrefillDp(benchmark::State& state) {
  const auto inst = random_instance(state.range(0), 8);
  for (auto _ : state) benchmark::DoNotOptimize(prefill_makespan_dp(inst));
}
BENCHMARK(BM_PrefillDp)->Range(8, 4096);

void BM_PrefillSimulate(benchmark::State& state) {
  const auto inst = random_instance(state.range(0), 8);
  for (auto _ : state) benchmark::DoNotOptimize(simulate_prefill(inst).makespan);
}
BENCHMARK(BM_PrefillSimulate)->Range(8, 4096);

void BM_SimulateLink(benchmark::State& state) {
  std::vector<TransferRequest> reqs;
  TransferRequest proto;
  for (int k = 0; k < state.range(0); ++k) {
    proto.submit_time = 1e-4 * k;
    proto.priority = k % 8 == 0 ? Priority::activation : Priority::kv;
    proto.bytes = k % 8 == 0 ? 10'000 : 1'000'000;
    reqs.push_back(proto);
  }
  const LinkChannel ch{Direction::h2d, 2.5e10, 1e-6, 0.0};
  for (auto _ : state) benchmark::DoNotOptimize(simulate_link(reqs, ch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SimulateLink)->Range(64, 16384);

void BM_DecodeIterations(benchmark::State& state) {
  const ClusterConfig c = reference_cluster();
  const auto w = generate_synthetic(sharegpt_like(3000, 5));
  const std::vector<Request> res(w.begin(), w.begin() + 40);
  const std::vector<Request> pool(w.begin() + 40, w.end());
  const auto base = SchedulerState::create(res, pool, c);
  SimOptions o;
  o.noise.seed = 5;
  for (auto _ : state) {
    auto st = base;
    benchmark::DoNotOptimize(simulate_decode(st, c, {1e-4, 1e-6, 5e-3}, o, state.range(0)).metrics.decode_iterations);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DecodeIterations)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_Episode(benchmark::State& state) {
  const ClusterConfig c = reference_cluster();
  const auto w = generate_synthetic(sharegpt_like(state.range(0), 6));
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_episode(w, c, {1e-4, 1e-6, 5e-3}, Policy::dynamic(), 6).tokens_per_second);
  }
}
BENCHMARK(BM_Episode)->Arg(300)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
