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



#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <vector>

#include "doctest.h"
#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"
#include "pipemax/oracle.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "pipemax/scheduler.hpp"
#include "pipemax/transfer.hpp"
#include "pipemax/workload.hpp"

using namespace pipemax;

namespace {

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

const EstimatorParams kParams{1e-4, 1e-6, 5e-3};

std::vector<Request> uniform(int count, Tokens in, Tokens out, RequestId first = 0) {
  std::vector<Request> r;
  for (int k = 0; k < count; ++k) r.push_back(Request{first + k, in, out, 0});
  return r;
}

bool same_metrics(const EpisodeMetrics& a, const EpisodeMetrics& b) { return a.to_json() == b.to_json(); }

}  // namespace

TEST_SUITE("pipeline_sim") {
  TEST_CASE("simulate_prefill examples") {
    CHECK(simulate_prefill(PrefillInstance{{2, 3, 1}, 2}).makespan == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(simulate_prefill(PrefillInstance{{1}, 5}).makespan == doctest::Approx(5.0).epsilon(1e-12));
    // 20 + 3 * 5
    CHECK(simulate_prefill(PrefillInstance{{5, 5, 5, 5}, 4}).makespan == doctest::Approx(35.0).epsilon(1e-12));
  }

  TEST_CASE("simulate_prefill from requests with offload disabled") {
    ClusterConfig c = reference_cluster();
    c.n = 2;
    c.mem_per_gpu = c.model_bytes / 2 + 100'000'000;
    c.prefill_seconds_per_token = 1.0;
    c.activation_bytes_per_token = 0;
    SimOptions o;
    o.prefill_offload = false;
    const std::vector<Request> r = {{0, 2, 1, 0}, {1, 3, 1, 0}, {2, 1, 1, 0}};
    const auto res = simulate_prefill(r, c, o);
    CHECK(res.makespan == doctest::Approx(prefill_makespan_dp(PrefillInstance{{2, 3, 1}, 2})).epsilon(1e-9));
    CHECK(res.completion.size() == 3);
  }

  TEST_CASE("simulate_prefill with hidden offload matches the closed form") {
    // Compute per layer-token exceeds the offload time per layer-token.
    // Activation hops add latency between stages, so they are off here.
    ClusterConfig c = reference_cluster();
    c.activation_bytes_per_token = 0;
    SimOptions o;
    o.record_trace = true;
    const auto reqs = uniform(12, 256, 8);
    const auto res = simulate_prefill(reqs, c, o);
    const double t = 256 * c.prefill_seconds_per_token;
    const double closed = prefill_makespan_closed_form(PrefillInstance{std::vector<Seconds>(12, t), c.n});
    CHECK(res.exposed_offload_seconds == 0.0);
    CHECK(res.makespan == doctest::Approx(closed).epsilon(1e-9));
    CHECK(res.offload_transfers > 0);
    CHECK(res.activation_transfers == 0);
    CHECK(res.trace.size() > 0);

    // With hops on, each one delays the pipeline fill but never the steady rate.
    const auto hops = simulate_prefill(reqs, reference_cluster(), o);
    CHECK(hops.activation_transfers > 0);
    CHECK(hops.makespan > closed);
    CHECK(hops.makespan < closed + c.n * transfer_time(256 * 100, 1, {Direction::h2d, 5e8, 1e-6, 0.0}) * 2);
  }

  TEST_CASE("prefill stage exclusivity and FIFO hand-off") {
    const ClusterConfig c = reference_cluster();
    SimOptions o;
    o.record_trace = true;
    auto reqs = uniform(10, 100, 4);
    for (std::size_t k = 0; k < reqs.size(); ++k) reqs[k].input_len = 50 + 37 * static_cast<Tokens>(k % 4);
    const auto res = simulate_prefill(reqs, c, o);
    std::vector<std::vector<std::pair<double, double>>> spans(static_cast<std::size_t>(c.n));
    std::vector<std::vector<RequestId>> order(static_cast<std::size_t>(c.n));
    std::vector<std::vector<double>> starts(static_cast<std::size_t>(c.n));
    for (const auto& e : res.trace.events) {
      if (e.stage < 0) continue;
      auto s = static_cast<std::size_t>(e.stage);
      if (e.kind == EventKind::stage_compute_start) {
        starts[s].push_back(e.time);
        order[s].push_back(e.request);
      } else if (e.kind == EventKind::stage_compute_end) {
        spans[s].push_back({starts[s].at(spans[s].size()), e.time});
      }
    }
    for (int s = 0; s < c.n; ++s) {
      const auto& sp = spans[static_cast<std::size_t>(s)];
      for (std::size_t k = 1; k < sp.size(); ++k) CHECK(sp[k].first >= sp[k - 1].second - 1e-12);
      CHECK(order[static_cast<std::size_t>(s)] == order[0]);
    }
  }

  TEST_CASE("simulate_decode with infinite bandwidth has no stall") {
    ClusterConfig c = reference_cluster();
    c.h2d_bandwidth = std::numeric_limits<double>::infinity();
    c.d2h_bandwidth = std::numeric_limits<double>::infinity();
    c.per_transfer_overhead = 0.0;
    SimOptions o;
    o.noise = NoiseSpec::none();
    const auto res = uniform(8, 100, 40);
    const auto pool = uniform(200, 100, 40, 100);
    auto st = SchedulerState::create(res, pool, c);
    const auto r = simulate_decode(st, c, kParams, o, 200);
    CHECK(r.metrics.stall_seconds == 0.0);
    REQUIRE_FALSE(r.metrics.iterations.empty());
    for (const auto& it : r.metrics.iterations) {
      CHECK(it.exec_seconds == doctest::Approx(it.predicted_seconds).epsilon(1e-12));
      CHECK(it.predicted_seconds ==
            doctest::Approx(estimate_decode_time(kParams, it.batch_size, it.resident_tokens + it.prefetched_tokens))
                .epsilon(1e-12));
    }
  }

  TEST_CASE("closed-system decode respects the per-batch budget") {
    const ClusterConfig c = reference_cluster();
    const Tokens per_batch = per_batch_token_budget(c);
    SimOptions o;
    o.scheduler.mode = PrefetchMode::disabled;
    o.check_invariants = true;
    // Four batches filled close to the budget, with room to grow.
    std::vector<Request> res;
    for (int k = 0; k < 4 * 30; ++k) res.push_back(Request{k, per_batch / 32, 8, 0});
    auto st = SchedulerState::create(res, {}, c, o.scheduler);
    const auto r = simulate_decode(st, c, kParams, o, 100);
    CHECK(r.metrics.prefetched_tokens_total == 0);
    CHECK(r.metrics.max_active_batch_tokens <= per_batch + c.block_size);
    CHECK(r.metrics.total_tokens_generated == 4 * 30 * 8);
  }

  TEST_CASE("single request on one stage decodes exactly output_len iterations") {
    ClusterConfig c = reference_cluster();
    c.n = 1;
    c.mem_per_gpu = c.model_bytes + 100'000'000;
    SimOptions o;
    o.record_trace = true;
    const std::vector<Request> res = {{0, 20, 4, 0}};
    auto st = SchedulerState::create(res, {}, c);
    const auto r = simulate_decode(st, c, kParams, o, 100);
    CHECK(r.metrics.decode_iterations == 4);
    CHECK(r.metrics.total_tokens_generated == 4);
    const auto completes = std::count_if(r.trace.events.begin(), r.trace.events.end(),
                                         [](const SimEvent& e) { return e.kind == EventKind::request_complete; });
    CHECK(completes == 1);
    CHECK(st.empty());
  }

  TEST_CASE("stall accounting matches the trace") {
    ClusterConfig c = reference_cluster();
    c.h2d_bandwidth = 2e7;
    SimOptions o;
    o.record_trace = true;
    o.scheduler.mode = PrefetchMode::fixed_quota;
    o.scheduler.fixed_quota_tokens = 4000;
    const auto res = uniform(8, 200, 30);
    const auto pool = uniform(400, 200, 30, 100);
    auto st = SchedulerState::create(res, pool, c, o.scheduler);
    const auto r = simulate_decode(st, c, kParams, o, 150);
    // Stalls are per stage, waiting on that GPU's prefetch shard.
    double traced = 0.0;
    std::vector<double> open(static_cast<std::size_t>(c.n), -1.0);
    for (const auto& e : r.trace.events) {
      if (e.stage < 0) continue;
      auto& since = open[static_cast<std::size_t>(e.stage)];
      if (e.kind == EventKind::stall_start) {
        CHECK(since < 0.0);
        since = e.time;
      }
      if (e.kind == EventKind::stall_end) {
        REQUIRE(since >= 0.0);
        CHECK(e.value("seconds").value_or(-1.0) == doctest::Approx(e.time - since));
        traced += e.time - since;
        since = -1.0;
      }
    }
    CHECK(r.metrics.stall_seconds > 0.0);
    CHECK(traced == doctest::Approx(r.metrics.stall_seconds).epsilon(1e-9));
  }

  TEST_CASE("tiny workload runs one prefill and one decode phase") {
    const ClusterConfig c = reference_cluster();
    const auto w = uniform(10, 100, 10);
    const auto m = run_episode(w, c, kParams, Policy::dynamic(), 1);
    CHECK(m.prefill_phases == 1);
    CHECK(m.decode_phases == 1);
    CHECK(m.conserved());
    CHECK(m.total_tokens_generated == 100);
    CHECK(m.requests_completed == 10);
  }

  TEST_CASE("workload at three times CPU capacity alternates phases") {
    const ClusterConfig c = reference_cluster();
    const SimOptions o;
    const auto w = uniform(4800, 230, 20);
    Bytes total_kv = 0;
    for (const auto& r : w) total_kv += kv_footprint(r.input_len + r.output_len, c.kv_bytes_per_token);
    CHECK(total_kv == 3 * c.cpu_kv_capacity);
    const auto m = run_episode(w, c, kParams, Policy::dynamic(), 3, o);
    const double per_cycle = o.rho_hi * static_cast<double>(c.cpu_kv_capacity) -
                             static_cast<double>(system_token_capacity(c) * c.kv_bytes_per_token);
    const auto bound = static_cast<std::int64_t>(std::ceil(static_cast<double>(total_kv) / per_cycle)) + 1;
    // Each prefill phase opens one prefill-decode cycle; switches count both directions.
    CHECK(m.prefill_phases >= 2);
    CHECK(m.prefill_phases <= bound);
    CHECK(m.phase_switches == m.prefill_phases + m.decode_phases - 1);
    CHECK(m.conserved());
    CHECK(m.peak_cpu_kv_bytes <= c.cpu_kv_capacity);
  }

  TEST_CASE("run_episode is deterministic") {
    const ClusterConfig c = reference_cluster();
    const auto w = generate_synthetic(sharegpt_like(300, 9));
    const auto a = run_episode(w, c, kParams, Policy::dynamic(), 9);
    const auto b = run_episode(w, c, kParams, Policy::dynamic(), 9);
    CHECK(same_metrics(a, b));
    CHECK(a.exec_time_series == b.exec_time_series);
    CHECK(a.conserved());
  }

  TEST_CASE("static prefetch with infinite bandwidth never stalls") {
    ClusterConfig c = reference_cluster();
    c.h2d_bandwidth = std::numeric_limits<double>::infinity();
    c.d2h_bandwidth = std::numeric_limits<double>::infinity();
    c.per_transfer_overhead = 0.0;
    const auto w = uniform(600, 150, 30);
    const auto m = run_baseline(w, c, kParams, Policy::static_prefetch(0.25), 4);
    CHECK(m.stall_seconds == 0.0);
    CHECK(m.conserved());
    // The quota is a fixed token count every iteration.
    std::set<Tokens> budgets;
    for (const auto& it : m.iterations) budgets.insert(it.budget_tokens);
    CHECK(budgets.size() == 1);
    CHECK(*budgets.begin() == static_cast<Tokens>(0.25 * static_cast<double>(system_token_capacity(c))));
  }

  TEST_CASE("no_prefetch keeps the resident set closed") {
    const ClusterConfig c = reference_cluster();
    const auto w = generate_synthetic(sharegpt_like(400, 5));
    const auto m = run_baseline(w, c, kParams, Policy::no_prefetch(), 5);
    CHECK(m.prefetched_token_fraction == 0.0);
    CHECK(m.prefetched_tokens_total == 0);
    CHECK(m.conserved());
    CHECK_THROWS_AS(run_baseline(w, c, kParams, Policy::dynamic(), 5), ConfigError);
  }

  TEST_CASE("dynamic beats static(0.25) on a ShareGPT-like workload") {
    const ClusterConfig c = reference_cluster();
    const auto w = generate_synthetic(sharegpt_like(800, 21));
    const auto dyn = run_episode(w, c, kParams, Policy::dynamic(), 21);
    const auto stat = run_baseline(w, c, kParams, Policy::static_prefetch(0.25), 21);
    CHECK(dyn.tokens_per_second >= stat.tokens_per_second);
  }

  TEST_CASE("episodes keep memory and blocks safe") {
    const ClusterConfig c = reference_cluster();
    SimOptions o;
    o.check_invariants = true;
    const auto w = generate_synthetic(sharegpt_like(500, 13));
    for (const auto& p : {Policy::dynamic(), Policy::static_prefetch(0.1), Policy::no_prefetch()}) {
      const auto m = run_episode(w, c, kParams, p, 13, o);
      CHECK(m.conserved());
      CHECK(m.duplicate_prefills == 0);
      CHECK(m.requests_prefilled == 500);
      CHECK(m.requests_completed == 500);
      CHECK(m.peak_resident_tokens <= system_token_capacity(c));
      CHECK(m.max_composition <= 1.0);
    }
  }

  TEST_CASE("policy parsing") {
    CHECK(Policy::parse("dynamic").kind == PolicyKind::dynamic);
    CHECK(Policy::parse("no_prefetch").kind == PolicyKind::no_prefetch);
    const auto s = Policy::parse("static:0.15");
    CHECK(s.kind == PolicyKind::static_prefetch);
    CHECK(s.static_ratio == doctest::Approx(0.15));
    CHECK(Policy::parse(s.name()).static_ratio == doctest::Approx(0.15));
    CHECK_THROWS_AS(Policy::parse("fastest"), ConfigError);
    CHECK_THROWS_AS(Policy::parse("static:1.5"), ConfigError);
  }

  TEST_CASE("noise factor is bounded and reproducible") {
    const NoiseSpec n{0.02, 3.0, 77};
    for (int b = 0; b < 4; ++b) {
      for (std::int64_t t = 0; t < 500; ++t) {
        const double f = n.factor(b, t);
        CHECK(f >= 1.0 - 0.06 - 1e-12);
        CHECK(f <= 1.0 + 0.06 + 1e-12);
        CHECK(f == n.factor(b, t));
      }
    }
    CHECK(NoiseSpec::none().factor(1, 1) == 1.0);
  }

  TEST_CASE("sim options validation") {
    SimOptions o;
    CHECK_NOTHROW(o.validate());
    o.rho_hi = 0.0;
    CHECK_THROWS_AS(o.validate(), ConfigError);
    o = {};
    o.chunk_bytes = 0;
    CHECK_THROWS_AS(o.validate(), ConfigError);
  }
}
