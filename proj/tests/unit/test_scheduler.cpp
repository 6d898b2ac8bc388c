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
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"
#include "pipemax/oracle.hpp"
#include "pipemax/rng.hpp"
#include "pipemax/scheduler.hpp"

using namespace pipemax;

namespace {

std::vector<RequestId> sorted(std::vector<RequestId> v) {
  std::sort(v.begin(), v.end());
  return v;
}

Request req(RequestId id, Tokens in, Tokens out = 1000) { return Request{id, in, out, 0}; }

ClusterConfig roomy(int n, Bytes kv = 1, double bw = 1e9) {
  ClusterConfig c;
  c.n = n;
  c.kv_bytes_per_token = kv;
  c.model_bytes = 1'000'000;
  c.mem_per_gpu = c.model_bytes / n + 1'000'000'000;
  c.h2d_bandwidth = bw;
  c.d2h_bandwidth = bw;
  return c;
}

struct BruteBest {
  std::vector<RequestId> set;
  double error = 0.0;
  bool saturating = false;
};

// Lexicographic search over all subsets: feasible, then saturating, then
// closest modeled time, then fewer members, then smaller ids.
BruteBest brute_force(const std::vector<PoolEntry>& pool, Tokens budget, double gap, const EstimatorParams& p,
                      double theta) {
  BruteBest best;
  bool have = false;
  const std::size_t m = pool.size();
  for (std::uint32_t mask = 0; mask < (1u << m); ++mask) {
    Tokens total = 0;
    std::vector<RequestId> ids;
    for (std::size_t q = 0; q < m; ++q) {
      if (mask & (1u << q)) {
        total += pool[q].prefix_len;
        ids.push_back(pool[q].id);
      }
    }
    if (total > budget) continue;
    const bool sat = static_cast<double>(total) >= theta * static_cast<double>(budget);
    const double err = std::abs(p.alpha * static_cast<double>(ids.size()) + p.beta * static_cast<double>(total) - gap);
    if (!have || (sat && !best.saturating) || (sat == best.saturating && err < best.error - 1e-15)) {
      best = {sorted(ids), err, sat};
      have = true;
    }
  }
  return best;
}

void drive(SchedulerState& st, const StepPlan& plan) {
  commit_step(st, plan);
  st.mark_resident(plan.prefetch_set);
  st.advance_batch(plan.indices.exec, plan.prefetch_set);
  if (st.reserved_blocks > 0) st.release_reserved(st.reserved_blocks);
}

}  // namespace

TEST_SUITE("scheduler") {
  TEST_CASE("batch_indices examples") {
    CHECK(batch_indices(0, 4) == BatchIndices{0, 1, 3});
    CHECK(batch_indices(5, 4) == BatchIndices{1, 2, 0});
    CHECK(batch_indices(7, 1) == BatchIndices{0, 0, 0});
  }

  TEST_CASE("batch_indices cycle") {
    for (int n = 1; n <= 8; ++n) {
      for (std::int64_t t = 0; t < 40; ++t) {
        const auto b = batch_indices(t, n);
        CHECK(b.exec == t % n);
        CHECK(b.next == (t + 1) % n);
        CHECK(b.evict == ((t - 1) % n + n) % n);
      }
    }
  }

  TEST_CASE("initial_partition examples") {
    const std::vector<Request> r = {req(0, 10), req(1, 9), req(2, 2), req(3, 1)};
    const auto parts = initial_partition(r, 2);
    REQUIRE(parts.size() == 2);
    CHECK(sorted(parts[0]) == std::vector<RequestId>{0, 3});
    CHECK(sorted(parts[1]) == std::vector<RequestId>{1, 2});

    const std::vector<Request> one = {req(5, 7)};
    const auto p1 = initial_partition(one, 4);
    REQUIRE(p1.size() == 4);
    CHECK(p1[0] == std::vector<RequestId>{5});
    CHECK(p1[1].empty());
    CHECK(p1[2].empty());
    CHECK(p1[3].empty());

    std::vector<Request> eight;
    for (int k = 0; k < 8; ++k) eight.push_back(req(k, 50));
    const auto p8 = initial_partition(eight, 4);
    for (const auto& b : p8) CHECK(b.size() == 2);

    CHECK(initial_partition(std::vector<Request>{}, 3) == std::vector<std::vector<RequestId>>(3));
  }

  TEST_CASE("initial_partition covers, is disjoint and balances counts") {
    auto rng = substream(3, "test.partition");
    std::uniform_int_distribution<int> count(0, 60);
    std::uniform_int_distribution<int> n(1, 8);
    std::uniform_int_distribution<Tokens> len(1, 4000);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Request> r;
      const int m = count(rng);
      for (int k = 0; k < m; ++k) r.push_back(req(k, len(rng)));
      const int nn = n(rng);
      const auto parts = initial_partition(r, nn);
      REQUIRE(static_cast<int>(parts.size()) == nn);
      std::set<RequestId> seen;
      std::size_t lo = SIZE_MAX, hi = 0;
      for (const auto& b : parts) {
        lo = std::min(lo, b.size());
        hi = std::max(hi, b.size());
        for (RequestId id : b) CHECK(seen.insert(id).second);
      }
      CHECK(static_cast<int>(seen.size()) == m);
      CHECK(hi - lo <= 1);
    }
  }

  TEST_CASE("prefetch_budget examples") {
    CHECK(20e9 * 0.05 / 1e5 == doctest::Approx(10'000));
    CHECK(prefetch_budget(20e9, 0.05, 100'000) == 10'000);
    CHECK(prefetch_budget(20e9, 0.0, 100'000) == 0);
    CHECK(prefetch_budget(0.0, 0.05, 100'000) == 0);
  }

  TEST_CASE("residual_set examples") {
    const std::set<RequestId> res = {2, 3, 4};
    CHECK(sorted(residual_set(std::vector<RequestId>{1, 2, 3}, res)) == std::vector<RequestId>{2, 3});
    CHECK(residual_set(std::vector<RequestId>{1, 2, 3}, {}).empty());
    CHECK(sorted(residual_set(std::vector<RequestId>{4, 3, 2}, res)) == std::vector<RequestId>{2, 3, 4});
  }

  TEST_CASE("select_prefetch_warmup examples") {
    const std::vector<PoolEntry> pool = {{0, 300}, {1, 100}, {2, 50}, {3, 200}};
    // Ascending length: C(50), B(100), D(200) totals 350; A would make 650.
    CHECK(select_prefetch_warmup(pool, 400) == std::vector<RequestId>{2, 1, 3});
    CHECK(select_prefetch_warmup(pool, 49).empty());
    CHECK(select_prefetch_warmup(std::vector<PoolEntry>{}, 400).empty());
  }

  TEST_CASE("select_prefetch_warmup breaks ties by id") {
    const std::vector<PoolEntry> pool = {{7, 10}, {3, 10}, {5, 10}};
    CHECK(select_prefetch_warmup(pool, 20) == std::vector<RequestId>{3, 5});
  }

  TEST_CASE("select_prefetch_steady example agrees with brute force") {
    const std::vector<PoolEntry> pool = {{0, 100}, {1, 200}, {2, 300}, {3, 50}};
    const EstimatorParams p{1.0, 0.01, 0.0};
    const auto brute = brute_force(pool, 400, 5.0, p, 0.9);
    CHECK(brute.set == std::vector<RequestId>{0, 2});
    CHECK(brute.saturating);
    CHECK(brute.error == doctest::Approx(1.0));

    SteadySelectOptions so;
    so.budget_tokens = 400;
    so.gap_seconds = 5.0;
    so.params = p;
    so.theta = 0.9;
    so.match_epsilon = 0.5;
    CHECK(sorted(select_prefetch_steady(pool, so)) == brute.set);

    so.budget_tokens = 0;
    CHECK(select_prefetch_steady(pool, so).empty());
    so.budget_tokens = 400;
    CHECK(select_prefetch_steady(std::vector<PoolEntry>{}, so).empty());
  }

  TEST_CASE("select_prefetch_steady is feasible and near the subset optimum") {
    auto rng = substream(17, "test.steady");
    std::uniform_int_distribution<int> size(0, 12);
    std::uniform_int_distribution<Tokens> len(1, 2000);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int within = 0;
    const int trials = 300;
    for (int k = 0; k < trials; ++k) {
      std::vector<PoolEntry> pool(static_cast<std::size_t>(size(rng)));
      Tokens sum = 0;
      for (std::size_t q = 0; q < pool.size(); ++q) {
        pool[q] = {static_cast<RequestId>(q), len(rng)};
        sum += pool[q].prefix_len;
      }
      const EstimatorParams p{1e-4 + 1e-3 * u(rng), 1e-7 + 1e-5 * u(rng), 0.0};
      SteadySelectOptions so;
      so.budget_tokens = static_cast<Tokens>(u(rng) * static_cast<double>(sum + 1));
      so.gap_seconds = (u(rng) * 1.2 - 0.2) * modeled_prefetch_time(p, static_cast<std::int64_t>(pool.size()), sum);
      so.params = p;
      so.match_epsilon = p.alpha / 2.0;
      const auto chosen = select_prefetch_steady(pool, so);
      Tokens total = 0;
      std::set<RequestId> unique(chosen.begin(), chosen.end());
      CHECK(unique.size() == chosen.size());
      for (RequestId id : chosen) total += pool[static_cast<std::size_t>(id)].prefix_len;
      CHECK(total <= so.budget_tokens);
      const auto brute = brute_force(pool, so.budget_tokens, so.gap_seconds, p, so.theta);
      const auto lib = exhaustive_prefetch_select(pool, so.budget_tokens, so.gap_seconds, p, so.theta);
      CHECK(lib.error == doctest::Approx(brute.error).epsilon(1e-12));
      CHECK(lib.saturating == brute.saturating);
      const double err =
          std::abs(modeled_prefetch_time(p, static_cast<std::int64_t>(chosen.size()), total) - so.gap_seconds);
      if (err <= 2.0 * brute.error + p.alpha + 1e-12) ++within;
    }
    MESSAGE("within bound ", within, "/", trials);
    CHECK(within * 10 >= trials * 9);
  }

  TEST_CASE("modeled_prefetch_time") {
    CHECK(modeled_prefetch_time({1.0, 0.01, 7.0}, 2, 400) == doctest::Approx(6.0));
    CHECK(modeled_prefetch_time({1.0, 0.01, 7.0}, 0, 0) == 0.0);
  }

  TEST_CASE("detect_steady examples") {
    const std::vector<Tokens> h = {100, 150, 200, 210, 205, 208};
    CHECK((210.0 - 205.0) / 210.0 == doctest::Approx(0.0238).epsilon(1e-3));
    CHECK(detect_steady(h, 3, 0.05));
    CHECK_FALSE(detect_steady(std::vector<Tokens>{100, 200}, 3, 0.05));
    CHECK_FALSE(detect_steady(std::vector<Tokens>{100, 200, 100}, 3, 0.05));
    CHECK_FALSE(detect_steady(std::vector<Tokens>{0, 0, 0}, 3, 0.05));
  }

  TEST_CASE("detect_steady is shift invariant") {
    auto rng = substream(19, "test.shift");
    std::uniform_int_distribution<Tokens> v(0, 1000);
    std::uniform_int_distribution<int> w(2, 10);
    for (int k = 0; k < 200; ++k) {
      const int ww = w(rng);
      std::vector<Tokens> tail(static_cast<std::size_t>(ww));
      for (auto& x : tail) x = 900 + v(rng) / 10;
      std::vector<Tokens> a, b;
      for (int q = 0; q < 5; ++q) a.push_back(v(rng));
      for (int q = 0; q < 13; ++q) b.push_back(v(rng));
      a.insert(a.end(), tail.begin(), tail.end());
      b.insert(b.end(), tail.begin(), tail.end());
      CHECK(detect_steady(a, ww, 0.05) == detect_steady(b, ww, 0.05));
      CHECK(detect_steady(tail, ww, 0.05) == detect_steady(a, ww, 0.05));
    }
  }

  TEST_CASE("schedule_step on a single stage with an empty pool") {
    const ClusterConfig c = roomy(1);
    const std::vector<Request> res = {req(0, 40), req(1, 20)};
    const auto st = SchedulerState::create(res, {}, c);
    const auto plan = schedule_step(st, {1e-4, 1e-6, 1e-3}, c);
    CHECK(plan.prefetch_set.empty());
    CHECK(plan.updated_next_batch == sorted(plan.residual));
    CHECK(sorted(plan.residual) == std::vector<RequestId>{0, 1});
  }

  TEST_CASE("schedule_step throws on an empty system") {
    const ClusterConfig c = roomy(2);
    const auto st = SchedulerState::create({}, {}, c);
    CHECK_THROWS_AS(schedule_step(st, {1e-4, 1e-6, 1e-3}, c), EmptySystem);
  }

  TEST_CASE("warm-up prefetch sizes grow with the budget") {
    // Budget in tokens is bw * T_hat / T with T = 1000 bytes per token.
    const EstimatorParams p{1e-3, 1e-5, 0.0};
    const double bw = 4.5e7;
    ClusterConfig c = roomy(4, 1000, bw);
    c.mem_per_gpu = c.model_bytes / c.n + 10'000'000'000;
    std::vector<Request> res;
    for (int k = 0; k < 4; ++k) res.push_back(req(k, 10));
    std::vector<Request> pool;
    for (int k = 0; k < 2000; ++k) pool.push_back(req(100 + k, 10));
    auto st = SchedulerState::create(res, pool, c);

    const Tokens first_budget = static_cast<Tokens>(std::floor(bw * (1e-3 + 10 * 1e-5) / 1000.0));
    std::size_t prev = 0;
    for (int step = 0; step < 3; ++step) {
      const auto plan = schedule_step(st, p, c);
      CHECK_FALSE(plan.steady);
      if (step == 0) {
        CHECK(plan.prefetch_budget_tokens == first_budget);
        CHECK(static_cast<Tokens>(plan.prefetch_set.size()) == first_budget / 10);
      }
      CHECK(plan.prefetch_set.size() >= prev);
      CHECK(plan.prefetch_tokens <= plan.prefetch_budget_tokens);
      prev = plan.prefetch_set.size();
      drive(st, plan);
      st.check_invariants();
    }
    CHECK(prev > static_cast<std::size_t>(first_budget / 10));
  }

  TEST_CASE("steady schedule_step reproduces the selector example") {
    // One executing request of 400 tokens: T_hat = 1 + 0.01 * 400 = 5, and
    // the next batch is empty, so the gap is 5. Budget = 80 * 5 / 1 = 400.
    const EstimatorParams p{1.0, 0.01, 0.0};
    const ClusterConfig c = roomy(3, 1, 80.0);
    const std::vector<Request> res = {req(0, 400)};
    const std::vector<Request> pool = {req(10, 100), req(11, 200), req(12, 300), req(13, 50)};
    auto st = SchedulerState::create(res, pool, c);
    st.steady = true;
    const auto plan = schedule_step(st, p, c);
    CHECK(plan.steady);
    CHECK(plan.prefetch_budget_tokens == 400);
    CHECK(plan.gap_seconds == doctest::Approx(5.0));
    CHECK(sorted(plan.prefetch_set) == std::vector<RequestId>{10, 12});
    CHECK(plan.updated_next_batch == std::vector<RequestId>{10, 12});
  }

  TEST_CASE("schedule_step invariants over a long run") {
    const EstimatorParams p{1e-4, 1e-6, 5e-3};
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      auto rng = substream(seed, "test.run");
      std::uniform_int_distribution<Tokens> in(1, 600);
      std::uniform_int_distribution<Tokens> out(1, 80);
      ClusterConfig c;
      c.n = 4;
      c.kv_bytes_per_token = 1000;
      c.model_bytes = 4'000'000;
      c.mem_per_gpu = 1'000'000 + 2'000'000;  // 8000 tokens of KV in total
      c.h2d_bandwidth = 5e8;
      c.d2h_bandwidth = 5e8;
      std::vector<Request> res, pool;
      for (int k = 0; k < 8; ++k) res.push_back(Request{k, in(rng), out(rng), 0});
      for (int k = 8; k < 300; ++k) pool.push_back(Request{k, in(rng), out(rng), 0});
      auto st = SchedulerState::create(res, pool, c);
      auto twin = st;
      for (int iter = 0; iter < 400 && !st.empty(); ++iter) {
        const auto plan = schedule_step(st, p, c);
        CHECK(plan == schedule_step(twin, p, c));
        if (!plan.forced) CHECK(plan.prefetch_tokens <= plan.prefetch_budget_tokens);

        // Prefetch and growth fit in free blocks plus what D_k gives up.
        std::int64_t released = 0;
        const auto& kb = st.batches[static_cast<std::size_t>(plan.indices.evict)];
        for (RequestId id : plan.evicted) {
          CHECK(std::find(kb.begin(), kb.end(), id) != kb.end());
          CHECK(std::find(plan.residual.begin(), plan.residual.end(), id) == plan.residual.end());
          released += st.allocated_blocks.at(id);
        }
        for (RequestId id : plan.preempted) released += st.allocated_blocks.at(id);
        CHECK(plan.prefetch_blocks + plan.growth_blocks <= st.free_blocks() + released);
        if (plan.indices.evict != plan.indices.exec) {
          const auto& ib = st.batches[static_cast<std::size_t>(plan.indices.exec)];
          for (RequestId id : plan.evicted) CHECK(std::find(ib.begin(), ib.end(), id) == ib.end());
        }
        for (RequestId id : plan.prefetch_set) CHECK(st.cpu_pool.contains(id));

        drive(st, plan);
        drive(twin, plan);
        CHECK_NOTHROW(st.check_invariants());
      }
    }
  }

  TEST_CASE("scheduler options validation") {
    SchedulerOptions o;
    CHECK_NOTHROW(o.validate());
    o.window_w = 1;
    CHECK_THROWS_AS(o.validate(), ConfigError);
    o = {};
    o.theta = 1.5;
    CHECK_THROWS_AS(o.validate(), ConfigError);
  }
}
