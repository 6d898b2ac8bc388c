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


#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "pipemax/errors.hpp"
#include "pipemax/workload.hpp"

using namespace pipemax;

namespace {

double within(double got, double want) { return std::abs(got - want) / want; }

// Truncated normal mean and median by direct quadrature of the density.
std::pair<double, double> truncated_moments(double mu, double sigma, double lo, double hi) {
  const int steps = 200'000;
  const double h = (hi - lo) / steps;
  const auto pdf = [&](double x) { return std::exp(-0.5 * std::pow((x - mu) / sigma, 2)); };
  std::vector<double> cdf(steps + 1, 0.0);
  double mass = 0.0, first = 0.0;
  for (int k = 1; k <= steps; ++k) {
    const double a = lo + (k - 1) * h, b = lo + k * h;
    const double m = 0.5 * (pdf(a) + pdf(b)) * h;
    mass += m;
    first += 0.5 * (a * pdf(a) + b * pdf(b)) * h;
    cdf[static_cast<std::size_t>(k)] = mass;
  }
  double median = hi;
  for (int k = 1; k <= steps; ++k) {
    if (cdf[static_cast<std::size_t>(k)] >= 0.5 * mass) {
      const double c0 = cdf[static_cast<std::size_t>(k - 1)], c1 = cdf[static_cast<std::size_t>(k)];
      median = lo + (k - 1 + (0.5 * mass - c0) / (c1 - c0)) * h;
      break;
    }
  }
  return {first / mass, median};
}

}  // namespace

TEST_SUITE("workload") {
  TEST_CASE("constant family yields identical requests") {
    WorkloadSpec s;
    s.count = 8;
    s.input = {DistFamily::constant, 100, 100, 1, 8192};
    s.output = {DistFamily::constant, 100, 100, 1, 8192};
    const auto r = generate_synthetic(s);
    REQUIRE(r.size() == 8);
    for (std::size_t k = 0; k < r.size(); ++k) {
      CHECK(r[k].id == static_cast<RequestId>(k));
      CHECK(r[k].input_len == 100);
      CHECK(r[k].output_len == 100);
      CHECK(r[k].generated == 0);
    }
  }

  TEST_CASE("ShareGPT-like generation matches its targets") {
    const auto st = summarize(generate_synthetic(sharegpt_like(10'000, 42)));
    CHECK(within(st.input.avg, 343.76) <= 0.10);
    CHECK(within(static_cast<double>(st.input.median), 148.0) <= 0.10);
    CHECK(within(st.output.avg, 237.20) <= 0.10);
    CHECK(within(static_cast<double>(st.output.median), 152.0) <= 0.10);
  }

  TEST_CASE("LongBench-like generation matches its targets") {
    const auto st = summarize(generate_synthetic(longbench_like(10'000, 42)));
    CHECK(within(st.input.avg, 2686.89) <= 0.10);
    CHECK(within(static_cast<double>(st.input.median), 2736.50) <= 0.10);
    CHECK(within(st.output.avg, 101.78) <= 0.10);
    CHECK(within(static_cast<double>(st.output.median), 19.0) <= 0.10);
  }

  TEST_CASE("generation is deterministic and respects bounds") {
    const auto spec = sharegpt_like(2000, 7);
    const auto a = generate_synthetic(spec);
    const auto b = generate_synthetic(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].input_len == b[k].input_len);
      CHECK(a[k].output_len == b[k].output_len);
      CHECK(a[k].input_len >= spec.input.min);
      CHECK(a[k].input_len <= spec.input.max);
      CHECK(a[k].output_len >= spec.output.min);
      CHECK(a[k].output_len <= spec.output.max);
    }
    const auto c = generate_synthetic(sharegpt_like(2000, 8));
    bool differs = false;
    for (std::size_t k = 0; k < a.size(); ++k) differs = differs || a[k].input_len != c[k].input_len;
    CHECK(differs);
  }

  TEST_CASE("solve_lognormal inverts the moment identities") {
    const auto p = solve_lognormal(343.76, 148.0);
    CHECK(std::exp(p.mu) == doctest::Approx(148.0));
    CHECK(std::exp(p.mu + 0.5 * p.sigma * p.sigma) == doctest::Approx(343.76));
    CHECK_THROWS_AS(solve_lognormal(100.0, 200.0), SpecError);
    CHECK_THROWS_AS(solve_lognormal(100.0, 0.0), SpecError);
  }

  TEST_CASE("solve_truncated_normal reproduces mean and median") {
    const double lo = 1.0, hi = 4096.0;
    const auto p = solve_truncated_normal(2686.89, 2736.5, lo, hi);
    const auto [mean, median] = truncated_moments(p.mu, p.sigma, lo, hi);
    CHECK(mean == doctest::Approx(2686.89).epsilon(1e-3));
    CHECK(median == doctest::Approx(2736.5).epsilon(1e-3));
    // A median far below the window centre with mean under it has no solution.
    CHECK_THROWS_AS(solve_truncated_normal(2686.89, 2736.5, 1.0, 8192.0), SpecError);
    CHECK_THROWS_AS(solve_truncated_normal(10.0, 10.0, 5.0, 5.0), SpecError);
    CHECK_THROWS_AS(solve_truncated_normal(10.0, 20.0, 0.0, 10.0), SpecError);
  }

  TEST_CASE("workload description validation") {
    WorkloadSpec s = sharegpt_like(10, 1);
    CHECK_NOTHROW(s.validate());
    s.count = 0;
    CHECK_THROWS_AS(s.validate(), SpecError);
    s = sharegpt_like(10, 1);
    s.input = {DistFamily::constant, 10, 20, 1, 100};
    CHECK_THROWS_AS(s.validate(), SpecError);
  }

  TEST_CASE("dist family names round trip") {
    for (auto f : {DistFamily::lognormal, DistFamily::normal_truncated, DistFamily::constant}) {
      CHECK(dist_family_from_string(to_string(f)) == f);
    }
  }

  TEST_CASE("load_trace reads well-formed lines") {
    std::istringstream in(R"({"id": 5, "input_len": 10, "output_len": 3}
{"input_len": 7, "output_len": 2}
)");
    const auto r = load_trace(in);
    REQUIRE(r.size() == 2);
    CHECK(r[0].id == 5);
    CHECK(r[0].input_len == 10);
    CHECK(r[0].output_len == 3);
    CHECK(r[1].input_len == 7);
    CHECK(r[1].id != r[0].id);
  }

  TEST_CASE("load_trace errors carry the line number") {
    std::istringstream bad_value(R"({"input_len": 4, "output_len": 1}
{"input_len": 0, "output_len": 1}
)");
    try {
      load_trace(bad_value);
      FAIL("expected ValueError");
    } catch (const ValueError& e) {
      CHECK(e.line() == 2);
    }
    std::istringstream bad_json("{\"input_len\": 4, \"output_len\": 1}\n{not json\n");
    try {
      load_trace(bad_json);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }

  TEST_CASE("load_trace of an empty stream is empty") {
    std::istringstream in("");
    CHECK(load_trace(in).empty());
  }

  TEST_CASE("save_trace round trips") {
    const auto a = generate_synthetic(sharegpt_like(50, 3));
    std::stringstream buf;
    save_trace(a, buf);
    const auto b = load_trace(buf);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].id == b[k].id);
      CHECK(a[k].input_len == b[k].input_len);
      CHECK(a[k].output_len == b[k].output_len);
    }
  }

  TEST_CASE("summarize examples") {
    std::vector<Request> r;
    for (Tokens l = 1; l <= 4; ++l) r.push_back(Request{l, l, l, 0});
    const auto s = summarize(r);
    CHECK(s.count == 4);
    CHECK(s.input.avg == 2.5);
    CHECK(s.input.median == 2);
    CHECK(s.input.min == 1);
    CHECK(s.input.max == 4);
    const auto one = summarize(std::vector<Request>{{0, 9, 3, 0}});
    CHECK(one.input.avg == 9.0);
    CHECK(one.input.median == 9);
    CHECK(one.output.avg == 3.0);
    CHECK(one.output.median == 3);
  }
}
