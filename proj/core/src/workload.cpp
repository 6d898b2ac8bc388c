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

#include "pipemax/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>

#include "json.hpp"
#include "pipemax/errors.hpp"
#include "pipemax/rng.hpp"

namespace pipemax {

std::string_view to_string(DistFamily family) {
  switch (family) {
    case DistFamily::lognormal:
      return "lognormal";
    case DistFamily::normal_truncated:
      return "normal_truncated";
    case DistFamily::constant:
      return "constant";
  }
  return "unknown";
}

DistFamily dist_family_from_string(std::string_view name) {
  if (name == "lognormal") return DistFamily::lognormal;
  if (name == "normal_truncated") return DistFamily::normal_truncated;
  if (name == "constant") return DistFamily::constant;
  throw SpecError("unknown distribution family '" + std::string(name) + "'");
}

namespace {

double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
double norm_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

// Standard normal mass on [a, b], taken from the nearer tail to keep precision.
double norm_mass(double a, double b) {
  if (a > 0.0) return 0.5 * (std::erfc(a / std::numbers::sqrt2) - std::erfc(b / std::numbers::sqrt2));
  if (b < 0.0) return 0.5 * (std::erfc(-b / std::numbers::sqrt2) - std::erfc(-a / std::numbers::sqrt2));
  return norm_cdf(b) - norm_cdf(a);
}

double truncated_mean(double mu, double sigma, double lo, double hi) {
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double z = norm_mass(a, b);
  if (!(z > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return mu + sigma * (norm_pdf(a) - norm_pdf(b)) / z;
}

double truncated_median(double mu, double sigma, double lo, double hi) {
  const double a = (lo - mu) / sigma;
  const double target = 0.5 * norm_mass(a, (hi - mu) / sigma);
  double l = lo;
  double h = hi;
  for (int it = 0; it < 100; ++it) {
    const double m = 0.5 * (l + h);
    (norm_mass(a, (m - mu) / sigma) < target ? l : h) = m;
  }
  return 0.5 * (l + h);
}

// mu such that the truncated median equals `median`, for a fixed sigma.
double mu_for_median(double median, double sigma, double lo, double hi) {
  double l = lo - 8.0 * sigma;
  double h = hi + 8.0 * sigma;
  for (int it = 0; it < 100; ++it) {
    const double m = 0.5 * (l + h);
    (truncated_median(m, sigma, lo, hi) < median ? l : h) = m;
  }
  return 0.5 * (l + h);
}

Tokens clamp_round(double x, Tokens lo, Tokens hi) {
  const double r = std::round(x);
  if (!(r >= static_cast<double>(lo))) return lo;
  if (r > static_cast<double>(hi)) return hi;
  return static_cast<Tokens>(r);
}

class Sampler {
 public:
  explicit Sampler(const DistSpec& d) : d_(d) {
    if (d.family == DistFamily::lognormal) {
      const auto p = solve_lognormal(d.target_avg, d.target_median);
      mu_ = p.mu;
      sigma_ = p.sigma;
    } else if (d.family == DistFamily::normal_truncated) {
      const auto p = solve_truncated_normal(d.target_avg, d.target_median, static_cast<double>(d.min),
                                            static_cast<double>(d.max));
      mu_ = p.mu;
      sigma_ = p.sigma;
    }
  }

  Tokens operator()(std::mt19937_64& rng) {
    switch (d_.family) {
      case DistFamily::constant:
        return clamp_round(d_.target_avg, d_.min, d_.max);
      case DistFamily::lognormal:
        return clamp_round(std::exp(mu_ + sigma_ * normal_(rng)), d_.min, d_.max);
      case DistFamily::normal_truncated: {
        if (sigma_ == 0.0) return clamp_round(mu_, d_.min, d_.max);
        for (;;) {
          const double x = mu_ + sigma_ * normal_(rng);
          if (x >= static_cast<double>(d_.min) && x <= static_cast<double>(d_.max)) {
            return clamp_round(x, d_.min, d_.max);
          }
        }
      }
    }
    return d_.min;
  }

 private:
  DistSpec d_;
  double mu_ = 0.0;
  double sigma_ = 0.0;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace

void DistSpec::validate(std::string_view what) const {
  const std::string w(what);
  if (min < 1) throw SpecError(w + ".min must be >= 1");
  if (min > max) throw SpecError(w + ".min must be <= max");
  if (!(target_median >= static_cast<double>(min) && target_median <= static_cast<double>(max))) {
    throw SpecError(w + ".target_median must lie in [min, max]");
  }
  if (!(target_avg >= static_cast<double>(min) && target_avg <= static_cast<double>(max))) {
    throw SpecError(w + ".target_avg must lie in [min, max]");
  }
  switch (family) {
    case DistFamily::lognormal:
      if (!(target_median > 0.0)) throw SpecError(w + ".target_median must be > 0 for lognormal");
      if (target_avg < target_median) {
        throw SpecError(w + ": lognormal needs target_avg >= target_median");
      }
      break;
    case DistFamily::normal_truncated:
      solve_truncated_normal(target_avg, target_median, static_cast<double>(min), static_cast<double>(max));
      break;
    case DistFamily::constant:
      if (target_avg != target_median) throw SpecError(w + ": constant needs target_avg == target_median");
      break;
  }
}

void WorkloadSpec::validate() const {
  if (count < 1) throw SpecError("workload.count must be >= 1");
  input.validate("workload.input");
  output.validate("workload.output");
}

WorkloadSpec sharegpt_like(std::int64_t count, std::uint64_t seed) {
  WorkloadSpec s;
  s.count = count;
  s.seed = seed;
  s.input = {DistFamily::lognormal, 343.76, 148.0, 1, 8192};
  s.output = {DistFamily::lognormal, 237.20, 152.0, 1, 8192};
  return s;
}

WorkloadSpec longbench_like(std::int64_t count, std::uint64_t seed) {
  WorkloadSpec s;
  s.count = count;
  s.seed = seed;
  s.input = {DistFamily::normal_truncated, 2686.89, 2736.50, 1, 4096};
  s.output = {DistFamily::lognormal, 101.78, 19.0, 1, 8192};
  return s;
}

LognormalParams solve_lognormal(double avg, double median) {
  if (!(median > 0.0)) throw SpecError("lognormal median must be > 0");
  if (avg < median) throw SpecError("lognormal needs avg >= median (no real sigma)");
  return LognormalParams{std::log(median), std::sqrt(2.0 * std::log(avg / median))};
}

NormalParams solve_truncated_normal(double avg, double median, double lo, double hi) {
  if (!(lo < hi)) {
    if (avg == median && median == lo) return {lo, 0.0};
    throw SpecError("truncated normal needs lo < hi");
  }
  if (!(median > lo && median < hi)) throw SpecError("truncated normal median must lie inside (lo, hi)");
  if (avg == median) return {median, 0.0};

  const double width = hi - lo;
  const auto gap = [&](double sigma) {
    const double mu = mu_for_median(median, sigma, lo, hi);
    return truncated_mean(mu, sigma, lo, hi) - avg;
  };
  // Scan sigma on a log grid for the first sign change, then bisect.
  constexpr int kGrid = 160;
  double prev_s = width * 1e-4;
  double prev_g = gap(prev_s);
  for (int k = 1; k <= kGrid; ++k) {
    const double s = width * 1e-4 * std::pow(1e8, static_cast<double>(k) / kGrid);
    const double g = gap(s);
    if (std::isfinite(g) && std::isfinite(prev_g) && (g == 0.0 || (g > 0.0) != (prev_g > 0.0))) {
      double l = prev_s;
      double h = s;
      double gl = prev_g;
      for (int it = 0; it < 80; ++it) {
        const double m = 0.5 * (l + h);
        const double gm = gap(m);
        if ((gm > 0.0) == (gl > 0.0)) {
          l = m;
          gl = gm;
        } else {
          h = m;
        }
      }
      // Tail cancellation at extreme mu can fake a sign change; keep only true roots.
      const double sigma = 0.5 * (l + h);
      const double residual = gap(sigma);
      if (std::isfinite(residual) && std::abs(residual) <= 1e-6 * std::max(1.0, std::abs(avg))) {
        return NormalParams{mu_for_median(median, sigma, lo, hi), sigma};
      }
    }
    prev_s = s;
    prev_g = g;
  }
  throw SpecError("no truncated normal on [" + std::to_string(lo) + ", " + std::to_string(hi) +
                  "] has mean " + std::to_string(avg) + " and median " + std::to_string(median));
}

std::vector<Request> generate_synthetic(const WorkloadSpec& spec) {
  spec.validate();
  Sampler in(spec.input);
  Sampler out(spec.output);
  auto rng_in = substream(spec.seed, "workload.input");
  auto rng_out = substream(spec.seed, "workload.output");
  std::vector<Request> reqs;
  reqs.reserve(static_cast<std::size_t>(spec.count));
  for (std::int64_t i = 0; i < spec.count; ++i) {
    Request r;
    r.id = i;
    r.input_len = in(rng_in);
    r.output_len = out(rng_out);
    reqs.push_back(r);
  }
  return reqs;
}

namespace {

Tokens read_length(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw ParseError(line, std::string("missing field '") + key + "'");
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ParseError(line, std::string("field '") + key + "' must be an integer");
  const auto len = v.get<std::int64_t>();
  if (len <= 0) throw ValueError(line, std::string(key) + " must be positive, got " + std::to_string(len));
  return len;
}

}  // namespace

std::vector<Request> load_trace(std::istream& in) {
  std::vector<Request> reqs;
  std::set<RequestId> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& ex) {
      throw ParseError(line, ex.what());
    }
    if (!j.is_object()) throw ParseError(line, "expected a JSON object");
    Request r;
    if (j.contains("id")) {
      if (!j.at("id").is_number_integer()) throw ParseError(line, "field 'id' must be an integer");
      r.id = j.at("id").get<RequestId>();
    } else {
      r.id = static_cast<RequestId>(reqs.size());
    }
    r.input_len = read_length(j, "input_len", line);
    r.output_len = read_length(j, "output_len", line);
    if (!ids.insert(r.id).second) throw ValueError(line, "duplicate request id " + std::to_string(r.id));
    reqs.push_back(r);
  }
  return reqs;
}

std::vector<Request> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open workload trace '" + path + "'");
  return load_trace(in);
}

void save_trace(std::span<const Request> requests, std::ostream& out) {
  for (const auto& r : requests) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["input_len"] = r.input_len;
    j["output_len"] = r.output_len;
    out << j.dump() << '\n';
  }
}

void save_trace(std::span<const Request> requests, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  save_trace(requests, out);
}

namespace {

LengthStats stats_of(std::vector<Tokens> v) {
  std::sort(v.begin(), v.end());
  LengthStats s;
  long double sum = 0;
  for (Tokens x : v) sum += x;
  s.avg = static_cast<double>(sum / static_cast<long double>(v.size()));
  s.median = v[(v.size() - 1) / 2];
  s.min = v.front();
  s.max = v.back();
  return s;
}

}  // namespace

WorkloadStats summarize(std::span<const Request> requests) {
  if (requests.empty()) throw EmptyWorkload("cannot summarize an empty workload");
  std::vector<Tokens> in;
  std::vector<Tokens> out;
  in.reserve(requests.size());
  out.reserve(requests.size());
  for (const auto& r : requests) {
    in.push_back(r.input_len);
    out.push_back(r.output_len);
  }
  return WorkloadStats{requests.size(), stats_of(std::move(in)), stats_of(std::move(out))};
}

}  // namespace pipemax
