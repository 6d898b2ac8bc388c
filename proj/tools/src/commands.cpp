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

#include "pipemax_cli/commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <future>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pipemax/cost_model.hpp"
#include "pipemax/errors.hpp"
#include "pipemax/event_trace.hpp"
#include "pipemax/pipeline_sim.hpp"
#include "pipemax/workload.hpp"
#include "pipemax_cli/config.hpp"
#include "pipemax_cli/validate.hpp"

namespace pipemax::cli {

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kDefaultPolicies = {"dynamic",    "static:0.05", "static:0.1",
                                                   "static:0.15", "static:0.2", "static:0.25"};

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool no_timestamp = false;
};

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string() + " for writing");
  return f;
}

void csv_header(std::ostream& f, const Common& c) {
  if (!c.no_timestamp) f << "# generated " << utc_now() << "\n";
}

RunConfig load_config(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  RunConfig rc = load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  return rc;
}

int cmd_simulate(const Common& c, const std::string& policy_flag, const std::string& trace_flag, std::ostream& out) {
  const RunConfig rc = load_config(c);
  const Policy policy = Policy::parse(policy_flag.empty() ? rc.policy : policy_flag);
  const auto workload = build_workload(rc.workload, rc.seed);
  const EstimatorParams params = resolve_estimator(rc);

  const fs::path metrics_path = !c.out.empty() ? fs::path(c.out) : rc.metrics_out.value_or("metrics.json");
  fs::path trace_path;
  if (!trace_flag.empty()) {
    trace_path = trace_flag;
  } else if (rc.trace_out) {
    trace_path = *rc.trace_out;
  } else {
    trace_path = metrics_path;
    trace_path.replace_extension(".trace.jsonl");
  }

  EventTrace trace;
  const EpisodeMetrics m = run_episode(workload, rc.cluster, params, policy, rc.seed, rc.sim, &trace);
  {
    auto f = open_out(trace_path);
    trace.write_jsonl(f);
  }
  {
    auto f = open_out(metrics_path);
    f << m.to_json(!c.no_timestamp) << "\n";
  }
  out << "policy " << m.policy << ": " << num(m.tokens_per_second) << " tokens/s over " << num(m.wall_seconds)
      << " s (" << m.total_tokens_generated << " tokens, stall " << num(m.stall_seconds) << " s)\n";
  out << "metrics: " << metrics_path.string() << "\ntrace: " << trace_path.string() << "\n";
  return kOk;
}

int cmd_compare(const Common& c, const std::string& policies_flag, std::ostream& out) {
  const RunConfig rc = load_config(c);
  std::vector<std::string> names;
  if (!policies_flag.empty()) {
    std::stringstream ss(policies_flag);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) names.push_back(item);
    }
  } else if (!rc.policies.empty()) {
    names = rc.policies;
  } else {
    names = kDefaultPolicies;
  }
  std::vector<Policy> policies;
  for (const auto& n : names) policies.push_back(Policy::parse(n));

  const auto workload = build_workload(rc.workload, rc.seed);
  const EstimatorParams params = resolve_estimator(rc);
  std::vector<std::future<EpisodeMetrics>> jobs;
  for (const auto& p : policies) {
    jobs.push_back(std::async(std::launch::async, [&, p] {
      return run_episode(workload, rc.cluster, params, p, rc.seed, rc.sim);
    }));
  }
  std::vector<EpisodeMetrics> results;
  for (auto& j : jobs) results.push_back(j.get());

  const fs::path path = !c.out.empty() ? fs::path(c.out) : rc.csv_out.value_or("compare.csv");
  auto f = open_out(path);
  csv_header(f, c);
  f << "policy,tokens_per_second,stall_seconds,prefetched_token_fraction\n";
  for (std::size_t k = 0; k < results.size(); ++k) {
    const auto& m = results[k];
    f << names[k] << "," << num(m.tokens_per_second) << "," << num(m.stall_seconds) << ","
      << num(m.prefetched_token_fraction) << "\n";
    out << names[k] << ": " << num(m.tokens_per_second) << " tokens/s\n";
  }
  out << "csv: " << path.string() << "\n";
  return kOk;
}

int cmd_validate(const Common& c, bool inject_fault, std::ostream& out, std::ostream& err) {
  ValidateOptions vo;
  if (c.seed) vo.seed = *c.seed;
  vo.inject_closed_form_fault = inject_fault;
  bool ok = true;
  for (const auto& s : run_validation(vo)) {
    out << s.name << ": " << s.passed << "/" << s.total << " passed";
    if (!s.detail.empty()) out << " (" << s.detail << ")";
    out << (s.ok ? " PASS" : " FAIL") << "\n";
    if (!s.ok) {
      err << "suite failed: " << s.name << "\n";
      ok = false;
    }
  }
  return ok ? kOk : kValidationFailed;
}

int cmd_calibrate(const Common& c, const std::string& samples_flag, std::ostream& out) {
  const std::string path = !samples_flag.empty() ? samples_flag : c.config;
  if (path.empty()) throw ConfigError("--samples is required");
  const auto samples = load_samples_csv(path);
  const Calibration cal = calibrate_estimator(samples);
  nlohmann::ordered_json j;
  j["schema_version"] = kConfigSchemaVersion;
  if (!c.no_timestamp) j["timestamp"] = utc_now();
  j["alpha"] = cal.params.alpha;
  j["beta"] = cal.params.beta;
  j["delta"] = cal.params.delta;
  j["residual_sum_squares"] = cal.residual_sum_squares;
  j["samples"] = samples.size();
  j["warnings"] = cal.warnings;
  const fs::path dest = !c.out.empty() ? fs::path(c.out) : fs::path("estimator.json");
  auto f = open_out(dest);
  f << j.dump(2) << "\n";
  out << "alpha " << num(cal.params.alpha) << ", beta " << num(cal.params.beta) << ", delta "
      << num(cal.params.delta) << "\n";
  for (const auto& w : cal.warnings) out << "warning: " << w << "\n";
  return kOk;
}

int cmd_gen_workload(const Common& c, std::ostream& out) {
  if (c.config.empty()) throw ConfigError("--config is required");
  const WorkloadSource src = load_workload_file(c.config, c.seed);
  const auto requests = src.trace ? load_trace(src.trace->string()) : generate_synthetic(*src.spec);
  const fs::path dest = !c.out.empty() ? fs::path(c.out) : fs::path("workload.jsonl");
  {
    auto f = open_out(dest);
    save_trace(requests, f);
  }
  const WorkloadStats s = summarize(requests);
  out << s.count << " requests; input avg " << num(s.input.avg) << " median " << s.input.median
      << "; output avg " << num(s.output.avg) << " median " << s.output.median << "\n";
  return kOk;
}

int cmd_report(const Common& c, const std::string& trace_flag, std::ostream& out) {
  const std::string path = !trace_flag.empty() ? trace_flag : c.config;
  if (path.empty()) throw ConfigError("--trace is required");
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  const EventTrace trace = EventTrace::read_jsonl(in);
  const fs::path dest = !c.out.empty() ? fs::path(c.out) : fs::path("report.csv");
  auto f = open_out(dest);
  csv_header(f, c);
  f << "iter,exec_seconds,resident_fraction,prefetched_fraction\n";
  std::int64_t rows = 0;
  for (const auto& e : trace.events) {
    if (e.kind != EventKind::stage_compute_start || e.phase != "decode" || e.stage != 0) continue;
    const auto exec = e.value("exec_seconds");
    const auto cap = e.value("capacity_tokens");
    if (!exec || !cap || *cap <= 0.0) continue;
    const double res = e.value("resident_tokens").value_or(0.0) / *cap;
    const double pre = e.value("prefetched_tokens").value_or(0.0) / *cap;
    f << e.iteration << "," << num(*exec) << "," << num(res) << "," << num(pre) << "\n";
    ++rows;
  }
  out << rows << " iterations -> " << dest.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pipeline-parallel inference simulator with KV-cache offloading", "pipemax-sim"};
  app.require_subcommand(1);
  Common c;
  std::string policy;
  std::string policies;
  std::string trace;
  std::string samples;
  bool inject_fault = false;

  const auto common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", c.config, "Config file");
    if (config_required) opt->required();
    sub->add_option("--out", c.out, "Output path");
    sub->add_option("--seed", c.seed, "Seed override");
    sub->add_flag("--no-timestamp", c.no_timestamp, "Omit timestamps from outputs");
  };

  auto* simulate = app.add_subcommand("simulate", "Run one episode");
  common(simulate, true);
  simulate->add_option("--policy", policy, "dynamic | no_prefetch | static:<ratio>");
  simulate->add_option("--trace", trace, "Trace JSONL path");

  auto* compare = app.add_subcommand("compare", "Run several policies on one workload");
  common(compare, true);
  compare->add_option("--policies", policies, "Comma-separated policy list");

  auto* validate = app.add_subcommand("validate", "Run the oracle suites");
  common(validate, false);
  validate->add_flag("--inject-fault", inject_fault)->group("");

  auto* calibrate = app.add_subcommand("calibrate", "Fit the decode-time model from samples");
  common(calibrate, false);
  calibrate->add_option("--samples", samples, "CSV of b,L,seconds");

  auto* gen = app.add_subcommand("gen-workload", "Write a synthetic workload trace");
  common(gen, true);

  auto* report = app.add_subcommand("report", "Per-iteration series from a trace");
  common(report, false);
  report->add_option("--trace", trace, "Trace JSONL path");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*simulate) return cmd_simulate(c, policy, trace, out);
    if (*compare) return cmd_compare(c, policies, out);
    if (*validate) return cmd_validate(c, inject_fault, out, err);
    if (*calibrate) return cmd_calibrate(c, samples, out);
    if (*gen) return cmd_gen_workload(c, out);
    if (*report) return cmd_report(c, trace, out);
  } catch (const CapacityError& e) {
    err << "simulation error: " << e.what() << "\n";
    return kSimulationError;
  } catch (const OutOfMemory& e) {
    err << "simulation error: " << e.what() << "\n";
    return kSimulationError;
  } catch (const EmptySystem& e) {
    err << "simulation error: " << e.what() << "\n";
    return kSimulationError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "simulation error: " << e.what() << "\n";
    return kSimulationError;
  }
  return kConfigError;
}

}  // namespace pipemax::cli
