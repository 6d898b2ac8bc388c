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

#include "pipemax_cli/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pipemax/errors.hpp"

namespace pipemax::cli {

namespace {

using nlohmann::json;

// Object view that rejects keys nobody asked for.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& at(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(name(key) + " is required");
    return j_.at(key);
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  double number(const std::string& key) {
    const json& v = at(key);
    if (v.is_string() && (v == "inf" || v == "infinity")) return std::numeric_limits<double>::infinity();
    if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
    return v.get<double>();
  }

  std::int64_t integer(const std::string& key) {
    const json& v = at(key);
    if (v.is_number_integer()) return v.get<std::int64_t>();
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::floor(d) == d && std::abs(d) < 9.2e18) return static_cast<std::int64_t>(d);
    }
    throw ConfigError(name(key) + " must be an integer");
  }

  bool boolean(const std::string& key) {
    const json& v = at(key);
    if (!v.is_boolean()) throw ConfigError(name(key) + " must be a boolean");
    return v.get<bool>();
  }

  std::string string(const std::string& key) {
    const json& v = at(key);
    if (!v.is_string()) throw ConfigError(name(key) + " must be a string");
    return v.get<std::string>();
  }

  template <class T>
  void opt_number(const std::string& key, T& out) {
    if (has(key)) out = static_cast<T>(number(key));
  }
  template <class T>
  void opt_integer(const std::string& key, T& out) {
    if (has(key)) out = static_cast<T>(integer(key));
  }
  void opt_bool(const std::string& key, bool& out) {
    if (has(key)) out = boolean(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown key " + name(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

ClusterConfig parse_cluster(const json& j) {
  Obj o(j, "cluster");
  ClusterConfig c;
  c.n = static_cast<int>(o.integer("n"));
  c.mem_per_gpu = o.integer("mem_per_gpu");
  c.model_bytes = o.integer("model_bytes");
  c.kv_bytes_per_token = o.integer("kv_bytes_per_token");
  c.h2d_bandwidth = o.number("h2d_bandwidth");
  c.d2h_bandwidth = c.h2d_bandwidth;
  o.opt_number("d2h_bandwidth", c.d2h_bandwidth);
  o.opt_integer("cpu_kv_capacity", c.cpu_kv_capacity);
  o.opt_integer("activation_bytes_per_token", c.activation_bytes_per_token);
  o.opt_number("per_transfer_overhead", c.per_transfer_overhead);
  o.opt_integer("layers_per_stage", c.layers_per_stage);
  o.opt_integer("block_size", c.block_size);
  o.opt_number("prefill_seconds_per_token", c.prefill_seconds_per_token);
  o.finish();
  c.validate();
  return c;
}

EstimatorParams parse_params(const json& j, const std::string& path) {
  Obj o(j, path);
  EstimatorParams p;
  p.alpha = o.number("alpha");
  p.beta = o.number("beta");
  p.delta = o.number("delta");
  o.finish();
  if (!p.valid()) throw ConfigError(path + " coefficients must be >= 0");
  return p;
}

DistSpec parse_dist(const json& j, const std::string& path) {
  Obj o(j, path);
  DistSpec d;
  try {
    d.family = dist_family_from_string(o.string("family"));
  } catch (const SpecError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (d.family == DistFamily::constant && o.has("length")) {
    d.target_avg = d.target_median = o.number("length");
  } else {
    d.target_avg = o.number("avg");
    d.target_median = o.number("median");
  }
  o.opt_integer("min", d.min);
  o.opt_integer("max", d.max);
  o.finish();
  return d;
}

WorkloadSource parse_workload(const json& j, const std::filesystem::path& base) {
  Obj o(j, "workload");
  WorkloadSource w;
  if (o.has("trace")) {
    w.trace = resolve(base, o.string("trace"));
    o.finish();
    return w;
  }
  const std::int64_t count = o.integer("count");
  if (o.has("preset")) {
    const std::string preset = o.string("preset");
    if (preset == "sharegpt") {
      w.spec = sharegpt_like(count, 0);
    } else if (preset == "longbench") {
      w.spec = longbench_like(count, 0);
    } else {
      throw ConfigError("workload.preset must be sharegpt or longbench");
    }
  } else {
    WorkloadSpec s;
    s.count = count;
    s.input = parse_dist(o.at("input"), "workload.input");
    s.output = parse_dist(o.at("output"), "workload.output");
    w.spec = s;
  }
  o.finish();
  try {
    w.spec->validate();
  } catch (const SpecError& e) {
    throw ConfigError(std::string("workload: ") + e.what());
  }
  return w;
}

void parse_scheduler(const json& j, SchedulerOptions& s) {
  Obj o(j, "scheduler");
  o.opt_number("theta", s.theta);
  o.opt_integer("window_w", s.window_w);
  o.opt_number("stability_threshold", s.stability_threshold);
  o.opt_integer("max_refine_steps", s.max_refine_steps);
  if (o.has("match_epsilon")) s.match_epsilon = o.number("match_epsilon");
  o.opt_bool("smooth_budget", s.smooth_budget);
  o.opt_number("smoothing_weight", s.smoothing_weight);
  o.finish();
}

void parse_simulation(const json& j, SimOptions& s) {
  Obj o(j, "simulation");
  o.opt_number("rho_hi", s.rho_hi);
  o.opt_number("rho_lo", s.rho_lo);
  o.opt_number("noise_sigma", s.noise.sigma);
  o.opt_number("noise_truncate_sigmas", s.noise.truncate_sigmas);
  if (o.has("layout")) {
    const std::string layout = o.string("layout");
    if (layout == "block_first") {
      s.layout = LayoutKind::block_first;
    } else if (layout == "layer_first") {
      s.layout = LayoutKind::layer_first;
    } else {
      throw ConfigError("simulation.layout must be block_first or layer_first");
    }
  }
  o.opt_integer("kv_tensors_per_layer", s.kv_tensors_per_layer);
  o.opt_bool("priority_transfers", s.priority_transfers);
  if (o.has("chunk_bytes")) s.chunk_bytes = o.integer("chunk_bytes");
  o.opt_number("qkv_fraction", s.qkv_fraction);
  o.opt_bool("prefill_offload", s.prefill_offload);
  if (o.has("staging_bytes")) s.staging_bytes = o.integer("staging_bytes");
  o.opt_integer("max_decode_iterations", s.max_decode_iterations);
  if (o.has("true_estimator")) s.true_params = parse_params(o.at("true_estimator"), "simulation.true_estimator");
  o.opt_bool("check_invariants", s.check_invariants);
  o.finish();
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
}

void check_schema(Obj& o) {
  if (o.integer("schema_version") != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version (expected " + std::to_string(kConfigSchemaVersion) + ")");
  }
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  const json j = parse_json(text);
  Obj o(j, "");
  check_schema(o);
  RunConfig rc;
  rc.cluster = parse_cluster(o.at("cluster"));
  {
    const json& e = o.at("estimator");
    if (e.is_object() && e.contains("calibration_csv")) {
      Obj eo(e, "estimator");
      rc.calibration_csv = resolve(base_dir, eo.string("calibration_csv"));
      eo.finish();
    } else {
      rc.estimator = parse_params(e, "estimator");
    }
  }
  rc.workload = parse_workload(o.at("workload"), base_dir);
  if (o.has("scheduler")) parse_scheduler(o.at("scheduler"), rc.sim.scheduler);
  if (o.has("simulation")) parse_simulation(o.at("simulation"), rc.sim);
  if (o.has("seed")) {
    const json& s = o.at("seed");
    if (!s.is_number_unsigned() && !s.is_number_integer()) throw ConfigError("seed must be an integer");
    rc.seed = s.get<std::uint64_t>();
  }
  if (o.has("policy")) rc.policy = o.string("policy");
  if (o.has("policies")) {
    const json& p = o.at("policies");
    if (!p.is_array()) throw ConfigError("policies must be an array of strings");
    for (const auto& v : p) {
      if (!v.is_string()) throw ConfigError("policies must be an array of strings");
      rc.policies.push_back(v.get<std::string>());
    }
  }
  if (o.has("output")) {
    Obj out(o.at("output"), "output");
    if (out.has("trace")) rc.trace_out = resolve(base_dir, out.string("trace"));
    if (out.has("metrics")) rc.metrics_out = resolve(base_dir, out.string("metrics"));
    if (out.has("csv")) rc.csv_out = resolve(base_dir, out.string("csv"));
    out.finish();
  }
  o.finish();
  rc.sim.validate();
  Policy::parse(rc.policy);
  for (const auto& p : rc.policies) Policy::parse(p);
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_file(path), path.parent_path());
}

WorkloadSource load_workload_file(const std::filesystem::path& path, std::optional<std::uint64_t> seed) {
  const json j = parse_json(read_file(path));
  Obj o(j, "");
  check_schema(o);
  WorkloadSource w = parse_workload(o.at("workload"), path.parent_path());
  std::uint64_t s = 0;
  if (o.has("seed")) s = o.at("seed").get<std::uint64_t>();
  o.finish();
  if (seed) s = *seed;
  if (w.spec) w.spec->seed = s;
  return w;
}

std::vector<Request> build_workload(const WorkloadSource& source, std::uint64_t seed) {
  if (source.trace) return load_trace(source.trace->string());
  WorkloadSpec spec = *source.spec;
  spec.seed = seed;
  return generate_synthetic(spec);
}

EstimatorParams resolve_estimator(const RunConfig& cfg) {
  if (!cfg.calibration_csv) return cfg.estimator;
  const auto samples = load_samples_csv(*cfg.calibration_csv);
  return calibrate_estimator(samples).params;
}

std::vector<DecodeSample> load_samples_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<DecodeSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (out.empty() && lineno == 1 && line.find_first_of("0123456789") != 0) continue;  // header
    std::istringstream ss(line);
    std::string a, b, c, extra;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c, ',') ||
        std::getline(ss, extra, ',')) {
      throw ParseError(lineno, "expected 3 comma-separated fields");
    }
    DecodeSample s;
    try {
      std::size_t used = 0;
      s.batch_size = std::stoll(a, &used);
      if (used != a.size()) throw std::invalid_argument("b");
      s.prefix_tokens = std::stoll(b, &used);
      if (used != b.size()) throw std::invalid_argument("L");
      s.seconds = std::stod(c, &used);
      if (used != c.size()) throw std::invalid_argument("seconds");
    } catch (const std::exception&) {
      throw ParseError(lineno, "fields must be b (integer), L (integer), seconds (number)");
    }
    if (s.batch_size < 0 || s.prefix_tokens < 0 || !(s.seconds >= 0.0)) {
      throw ValueError(lineno, "sample values must be nonnegative");
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace pipemax::cli
