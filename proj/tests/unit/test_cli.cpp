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


#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "pipemax_cli/commands.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = pipemax::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("pipemax_cli_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  fs::path path_;
};

const char* kConfig = R"({
  "schema_version": 1,
  "seed": 7,
  "cluster": {
    "n": 4, "mem_per_gpu": 1010000000, "model_bytes": 4000000000, "kv_bytes_per_token": 1000,
    "h2d_bandwidth": 5e8, "cpu_kv_capacity": 400000000, "activation_bytes_per_token": 100,
    "per_transfer_overhead": 1e-6, "layers_per_stage": 8, "prefill_seconds_per_token": 2e-5
  },
  "estimator": {"alpha": 1e-4, "beta": 1e-6, "delta": 5e-3},
  "workload": {"preset": "sharegpt", "count": 150}
})";

fs::path write(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("simulate writes metrics and trace, byte-identical across runs") {
    TempDir d("simulate");
    const auto cfg = write(d / "run.json", kConfig);
    const auto a = cli({"simulate", "--config", cfg.string(), "--out", (d / "a.json").string(), "--no-timestamp"});
    REQUIRE(a.code == 0);
    CHECK(fs::exists(d / "a.json"));
    CHECK(fs::exists(d / "a.trace.jsonl"));
    CHECK(slurp(d / "a.json").find("\"tokens_per_second\"") != std::string::npos);
    const auto b = cli({"simulate", "--config", cfg.string(), "--out", (d / "b.json").string(), "--no-timestamp"});
    REQUIRE(b.code == 0);
    CHECK(slurp(d / "a.json") == slurp(d / "b.json"));
    CHECK(slurp(d / "a.trace.jsonl") == slurp(d / "b.trace.jsonl"));
  }

  TEST_CASE("simulate with a missing config exits 2") {
    const auto r = cli({"simulate", "--config", "/nonexistent/run.json"});
    CHECK(r.code == 2);
    CHECK_FALSE(r.err.empty());
  }

  TEST_CASE("malformed and unknown-key configs exit 2") {
    TempDir d("badcfg");
    CHECK(cli({"simulate", "--config", write(d / "a.json", "{ nope").string()}).code == 2);
    std::string extra = kConfig;
    extra.insert(extra.find("\"seed\""), "\"bogus\": 1, ");
    CHECK(cli({"simulate", "--config", write(d / "b.json", extra).string()}).code == 2);
    std::string wrong = kConfig;
    wrong.replace(wrong.find("\"schema_version\": 1"), 19, "\"schema_version\": 9");
    CHECK(cli({"simulate", "--config", write(d / "c.json", wrong).string()}).code == 2);
  }

  TEST_CASE("compare writes one row per default policy") {
    TempDir d("compare");
    const auto cfg = write(d / "run.json", kConfig);
    const auto r = cli({"compare", "--config", cfg.string(), "--out", (d / "c.csv").string(), "--no-timestamp"});
    REQUIRE(r.code == 0);
    const auto rows = lines(slurp(d / "c.csv"));
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == "policy,tokens_per_second,stall_seconds,prefetched_token_fraction");
    CHECK(rows[1].rfind("dynamic,", 0) == 0);
    CHECK(rows[6].rfind("static:0.25,", 0) == 0);
  }

  TEST_CASE("compare with an unknown policy exits 2") {
    TempDir d("compare_bad");
    const auto cfg = write(d / "run.json", kConfig);
    CHECK(cli({"compare", "--config", cfg.string(), "--policies", "dynamic,warp"}).code == 2);
  }

  TEST_CASE("validate passes and an injected fault fails") {
    const auto ok = cli({"validate"});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("prefill_makespan_equivalence: 1000/1000 passed PASS") != std::string::npos);
    const auto bad = cli({"validate", "--inject-fault"});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("prefill_makespan_equivalence") != std::string::npos);
  }

  TEST_CASE("calibrate fits a noiseless sample file") {
    TempDir d("calibrate");
    std::ostringstream csv;
    csv << "batch_size,prefix_tokens,seconds\n";
    for (int b = 1; b <= 8; ++b) {
      for (int l : {100, 1000, 5000}) csv << b << "," << l << "," << 2e-4 * b + 5e-7 * l + 4e-3 << "\n";
    }
    const auto samples = write(d / "s.csv", csv.str());
    const auto r = cli({"calibrate", "--samples", samples.string(), "--out", (d / "e.json").string(), "--no-timestamp"});
    REQUIRE(r.code == 0);
    const auto text = slurp(d / "e.json");
    CHECK(text.find("\"alpha\"") != std::string::npos);
    CHECK(text.find("timestamp") == std::string::npos);

    const auto bad = write(d / "bad.csv", "1,2\n");
    CHECK(cli({"calibrate", "--samples", bad.string(), "--out", (d / "x.json").string()}).code == 2);
  }

  TEST_CASE("report extracts per-iteration columns") {
    TempDir d("report");
    const auto cfg = write(d / "run.json", kConfig);
    REQUIRE(cli({"simulate", "--config", cfg.string(), "--out", (d / "m.json").string(), "--trace",
                 (d / "t.jsonl").string()})
                .code == 0);
    const auto r = cli({"report", "--trace", (d / "t.jsonl").string(), "--out", (d / "r.csv").string(),
                        "--no-timestamp"});
    REQUIRE(r.code == 0);
    const auto rows = lines(slurp(d / "r.csv"));
    REQUIRE(rows.size() > 1);
    CHECK(rows[0] == "iter,exec_seconds,resident_fraction,prefetched_fraction");
  }

  TEST_CASE("gen-workload writes a trace") {
    TempDir d("gen");
    const auto cfg = write(d / "w.json", R"({"schema_version": 1, "seed": 3,
      "workload": {"count": 5, "input": {"family": "constant", "length": 64},
                   "output": {"family": "constant", "length": 8}}})");
    const auto r = cli({"gen-workload", "--config", cfg.string(), "--out", (d / "w.jsonl").string()});
    REQUIRE(r.code == 0);
    const auto rows = lines(slurp(d / "w.jsonl"));
    CHECK(rows.size() == 5);
    CHECK(r.out.find("5 requests") == 0);
  }

  TEST_CASE("missing subcommand exits 2") { CHECK(cli({}).code == 2); }
}
