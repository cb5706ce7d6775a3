#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fhpm/harness.hpp"

using namespace fhpm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "fhpm_harness_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

std::string config_error(std::string_view json) {
    try {
        parse_config(json);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

struct CliResult {
    int status = -1;
    std::string output;
};

// Runs the CLI with stderr folded into the captured output.
CliResult cli(const std::string& args) {
    const std::string cmd = std::string(FHPM_SIM_PATH) + " " + args + " 2>&1";
    CliResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr)
        return r;
    std::array<char, 512> buf{};
    while (fgets(buf.data(), buf.size(), pipe) != nullptr)
        r.output += buf.data();
    const int status = pclose(pipe);
    r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream is(slurp(p));
    std::string line;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ','))
            cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

} // namespace

TEST(Config, MinimalConfigGetsDefaults) {
    const ExperimentConfig c = parse_config(R"({"name": "micro-tmm", "seed": 9})");
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.machine.total_bytes, 40_MiB);
    EXPECT_EQ(c.tiers.fast_capacity, 8_MiB);
    EXPECT_EQ(c.sweep.size(), 5u);
    EXPECT_EQ(c.strategies, (std::vector<std::string>{"fhpm", "hmmv-huge", "hmmv-base"}));
    for (const auto& name : experiment_names())
        EXPECT_NO_THROW(parse_config(R"({"name": ")" + name + R"(", "seed": 1})")) << name;
}

TEST(Config, RangeErrorNamesKeyPath) {
    const std::string e = config_error(R"({"name": "micro-tmm", "policy": {"f_use": 1.5}})");
    EXPECT_NE(e.find("policy.f_use"), std::string::npos) << e;
    EXPECT_NE(config_error(R"({"name": "micro-tmm", "policy": {"f_use": 0}})").find("policy.f_use"),
              std::string::npos);
}

TEST(Config, UnknownKeyRejected) {
    const std::string e = config_error(R"({"name": "micro-tmm", "pollicy": {}})");
    EXPECT_NE(e.find("pollicy"), std::string::npos) << e;
    const std::string nested = config_error(R"({"name": "micro-tmm", "scan": {"window": 5}})");
    EXPECT_NE(nested.find("scan.window"), std::string::npos) << nested;
}

TEST(Config, SchemaViolations) {
    EXPECT_NE(config_error(R"({"seed": 1})").find("name"), std::string::npos);
    EXPECT_NE(config_error(R"({"name": "fig3"})").find("fig3"), std::string::npos);
    EXPECT_NE(config_error(R"({"name": "micro-tmm", "seed": "x"})").find("seed"), std::string::npos);
    EXPECT_NE(config_error(R"({"name": "micro-tmm", "strategies": ["lru"]})").find("strategies[0]"),
              std::string::npos);
    EXPECT_NE(config_error(R"({"name": "micro-tmm", "scan": {"window_ticks": 1000, "interval_ticks": 300}})")
                  .find("scan.interval_ticks"),
              std::string::npos);
    EXPECT_NE(config_error(R"({"name": "micro-share", "trace": {"region_roles": ["cold"]}})").find("region_roles"),
              std::string::npos);
    EXPECT_NE(config_error(R"({"name": "vmexit-table", "sweep": [3]})").find("sweep[0]"), std::string::npos);
    EXPECT_NE(config_error(R"({"name": "micro-tmm", )").find("JSON"), std::string::npos);
}

TEST(Config, JsonRoundTrip) {
    for (const auto& name : experiment_names()) {
        ExperimentConfig c = default_config(name);
        c.seed = 77;
        const std::string text = config_to_json(c);
        EXPECT_EQ(config_to_json(parse_config(text)), text) << name;
    }
}

TEST(Config, LoadNamesPath) {
    const fs::path dir = scratch("load");
    try {
        load_config(dir / "missing.json");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("missing.json"), std::string::npos);
    }
    write(dir / "bad.json", R"({"name": "micro-tmm", "epochs": 0})");
    try {
        load_config(dir / "bad.json");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("bad.json"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("epochs"), std::string::npos);
    }
}

TEST(Config, ShippedConfigsValidate) {
    const fs::path dir = fs::path(FHPM_SOURCE_DIR) / "configs";
    std::size_t n = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".json")
            continue;
        EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
        ++n;
    }
    EXPECT_EQ(n, experiment_names().size());
}

TEST(TraceSpecJson, ParsesAndValidates) {
    const TraceSpec t = parse_trace_spec(R"({"wss_mib": 8, "pattern": "uniform", "events": 100, "seed": 3})");
    EXPECT_EQ(t.wss, 8_MiB);
    EXPECT_EQ(t.pattern, Pattern::UniformRandom);
    EXPECT_EQ(t.events, 100u);
    EXPECT_THROW(parse_trace_spec(R"({"wss_mib": 8})"), ConfigError);
    EXPECT_THROW(parse_trace_spec(R"({"wss_mib": 8, "events": 5, "speed": 1})"), ConfigError);
}

TEST(Buckets, NormalizedFrequency) {
    const std::vector<FrequencyMass> m{{0, 1}, {1, 2}, {2, 4}, {5, 8}, {9, 16}, {10, 32}};
    const auto b = frequency_buckets(m, 10);
    EXPECT_EQ(b, (std::vector<Bytes>{1 + 2, 4, 8, 0, 16 + 32}));
}

TEST(Experiments, VmexitTableExitLaw) {
    ExperimentConfig c = default_config("vmexit-table");
    c.output_dir = scratch("vmexit").string();
    run_experiment(c);
    bool seen = false;
    for (const auto& row : read_csv(fs::path(c.output_dir) / "vmexits.csv")) {
        if (row[0] == "linux-lazy" && row[1] == "split" && row[2] == std::to_string(8_MiB)) {
            EXPECT_EQ(row[5], "2048");
            seen = true;
        }
        if (row[0] == "vm-friendly")
            EXPECT_EQ(row[5], "0");
    }
    EXPECT_TRUE(seen);
}

TEST(Experiments, HugeScanCurveDominatesBaseScan) {
    ExperimentConfig c = default_config("fig2-ccdf");
    c.output_dir = scratch("fig2").string();
    c.trace.unbalanced_fraction = 1.0;
    run_experiment(c);
    const auto rows = read_csv(fs::path(c.output_dir) / "ccdf.csv");
    ASSERT_EQ(rows[0][1], "huge-scan");
    ASSERT_EQ(rows[0][2], "base-scan");
    ASSERT_EQ(rows.size(), 102u);
    for (std::size_t i = 1; i < rows.size(); ++i)
        EXPECT_GE(std::stod(rows[i][1]), std::stod(rows[i][2])) << "x=" << rows[i][0];
}

TEST(Experiments, ByteIdenticalReruns) {
    for (const auto& name : experiment_names()) {
        ExperimentConfig c = default_config(name);
        if (!c.sweep.empty() && name != "vmexit-table")
            c.sweep.resize(1);
        c.output_dir = scratch(name + "_a").string();
        const auto a = run_experiment(c);
        c.output_dir = scratch(name + "_b").string();
        const auto b = run_experiment(c);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(a[i].filename(), b[i].filename());
            if (a[i].filename() == "run_manifest.json")
                continue; // echoes the differing output_dir
            EXPECT_EQ(slurp(a[i]), slurp(b[i])) << name << " " << a[i].filename();
        }
    }
}

TEST(Experiments, ManifestEchoesConfig) {
    ExperimentConfig c = default_config("vmexit-table");
    c.output_dir = scratch("manifest").string();
    c.seed = 31;
    run_experiment(c);
    const std::string m = slurp(fs::path(c.output_dir) / "run_manifest.json");
    EXPECT_NE(m.find("\"schema_version\": 1"), std::string::npos);
    EXPECT_NE(m.find("\"seed\": 31"), std::string::npos);
    EXPECT_NE(m.find("vmexits.csv"), std::string::npos);
    EXPECT_NE(m.find("simulator_version"), std::string::npos);
}

TEST(Cli, ListExperiments) {
    const CliResult r = cli("list-experiments");
    EXPECT_EQ(r.status, 0);
    for (const auto& n : experiment_names())
        EXPECT_NE(r.output.find(n + "\n"), std::string::npos);
}

TEST(Cli, RunMissingFileNamesPath) {
    const CliResult r = cli("run /nonexistent/dir/cfg.json");
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.output.find("/nonexistent/dir/cfg.json"), std::string::npos);
}

TEST(Cli, ValidateGoodConfig) {
    const fs::path dir = scratch("cli_validate");
    write(dir / "ok.json", R"({"name": "fig2-ccdf", "seed": 4})");
    const CliResult r = cli("validate " + (dir / "ok.json").string());
    EXPECT_EQ(r.status, 0);
    EXPECT_EQ(r.output, "ok\n");
    write(dir / "bad.json", R"({"name": "fig2-ccdf", "pollicy": 1})");
    EXPECT_EQ(cli("validate " + (dir / "bad.json").string()).status, 1);
}

TEST(Cli, UsageErrorsExitTwo) {
    CliResult r = cli("frobnicate");
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.output.find("Usage"), std::string::npos);
    r = cli("list-experiments --frob");
    EXPECT_EQ(r.status, 2);
    EXPECT_EQ(cli("").status, 2);
}

TEST(Cli, RunWithOverrides) {
    const fs::path dir = scratch("cli_run");
    write(dir / "cfg.json", R"({"name": "vmexit-table", "seed": 4, "sweep": [2]})");
    const CliResult r = cli("run " + (dir / "cfg.json").string() + " --seed 12 --out " + (dir / "out").string());
    ASSERT_EQ(r.status, 0) << r.output;
    const std::string m = slurp(dir / "out" / "run_manifest.json");
    EXPECT_NE(m.find("\"seed\": 12"), std::string::npos);
}

TEST(Cli, GenTrace) {
    const fs::path dir = scratch("cli_trace");
    write(dir / "spec.json", R"({"wss_mib": 4, "pattern": "hotspot", "events": 1000, "seed": 2})");
    const CliResult r = cli("gen-trace " + (dir / "spec.json").string() + " " + (dir / "t.trc").string() + " --seed 5");
    ASSERT_EQ(r.status, 0) << r.output;
    const Trace t = read_trace(dir / "t.trc");
    TraceSpec spec = parse_trace_spec(slurp(dir / "spec.json"));
    spec.seed = 5;
    EXPECT_EQ(t, generate_trace(spec));
}
