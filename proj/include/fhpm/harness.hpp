#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fhpm/monitor.hpp"
#include "fhpm/policy.hpp"
#include "fhpm/share.hpp"
#include "fhpm/tmm.hpp"
#include "fhpm/workload.hpp"

namespace fhpm {

class ConfigError : public Error {
public:
    using Error::Error;
};

struct MachineConfig {
    Bytes total_bytes = 64_MiB;
    RegionLayout layout = RegionLayout::Huge;
    TlbConfig tlb;
    WalkConfig walk;
};

struct ExperimentConfig {
    std::string name;
    std::uint64_t seed = 1;
    std::string output_dir;
    MachineConfig machine;
    TraceSpec trace;      // wss and seed are filled in per run
    ContentSpec contents; // frames_per_vm and seed are filled in per run
    ScanConfig scan;
    PolicyConfig policy;
    TierSpec tiers;
    CostModel cost;
    std::vector<std::string> strategies;
    double host_mutation_rate = 0.0;
    std::vector<double> sweep;
    std::uint32_t epochs = 1;
};

const std::vector<std::string>& experiment_names();

ExperimentConfig default_config(const std::string& name);
// Strict JSON schema: unknown keys and out-of-range values are rejected with
// their key path.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical JSON of a fully resolved config.
std::string config_to_json(const ExperimentConfig& config);

// gen-trace spec: {"wss_mib", "pattern", "events", "seed", ...trace keys}.
TraceSpec parse_trace_spec(std::string_view json_text);

// Runs the named experiment and returns the report files written, in order.
std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& config);

// Bytes per normalized-frequency bucket [0,20) [20,40) [40,60) [60,80) [80,100].
std::vector<Bytes> frequency_buckets(std::span<const FrequencyMass> masses, std::uint32_t intervals);

} // namespace fhpm
