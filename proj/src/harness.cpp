#include "fhpm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/core.h>
#include <json.hpp>

#ifndef FHPM_VERSION
#define FHPM_VERSION "0.0.0"
#endif

namespace fhpm {

using json = nlohmann::json;

namespace {

constexpr int kManifestSchema = 1;

// ---------------------------------------------------------------------------
// Names

const std::vector<std::pair<std::string, Pattern>> kPatterns = {
    {"sequential", Pattern::Sequential}, {"uniform", Pattern::UniformRandom}, {"hotspot", Pattern::Hotspot}};
const std::vector<std::pair<std::string, RegionRole>> kRoles = {
    {"balanced", RegionRole::Balanced}, {"unbalanced", RegionRole::Unbalanced}, {"cold", RegionRole::Cold}};
const std::vector<std::pair<std::string, ScanMode>> kScanModes = {
    {"two-stage", ScanMode::TwoStage},   {"split-scan", ScanMode::SplitScan}, {"sampling-scan", ScanMode::SamplingScan},
    {"zero-scan", ScanMode::ZeroScan},   {"huge-scan", ScanMode::HugeScan},   {"base-scan", ScanMode::BaseScan}};
const std::vector<std::pair<std::string, SplitMode>> kSplitModes = {
    {"linux-lazy", SplitMode::LinuxLazy}, {"vm-friendly", SplitMode::VmFriendly}};
const std::vector<std::pair<std::string, RegionLayout>> kLayouts = {
    {"huge", RegionLayout::Huge}, {"base", RegionLayout::Base}};

template <class E>
std::string name_of(const std::vector<std::pair<std::string, E>>& table, E v) {
    for (const auto& [n, e] : table)
        if (e == v)
            return n;
    return "?";
}

template <class E>
E lookup(const std::vector<std::pair<std::string, E>>& table, const std::string& name, const std::string& path) {
    for (const auto& [n, e] : table)
        if (n == name)
            return e;
    std::string options;
    for (const auto& [n, e] : table)
        options += (options.empty() ? "" : ", ") + n;
    throw ConfigError(fmt::format("{}: '{}' is not one of {}", path, name, options));
}

// ---------------------------------------------------------------------------
// JSON reading

std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object())
        throw ConfigError(fmt::format("{}: expected an object", path.empty() ? "config" : path));
    for (const auto& item : obj.items())
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
            throw ConfigError(fmt::format("unknown key '{}'", join(path, item.key())));
}

void read_double(const json& obj, const std::string& path, std::string_view key, double& out, double lo, double hi,
                 bool lo_open = false) {
    if (!obj.contains(key))
        return;
    const std::string p = join(path, key);
    const json& v = obj.at(std::string(key));
    if (!v.is_number())
        throw ConfigError(fmt::format("{}: expected a number", p));
    const double x = v.get<double>();
    if (!(lo_open ? x > lo : x >= lo) || !(x <= hi))
        throw ConfigError(fmt::format("{}: {} is outside {}{}, {}]", p, x, lo_open ? "(" : "[", lo, hi));
    out = x;
}

template <class T>
void read_uint(const json& obj, const std::string& path, std::string_view key, T& out, std::uint64_t lo,
               std::uint64_t hi) {
    if (!obj.contains(key))
        return;
    const std::string p = join(path, key);
    const json& v = obj.at(std::string(key));
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(fmt::format("{}: expected a non-negative integer", p));
    const auto x = v.get<std::uint64_t>();
    if (x < lo || x > hi)
        throw ConfigError(fmt::format("{}: {} is outside [{}, {}]", p, x, lo, hi));
    out = static_cast<T>(x);
}

void read_string(const json& obj, const std::string& path, std::string_view key, std::string& out) {
    if (!obj.contains(key))
        return;
    const json& v = obj.at(std::string(key));
    if (!v.is_string())
        throw ConfigError(fmt::format("{}: expected a string", join(path, key)));
    out = v.get<std::string>();
}

void read_trace_keys(const json& t, const std::string& path, TraceSpec& spec) {
    std::string pattern = name_of(kPatterns, spec.pattern);
    read_string(t, path, "pattern", pattern);
    spec.pattern = lookup(kPatterns, pattern, join(path, "pattern"));
    read_double(t, path, "hot_fraction", spec.hot_fraction, 0, 1);
    read_double(t, path, "hot_op_fraction", spec.hot_op_fraction, 0, 1);
    read_double(t, path, "read_fraction", spec.read_fraction, 0, 1);
    read_double(t, path, "unbalanced_fraction", spec.unbalanced_fraction, 0, 1);
    read_double(t, path, "target_psr", spec.target_psr, 0, 1);
    read_uint(t, path, "events", spec.events, 0, 100'000'000);
    if (t.contains("region_roles")) {
        const std::string p = join(path, "region_roles");
        const json& roles = t.at("region_roles");
        if (!roles.is_array())
            throw ConfigError(fmt::format("{}: expected an array", p));
        spec.region_roles.clear();
        for (std::size_t i = 0; i < roles.size(); ++i) {
            const std::string ip = fmt::format("{}[{}]", p, i);
            if (!roles[i].is_string())
                throw ConfigError(fmt::format("{}: expected a string", ip));
            spec.region_roles.push_back(lookup(kRoles, roles[i].get<std::string>(), ip));
        }
    }
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> read_blocks(const json& v, const std::string& p) {
    if (!v.is_array())
        throw ConfigError(fmt::format("{}: expected an array of [begin, end] pairs", p));
    std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const json& b = v[i];
        if (!b.is_array() || b.size() != 2 || !b[0].is_number_unsigned() || !b[1].is_number_unsigned())
            throw ConfigError(fmt::format("{}[{}]: expected [begin, end]", p, i));
        out.emplace_back(b[0].get<std::uint64_t>(), b[1].get<std::uint64_t>());
    }
    return out;
}

void validate_strategies(const ExperimentConfig& c) {
    const std::string p = "strategies";
    if (c.strategies.empty())
        throw ConfigError(fmt::format("{}: at least one strategy is required", p));
    for (std::size_t i = 0; i < c.strategies.size(); ++i) {
        const std::string ip = fmt::format("{}[{}]", p, i);
        const std::string& s = c.strategies[i];
        try {
            if (c.name == "micro-tmm" || c.name == "dynamic-vs-fixed")
                parse_tmm_strategy(s);
            else if (c.name == "micro-share")
                parse_share_strategy(s, c.policy.f_use);
            else if (c.name == "vmexit-table")
                lookup(kSplitModes, s, ip);
            else if (c.name == "monitor-accuracy")
                lookup(kScanModes, s, ip);
            else if (c.name == "fig2-ccdf") {
                const ScanMode m = lookup(kScanModes, s, ip);
                if (m != ScanMode::HugeScan && m != ScanMode::BaseScan && m != ScanMode::TwoStage)
                    throw ConfigError(fmt::format("{}: '{}' does not produce a frequency histogram", ip, s));
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(fmt::format("{}: {}", ip, e.what()));
        }
    }
}

void validate_config(const ExperimentConfig& c) {
    const std::uint64_t regions = c.machine.total_bytes / kHugePageBytes;
    if (c.scan.window_ticks % c.scan.interval_ticks != 0)
        throw ConfigError("scan.interval_ticks: must divide scan.window_ticks");
    if (!c.trace.region_roles.empty() && c.trace.region_roles.size() != regions)
        throw ConfigError(fmt::format("trace.region_roles: has {} entries, the machine has {} regions",
                                      c.trace.region_roles.size(), regions));
    if (!c.contents.permutation_blocks.empty()) {
        auto blocks = c.contents.permutation_blocks;
        std::sort(blocks.begin(), blocks.end());
        std::uint64_t covered = 0;
        for (const auto& [lo, hi] : blocks) {
            if (lo != covered || hi < lo)
                break;
            covered = hi;
        }
        if (covered != c.machine.total_bytes / kBasePageBytes)
            throw ConfigError(fmt::format("contents.permutation_blocks: must partition [0, {})",
                                          c.machine.total_bytes / kBasePageBytes));
    }
    if (c.name == "micro-share" && c.contents.vm_count < 2)
        throw ConfigError("contents.vm_count: page sharing needs at least 2 VMs");
    if (c.name == "micro-tmm" || c.name == "dynamic-vs-fixed") {
        if (c.sweep.empty())
            throw ConfigError("sweep: at least one unbalanced fraction is required");
        for (std::size_t i = 0; i < c.sweep.size(); ++i)
            if (!(c.sweep[i] >= 0 && c.sweep[i] <= 1))
                throw ConfigError(fmt::format("sweep[{}]: {} is outside [0, 1]", i, c.sweep[i]));
        if (c.tiers.fast_capacity == 0)
            throw ConfigError("tiers.fast_mib: must be positive");
        if (c.tiers.fast_capacity + c.tiers.slow_capacity < c.machine.total_bytes)
            throw ConfigError("tiers.slow_mib: fast and slow tiers cannot hold the machine's memory");
    } else if (c.name == "vmexit-table") {
        if (c.sweep.empty())
            throw ConfigError("sweep: at least one working-set size is required");
        for (std::size_t i = 0; i < c.sweep.size(); ++i) {
            const double v = c.sweep[i];
            if (!(v >= 2 && v <= 4096) || v != std::floor(v) || static_cast<std::uint64_t>(v) % 2 != 0)
                throw ConfigError(fmt::format("sweep[{}]: {} is not an even MiB count in [2, 4096]", i, v));
        }
    } else if (!c.sweep.empty()) {
        throw ConfigError(fmt::format("sweep: not used by {}", c.name));
    }
    validate_strategies(c);
}

json to_json_obj(const ExperimentConfig& c) {
    json roles = json::array();
    for (RegionRole r : c.trace.region_roles)
        roles.push_back(name_of(kRoles, r));
    json blocks = json::array();
    for (const auto& [lo, hi] : c.contents.permutation_blocks)
        blocks.push_back({lo, hi});
    return json{
        {"name", c.name},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"machine",
         {{"total_mib", c.machine.total_bytes >> 20},
          {"layout", name_of(kLayouts, c.machine.layout)},
          {"tlb", {{"base_entries", c.machine.tlb.base_entries}, {"huge_entries", c.machine.tlb.huge_entries}}},
          {"walk",
           {{"huge_walk_refs", c.machine.walk.huge_walk_refs}, {"base_walk_refs", c.machine.walk.base_walk_refs}}}}},
        {"trace",
         {{"pattern", name_of(kPatterns, c.trace.pattern)},
          {"hot_fraction", c.trace.hot_fraction},
          {"hot_op_fraction", c.trace.hot_op_fraction},
          {"read_fraction", c.trace.read_fraction},
          {"unbalanced_fraction", c.trace.unbalanced_fraction},
          {"target_psr", c.trace.target_psr},
          {"events", c.trace.events},
          {"region_roles", roles}}},
        {"contents",
         {{"vm_count", c.contents.vm_count},
          {"duplicate_fraction", c.contents.duplicate_fraction},
          {"zero_fraction", c.contents.zero_fraction},
          {"permutation_blocks", blocks}}},
        {"scan",
         {{"window_ticks", c.scan.window_ticks},
          {"interval_ticks", c.scan.interval_ticks},
          {"hot_threshold", c.scan.hot_threshold},
          {"sampling_fraction", c.scan.sampling_fraction}}},
        {"policy", {{"f_use", c.policy.f_use}, {"psr_lower_bound", c.policy.psr_lower_bound}}},
        {"tiers", {{"fast_mib", c.tiers.fast_capacity >> 20}, {"slow_mib", c.tiers.slow_capacity >> 20}}},
        {"cost",
         {{"tlb_hit", c.cost.tlb_hit_cost},
          {"per_walk_ref", c.cost.per_walk_ref_cost},
          {"vm_exit", c.cost.vm_exit_cost},
          {"fast_read", c.cost.fast.read},
          {"fast_write", c.cost.fast.write},
          {"slow_read", c.cost.slow.read},
          {"slow_write", c.cost.slow.write},
          {"migration_per_byte", c.cost.migration_cost_per_byte}}},
        {"strategies", c.strategies},
        {"host_mutation_rate", c.host_mutation_rate},
        {"sweep", c.sweep},
        {"epochs", c.epochs},
    };
}

// ---------------------------------------------------------------------------
// Report helpers

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error(fmt::format("cannot open {} for writing", path.string()));
    os << text;
    if (!os)
        throw Error(fmt::format("write to {} failed", path.string()));
}

std::vector<FrequencyMass> masses_of(const AccessHistogram& hist, Bytes total) {
    std::vector<FrequencyMass> out;
    Bytes covered = 0;
    for (const auto& [r, f] : hist.huge) {
        out.push_back({f, kHugePageBytes});
        covered += kHugePageBytes;
    }
    for (const auto& [g, f] : hist.base) {
        out.push_back({f, kBasePageBytes});
        covered += kBasePageBytes;
    }
    if (covered < total)
        out.push_back({0, total - covered});
    return out;
}

std::vector<FrequencyMass> masses_of(const TwoStageResult& res, Bytes total) {
    std::map<RegionIndex, const FineGrainReport*> by_region;
    for (const auto& rep : res.reports)
        by_region[rep.region] = &rep;
    std::vector<FrequencyMass> out;
    Bytes covered = 0;
    for (const auto& [r, f] : res.stage1.huge) {
        auto it = by_region.find(r);
        if (it != by_region.end() && it->second->valid) {
            const Bytes touched = Bytes{it->second->n_s()} * kBasePageBytes;
            out.push_back({f, touched});
            out.push_back({0, kHugePageBytes - touched});
        } else {
            out.push_back({f, kHugePageBytes});
        }
        covered += kHugePageBytes;
    }
    for (const auto& [g, f] : res.stage1.base) {
        out.push_back({f, kBasePageBytes});
        covered += kBasePageBytes;
    }
    if (covered < total)
        out.push_back({0, total - covered});
    return out;
}

Machine make_machine(const ExperimentConfig& c, Bytes total, RegionLayout layout) {
    return Machine(build_address_space(total, uniform_layout(total, layout), nullptr, c.machine.walk), c.machine.tlb);
}

TraceSpec trace_spec(const ExperimentConfig& c, Bytes wss, std::uint64_t default_events, std::uint64_t seed) {
    TraceSpec t = c.trace;
    t.wss = wss;
    t.events = t.events == 0 ? default_events : t.events;
    t.seed = seed;
    return t;
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

// ---------------------------------------------------------------------------
// Experiments

using Files = std::vector<std::filesystem::path>;

void run_fig2_ccdf(const ExperimentConfig& c, const std::filesystem::path& dir, Files& files) {
    const Bytes total = c.machine.total_bytes;
    const Trace trace = generate_trace(trace_spec(c, total, c.scan.window_ticks, mix64(c.seed, 1)));
    const TraceWindow window = window_of(trace, 0, c.scan.window_ticks);
    const auto intervals = static_cast<std::uint32_t>(c.scan.window_ticks / c.scan.interval_ticks);

    std::vector<std::vector<CcdfPoint>> curves;
    for (const std::string& s : c.strategies) {
        ScanConfig scan = c.scan;
        scan.mode = lookup(kScanModes, s, "strategies");
        std::vector<FrequencyMass> masses;
        if (scan.mode == ScanMode::TwoStage) {
            Machine m = make_machine(c, total, RegionLayout::Huge);
            masses = masses_of(two_stage_monitor(m, window, scan), total);
        } else {
            Machine m = make_machine(c, total, scan.mode == ScanMode::BaseScan ? RegionLayout::Base : RegionLayout::Huge);
            masses = masses_of(baseline_monitor(m, window, scan).histogram, total);
        }
        curves.push_back(ccdf(masses, intervals));
    }

    std::string out = "x";
    for (const std::string& s : c.strategies)
        out += "," + s;
    out += "\n";
    for (std::size_t i = 0; i < curves.front().size(); ++i) {
        out += std::to_string(curves.front()[i].x);
        for (const auto& curve : curves)
            out += "," + fmt_double(curve[i].fraction);
        out += "\n";
    }
    write_file(dir / "ccdf.csv", out);
    files.push_back(dir / "ccdf.csv");
}

void run_tmm_sweep(const ExperimentConfig& c, const std::filesystem::path& dir, Files& files) {
    const Bytes total = c.machine.total_bytes;
    const Tick w = c.scan.window_ticks;
    std::string epochs_csv =
        "unbalanced_fraction,strategy,epoch,cost,run_cost,fast_ratio,fast_accessed_bytes,huge_ratio_in_fast,"
        "migrated_bytes,vm_exits,splits,collapses,hp_before,hp_after\n";
    std::string plan_csv = "unbalanced_fraction,strategy,epoch,region,action,psr,hp_before,hp_after\n";

    for (std::size_t i = 0; i < c.sweep.size(); ++i) {
        TraceSpec spec = trace_spec(c, total, Tick{c.epochs} * 3 * w, mix64(c.seed, i));
        spec.unbalanced_fraction = c.sweep[i];
        const Trace trace = generate_trace(spec);
        for (const std::string& s : c.strategies) {
            TmmConfig tc{c.tiers, c.cost, c.scan, c.policy.psr_lower_bound};
            TmmSimulator sim(total, parse_tmm_strategy(s), tc, c.machine.tlb, c.machine.walk);
            for (std::uint32_t e = 0; e < c.epochs; ++e) {
                const EpochReport r = sim.run_epoch(trace, e);
                epochs_csv += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", fmt_double(c.sweep[i]),
                                          r.strategy, r.epoch, fmt_double(r.cost), fmt_double(r.run_cost),
                                          fmt_double(r.fast_ratio), r.fast_accessed_bytes,
                                          fmt_double(r.huge_ratio_in_fast), r.migrated_bytes, r.vm_exits, r.splits,
                                          r.collapses, r.hp_before, r.hp_after);
            }
            for (const PlanLogRow& p : sim.plan_log())
                plan_csv += fmt::format("{},{},{},{},{},{},{},{}\n", fmt_double(c.sweep[i]), p.strategy, p.epoch,
                                        p.region.value, p.action, fmt_double(p.psr), p.hp_before, p.hp_after);
        }
    }
    write_file(dir / "tmm_epochs.csv", epochs_csv);
    write_file(dir / "plan_log.csv", plan_csv);
    files.push_back(dir / "tmm_epochs.csv");
    files.push_back(dir / "plan_log.csv");
}

void run_micro_share(const ExperimentConfig& c, const std::filesystem::path& dir, Files& files) {
    const Bytes total = c.machine.total_bytes;
    ContentSpec cs = c.contents;
    cs.frames_per_vm = total / kBasePageBytes;
    cs.seed = mix64(c.seed, 2);
    const auto stores = generate_contents(cs);
    std::vector<Trace> traces;
    for (std::uint32_t v = 0; v < cs.vm_count; ++v)
        traces.push_back(generate_trace(trace_spec(c, total, 3 * c.scan.window_ticks, mix64(c.seed, 100 + v))));

    std::string out = "strategy,bytes_saved,saved_pct,oracle_bytes,oracle_ratio,shared_frames,cow_breaks,splits,"
                      "collapses,vm_exits";
    for (std::uint32_t v = 0; v < cs.vm_count; ++v)
        out += fmt::format(",huge_ratio_vm{}", v);
    for (std::uint32_t v = 0; v < cs.vm_count; ++v)
        out += fmt::format(",est_cost_vm{}", v);
    out += "\n";

    for (const std::string& s : c.strategies) {
        SharingSystem sys(cs.vm_count, total, c.machine.tlb, c.machine.walk);
        sys.load(stores);
        const ShareStats st = run_share_epoch(sys, traces, parse_share_strategy(s, c.policy.f_use),
                                              ShareConfig{c.scan, c.policy.psr_lower_bound, c.cost});
        const double ratio = st.oracle_bytes == 0 ? 0.0
                                                  : static_cast<double>(st.bytes_saved) /
                                                        static_cast<double>(st.oracle_bytes);
        out += fmt::format("{},{},{},{},{},{},{},{},{},{}", st.strategy, st.bytes_saved, fmt_double(st.saved_pct),
                           st.oracle_bytes, fmt_double(ratio), st.shared_frames, st.cow_breaks, st.splits,
                           st.collapses, st.vm_exits);
        for (double h : st.huge_ratio)
            out += "," + fmt_double(h);
        for (double e : st.est_cost)
            out += "," + fmt_double(e);
        out += "\n";
    }
    write_file(dir / "share_stats.csv", out);
    files.push_back(dir / "share_stats.csv");
}

void run_monitor_accuracy(const ExperimentConfig& c, const std::filesystem::path& dir, Files& files) {
    const Bytes total = c.machine.total_bytes;
    const Trace trace = generate_trace(trace_spec(c, total, c.scan.window_ticks, mix64(c.seed, 1)));
    const TraceWindow window = window_of(trace, 0, c.scan.window_ticks);
    const auto intervals = static_cast<std::uint32_t>(c.scan.window_ticks / c.scan.interval_ticks);

    std::string acc = "method,f0_20,f20_40,f40_60,f60_80,f80_100,hot_bytes,zero_bytes,vm_exits,splits,collapses,"
                      "conflicts\n";
    std::string regions = "region_id,frequency,n_s,psr,valid\n";
    for (const std::string& s : c.strategies) {
        ScanConfig scan = c.scan;
        scan.mode = lookup(kScanModes, s, "strategies");
        scan.seed = mix64(c.seed, 4);
        Machine m = make_machine(c, total, scan.mode == ScanMode::BaseScan ? RegionLayout::Base : RegionLayout::Huge);
        std::vector<FrequencyMass> masses;
        Bytes hot = 0;
        Bytes zero = 0;
        std::uint64_t splits = 0;
        std::uint64_t collapses = 0;
        if (scan.mode == ScanMode::TwoStage) {
            std::vector<RegionIndex> all;
            for (std::uint64_t r = 0; r < m.space().region_count(); ++r)
                all.push_back(RegionIndex{r});
            const auto muts = random_mutations(window, all, c.host_mutation_rate, mix64(c.seed, 3));
            const TwoStageResult res = two_stage_monitor(m, window, scan, muts);
            masses = masses_of(res, total);
            hot = two_stage_hot_bytes(res, scan.hot_threshold);
            for (const auto& rep : res.reports)
                regions += fmt::format("{},{},{},{},{}\n", rep.region.value, rep.inherited_frequency, rep.n_s(),
                                       rep.valid ? fmt_double(compute_psr(rep).psr()) : std::string(""),
                                       rep.valid ? 1 : 0);
        } else {
            if (scan.mode == ScanMode::ZeroScan) {
                ContentSpec cs = c.contents;
                cs.vm_count = 1;
                cs.frames_per_vm = total / kBasePageBytes;
                cs.seed = mix64(c.seed, 2);
                load_contents(m.space(), generate_contents(cs).front());
            }
            const BaselineResult res = baseline_monitor(m, window, scan);
            masses = masses_of(res.histogram, total);
            hot = hot_bytes(res.histogram, scan.hot_threshold);
            zero = res.zero_frames.size() * kBasePageBytes;
            splits = res.remap.splits;
            collapses = res.remap.collapses;
        }
        const auto b = frequency_buckets(masses, intervals);
        acc += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", s, b[0], b[1], b[2], b[3], b[4], hot, zero,
                           m.counters().vm_exits, splits, collapses, m.counters().conflicts);
    }
    write_file(dir / "monitor_accuracy.csv", acc);
    write_file(dir / "monitor_regions.csv", regions);
    files.push_back(dir / "monitor_accuracy.csv");
    files.push_back(dir / "monitor_regions.csv");
}

void run_vmexit_table(const ExperimentConfig& c, const std::filesystem::path& dir, Files& files) {
    std::string out = "mode,op,wss_bytes,splits,collapses,exits,entries_written,linux_work_units\n";
    for (double mib : c.sweep) {
        const Bytes wss = static_cast<Bytes>(mib) << 20;
        TraceSpec sweep;
        sweep.wss = wss;
        sweep.pattern = Pattern::Sequential;
        sweep.read_fraction = 1.0;
        sweep.events = wss / kBasePageBytes;
        sweep.seed = c.seed;
        Trace trace = generate_trace(sweep);
        // One touch per frame at its base address.
        for (std::size_t i = 0; i < trace.size(); ++i)
            trace[i].gpa = i * kBasePageBytes;

        for (const std::string& s : c.strategies) {
            const SplitMode mode = lookup(kSplitModes, s, "strategies");
            Machine m = make_machine(c, wss, RegionLayout::Huge);
            const auto regions = m.space().region_count();

            RemapStats split;
            for (std::uint64_t r = 0; r < regions; ++r)
                split_huge_page(m, RegionIndex{r}, mode, split);
            std::uint64_t before = m.counters().vm_exits;
            m.replay(trace);
            out += fmt::format("{},split,{},{},{},{},{},{}\n", s, wss, split.splits, split.collapses,
                               m.counters().vm_exits - before, split.ept_entries_written, split.linux_work_units);

            RemapStats collapse;
            for (std::uint64_t r = 0; r < regions; ++r)
                collapse_huge_region(m, RegionIndex{r}, mode, collapse);
            before = m.counters().vm_exits;
            m.replay(trace);
            out += fmt::format("{},collapse,{},{},{},{},{},{}\n", s, wss, collapse.splits, collapse.collapses,
                               m.counters().vm_exits - before, collapse.ept_entries_written,
                               collapse.linux_work_units);
        }
    }
    write_file(dir / "vmexits.csv", out);
    files.push_back(dir / "vmexits.csv");
}

} // namespace

// ---------------------------------------------------------------------------
// Public API

const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = {"fig2-ccdf",        "micro-tmm",    "micro-share",
                                                   "monitor-accuracy", "vmexit-table", "dynamic-vs-fixed"};
    return names;
}

ExperimentConfig default_config(const std::string& name) {
    if (std::find(experiment_names().begin(), experiment_names().end(), name) == experiment_names().end())
        throw ConfigError(fmt::format("name: unknown experiment '{}'", name));
    ExperimentConfig c;
    c.name = name;
    c.output_dir = "out/" + name;
    c.scan.window_ticks = 20000;
    c.scan.interval_ticks = 2000;
    c.policy.f_use = 0.85;
    c.trace.pattern = Pattern::Hotspot;
    c.trace.hot_fraction = 0.05;
    c.trace.hot_op_fraction = 0.8;
    c.trace.read_fraction = 0.5;
    c.trace.unbalanced_fraction = 0.5;
    c.trace.target_psr = 0.9;
    c.tiers = {8_MiB, 64_MiB};

    if (name == "fig2-ccdf") {
        c.strategies = {"huge-scan", "base-scan", "two-stage"};
    } else if (name == "micro-tmm" || name == "dynamic-vs-fixed") {
        c.machine.total_bytes = 40_MiB;
        c.trace.hot_fraction = 0.1;
        c.trace.hot_op_fraction = 1.0;
        c.epochs = 2;
        if (name == "micro-tmm") {
            c.strategies = {"fhpm", "hmmv-huge", "hmmv-base"};
            c.sweep = {0.0, 0.25, 0.5, 0.75, 1.0};
        } else {
            c.trace.hot_op_fraction = 0.9;
            c.strategies = {"fhpm", "fhpm-fixed-10", "fhpm-fixed-256"};
            c.sweep = {0.25, 0.5, 0.75};
        }
    } else if (name == "micro-share") {
        c.machine.total_bytes = 8_MiB;
        c.scan.window_ticks = 10000;
        c.scan.interval_ticks = 1000;
        c.trace.region_roles = {RegionRole::Balanced, RegionRole::Unbalanced, RegionRole::Unbalanced,
                                RegionRole::Cold};
        c.trace.hot_op_fraction = 1.0;
        c.trace.read_fraction = 1.0;
        c.contents.vm_count = 2;
        c.contents.duplicate_fraction = 1.0;
        c.contents.permutation_blocks = {{0, 512}, {512, 2048}};
        c.policy.f_use = 0.5;
        c.strategies = {"linux-ksm", "huge-page-share", "ingens", "zero-scan", "fhpm-share"};
    } else if (name == "monitor-accuracy") {
        c.contents.zero_fraction = 0.05;
        c.strategies = {"base-scan", "huge-scan", "split-scan", "zero-scan", "sampling-scan", "two-stage"};
    } else if (name == "vmexit-table") {
        c.strategies = {"linux-lazy", "vm-friendly"};
        c.sweep = {2, 4, 8, 16};
    }
    return c;
}

ExperimentConfig parse_config(std::string_view json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("JSON parse error: {}", e.what()));
    }
    check_keys(j, "",
               {"name", "seed", "output_dir", "machine", "trace", "contents", "scan", "policy", "tiers", "cost",
                "strategies", "host_mutation_rate", "sweep", "epochs"});
    if (!j.contains("name") || !j.at("name").is_string())
        throw ConfigError("name: required string");
    ExperimentConfig c = default_config(j.at("name").get<std::string>());

    read_uint(j, "", "seed", c.seed, 0, std::numeric_limits<std::uint64_t>::max());
    read_string(j, "", "output_dir", c.output_dir);
    read_double(j, "", "host_mutation_rate", c.host_mutation_rate, 0, 1);
    read_uint(j, "", "epochs", c.epochs, 1, 1000);

    if (j.contains("machine")) {
        const json& m = j.at("machine");
        check_keys(m, "machine", {"total_mib", "layout", "tlb", "walk"});
        std::uint64_t mib = c.machine.total_bytes >> 20;
        read_uint(m, "machine", "total_mib", mib, 2, 65536);
        if (mib % 2 != 0)
            throw ConfigError("machine.total_mib: must be a multiple of 2");
        c.machine.total_bytes = mib << 20;
        std::string layout = name_of(kLayouts, c.machine.layout);
        read_string(m, "machine", "layout", layout);
        c.machine.layout = lookup(kLayouts, layout, "machine.layout");
        if (m.contains("tlb")) {
            check_keys(m.at("tlb"), "machine.tlb", {"base_entries", "huge_entries"});
            read_uint(m.at("tlb"), "machine.tlb", "base_entries", c.machine.tlb.base_entries, 0, 1 << 20);
            read_uint(m.at("tlb"), "machine.tlb", "huge_entries", c.machine.tlb.huge_entries, 0, 1 << 20);
        }
        if (m.contains("walk")) {
            check_keys(m.at("walk"), "machine.walk", {"huge_walk_refs", "base_walk_refs"});
            read_uint(m.at("walk"), "machine.walk", "huge_walk_refs", c.machine.walk.huge_walk_refs, 0, 1000);
            read_uint(m.at("walk"), "machine.walk", "base_walk_refs", c.machine.walk.base_walk_refs, 0, 1000);
        }
    }
    if (j.contains("trace")) {
        const json& t = j.at("trace");
        check_keys(t, "trace",
                   {"pattern", "hot_fraction", "hot_op_fraction", "read_fraction", "unbalanced_fraction",
                    "target_psr", "events", "region_roles"});
        read_trace_keys(t, "trace", c.trace);
    }
    if (j.contains("contents")) {
        const json& t = j.at("contents");
        check_keys(t, "contents", {"vm_count", "duplicate_fraction", "zero_fraction", "permutation_blocks"});
        read_uint(t, "contents", "vm_count", c.contents.vm_count, 1, 64);
        read_double(t, "contents", "duplicate_fraction", c.contents.duplicate_fraction, 0, 1);
        read_double(t, "contents", "zero_fraction", c.contents.zero_fraction, 0, 1);
        if (t.contains("permutation_blocks"))
            c.contents.permutation_blocks = read_blocks(t.at("permutation_blocks"), "contents.permutation_blocks");
    }
    if (j.contains("scan")) {
        const json& t = j.at("scan");
        check_keys(t, "scan", {"window_ticks", "interval_ticks", "hot_threshold", "sampling_fraction"});
        read_uint(t, "scan", "window_ticks", c.scan.window_ticks, 1, 100'000'000);
        read_uint(t, "scan", "interval_ticks", c.scan.interval_ticks, 1, 100'000'000);
        read_uint(t, "scan", "hot_threshold", c.scan.hot_threshold, 1, 1'000'000);
        read_double(t, "scan", "sampling_fraction", c.scan.sampling_fraction, 0, 1);
    }
    if (j.contains("policy")) {
        const json& t = j.at("policy");
        check_keys(t, "policy", {"f_use", "psr_lower_bound"});
        read_double(t, "policy", "f_use", c.policy.f_use, 0, 1, true);
        read_double(t, "policy", "psr_lower_bound", c.policy.psr_lower_bound, 0, 1);
    }
    if (j.contains("tiers")) {
        const json& t = j.at("tiers");
        check_keys(t, "tiers", {"fast_mib", "slow_mib"});
        std::uint64_t fast = c.tiers.fast_capacity >> 20;
        std::uint64_t slow = c.tiers.slow_capacity >> 20;
        read_uint(t, "tiers", "fast_mib", fast, 0, 1 << 20);
        read_uint(t, "tiers", "slow_mib", slow, 0, 1 << 20);
        c.tiers = {fast << 20, slow << 20};
    }
    if (j.contains("cost")) {
        const json& t = j.at("cost");
        check_keys(t, "cost",
                   {"tlb_hit", "per_walk_ref", "vm_exit", "fast_read", "fast_write", "slow_read", "slow_write",
                    "migration_per_byte"});
        constexpr double kMax = 1e12;
        read_double(t, "cost", "tlb_hit", c.cost.tlb_hit_cost, 0, kMax);
        read_double(t, "cost", "per_walk_ref", c.cost.per_walk_ref_cost, 0, kMax);
        read_double(t, "cost", "vm_exit", c.cost.vm_exit_cost, 0, kMax);
        read_double(t, "cost", "fast_read", c.cost.fast.read, 0, kMax);
        read_double(t, "cost", "fast_write", c.cost.fast.write, 0, kMax);
        read_double(t, "cost", "slow_read", c.cost.slow.read, 0, kMax);
        read_double(t, "cost", "slow_write", c.cost.slow.write, 0, kMax);
        read_double(t, "cost", "migration_per_byte", c.cost.migration_cost_per_byte, 0, kMax);
    }
    if (j.contains("strategies")) {
        const json& s = j.at("strategies");
        if (!s.is_array())
            throw ConfigError("strategies: expected an array of strings");
        c.strategies.clear();
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!s[i].is_string())
                throw ConfigError(fmt::format("strategies[{}]: expected a string", i));
            c.strategies.push_back(s[i].get<std::string>());
        }
    }
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        if (!s.is_array())
            throw ConfigError("sweep: expected an array of numbers");
        c.sweep.clear();
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!s[i].is_number())
                throw ConfigError(fmt::format("sweep[{}]: expected a number", i));
            c.sweep.push_back(s[i].get<double>());
        }
    }
    validate_config(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw ConfigError(fmt::format("cannot open config {}", path.string()));
    std::ostringstream ss;
    ss << is.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

std::string config_to_json(const ExperimentConfig& config) { return to_json_obj(config).dump(2); }

TraceSpec parse_trace_spec(std::string_view json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("JSON parse error: {}", e.what()));
    }
    check_keys(j, "",
               {"wss_mib", "pattern", "hot_fraction", "hot_op_fraction", "read_fraction", "unbalanced_fraction",
                "target_psr", "events", "seed", "region_roles"});
    TraceSpec spec;
    spec.pattern = Pattern::Hotspot;
    std::uint64_t mib = 0;
    if (!j.contains("wss_mib"))
        throw ConfigError("wss_mib: required");
    if (!j.contains("events"))
        throw ConfigError("events: required");
    read_uint(j, "", "wss_mib", mib, 2, 65536);
    if (mib % 2 != 0)
        throw ConfigError("wss_mib: must be a multiple of 2");
    spec.wss = mib << 20;
    read_trace_keys(j, "", spec);
    if (spec.events == 0)
        throw ConfigError("events: must be positive");
    read_uint(j, "", "seed", spec.seed, 0, std::numeric_limits<std::uint64_t>::max());
    if (!spec.region_roles.empty() && spec.region_roles.size() != spec.wss / kHugePageBytes)
        throw ConfigError(fmt::format("region_roles: has {} entries, the working set has {} regions",
                                      spec.region_roles.size(), spec.wss / kHugePageBytes));
    return spec;
}

std::vector<Bytes> frequency_buckets(std::span<const FrequencyMass> masses, std::uint32_t intervals) {
    std::vector<Bytes> out(5, 0);
    for (const auto& m : masses) {
        std::size_t b = 0;
        if (intervals > 0)
            b = std::min<std::uint64_t>(4, std::uint64_t{m.frequency} * 5 / intervals);
        out[b] += m.bytes;
    }
    return out;
}

std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& config) {
    validate_config(config);
    const std::filesystem::path dir = config.output_dir;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw Error(fmt::format("cannot create output directory {}: {}", dir.string(), ec.message()));

    Files files;
    if (config.name == "fig2-ccdf")
        run_fig2_ccdf(config, dir, files);
    else if (config.name == "micro-tmm" || config.name == "dynamic-vs-fixed")
        run_tmm_sweep(config, dir, files);
    else if (config.name == "micro-share")
        run_micro_share(config, dir, files);
    else if (config.name == "monitor-accuracy")
        run_monitor_accuracy(config, dir, files);
    else if (config.name == "vmexit-table")
        run_vmexit_table(config, dir, files);
    else
        throw Error(fmt::format("unknown experiment '{}'", config.name));

    json outputs = json::array();
    for (const auto& f : files)
        outputs.push_back(f.filename().string());
    const json manifest{
        {"schema_version", kManifestSchema},
        {"experiment", config.name},
        {"seed", config.seed},
        {"simulator_version", FHPM_VERSION},
        {"outputs", outputs},
        {"config", to_json_obj(config)},
    };
    write_file(dir / "run_manifest.json", manifest.dump(2) + "\n");
    files.push_back(dir / "run_manifest.json");
    return files;
}

} // namespace fhpm
