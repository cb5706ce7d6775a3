#include "fhpm/monitor.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "fhpm/workload.hpp"

namespace fhpm {

namespace {

AdGranularity granularity_for(ScanMode mode) {
    return mode == ScanMode::HugeScan ? AdGranularity::HugeOnly : AdGranularity::All;
}

void count_snapshot(const AdSnapshot& snap, AccessHistogram& hist) {
    for (const auto& [r, ad] : snap.huge)
        hist.huge[r] += ad.accessed ? 1 : 0;
    for (const auto& [f, ad] : snap.base)
        hist.base[f] += ad.accessed ? 1 : 0;
}

std::vector<RegionIndex> huge_leaf_regions(const EptSpace& space) {
    std::vector<RegionIndex> out;
    for (std::uint64_t r = 0; r < space.region_count(); ++r)
        if (space.kind(RegionIndex{r}) == LeafKind::HugeLeaf && !space.is_redirected(RegionIndex{r}))
            out.push_back(RegionIndex{r});
    return out;
}

void split_scan_collapse(Machine& machine, std::span<const RegionIndex> regions, const TraceWindow& window,
                         const ScanConfig& config, BaselineResult& out) {
    for (RegionIndex r : regions)
        split_huge_page(machine, r, SplitMode::LinuxLazy, out.remap);
    out.histogram = stage1_scan(machine, window, config);
    for (RegionIndex r : regions)
        if (collapse_veto(machine.space(), r).empty())
            collapse_huge_region(machine, r, SplitMode::LinuxLazy, out.remap);
}

} // namespace

std::string_view to_string(ScanMode m) {
    switch (m) {
    case ScanMode::TwoStage: return "two-stage";
    case ScanMode::SplitScan: return "split-scan";
    case ScanMode::SamplingScan: return "sampling-scan";
    case ScanMode::ZeroScan: return "zero-scan";
    case ScanMode::HugeScan: return "huge-scan";
    case ScanMode::BaseScan: return "base-scan";
    }
    return "?";
}

TraceWindow window_of(std::span<const AccessEvent> trace, Tick begin, Tick ticks) {
    auto by_tick = [](const AccessEvent& e, Tick t) { return e.tick < t; };
    auto lo = std::lower_bound(trace.begin(), trace.end(), begin, by_tick);
    auto hi = std::lower_bound(lo, trace.end(), begin + ticks, by_tick);
    return TraceWindow{std::span<const AccessEvent>(lo, hi), begin, ticks};
}

AccessHistogram stage1_scan(Machine& machine, const TraceWindow& window, const ScanConfig& config) {
    if (window.ticks == 0)
        throw Error("monitoring window is empty");
    if (config.interval_ticks == 0 || window.ticks % config.interval_ticks != 0)
        throw Error(fmt::format("interval of {} ticks does not divide the {}-tick window",
                                config.interval_ticks, window.ticks));
    const AdGranularity g = granularity_for(config.mode);
    EptSpace& space = machine.space();

    AccessHistogram hist;
    hist.intervals = static_cast<std::uint32_t>(window.ticks / config.interval_ticks);
    space.clear_and_collect_ad(g);
    machine.tlb().flush_all();

    auto it = window.events.begin();
    for (std::uint32_t k = 0; k < hist.intervals; ++k) {
        const Tick end = window.begin + (k + 1) * config.interval_ticks;
        for (; it != window.events.end() && it->tick < end; ++it)
            machine.access(*it);
        count_snapshot(space.clear_and_collect_ad(g), hist);
        machine.tlb().flush_all();
    }
    return hist;
}

HotCold classify_hot_cold(const AccessHistogram& histogram, std::uint32_t hot_threshold) {
    HotCold out;
    for (const auto& [r, freq] : histogram.huge)
        (freq >= hot_threshold ? out.hot_regions : out.cold_regions).push_back(r);
    for (const auto& [f, freq] : histogram.base)
        (freq >= hot_threshold ? out.hot_frames : out.cold_frames).push_back(f);
    return out;
}

std::vector<FineGrainReport> stage2_fine_monitor(Machine& machine, std::span<const RegionIndex> hot,
                                                 const TraceWindow& window,
                                                 const AccessHistogram& stage1,
                                                 std::span<const Mutation> mutations) {
    EptSpace& space = machine.space();
    for (RegionIndex r : hot)
        if (r.value >= space.region_count() || space.kind(r) != LeafKind::HugeLeaf || space.is_redirected(r))
            throw Error(fmt::format("region {} is not a huge leaf", r.value));

    machine.take_invalidated();
    for (RegionIndex r : hot) {
        space.redirect_to_companion(r);
        machine.flush_region(r);
    }

    std::vector<Mutation> pending(mutations.begin(), mutations.end());
    std::stable_sort(pending.begin(), pending.end(),
                     [](const Mutation& a, const Mutation& b) { return a.tick < b.tick; });
    std::size_t next = 0;
    for (const AccessEvent& e : window.events) {
        for (; next < pending.size() && pending[next].tick <= e.tick; ++next)
            machine.host_mutate(pending[next].region);
        machine.access(e);
    }
    for (; next < pending.size(); ++next)
        machine.host_mutate(pending[next].region);
    machine.take_invalidated();

    std::vector<FineGrainReport> reports;
    reports.reserve(hot.size());
    for (RegionIndex r : hot) {
        FineGrainReport rep;
        rep.region = r;
        if (auto it = stage1.huge.find(r); it != stage1.huge.end())
            rep.inherited_frequency = it->second;
        if (space.is_redirected(r)) {
            rep.bits = space.restore_companion(r);
            machine.flush_region(r);
        } else {
            rep.valid = false;
        }
        reports.push_back(rep);
    }
    return reports;
}

PsrRecord compute_psr(const FineGrainReport& report) {
    if (!report.valid)
        throw Error(fmt::format("fine-grained report for region {} was invalidated", report.region.value));
    return PsrRecord{report.region, report.n_s()};
}

TwoStageResult two_stage_monitor(Machine& machine, const TraceWindow& window, const ScanConfig& config,
                                 std::span<const Mutation> mutations) {
    TwoStageResult out;
    ScanConfig c = config;
    c.mode = ScanMode::TwoStage;
    out.stage1 = stage1_scan(machine, window, c);
    std::vector<RegionIndex> hot;
    for (RegionIndex r : classify_hot_cold(out.stage1, config.hot_threshold).hot_regions)
        if (machine.space().kind(r) == LeafKind::HugeLeaf)
            hot.push_back(r);
    out.reports = stage2_fine_monitor(machine, hot, window, out.stage1, mutations);
    return out;
}

BaselineResult baseline_monitor(Machine& machine, const TraceWindow& window, const ScanConfig& config) {
    BaselineResult out;
    const std::uint64_t exits_before = machine.counters().vm_exits;
    switch (config.mode) {
    case ScanMode::TwoStage:
        throw Error("two-stage monitoring is not a baseline");
    case ScanMode::HugeScan:
    case ScanMode::BaseScan:
        out.histogram = stage1_scan(machine, window, config);
        break;
    case ScanMode::SplitScan: {
        const auto regions = huge_leaf_regions(machine.space());
        split_scan_collapse(machine, regions, window, config, out);
        break;
    }
    case ScanMode::SamplingScan: {
        if (!(config.sampling_fraction >= 0.0 && config.sampling_fraction <= 1.0))
            throw Error("sampling_fraction is outside [0, 1]");
        std::vector<RegionIndex> regions = huge_leaf_regions(machine.space());
        const auto k = static_cast<std::size_t>(
            std::floor(config.sampling_fraction * static_cast<double>(regions.size()) + 0.5));
        Rng rng(config.seed);
        for (std::size_t i = 0; i < k; ++i)
            std::swap(regions[i], regions[i + rng.below(regions.size() - i)]);
        regions.resize(k);
        std::sort(regions.begin(), regions.end());
        out.sampled = regions;
        split_scan_collapse(machine, regions, window, config, out);
        break;
    }
    case ScanMode::ZeroScan: {
        const EptSpace& space = machine.space();
        for (std::uint64_t g = 0; g < space.total_guest_frames(); ++g)
            if (space.backing(GuestFrame{g}) != kNoFrame && space.read_content(GuestFrame{g}).zero)
                out.zero_frames.push_back(GuestFrame{g});
        break;
    }
    }
    out.vm_exits = machine.counters().vm_exits - exits_before;
    out.remap.vm_exits_from_lazy_refill = out.vm_exits;
    return out;
}

Bytes hot_bytes(const AccessHistogram& histogram, std::uint32_t hot_threshold) {
    Bytes total = 0;
    for (const auto& [r, freq] : histogram.huge)
        if (freq >= hot_threshold)
            total += kHugePageBytes;
    for (const auto& [f, freq] : histogram.base)
        if (freq >= hot_threshold)
            total += kBasePageBytes;
    return total;
}

Bytes two_stage_hot_bytes(const TwoStageResult& result, std::uint32_t hot_threshold) {
    std::map<RegionIndex, const FineGrainReport*> by_region;
    for (const auto& rep : result.reports)
        by_region[rep.region] = &rep;
    Bytes total = 0;
    for (const auto& [r, freq] : result.stage1.huge) {
        if (freq < hot_threshold)
            continue;
        auto it = by_region.find(r);
        if (it != by_region.end() && it->second->valid)
            total += Bytes{it->second->n_s()} * kBasePageBytes;
        else
            total += kHugePageBytes;
    }
    for (const auto& [f, freq] : result.stage1.base)
        if (freq >= hot_threshold)
            total += kBasePageBytes;
    return total;
}

std::vector<Mutation> random_mutations(const TraceWindow& window, std::span<const RegionIndex> targets,
                                       double rate, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate <= 1.0))
        throw Error("host mutation rate is outside [0, 1]");
    std::vector<Mutation> out;
    if (targets.empty())
        return out;
    Rng rng(seed);
    for (const AccessEvent& e : window.events)
        if (rng.bernoulli(rate))
            out.push_back(Mutation{e.tick, targets[rng.below(targets.size())]});
    return out;
}

std::vector<Mutation> distinct_mutations(const TraceWindow& window, std::span<const RegionIndex> targets,
                                         std::uint32_t n, std::uint64_t seed) {
    if (n > targets.size())
        throw Error(fmt::format("{} distinct mutations requested over {} regions", n, targets.size()));
    if (n > 0 && window.ticks == 0)
        throw Error("mutations need a non-empty window");
    std::vector<RegionIndex> pool(targets.begin(), targets.end());
    Rng rng(seed);
    std::vector<Mutation> out;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
        out.push_back(Mutation{window.begin + rng.below(window.ticks), pool[i]});
    }
    std::stable_sort(out.begin(), out.end(), [](const Mutation& a, const Mutation& b) { return a.tick < b.tick; });
    return out;
}

} // namespace fhpm
