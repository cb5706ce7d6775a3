#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "fhpm/mmu.hpp"
#include "fhpm/remap.hpp"

namespace fhpm {

enum class ScanMode : std::uint8_t { TwoStage, SplitScan, SamplingScan, ZeroScan, HugeScan, BaseScan };

std::string_view to_string(ScanMode m);

struct ScanConfig {
    Tick window_ticks = 10000;
    Tick interval_ticks = 1000;
    std::uint32_t hot_threshold = 1;
    double sampling_fraction = 0.05;
    ScanMode mode = ScanMode::TwoStage;
    std::uint64_t seed = 0;
};

// Events of a trace with tick in [begin, begin + ticks). The span must be
// sorted by tick.
struct TraceWindow {
    std::span<const AccessEvent> events;
    Tick begin = 0;
    Tick ticks = 0;
};

TraceWindow window_of(std::span<const AccessEvent> trace, Tick begin, Tick ticks);

// Number of scan intervals in which each entry was seen accessed. Every
// huge leaf / base PTE that existed during the scan has an entry, possibly 0.
struct AccessHistogram {
    std::uint32_t intervals = 0;
    std::map<RegionIndex, std::uint32_t> huge;
    std::map<GuestFrame, std::uint32_t> base;
};

AccessHistogram stage1_scan(Machine& machine, const TraceWindow& window, const ScanConfig& config);

struct HotCold {
    std::vector<RegionIndex> hot_regions;
    std::vector<RegionIndex> cold_regions;
    std::vector<GuestFrame> hot_frames;
    std::vector<GuestFrame> cold_frames;
};

HotCold classify_hot_cold(const AccessHistogram& histogram, std::uint32_t hot_threshold);

struct FineGrainReport {
    RegionIndex region;
    FineBitmap bits;
    std::uint32_t inherited_frequency = 0;
    bool valid = true;

    std::uint32_t n_s() const { return static_cast<std::uint32_t>(bits.accessed.count()); }
    static constexpr std::uint32_t n_h = kFramesPerHuge;
};

struct Mutation {
    Tick tick = 0;
    RegionIndex region;
};

// Redirect each hot region to a companion page, replay the window once and
// restore. Scheduled host mutations fire just before the first event whose
// tick is >= their tick; any that remain fire after the last event.
std::vector<FineGrainReport> stage2_fine_monitor(Machine& machine, std::span<const RegionIndex> hot,
                                                 const TraceWindow& window,
                                                 const AccessHistogram& stage1,
                                                 std::span<const Mutation> mutations = {});

// n_s touched slices out of 512. psr() is exact in binary floating point.
struct PsrRecord {
    RegionIndex region;
    std::uint32_t touched = 0;

    double psr() const { return 1.0 - static_cast<double>(touched) / kFramesPerHuge; }
    // psr * 2 MiB, exactly.
    Bytes skew_bytes() const { return Bytes{kFramesPerHuge - touched} * kBasePageBytes; }
};

PsrRecord compute_psr(const FineGrainReport& report);

struct TwoStageResult {
    AccessHistogram stage1;
    std::vector<FineGrainReport> reports;
};

// Stage 1 over the window, then stage 2 on its hot huge regions over the
// same window.
TwoStageResult two_stage_monitor(Machine& machine, const TraceWindow& window, const ScanConfig& config,
                                 std::span<const Mutation> mutations = {});

struct BaselineResult {
    AccessHistogram histogram;
    std::vector<GuestFrame> zero_frames; // ZeroScan only
    std::vector<RegionIndex> sampled;    // SamplingScan only
    RemapStats remap;
    std::uint64_t vm_exits = 0;
};

BaselineResult baseline_monitor(Machine& machine, const TraceWindow& window, const ScanConfig& config);

// Hot-memory estimates in bytes: huge entries count 2 MiB, base entries 4 KiB.
Bytes hot_bytes(const AccessHistogram& histogram, std::uint32_t hot_threshold);
// Hot huge regions count only their touched slices; invalid reports count as
// fully hot.
Bytes two_stage_hot_bytes(const TwoStageResult& result, std::uint32_t hot_threshold);

// One mutation per event with probability `rate`, aimed at a uniformly chosen
// region of `targets`.
std::vector<Mutation> random_mutations(const TraceWindow& window, std::span<const RegionIndex> targets,
                                       double rate, std::uint64_t seed);
// Exactly n mutations on n distinct regions of `targets` at seeded ticks.
std::vector<Mutation> distinct_mutations(const TraceWindow& window, std::span<const RegionIndex> targets,
                                         std::uint32_t n, std::uint64_t seed);

} // namespace fhpm
