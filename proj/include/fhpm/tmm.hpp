#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fhpm/monitor.hpp"
#include "fhpm/policy.hpp"
#include "fhpm/remap.hpp"

namespace fhpm {

struct TierSpec {
    Bytes fast_capacity = 0;
    Bytes slow_capacity = 0;
};

enum class TmmStrategyKind : std::uint8_t { Fhpm, FhpmFixed, HmmVHuge, HmmVBase };

struct TmmStrategy {
    TmmStrategyKind kind = TmmStrategyKind::Fhpm;
    std::uint32_t fixed_threshold = 0; // FhpmFixed only

    std::string name() const;
};

// Parses "fhpm", "hmmv-huge", "hmmv-base" or "fhpm-fixed-<n>".
TmmStrategy parse_tmm_strategy(const std::string& name);

struct MigrationStats {
    Bytes migrated_bytes = 0;
    std::uint64_t evicted_frames = 0;
};

// Tier of every live host frame plus the per-frame frequency evictions rank by.
class Placement {
public:
    explicit Placement(TierSpec spec) : spec_(spec) {}

    const TierSpec& spec() const { return spec_; }
    bool placed(HostFrame f) const;
    Tier tier(HostFrame f) const;
    void place(HostFrame f, Tier t);
    void forget(HostFrame f);
    bool has_room(Tier t, std::uint64_t frames) const;

    void set_frequency(HostFrame f, std::uint32_t freq);
    std::uint32_t frequency(HostFrame f) const;

    Bytes fast_used() const { return fast_frames_ * kBasePageBytes; }
    Bytes slow_used() const { return slow_frames_ * kBasePageBytes; }
    std::vector<HostFrame> frames_in(Tier t) const;

private:
    void grow(HostFrame f);

    TierSpec spec_;
    std::vector<std::uint8_t> tier_; // 0 unplaced, 1 fast, 2 slow
    std::vector<std::uint32_t> freq_;
    std::uint64_t fast_frames_ = 0;
    std::uint64_t slow_frames_ = 0;
};

// Move `frames` into `target`, evicting the coldest other residents of the
// target tier (frequency ascending, then frame index) when it is full.
void migrate(Placement& placement, std::span<const HostFrame> frames, Tier target, MigrationStats& stats);

double estimate_epoch_cost(Machine& machine, std::span<const AccessEvent> events, const Placement& placement,
                           const CostModel& cost);

struct TmmConfig {
    TierSpec tiers;
    CostModel cost;
    ScanConfig scan;
    double psr_lower_bound = 0.5;
};

struct EpochReport {
    std::string strategy;
    std::uint32_t epoch = 0;
    double fast_ratio = 0;  // run-window accesses served from fast memory
    double cost = 0;        // every window plus migration and collapse copies
    double run_cost = 0;    // run window only
    Bytes fast_accessed_bytes = 0;
    double huge_ratio_in_fast = 0;
    Bytes migrated_bytes = 0;
    std::uint64_t vm_exits = 0;
    std::uint64_t splits = 0;
    std::uint64_t collapses = 0;
    std::int64_t hp_before = 0;
    std::int64_t hp_after = 0;
};

struct PlanLogRow {
    std::string strategy;
    std::uint32_t epoch = 0;
    RegionIndex region;
    std::string action; // "demote" / "promote"
    double psr = 0;
    std::int64_t hp_before = 0;
    std::int64_t hp_after = 0;
};

// One VM on fast/slow memory. Each epoch spans three windows of
// scan.window_ticks: two monitoring windows, after which placement is
// decided, and one run window.
class TmmSimulator {
public:
    TmmSimulator(Bytes wss, TmmStrategy strategy, TmmConfig config, TlbConfig tlb = {}, WalkConfig walk = {});

    EpochReport run_epoch(std::span<const AccessEvent> trace, std::uint32_t epoch);

    const Placement& placement() const { return placement_; }
    Machine& machine() { return machine_; }
    const std::vector<PlanLogRow>& plan_log() const { return plan_log_; }
    const TmmStrategy& strategy() const { return strategy_; }

private:
    struct Unit {
        std::vector<HostFrame> frames;
        std::uint32_t frequency = 0;
        std::uint64_t order = 0; // first guest frame
    };

    std::vector<Unit> decide_fhpm(const AccessHistogram& stage1, const std::vector<FineGrainReport>& reports,
                                  std::uint32_t epoch, RemapStats& remap);
    void replace_region_frames(RegionIndex r, const std::vector<HostFrame>& old_frames);
    std::vector<HostFrame> region_frames(RegionIndex r) const;
    void apply_units(std::vector<Unit> units, const AccessHistogram& stage1, MigrationStats& stats);

    TmmStrategy strategy_;
    TmmConfig config_;
    Machine machine_;
    Placement placement_;
    std::vector<PlanLogRow> plan_log_;
    std::int64_t hp_before_ = 0;
    std::int64_t hp_after_ = 0;
};

} // namespace fhpm
