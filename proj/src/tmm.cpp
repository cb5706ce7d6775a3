#include "fhpm/tmm.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <unordered_set>

#include <fmt/core.h>

namespace fhpm {

namespace {

constexpr std::uint8_t kUnplaced = 0;

std::uint8_t code(Tier t) { return t == Tier::Fast ? 1 : 2; }
Tier other(Tier t) { return t == Tier::Fast ? Tier::Slow : Tier::Fast; }

} // namespace

std::string TmmStrategy::name() const {
    switch (kind) {
    case TmmStrategyKind::Fhpm: return "fhpm";
    case TmmStrategyKind::FhpmFixed: return fmt::format("fhpm-fixed-{}", fixed_threshold);
    case TmmStrategyKind::HmmVHuge: return "hmmv-huge";
    case TmmStrategyKind::HmmVBase: return "hmmv-base";
    }
    return "?";
}

TmmStrategy parse_tmm_strategy(const std::string& name) {
    if (name == "fhpm")
        return {TmmStrategyKind::Fhpm, 0};
    if (name == "hmmv-huge")
        return {TmmStrategyKind::HmmVHuge, 0};
    if (name == "hmmv-base")
        return {TmmStrategyKind::HmmVBase, 0};
    constexpr std::string_view prefix = "fhpm-fixed-";
    if (name.starts_with(prefix)) {
        std::uint32_t t = 0;
        const char* first = name.data() + prefix.size();
        const char* last = name.data() + name.size();
        auto [ptr, ec] = std::from_chars(first, last, t);
        if (ec == std::errc{} && ptr == last && first != last && t <= kFramesPerHuge)
            return {TmmStrategyKind::FhpmFixed, t};
    }
    throw Error(fmt::format("unknown tiered-memory strategy '{}'", name));
}

// ---------------------------------------------------------------------------
// Placement

void Placement::grow(HostFrame f) {
    if (f.value >= tier_.size()) {
        tier_.resize(f.value + 1, kUnplaced);
        freq_.resize(f.value + 1, 0);
    }
}

bool Placement::placed(HostFrame f) const { return f.value < tier_.size() && tier_[f.value] != kUnplaced; }

Tier Placement::tier(HostFrame f) const {
    if (!placed(f))
        throw Error(fmt::format("host frame {} has no tier", f.value));
    return tier_[f.value] == 1 ? Tier::Fast : Tier::Slow;
}

bool Placement::has_room(Tier t, std::uint64_t frames) const {
    const Bytes cap = t == Tier::Fast ? spec_.fast_capacity : spec_.slow_capacity;
    const std::uint64_t used = t == Tier::Fast ? fast_frames_ : slow_frames_;
    return (used + frames) * kBasePageBytes <= cap;
}

void Placement::place(HostFrame f, Tier t) {
    grow(f);
    if (tier_[f.value] == code(t))
        return;
    if (!has_room(t, 1))
        throw Error(fmt::format("{} tier is full", t == Tier::Fast ? "fast" : "slow"));
    forget(f);
    tier_[f.value] = code(t);
    ++(t == Tier::Fast ? fast_frames_ : slow_frames_);
}

void Placement::forget(HostFrame f) {
    if (!placed(f))
        return;
    --(tier_[f.value] == 1 ? fast_frames_ : slow_frames_);
    tier_[f.value] = kUnplaced;
}

void Placement::set_frequency(HostFrame f, std::uint32_t freq) {
    grow(f);
    freq_[f.value] = freq;
}

std::uint32_t Placement::frequency(HostFrame f) const { return f.value < freq_.size() ? freq_[f.value] : 0; }

std::vector<HostFrame> Placement::frames_in(Tier t) const {
    std::vector<HostFrame> out;
    for (std::uint64_t i = 0; i < tier_.size(); ++i)
        if (tier_[i] == code(t))
            out.push_back(HostFrame{i});
    return out;
}

void migrate(Placement& placement, std::span<const HostFrame> frames, Tier target, MigrationStats& stats) {
    std::set<HostFrame> wanted(frames.begin(), frames.end());
    std::vector<HostFrame> moving;
    for (HostFrame f : wanted)
        if (!placement.placed(f) || placement.tier(f) != target)
            moving.push_back(f);
    if (moving.empty())
        return;

    const Bytes cap = target == Tier::Fast ? placement.spec().fast_capacity : placement.spec().slow_capacity;
    if (wanted.size() * kBasePageBytes > cap)
        throw Error(fmt::format("{} frames exceed the target tier capacity of {} bytes", wanted.size(), cap));

    const Bytes used = target == Tier::Fast ? placement.fast_used() : placement.slow_used();
    const std::uint64_t free_frames = (cap - used) / kBasePageBytes;
    if (moving.size() > free_frames) {
        std::vector<HostFrame> victims;
        for (HostFrame f : placement.frames_in(target))
            if (!wanted.contains(f))
                victims.push_back(f);
        std::sort(victims.begin(), victims.end(), [&](HostFrame a, HostFrame b) {
            const auto fa = placement.frequency(a);
            const auto fb = placement.frequency(b);
            return fa != fb ? fa < fb : a < b;
        });
        const std::uint64_t evict = moving.size() - free_frames;
        for (std::uint64_t i = 0; i < evict; ++i) {
            placement.place(victims[i], other(target));
            stats.migrated_bytes += kBasePageBytes;
            ++stats.evicted_frames;
        }
    }
    for (HostFrame f : moving) {
        placement.place(f, target);
        stats.migrated_bytes += kBasePageBytes;
    }
}

double estimate_epoch_cost(Machine& machine, std::span<const AccessEvent> events, const Placement& placement,
                           const CostModel& cost) {
    double total = 0;
    for (const AccessEvent& e : events) {
        const AccessOutcome out = machine.access(e);
        total += access_cost(out, e.kind, cost, placement.tier(HostFrame{out.hpa >> kBasePageShift}));
    }
    return total;
}

// ---------------------------------------------------------------------------
// TmmSimulator

TmmSimulator::TmmSimulator(Bytes wss, TmmStrategy strategy, TmmConfig config, TlbConfig tlb, WalkConfig walk)
    : strategy_(strategy),
      config_(config),
      machine_(build_address_space(wss,
                                   uniform_layout(wss, strategy.kind == TmmStrategyKind::HmmVBase
                                                           ? RegionLayout::Base
                                                           : RegionLayout::Huge),
                                   nullptr, walk),
               tlb),
      placement_(config.tiers) {
    if (config.tiers.fast_capacity == 0)
        throw Error("fast tier capacity is zero");
    if (config.tiers.fast_capacity + config.tiers.slow_capacity < wss)
        throw Error("fast and slow tiers cannot hold the working set");
    if (config.scan.window_ticks == 0)
        throw Error("monitoring window is empty");
    const EptSpace& space = machine_.space();
    for (std::uint64_t g = 0; g < space.total_guest_frames(); ++g) {
        const HostFrame h = space.backing(GuestFrame{g});
        placement_.place(h, placement_.has_room(Tier::Fast, 1) ? Tier::Fast : Tier::Slow);
    }
}

std::vector<HostFrame> TmmSimulator::region_frames(RegionIndex r) const {
    std::vector<HostFrame> out(kFramesPerHuge);
    const GuestFrame first = first_frame(r);
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
        out[i] = machine_.space().backing(GuestFrame{first.value + i});
    return out;
}

void TmmSimulator::replace_region_frames(RegionIndex r, const std::vector<HostFrame>& old_frames) {
    std::uint64_t in_fast = 0;
    for (HostFrame h : old_frames) {
        if (placement_.placed(h) && placement_.tier(h) == Tier::Fast)
            ++in_fast;
        placement_.forget(h);
    }
    const Tier t = in_fast * 2 > kFramesPerHuge && placement_.has_room(Tier::Fast, kFramesPerHuge) ? Tier::Fast
                                                                                                     : Tier::Slow;
    for (HostFrame h : region_frames(r))
        placement_.place(h, t);
}

std::vector<TmmSimulator::Unit> TmmSimulator::decide_fhpm(const AccessHistogram& stage1,
                                                          const std::vector<FineGrainReport>& reports,
                                                          std::uint32_t epoch, RemapStats& remap) {
    EptSpace& space = machine_.space();
    const std::uint32_t thr = config_.scan.hot_threshold;

    PolicyConfig pc;
    pc.s_tot = space.total_bytes();
    pc.f_use = std::min(1.0, static_cast<double>(config_.tiers.fast_capacity) / static_cast<double>(pc.s_tot));
    pc.psr_lower_bound = config_.psr_lower_bound;
    const HotPagePressure hp = init_hot_page_pressure(hot_bytes(stage1, thr), pc);

    std::vector<PsrRecord> huge_recs;
    for (const auto& rep : reports)
        if (rep.valid)
            huge_recs.push_back(compute_psr(rep));

    std::map<RegionIndex, std::uint32_t> base_touched;
    std::map<RegionIndex, std::uint32_t> base_maxfreq;
    for (const auto& [f, freq] : stage1.base) {
        if (freq < thr)
            continue;
        ++base_touched[region_of(f)];
        auto& m = base_maxfreq[region_of(f)];
        m = std::max(m, freq);
    }
    std::vector<PsrRecord> base_recs;
    for (const auto& [r, touched] : base_touched)
        if (space.kind(r) == LeafKind::BaseTable && !space.host_huge(r))
            base_recs.push_back(PsrRecord{r, touched});

    Plan plan;
    if (strategy_.kind == TmmStrategyKind::FhpmFixed)
        plan = fixed_threshold_plan(huge_recs, base_recs, strategy_.fixed_threshold, hp, pc);
    else if (hp.hp > 0)
        plan = plan_demotions(hp, huge_recs, pc);
    else
        plan = plan_promotions(hp, base_recs, pc);

    hp_before_ = plan.hp_before;
    hp_after_ = plan.hp_after;
    for (const auto& e : plan.demote)
        plan_log_.push_back({strategy_.name(), epoch, e.region, "demote", e.psr(), plan.hp_before, plan.hp_after});
    for (const auto& e : plan.promote)
        plan_log_.push_back({strategy_.name(), epoch, e.region, "promote", e.psr(), plan.hp_before, plan.hp_after});

    std::set<RegionIndex> demoted;
    for (const auto& e : plan.demote) {
        split_huge_page(machine_, e.region, SplitMode::VmFriendly, remap);
        demoted.insert(e.region);
    }
    std::set<RegionIndex> promoted;
    for (const auto& e : plan.promote) {
        if (!collapse_veto(space, e.region).empty())
            continue;
        const auto old_frames = region_frames(e.region);
        collapse_huge_region(machine_, e.region, SplitMode::VmFriendly, remap);
        replace_region_frames(e.region, old_frames);
        promoted.insert(e.region);
    }

    std::vector<Unit> units;
    for (const auto& [r, freq] : stage1.huge)
        if (freq >= thr && !demoted.contains(r) && space.kind(r) == LeafKind::HugeLeaf)
            units.push_back(Unit{region_frames(r), freq, first_frame(r).value});
    for (const auto& rep : reports) {
        if (!demoted.contains(rep.region))
            continue;
        const GuestFrame first = first_frame(rep.region);
        for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
            if (rep.bits.accessed.test(i))
                units.push_back(Unit{{space.backing(GuestFrame{first.value + i})}, rep.inherited_frequency,
                                     first.value + i});
    }
    for (const auto& [f, freq] : stage1.base)
        if (freq >= thr && !promoted.contains(region_of(f)))
            units.push_back(Unit{{space.backing(f)}, freq, f.value});
    for (RegionIndex r : promoted)
        units.push_back(Unit{region_frames(r), base_maxfreq[r], first_frame(r).value});
    return units;
}

void TmmSimulator::apply_units(std::vector<Unit> units, const AccessHistogram& stage1, MigrationStats& stats) {
    const EptSpace& space = machine_.space();
    for (std::uint64_t g = 0; g < space.total_guest_frames(); ++g)
        placement_.set_frequency(space.backing(GuestFrame{g}), 0);
    for (const auto& [r, freq] : stage1.huge)
        if (space.kind(r) == LeafKind::HugeLeaf)
            for (HostFrame h : region_frames(r))
                placement_.set_frequency(h, freq);
    for (const auto& [f, freq] : stage1.base)
        placement_.set_frequency(space.backing(f), freq);
    for (const Unit& u : units)
        for (HostFrame h : u.frames)
            placement_.set_frequency(h, u.frequency);

    std::stable_sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) {
        return a.frequency != b.frequency ? a.frequency > b.frequency : a.order < b.order;
    });
    std::uint64_t room = config_.tiers.fast_capacity / kBasePageBytes;
    std::vector<HostFrame> targets;
    for (const Unit& u : units) {
        if (u.frames.size() > room)
            continue;
        room -= u.frames.size();
        targets.insert(targets.end(), u.frames.begin(), u.frames.end());
    }
    migrate(placement_, targets, Tier::Fast, stats);
}

EpochReport TmmSimulator::run_epoch(std::span<const AccessEvent> trace, std::uint32_t epoch) {
    const Tick w = config_.scan.window_ticks;
    const Tick begin = Tick{epoch} * 3 * w;
    const TraceWindow w1 = window_of(trace, begin, w);
    const TraceWindow w2 = window_of(trace, begin + w, w);
    const TraceWindow w3 = window_of(trace, begin + 2 * w, w);

    double cost = 0;
    double run_cost = 0;
    bool in_run = false;
    std::uint64_t run_accesses = 0;
    std::uint64_t run_fast = 0;
    std::unordered_set<std::uint64_t> fast_touched;
    machine_.set_observer([&](const AccessEvent& e, const AccessOutcome& out) {
        const HostFrame h{out.hpa >> kBasePageShift};
        const Tier t = placement_.tier(h);
        const double c = access_cost(out, e.kind, config_.cost, t);
        cost += c;
        if (!in_run)
            return;
        run_cost += c;
        ++run_accesses;
        if (t == Tier::Fast) {
            ++run_fast;
            fast_touched.insert(h.value);
        }
    });

    const std::uint64_t exits_before = machine_.counters().vm_exits;
    hp_before_ = hp_after_ = 0;
    RemapStats remap;
    MigrationStats mig;
    std::vector<Unit> units;
    ScanConfig scan = config_.scan;
    AccessHistogram stage1;
    const std::uint32_t thr = scan.hot_threshold;

    switch (strategy_.kind) {
    case TmmStrategyKind::Fhpm:
    case TmmStrategyKind::FhpmFixed: {
        scan.mode = ScanMode::TwoStage;
        stage1 = stage1_scan(machine_, w1, scan);
        std::vector<RegionIndex> hot;
        for (RegionIndex r : classify_hot_cold(stage1, thr).hot_regions)
            if (machine_.space().kind(r) == LeafKind::HugeLeaf)
                hot.push_back(r);
        const auto reports = stage2_fine_monitor(machine_, hot, w2, stage1);
        units = decide_fhpm(stage1, reports, epoch, remap);
        break;
    }
    case TmmStrategyKind::HmmVHuge:
        scan.mode = ScanMode::HugeScan;
        stage1 = stage1_scan(machine_, w1, scan);
        machine_.replay(w2.events);
        for (const auto& [r, freq] : stage1.huge)
            if (freq >= thr)
                units.push_back(Unit{region_frames(r), freq, first_frame(r).value});
        break;
    case TmmStrategyKind::HmmVBase:
        scan.mode = ScanMode::BaseScan;
        stage1 = stage1_scan(machine_, w1, scan);
        machine_.replay(w2.events);
        for (const auto& [f, freq] : stage1.base)
            if (freq >= thr)
                units.push_back(Unit{{machine_.space().backing(f)}, freq, f.value});
        break;
    }
    apply_units(std::move(units), stage1, mig);

    in_run = true;
    machine_.replay(w3.events);
    machine_.set_observer({});

    EpochReport rep;
    rep.strategy = strategy_.name();
    rep.epoch = epoch;
    rep.migrated_bytes = mig.migrated_bytes;
    rep.cost = cost + static_cast<double>(mig.migrated_bytes + remap.copies_bytes) * config_.cost.migration_cost_per_byte;
    rep.run_cost = run_cost;
    rep.fast_ratio = run_accesses == 0 ? 0.0 : static_cast<double>(run_fast) / static_cast<double>(run_accesses);
    rep.fast_accessed_bytes = fast_touched.size() * kBasePageBytes;
    rep.vm_exits = machine_.counters().vm_exits - exits_before;
    rep.splits = remap.splits;
    rep.collapses = remap.collapses;

    const EptSpace& space = machine_.space();
    Bytes huge_fast = 0;
    for (std::uint64_t g = 0; g < space.total_guest_frames(); ++g) {
        const GuestFrame f{g};
        if (space.is_huge_mapped(region_of(f)) && placement_.tier(space.backing(f)) == Tier::Fast)
            huge_fast += kBasePageBytes;
    }
    rep.huge_ratio_in_fast =
        placement_.fast_used() == 0 ? 0.0 : static_cast<double>(huge_fast) / static_cast<double>(placement_.fast_used());
    rep.hp_before = hp_before_;
    rep.hp_after = hp_after_;
    return rep;
}

} // namespace fhpm
