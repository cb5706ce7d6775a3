#include "fhpm/share.hpp"

#include <algorithm>
#include <functional>
#include <unordered_map>

#include <fmt/core.h>

namespace fhpm {

std::string ShareStrategy::name() const {
    switch (kind) {
    case ShareStrategyKind::FhpmShare: return "fhpm-share";
    case ShareStrategyKind::HugePageShare: return "huge-page-share";
    case ShareStrategyKind::LinuxKsm: return "linux-ksm";
    case ShareStrategyKind::Ingens: return "ingens";
    case ShareStrategyKind::ZeroScan: return "zero-scan";
    }
    return "?";
}

ShareStrategy parse_share_strategy(const std::string& name, double f_use) {
    static const std::map<std::string, ShareStrategyKind> kinds = {
        {"fhpm-share", ShareStrategyKind::FhpmShare}, {"huge-page-share", ShareStrategyKind::HugePageShare},
        {"linux-ksm", ShareStrategyKind::LinuxKsm},   {"ingens", ShareStrategyKind::Ingens},
        {"zero-scan", ShareStrategyKind::ZeroScan},
    };
    auto it = kinds.find(name);
    if (it == kinds.end())
        throw Error(fmt::format("unknown sharing strategy '{}'", name));
    return ShareStrategy{it->second, f_use};
}

// ---------------------------------------------------------------------------
// SharingSystem

SharingSystem::SharingSystem(std::uint32_t vm_count, Bytes vm_bytes, TlbConfig tlb, WalkConfig walk)
    : vm_bytes_(vm_bytes), host_(std::make_shared<HostMemory>()) {
    const auto layout = uniform_layout(vm_bytes, RegionLayout::Huge);
    vms_.reserve(vm_count);
    for (std::uint32_t i = 0; i < vm_count; ++i)
        vms_.emplace_back(build_address_space(vm_bytes, layout, host_, walk), tlb);
}

void SharingSystem::load(std::span<const ContentStore> stores) {
    if (stores.size() != vms_.size())
        throw Error(fmt::format("{} content stores for {} VMs", stores.size(), vms_.size()));
    for (std::size_t i = 0; i < vms_.size(); ++i)
        load_contents(vms_[i].space(), stores[i]);
}

PageContent SharingSystem::read(VmFrame f) const { return vm(f.vm).space().read_content(f.frame); }

Bytes SharingSystem::bytes_saved() const {
    Bytes total = 0;
    for (const auto& [h, members] : groups_)
        total += (members.size() - 1) * kBasePageBytes;
    return total;
}

bool SharingSystem::is_shared(VmFrame f) const {
    return groups_.contains(vm(f.vm).space().backing(f.frame));
}

std::size_t SharingSystem::group_size(VmFrame f) const {
    auto it = groups_.find(vm(f.vm).space().backing(f.frame));
    return it == groups_.end() ? 1 : it->second.size();
}

void SharingSystem::merge_into(VmFrame f, HostFrame target) {
    Machine& m = vms_.at(f.vm);
    m.space().remap_frame(f.frame, target, false);
    m.tlb().flush_frame(f.frame);
    groups_[target].push_back(f);
}

void SharingSystem::drop_group_member(HostFrame h, VmFrame f) {
    auto it = groups_.find(h);
    if (it == groups_.end())
        return;
    auto& members = it->second;
    members.erase(std::remove(members.begin(), members.end(), f), members.end());
    if (members.size() > 1)
        return;
    if (members.size() == 1) {
        const VmFrame last = members.front();
        EptSpace& space = vms_.at(last.vm).space();
        if (!space.host_huge(region_of(last.frame)))
            space.remap_frame(last.frame, h, true);
    }
    groups_.erase(it);
    for (auto s = stable_.begin(); s != stable_.end();)
        s = s->second == h ? stable_.erase(s) : std::next(s);
}

std::uint64_t SharingSystem::ksm_pass(std::span<const VmFrame> candidates) {
    std::multimap<std::uint64_t, VmFrame> unstable;
    std::uint64_t merges = 0;
    for (const VmFrame& c : candidates) {
        EptSpace& space = vms_.at(c.vm).space();
        if (space.host_huge(region_of(c.frame)))
            throw Error(fmt::format("VM {} frame {} is huge-mapped and cannot be merged", c.vm, c.frame.value));
        const HostFrame h = space.backing(c.frame);
        if (groups_.contains(h))
            continue;
        const PageContent pc = host_->content(h);

        bool done = false;
        auto [lo, hi] = stable_.equal_range(pc.digest);
        for (auto it = lo; it != hi; ++it) {
            if (it->second != h && same_bytes(host_->content(it->second), pc)) {
                merge_into(c, it->second);
                ++merges;
                done = true;
                break;
            }
        }
        if (done)
            continue;

        auto [ulo, uhi] = unstable.equal_range(pc.digest);
        for (auto it = ulo; it != uhi; ++it) {
            const VmFrame o = it->second;
            Machine& om = vms_.at(o.vm);
            const HostFrame ho = om.space().backing(o.frame);
            if (ho == h || groups_.contains(ho) || !same_bytes(host_->content(ho), pc))
                continue;
            groups_[ho] = {o};
            om.space().remap_frame(o.frame, ho, false);
            om.tlb().flush_frame(o.frame);
            stable_.emplace(pc.digest, ho);
            merge_into(c, ho);
            unstable.erase(it);
            ++merges;
            done = true;
            break;
        }
        if (!done)
            unstable.emplace(pc.digest, c);
    }
    return merges;
}

std::uint64_t SharingSystem::share_huge_regions() {
    struct Rep {
        std::uint32_t vm;
        RegionIndex region;
    };
    std::map<std::uint64_t, std::vector<Rep>> reps;
    std::uint64_t merged = 0;
    for (std::uint32_t v = 0; v < vms_.size(); ++v) {
        EptSpace& space = vms_[v].space();
        for (std::uint64_t ri = 0; ri < space.region_count(); ++ri) {
            const RegionIndex r{ri};
            if (space.kind(r) != LeafKind::HugeLeaf || space.is_redirected(r))
                continue;
            const GuestFrame first = first_frame(r);
            std::uint64_t key = 0;
            for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
                key = mix64(key, space.read_content(GuestFrame{first.value + i}).digest);

            bool matched = false;
            for (const Rep& rep : reps[key]) {
                const EptSpace& rs = vms_[rep.vm].space();
                const GuestFrame rf = first_frame(rep.region);
                bool equal = true;
                for (std::uint32_t i = 0; i < kFramesPerHuge && equal; ++i)
                    equal = same_bytes(rs.read_content(GuestFrame{rf.value + i}),
                                       space.read_content(GuestFrame{first.value + i}));
                if (!equal)
                    continue;
                const HostFrame base = rs.backing(rf);
                vms_[v].flush_region(r);
                space.map_huge(r, base, true);
                for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
                    auto& members = groups_[HostFrame{base.value + i}];
                    if (members.empty())
                        members.push_back(VmFrame{rep.vm, GuestFrame{rf.value + i}});
                    members.push_back(VmFrame{v, GuestFrame{first.value + i}});
                }
                ++merged;
                matched = true;
                break;
            }
            if (!matched)
                reps[key].push_back(Rep{v, r});
        }
    }
    return merged;
}

void SharingSystem::cow_write_break(VmFrame f, ShareStats& stats) {
    Machine& m = vms_.at(f.vm);
    EptSpace& space = m.space();
    const HostFrame h = space.backing(f.frame);
    if (!groups_.contains(h))
        throw Error(fmt::format("VM {} frame {} is not shared", f.vm, f.frame.value));

    const RegionIndex r = region_of(f.frame);
    if (space.host_huge(r)) {
        const GuestFrame first = first_frame(r);
        std::vector<HostFrame> old(kFramesPerHuge);
        const HostFrame run = host_->allocate(kFramesPerHuge, kFramesPerHuge);
        for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
            old[i] = space.backing(GuestFrame{first.value + i});
            host_->set_content(HostFrame{run.value + i}, host_->content(old[i]));
        }
        m.flush_region(r);
        space.map_huge(r, run, true);
        for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
            drop_group_member(old[i], VmFrame{f.vm, GuestFrame{first.value + i}});
    } else {
        const HostFrame copy = host_->allocate(1);
        host_->set_content(copy, host_->content(h));
        space.remap_frame(f.frame, copy, true);
        m.tlb().flush_frame(f.frame);
        drop_group_member(h, f);
    }
    ++stats.cow_breaks;
    ++stats.vm_exits;
}

AccessOutcome SharingSystem::access(std::uint32_t vm, const AccessEvent& event, ShareStats& stats) {
    const VmFrame f{vm, frame_of_gpa(event.gpa)};
    const bool broke = event.kind == AccessKind::Write && is_shared(f);
    if (broke)
        cow_write_break(f, stats);
    AccessOutcome out = vms_.at(vm).access(event);
    if (broke && !out.vm_exit) {
        out.vm_exit = true;
        out.exit_reason = ExitReason::EptViolation;
    }
    return out;
}

std::uint32_t SharingSystem::shared_in_region(std::uint32_t vm, RegionIndex r) const {
    const EptSpace& space = vms_.at(vm).space();
    const GuestFrame first = first_frame(r);
    std::uint32_t n = 0;
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
        if (groups_.contains(space.backing(GuestFrame{first.value + i})))
            ++n;
    return n;
}

double SharingSystem::huge_ratio(std::uint32_t vm) const {
    const EptSpace& space = vms_.at(vm).space();
    std::uint64_t huge = 0;
    for (std::uint64_t r = 0; r < space.region_count(); ++r)
        if (space.is_huge_mapped(RegionIndex{r}))
            ++huge;
    return space.region_count() == 0 ? 0.0 : static_cast<double>(huge) / static_cast<double>(space.region_count());
}

// ---------------------------------------------------------------------------
// Epoch driver

namespace {

struct EpochContext {
    SharingSystem& sys;
    std::unordered_map<std::uint64_t, std::uint32_t> digest_count;
    RemapStats remap;
    std::vector<std::pair<std::uint32_t, RegionIndex>> split;

    bool region_has_candidate(std::uint32_t vm, RegionIndex r) const {
        const GuestFrame first = first_frame(r);
        for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
            auto it = digest_count.find(sys.read(VmFrame{vm, GuestFrame{first.value + i}}).digest);
            if (it != digest_count.end() && it->second >= 2)
                return true;
        }
        return false;
    }

    bool region_has_zero(std::uint32_t vm, RegionIndex r) const {
        const GuestFrame first = first_frame(r);
        for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
            if (sys.read(VmFrame{vm, GuestFrame{first.value + i}}).zero)
                return true;
        return false;
    }

    void split_region(std::uint32_t vm, RegionIndex r, SplitMode mode) {
        if (sys.vm(vm).space().kind(r) != LeafKind::HugeLeaf)
            return;
        split_huge_page(sys.vm(vm), r, mode, remap);
        split.emplace_back(vm, r);
    }

    std::vector<VmFrame> base_frames(bool zero_only) const {
        std::vector<VmFrame> out;
        for (std::uint32_t v = 0; v < sys.vm_count(); ++v) {
            const EptSpace& space = sys.vm(v).space();
            for (std::uint64_t g = 0; g < space.total_guest_frames(); ++g) {
                const GuestFrame f{g};
                if (space.host_huge(region_of(f)))
                    continue;
                if (zero_only && !space.read_content(f).zero)
                    continue;
                out.push_back(VmFrame{v, f});
            }
        }
        return out;
    }

    std::uint32_t passes_until_fixpoint(bool zero_only, const std::function<bool()>& done) {
        std::uint32_t passes = 0;
        const auto candidates = base_frames(zero_only);
        while (true) {
            ++passes;
            if (sys.ksm_pass(candidates) == 0 || done())
                break;
        }
        return passes;
    }
};

} // namespace

ShareStats run_share_epoch(SharingSystem& system, std::span<const Trace> traces, ShareStrategy strategy,
                           const ShareConfig& config) {
    if (system.vm_count() < 2)
        throw Error("page sharing needs at least two VMs");
    if (traces.size() != system.vm_count())
        throw Error(fmt::format("{} traces for {} VMs", traces.size(), system.vm_count()));
    const Tick w = config.scan.window_ticks;
    const std::uint32_t thr = config.scan.hot_threshold;

    ShareStats st;
    st.strategy = strategy.name();
    st.oracle_bytes = dedup_oracle(system);

    EpochContext ctx{system, {}, {}, {}};
    for (std::uint32_t v = 0; v < system.vm_count(); ++v)
        for (std::uint64_t g = 0; g < system.vm(v).space().total_guest_frames(); ++g)
            ++ctx.digest_count[system.read(VmFrame{v, GuestFrame{g}}).digest];

    std::vector<std::uint64_t> exits_before;
    for (std::uint32_t v = 0; v < system.vm_count(); ++v)
        exits_before.push_back(system.vm(v).counters().vm_exits);

    const auto never = [] { return false; };
    switch (strategy.kind) {
    case ShareStrategyKind::LinuxKsm:
        for (std::uint32_t v = 0; v < system.vm_count(); ++v)
            for (std::uint64_t r = 0; r < system.vm(v).space().region_count(); ++r)
                if (ctx.region_has_candidate(v, RegionIndex{r}))
                    ctx.split_region(v, RegionIndex{r}, SplitMode::LinuxLazy);
        st.passes = ctx.passes_until_fixpoint(false, never);
        break;
    case ShareStrategyKind::HugePageShare:
        system.share_huge_regions();
        st.passes = 1;
        break;
    case ShareStrategyKind::ZeroScan:
        for (std::uint32_t v = 0; v < system.vm_count(); ++v)
            for (std::uint64_t r = 0; r < system.vm(v).space().region_count(); ++r)
                if (ctx.region_has_zero(v, RegionIndex{r}))
                    ctx.split_region(v, RegionIndex{r}, SplitMode::LinuxLazy);
        st.passes = ctx.passes_until_fixpoint(true, never);
        break;
    case ShareStrategyKind::Ingens: {
        ScanConfig scan = config.scan;
        scan.mode = ScanMode::HugeScan;
        for (std::uint32_t v = 0; v < system.vm_count(); ++v) {
            const AccessHistogram hist = stage1_scan(system.vm(v), window_of(traces[v], 0, w), scan);
            for (RegionIndex r : classify_hot_cold(hist, thr).cold_regions)
                ctx.split_region(v, r, SplitMode::LinuxLazy);
        }
        st.passes = ctx.passes_until_fixpoint(false, never);
        break;
    }
    case ShareStrategyKind::FhpmShare: {
        PolicyConfig pc;
        pc.f_use = strategy.f_use;
        pc.psr_lower_bound = config.psr_lower_bound;
        pc.s_tot = system.vm_bytes();
        validate(pc);

        std::vector<std::pair<std::uint32_t, RegionIndex>> cold;
        std::vector<std::pair<std::uint32_t, RegionIndex>> unbalanced;
        ScanConfig scan = config.scan;
        scan.mode = ScanMode::TwoStage;
        for (std::uint32_t v = 0; v < system.vm_count(); ++v) {
            Machine& m = system.vm(v);
            const AccessHistogram hist = stage1_scan(m, window_of(traces[v], 0, w), scan);
            const HotCold hc = classify_hot_cold(hist, thr);
            std::vector<RegionIndex> hot;
            for (RegionIndex r : hc.hot_regions)
                if (m.space().kind(r) == LeafKind::HugeLeaf)
                    hot.push_back(r);
            const auto reports = stage2_fine_monitor(m, hot, window_of(traces[v], w, w), hist);
            std::vector<PsrRecord> recs;
            for (const auto& rep : reports)
                if (rep.valid)
                    recs.push_back(compute_psr(rep));
            const Plan plan = plan_demotions(init_hot_page_pressure(hot_bytes(hist, thr), pc), recs, pc);
            for (RegionIndex r : hc.cold_regions)
                if (ctx.region_has_candidate(v, r))
                    cold.emplace_back(v, r);
            for (const auto& e : plan.demote)
                if (ctx.region_has_candidate(v, e.region))
                    unbalanced.emplace_back(v, e.region);
        }

        const Bytes total = system.vm_bytes() * system.vm_count();
        const auto waterline = static_cast<Bytes>(strategy.f_use * static_cast<double>(total));
        const auto below_waterline = [&] { return total - system.bytes_saved() <= waterline; };
        for (const auto* tier : {&cold, &unbalanced}) {
            if (below_waterline())
                break;
            for (const auto& [v, r] : *tier)
                ctx.split_region(v, r, SplitMode::VmFriendly);
            st.passes += ctx.passes_until_fixpoint(false, below_waterline);
        }
        for (const auto& [v, r] : ctx.split)
            if (system.shared_in_region(v, r) == 0 && collapse_veto(system.vm(v).space(), r).empty())
                collapse_huge_region(system.vm(v), r, SplitMode::VmFriendly, ctx.remap);
        break;
    }
    }

    for (std::uint32_t v = 0; v < system.vm_count(); ++v) {
        double cost = 0;
        for (const AccessEvent& e : window_of(traces[v], 2 * w, w).events) {
            const AccessOutcome out = system.access(v, e, st);
            cost += access_cost(out, e.kind, config.cost, Tier::Fast);
        }
        st.est_cost.push_back(cost);
        st.huge_ratio.push_back(system.huge_ratio(v));
        st.vm_exits += system.vm(v).counters().vm_exits - exits_before[v];
    }
    st.bytes_saved = system.bytes_saved();
    st.shared_frames = system.shared_frames();
    st.saved_pct = 100.0 * static_cast<double>(st.bytes_saved) /
                   static_cast<double>(system.vm_bytes() * system.vm_count());
    st.splits = ctx.remap.splits;
    st.collapses = ctx.remap.collapses;
    return st;
}

// ---------------------------------------------------------------------------
// Oracle

namespace {

Bytes oracle_of(std::span<const PageContent> contents) {
    std::map<PageBytes, std::uint64_t> groups;
    PageBytes buf;
    for (const PageContent& c : contents) {
        materialize(c, buf);
        ++groups[buf];
    }
    Bytes saved = 0;
    for (const auto& [bytes, n] : groups)
        saved += (n - 1) * kBasePageBytes;
    return saved;
}

} // namespace

Bytes dedup_oracle(const SharingSystem& system) {
    std::vector<PageContent> all;
    for (std::uint32_t v = 0; v < system.vm_count(); ++v)
        for (std::uint64_t g = 0; g < system.vm(v).space().total_guest_frames(); ++g)
            all.push_back(system.read(VmFrame{v, GuestFrame{g}}));
    return oracle_of(all);
}

Bytes dedup_oracle(std::span<const ContentStore> stores) {
    std::vector<PageContent> all;
    for (const auto& s : stores)
        all.insert(all.end(), s.begin(), s.end());
    return oracle_of(all);
}

} // namespace fhpm
