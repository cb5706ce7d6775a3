#include "fhpm/remap.hpp"

#include <fmt/core.h>

namespace fhpm {

namespace {

constexpr std::uint64_t kLinuxSplitSteps = 5;
constexpr std::uint64_t kLinuxCollapseSteps = 4;

} // namespace

std::string_view to_string(SplitMode m) {
    return m == SplitMode::LinuxLazy ? "linux-lazy" : "vm-friendly";
}

RemapStats& RemapStats::operator+=(const RemapStats& o) {
    splits += o.splits;
    collapses += o.collapses;
    ept_entries_written += o.ept_entries_written;
    vm_exits_from_lazy_refill += o.vm_exits_from_lazy_refill;
    tlb_flushes += o.tlb_flushes;
    copies_bytes += o.copies_bytes;
    linux_work_units += o.linux_work_units;
    return *this;
}

void split_huge_page(Machine& machine, RegionIndex region, SplitMode mode, RemapStats& stats) {
    EptSpace& space = machine.space();
    if (space.is_redirected(region))
        throw Error(fmt::format("cannot split region {}: redirected to a companion", region.value));
    if (space.kind(region) != LeafKind::HugeLeaf)
        throw Error(fmt::format("cannot split region {}: not a huge leaf", region.value));

    const bool eager = mode == SplitMode::VmFriendly;
    space.map_base(region, eager);
    machine.flush_region(region);

    ++stats.splits;
    ++stats.tlb_flushes;
    stats.linux_work_units += kLinuxSplitSteps;
    if (eager)
        stats.ept_entries_written += kFramesPerHuge;
}

std::string_view collapse_veto(const EptSpace& space, RegionIndex region) {
    if (region.value >= space.region_count())
        return "region out of range";
    if (space.kind(region) != LeafKind::BaseTable || space.host_huge(region))
        return "not a base region";
    const GuestFrame first = first_frame(region);
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
        if (space.backing(GuestFrame{first.value + i}) == kNoFrame)
            return "missing base entries";
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
        if (space.host().refs(space.backing(GuestFrame{first.value + i})) > 1)
            return "shared base frame present";
    return {};
}

void collapse_huge_region(Machine& machine, RegionIndex region, SplitMode mode, RemapStats& stats) {
    EptSpace& space = machine.space();
    if (auto veto = collapse_veto(space, region); !veto.empty())
        throw Error(fmt::format("cannot collapse region {}: {}", region.value, veto));

    HostMemory& host = space.host();
    const HostFrame run = host.allocate(kFramesPerHuge, kFramesPerHuge);
    const GuestFrame first = first_frame(region);
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
        host.set_content(HostFrame{run.value + i}, space.read_content(GuestFrame{first.value + i}));

    const bool eager = mode == SplitMode::VmFriendly;
    machine.flush_region(region);
    space.map_huge(region, run, eager);

    ++stats.collapses;
    ++stats.tlb_flushes;
    stats.copies_bytes += kHugePageBytes;
    stats.linux_work_units += kLinuxCollapseSteps;
    if (eager)
        stats.ept_entries_written += 1;
}

} // namespace fhpm
