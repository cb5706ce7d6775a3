#pragma once

#include <cstdint>
#include <string_view>

#include "fhpm/mmu.hpp"

namespace fhpm {

enum class SplitMode : std::uint8_t { LinuxLazy, VmFriendly };

std::string_view to_string(SplitMode m);

struct RemapStats {
    std::uint64_t splits = 0;
    std::uint64_t collapses = 0;
    std::uint64_t ept_entries_written = 0;
    std::uint64_t vm_exits_from_lazy_refill = 0;
    std::uint64_t tlb_flushes = 0;
    Bytes copies_bytes = 0;
    // Guest-side bookkeeping steps of the Linux paths (privilege check, unmap,
    // struct page updates, ...) counted abstractly rather than simulated.
    std::uint64_t linux_work_units = 0;

    RemapStats& operator+=(const RemapStats& o);
};

// Demote a huge mapping to 512 base mappings of the same host frames.
// LinuxLazy leaves every PTE absent so each first touch takes an EPT
// violation; VmFriendly refills all 512 PTEs up front. The huge PDE's A/D
// bits are dropped.
void split_huge_page(Machine& machine, RegionIndex region, SplitMode mode, RemapStats& stats);

// Promote a fully backed, unshared base region to a freshly allocated
// contiguous huge frame run, copying content. LinuxLazy leaves the EPT slot
// empty (one violation on next touch); VmFriendly installs the huge PDE.
void collapse_huge_region(Machine& machine, RegionIndex region, SplitMode mode, RemapStats& stats);

// Why collapse_huge_region would refuse, or empty when it would proceed.
std::string_view collapse_veto(const EptSpace& space, RegionIndex region);

} // namespace fhpm
