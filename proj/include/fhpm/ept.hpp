#pragma once

#include <array>
#include <bitset>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "fhpm/content.hpp"
#include "fhpm/types.hpp"

namespace fhpm {

enum class RegionLayout : std::uint8_t { Huge, Base };
enum class LeafKind : std::uint8_t { Unmapped, HugeLeaf, BaseTable };
enum class LeafLevel : std::uint8_t { Huge, Base, CompanionBase };
enum class AdGranularity : std::uint8_t { HugeOnly, All };

struct EptEntry {
    bool present = false;
    HostFrame frame = kNoFrame;
    bool is_huge_leaf = false; // page-size bit
    bool perm_r = false;
    bool perm_w = false;
    bool perm_x = false;
    bool accessed = false;
    bool dirty = false;
    bool redirected = false; // per-PDE tracking bit

    friend bool operator==(const EptEntry&, const EptEntry&) = default;
};

// Shadow page-table page substituted for a huge PDE while it is finely
// monitored. entries[i] maps the i-th 4 KiB slice of the original huge frame.
struct CompanionPage {
    HostFrame frame = kNoFrame;
    EptEntry origin_pde;
    std::array<EptEntry, kFramesPerHuge> entries{};
};

struct AdBits {
    bool accessed = false;
    bool dirty = false;

    friend bool operator==(const AdBits&, const AdBits&) = default;
};

// A/D values read by one clear_and_collect_ad pass. `huge` holds one record per
// huge-leaf PDE, `base` one record per base PTE or companion entry, each in
// ascending index order.
struct AdSnapshot {
    std::vector<std::pair<RegionIndex, AdBits>> huge;
    std::vector<std::pair<GuestFrame, AdBits>> base;

    std::vector<RegionIndex> accessed_regions() const;
    std::vector<GuestFrame> accessed_frames() const;
};

struct FineBitmap {
    std::bitset<kFramesPerHuge> accessed;
    std::bitset<kFramesPerHuge> dirty;
};

struct Translation {
    std::uint64_t hpa = 0;
    LeafLevel level = LeafLevel::Huge;
    std::uint32_t walk_refs = 0;
};

// Two-dimensional walk lengths: a 2 MiB leaf skips the last level of both
// dimensions.
struct WalkConfig {
    std::uint32_t huge_walk_refs = 15;
    std::uint32_t base_walk_refs = 24;
};

class TranslationFault : public Error {
public:
    explicit TranslationFault(std::uint64_t gpa);
    std::uint64_t gpa() const { return gpa_; }

private:
    std::uint64_t gpa_;
};

// Host-physical memory shared by every address space on one simulated host:
// a monotone frame allocator, per-frame logical content and a mapping
// reference count (a frame with refs > 1 is shared).
class HostMemory {
public:
    HostFrame allocate(std::uint64_t count, std::uint64_t align = 1);
    std::uint64_t allocated_frames() const { return next_; }
    std::uint64_t live_frames() const { return live_; }

    const PageContent& content(HostFrame f) const;
    void set_content(HostFrame f, const PageContent& c);

    void retain(HostFrame f);
    void release(HostFrame f);
    std::uint32_t refs(HostFrame f) const;

private:
    void check(HostFrame f) const;

    std::uint64_t next_ = 0;
    std::uint64_t live_ = 0;
    std::vector<PageContent> content_;
    std::vector<std::uint32_t> refs_;
};

// Hypervisor-side second-level address space. Besides the EPT directory it
// keeps the host process mapping ("backing") that lazy refills consult: EPT
// leaves are a cache of that mapping which may be populated eagerly or on
// the first EPT violation.
class EptSpace {
public:
    EptSpace(Bytes total_bytes, std::span<const RegionLayout> layout,
             std::shared_ptr<HostMemory> host, WalkConfig walk);

    Bytes total_bytes() const { return total_frames_ * kBasePageBytes; }
    std::uint64_t total_guest_frames() const { return total_frames_; }
    std::uint64_t region_count() const { return slots_.size(); }
    const WalkConfig& walk_config() const { return walk_; }

    LeafKind kind(RegionIndex r) const;
    bool is_redirected(RegionIndex r) const;
    const EptEntry& pde(RegionIndex r) const;
    std::span<const EptEntry> base_table(RegionIndex r) const;
    const CompanionPage* companion(RegionIndex r) const;
    std::vector<RegionIndex> redirected_regions() const;
    std::size_t companion_count() const { return companions_.size(); }
    std::size_t peak_companion_count() const { return peak_companions_; }

    HostFrame backing(GuestFrame f) const;
    bool host_huge(RegionIndex r) const;
    bool is_huge_mapped(RegionIndex r) const; // HugeLeaf in the EPT or huge in the host mapping

    // Leaf entry the MMU sets A/D bits on for this frame, or nullptr when the
    // walk would fault.
    EptEntry* effective_leaf(GuestFrame f);

    std::optional<Translation> try_translate(std::uint64_t gpa) const;
    Translation translate(std::uint64_t gpa) const;

    AdSnapshot clear_and_collect_ad(AdGranularity granularity);

    HostFrame redirect_to_companion(RegionIndex r);
    FineBitmap restore_companion(RegionIndex r);
    // Conflict path: recycle the companion and put the saved PDE back as-is.
    void revert_redirection(RegionIndex r);

    // Lazy EPT refill of the leaf covering `f` from the host mapping. Returns
    // false when the leaf was already populated; throws when nothing backs it.
    bool refill(GuestFrame f);

    // Host mapping of region r becomes one contiguous 2 MiB run at `base`.
    // populate installs the huge PDE immediately, otherwise the EPT slot is
    // left unmapped until the next violation.
    void map_huge(RegionIndex r, HostFrame base, bool populate);
    // Host mapping of region r becomes 512 independent frames (the current
    // backing). The EPT slot becomes a page table whose PTEs are present iff
    // populate.
    void map_base(RegionIndex r, bool populate);
    // Point one base-mapped guest frame at another host frame.
    void remap_frame(GuestFrame f, HostFrame target, bool writable);

    HostMemory& host() { return *host_; }
    const HostMemory& host() const { return *host_; }
    const std::shared_ptr<HostMemory>& host_ptr() const { return host_; }

    PageContent read_content(GuestFrame f) const;

private:
    struct Slot {
        LeafKind kind = LeafKind::Unmapped;
        EptEntry pde;
        std::vector<EptEntry> table; // kFramesPerHuge entries when BaseTable
        bool host_huge = false;
    };

    Slot& slot(RegionIndex r);
    const Slot& slot(RegionIndex r) const;
    static EptEntry fresh_entry(HostFrame frame, bool huge);

    std::uint64_t total_frames_ = 0;
    WalkConfig walk_;
    std::shared_ptr<HostMemory> host_;
    std::vector<Slot> slots_;
    std::vector<HostFrame> backing_;
    std::map<RegionIndex, CompanionPage> companions_;
    std::size_t peak_companions_ = 0;
};

EptSpace build_address_space(Bytes total_bytes, std::span<const RegionLayout> layout,
                             std::shared_ptr<HostMemory> host = nullptr, WalkConfig walk = {});

// Uniform layout helper.
std::vector<RegionLayout> uniform_layout(Bytes total_bytes, RegionLayout kind);

} // namespace fhpm
