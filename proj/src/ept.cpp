#include "fhpm/ept.hpp"

#include <fmt/core.h>

namespace fhpm {

namespace {

const PageContent& zero_content() {
    static const PageContent z = PageContent::zero_page();
    return z;
}

} // namespace

TranslationFault::TranslationFault(std::uint64_t gpa)
    : Error(fmt::format("translation fault at gpa {:#x}", gpa)), gpa_(gpa) {}

std::vector<RegionIndex> AdSnapshot::accessed_regions() const {
    std::vector<RegionIndex> out;
    for (const auto& [r, bits] : huge)
        if (bits.accessed)
            out.push_back(r);
    return out;
}

std::vector<GuestFrame> AdSnapshot::accessed_frames() const {
    std::vector<GuestFrame> out;
    for (const auto& [f, bits] : base)
        if (bits.accessed)
            out.push_back(f);
    return out;
}

// ---------------------------------------------------------------------------
// HostMemory

HostFrame HostMemory::allocate(std::uint64_t count, std::uint64_t align) {
    if (count == 0)
        throw Error("host allocation of zero frames");
    if (align == 0)
        align = 1;
    std::uint64_t base = (next_ + align - 1) / align * align;
    next_ = base + count;
    content_.resize(next_, zero_content());
    refs_.resize(next_, 0);
    return HostFrame{base};
}

void HostMemory::check(HostFrame f) const {
    if (f.value >= next_)
        throw Error(fmt::format("host frame {} was never allocated", f.value));
}

const PageContent& HostMemory::content(HostFrame f) const {
    check(f);
    return content_[f.value];
}

void HostMemory::set_content(HostFrame f, const PageContent& c) {
    check(f);
    content_[f.value] = c;
}

void HostMemory::retain(HostFrame f) {
    check(f);
    if (refs_[f.value]++ == 0)
        ++live_;
}

void HostMemory::release(HostFrame f) {
    check(f);
    if (refs_[f.value] == 0)
        throw Error(fmt::format("release of unreferenced host frame {}", f.value));
    if (--refs_[f.value] == 0)
        --live_;
}

std::uint32_t HostMemory::refs(HostFrame f) const {
    check(f);
    return refs_[f.value];
}

// ---------------------------------------------------------------------------
// EptSpace

EptEntry EptSpace::fresh_entry(HostFrame frame, bool huge) {
    EptEntry e;
    e.present = true;
    e.frame = frame;
    e.is_huge_leaf = huge;
    e.perm_r = e.perm_w = e.perm_x = true;
    return e;
}

EptSpace::EptSpace(Bytes total_bytes, std::span<const RegionLayout> layout,
                   std::shared_ptr<HostMemory> host, WalkConfig walk)
    : walk_(walk), host_(std::move(host)) {
    if (total_bytes == 0)
        throw Error("address space size is zero");
    if (total_bytes % kHugePageBytes != 0)
        throw Error(fmt::format("address space size {} is not a multiple of 2 MiB", total_bytes));
    const std::uint64_t regions = total_bytes / kHugePageBytes;
    if (layout.size() != regions)
        throw Error(fmt::format("layout length mismatch: {} regions, layout has {}", regions,
                                layout.size()));
    if (!host_)
        host_ = std::make_shared<HostMemory>();

    total_frames_ = regions * kFramesPerHuge;
    slots_.resize(regions);
    backing_.assign(total_frames_, kNoFrame);

    for (std::uint64_t r = 0; r < regions; ++r) {
        Slot& s = slots_[r];
        const GuestFrame first = first_frame(RegionIndex{r});
        if (layout[r] == RegionLayout::Huge) {
            HostFrame base = host_->allocate(kFramesPerHuge, kFramesPerHuge);
            for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
                backing_[first.value + i] = HostFrame{base.value + i};
                host_->retain(backing_[first.value + i]);
            }
            s.kind = LeafKind::HugeLeaf;
            s.host_huge = true;
            s.pde = fresh_entry(base, true);
        } else {
            s.kind = LeafKind::BaseTable;
            s.host_huge = false;
            s.table.resize(kFramesPerHuge);
            for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
                HostFrame f = host_->allocate(1);
                host_->retain(f);
                backing_[first.value + i] = f;
                s.table[i] = fresh_entry(f, false);
            }
        }
    }
}

EptSpace::Slot& EptSpace::slot(RegionIndex r) {
    if (r.value >= slots_.size())
        throw Error(fmt::format("region {} out of range ({} regions)", r.value, slots_.size()));
    return slots_[r.value];
}

const EptSpace::Slot& EptSpace::slot(RegionIndex r) const {
    if (r.value >= slots_.size())
        throw Error(fmt::format("region {} out of range ({} regions)", r.value, slots_.size()));
    return slots_[r.value];
}

LeafKind EptSpace::kind(RegionIndex r) const { return slot(r).kind; }

bool EptSpace::is_redirected(RegionIndex r) const {
    const Slot& s = slot(r);
    return s.kind == LeafKind::HugeLeaf && s.pde.redirected;
}

const EptEntry& EptSpace::pde(RegionIndex r) const {
    const Slot& s = slot(r);
    if (s.kind != LeafKind::HugeLeaf)
        throw Error(fmt::format("region {} has no huge directory entry", r.value));
    return s.pde;
}

std::span<const EptEntry> EptSpace::base_table(RegionIndex r) const {
    const Slot& s = slot(r);
    if (s.kind != LeafKind::BaseTable)
        throw Error(fmt::format("region {} is not a base table", r.value));
    return s.table;
}

const CompanionPage* EptSpace::companion(RegionIndex r) const {
    auto it = companions_.find(r);
    return it == companions_.end() ? nullptr : &it->second;
}

std::vector<RegionIndex> EptSpace::redirected_regions() const {
    std::vector<RegionIndex> out;
    for (const auto& [r, c] : companions_)
        out.push_back(r);
    return out;
}

HostFrame EptSpace::backing(GuestFrame f) const {
    if (f.value >= total_frames_)
        throw Error(fmt::format("guest frame {} out of range", f.value));
    return backing_[f.value];
}

bool EptSpace::host_huge(RegionIndex r) const { return slot(r).host_huge; }

bool EptSpace::is_huge_mapped(RegionIndex r) const {
    const Slot& s = slot(r);
    return s.kind == LeafKind::HugeLeaf || (s.kind == LeafKind::Unmapped && s.host_huge);
}

EptEntry* EptSpace::effective_leaf(GuestFrame f) {
    Slot& s = slot(region_of(f));
    const std::uint32_t off = offset_in_region(f);
    switch (s.kind) {
    case LeafKind::HugeLeaf:
        if (s.pde.redirected)
            return &companions_.at(region_of(f)).entries[off];
        return &s.pde;
    case LeafKind::BaseTable:
        return s.table[off].present ? &s.table[off] : nullptr;
    case LeafKind::Unmapped:
        break;
    }
    return nullptr;
}

std::optional<Translation> EptSpace::try_translate(std::uint64_t gpa) const {
    if (gpa >= total_bytes())
        throw Error(fmt::format("gpa {:#x} outside the {}-byte guest space", gpa, total_bytes()));
    const GuestFrame f = frame_of_gpa(gpa);
    const RegionIndex r = region_of(f);
    const Slot& s = slots_[r.value];
    const std::uint32_t off = offset_in_region(f);
    switch (s.kind) {
    case LeafKind::HugeLeaf:
        if (s.pde.redirected) {
            const EptEntry& e = companions_.at(r).entries[off];
            return Translation{e.frame.value * kBasePageBytes + (gpa & (kBasePageBytes - 1)),
                               LeafLevel::CompanionBase, walk_.base_walk_refs};
        }
        return Translation{s.pde.frame.value * kBasePageBytes + (gpa & (kHugePageBytes - 1)),
                           LeafLevel::Huge, walk_.huge_walk_refs};
    case LeafKind::BaseTable:
        if (!s.table[off].present)
            return std::nullopt;
        return Translation{s.table[off].frame.value * kBasePageBytes + (gpa & (kBasePageBytes - 1)),
                           LeafLevel::Base, walk_.base_walk_refs};
    case LeafKind::Unmapped:
        break;
    }
    return std::nullopt;
}

Translation EptSpace::translate(std::uint64_t gpa) const {
    auto t = try_translate(gpa);
    if (!t)
        throw TranslationFault(gpa);
    return *t;
}

AdSnapshot EptSpace::clear_and_collect_ad(AdGranularity granularity) {
    AdSnapshot snap;
    for (std::uint64_t r = 0; r < slots_.size(); ++r) {
        Slot& s = slots_[r];
        const GuestFrame first = first_frame(RegionIndex{r});
        if (s.kind == LeafKind::HugeLeaf && s.pde.redirected) {
            auto& comp = companions_.at(RegionIndex{r});
            for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
                EptEntry& e = comp.entries[i];
                snap.base.emplace_back(GuestFrame{first.value + i}, AdBits{e.accessed, e.dirty});
                e.accessed = e.dirty = false;
            }
        } else if (s.kind == LeafKind::HugeLeaf) {
            snap.huge.emplace_back(RegionIndex{r}, AdBits{s.pde.accessed, s.pde.dirty});
            s.pde.accessed = s.pde.dirty = false;
        } else if (s.kind == LeafKind::BaseTable && granularity == AdGranularity::All) {
            for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
                EptEntry& e = s.table[i];
                if (!e.present)
                    continue;
                snap.base.emplace_back(GuestFrame{first.value + i}, AdBits{e.accessed, e.dirty});
                e.accessed = e.dirty = false;
            }
        }
    }
    return snap;
}

HostFrame EptSpace::redirect_to_companion(RegionIndex r) {
    Slot& s = slot(r);
    if (s.kind != LeafKind::HugeLeaf)
        throw Error(fmt::format("cannot redirect region {}: not a huge leaf", r.value));
    if (s.pde.redirected)
        throw Error(fmt::format("cannot redirect region {}: already redirected", r.value));

    CompanionPage comp;
    comp.frame = host_->allocate(1);
    comp.origin_pde = s.pde;
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
        EptEntry& e = comp.entries[i];
        e.present = true;
        e.frame = HostFrame{s.pde.frame.value + i};
        e.is_huge_leaf = false;
        e.perm_r = s.pde.perm_r;
        e.perm_w = s.pde.perm_w;
        e.perm_x = s.pde.perm_x;
    }
    s.pde.frame = comp.frame;
    s.pde.is_huge_leaf = false;
    s.pde.redirected = true;
    const HostFrame handle = comp.frame;
    companions_.emplace(r, comp);
    peak_companions_ = std::max(peak_companions_, companions_.size());
    return handle;
}

FineBitmap EptSpace::restore_companion(RegionIndex r) {
    Slot& s = slot(r);
    if (s.kind != LeafKind::HugeLeaf || !s.pde.redirected)
        throw Error(fmt::format("cannot restore region {}: not redirected", r.value));
    auto it = companions_.find(r);
    FineBitmap bits;
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
        bits.accessed[i] = it->second.entries[i].accessed;
        bits.dirty[i] = it->second.entries[i].dirty;
    }
    s.pde = it->second.origin_pde;
    s.pde.accessed = bits.accessed.any();
    s.pde.dirty = bits.dirty.any();
    companions_.erase(it);
    return bits;
}

void EptSpace::revert_redirection(RegionIndex r) {
    Slot& s = slot(r);
    if (s.kind != LeafKind::HugeLeaf || !s.pde.redirected)
        throw Error(fmt::format("cannot revert region {}: not redirected", r.value));
    auto it = companions_.find(r);
    s.pde = it->second.origin_pde;
    companions_.erase(it);
}

bool EptSpace::refill(GuestFrame f) {
    const RegionIndex r = region_of(f);
    Slot& s = slot(r);
    const std::uint32_t off = offset_in_region(f);
    const GuestFrame first = first_frame(r);
    switch (s.kind) {
    case LeafKind::HugeLeaf:
        return false;
    case LeafKind::BaseTable:
        if (s.table[off].present)
            return false;
        break;
    case LeafKind::Unmapped:
        if (s.host_huge) {
            const HostFrame base = backing_[first.value];
            if (base == kNoFrame)
                throw TranslationFault(f.value * kBasePageBytes);
            s.kind = LeafKind::HugeLeaf;
            s.pde = fresh_entry(base, true);
            return true;
        }
        s.kind = LeafKind::BaseTable;
        s.table.assign(kFramesPerHuge, EptEntry{});
        break;
    }
    const HostFrame target = backing_[f.value];
    if (target == kNoFrame)
        throw TranslationFault(f.value * kBasePageBytes);
    EptEntry e = fresh_entry(target, false);
    e.perm_w = host_->refs(target) <= 1;
    s.table[off] = e;
    return true;
}

void EptSpace::map_huge(RegionIndex r, HostFrame base, bool populate) {
    Slot& s = slot(r);
    if (s.kind == LeafKind::HugeLeaf && s.pde.redirected)
        throw Error(fmt::format("region {} is redirected; restore it before remapping", r.value));
    if (base.value % kFramesPerHuge != 0)
        throw Error(fmt::format("huge mapping base {} is not 512-aligned", base.value));
    const GuestFrame first = first_frame(r);
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
        HostFrame& b = backing_[first.value + i];
        const HostFrame next{base.value + i};
        host_->retain(next);
        if (b != kNoFrame)
            host_->release(b);
        b = next;
    }
    s.host_huge = true;
    s.table.clear();
    if (populate) {
        s.kind = LeafKind::HugeLeaf;
        s.pde = fresh_entry(base, true);
    } else {
        s.kind = LeafKind::Unmapped;
        s.pde = EptEntry{};
    }
}

void EptSpace::map_base(RegionIndex r, bool populate) {
    Slot& s = slot(r);
    if (s.kind == LeafKind::HugeLeaf && s.pde.redirected)
        throw Error(fmt::format("region {} is redirected; restore it before remapping", r.value));
    const GuestFrame first = first_frame(r);
    s.host_huge = false;
    s.kind = LeafKind::BaseTable;
    s.pde = EptEntry{};
    s.table.assign(kFramesPerHuge, EptEntry{});
    if (!populate)
        return;
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i) {
        const HostFrame b = backing_[first.value + i];
        if (b == kNoFrame)
            continue;
        EptEntry e = fresh_entry(b, false);
        e.perm_w = host_->refs(b) <= 1;
        s.table[i] = e;
    }
}

void EptSpace::remap_frame(GuestFrame f, HostFrame target, bool writable) {
    const RegionIndex r = region_of(f);
    Slot& s = slot(r);
    if (s.host_huge)
        throw Error(fmt::format("guest frame {} lies in huge-mapped region {}", f.value, r.value));
    HostFrame& b = backing_[f.value];
    host_->retain(target);
    if (b != kNoFrame)
        host_->release(b);
    b = target;
    if (s.kind == LeafKind::BaseTable) {
        EptEntry& e = s.table[offset_in_region(f)];
        const bool was_present = e.present;
        e = fresh_entry(target, false);
        e.present = was_present;
        e.perm_w = writable;
    }
}

PageContent EptSpace::read_content(GuestFrame f) const {
    const HostFrame b = backing(f);
    if (b == kNoFrame)
        throw Error(fmt::format("guest frame {} is not backed", f.value));
    return host_->content(b);
}

EptSpace build_address_space(Bytes total_bytes, std::span<const RegionLayout> layout,
                             std::shared_ptr<HostMemory> host, WalkConfig walk) {
    return EptSpace(total_bytes, layout, std::move(host), walk);
}

std::vector<RegionLayout> uniform_layout(Bytes total_bytes, RegionLayout kind) {
    return std::vector<RegionLayout>(total_bytes / kHugePageBytes, kind);
}

} // namespace fhpm
