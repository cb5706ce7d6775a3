#include "fhpm/mmu.hpp"

#include <fmt/core.h>

namespace fhpm {

bool LruTags::touch(std::uint64_t tag) {
    auto it = index_.find(tag);
    if (it == index_.end())
        return false;
    order_.splice(order_.begin(), order_, it->second);
    return true;
}

void LruTags::insert(std::uint64_t tag) {
    if (capacity_ == 0)
        return;
    if (touch(tag))
        return;
    if (order_.size() == capacity_) {
        index_.erase(order_.back());
        order_.pop_back();
    }
    order_.push_front(tag);
    index_.emplace(tag, order_.begin());
}

bool LruTags::erase(std::uint64_t tag) {
    auto it = index_.find(tag);
    if (it == index_.end())
        return false;
    order_.erase(it->second);
    index_.erase(it);
    return true;
}

void LruTags::clear() {
    order_.clear();
    index_.clear();
}

Tlb::Tlb(TlbConfig config) : base_(config.base_entries), huge_(config.huge_entries) {}

bool Tlb::lookup(GuestFrame f) {
    return huge_.touch(region_of(f).value) || base_.touch(f.value);
}

void Tlb::flush_all() {
    base_.clear();
    huge_.clear();
}

void Tlb::flush_region(RegionIndex r) {
    huge_.erase(r.value);
    if (base_.size() == 0)
        return;
    const GuestFrame first = first_frame(r);
    for (std::uint32_t i = 0; i < kFramesPerHuge; ++i)
        base_.erase(first.value + i);
}

void tlb_flush(Tlb& tlb, FlushScope scope) {
    if (std::holds_alternative<FlushAll>(scope))
        tlb.flush_all();
    else
        tlb.flush_region(std::get<RegionIndex>(scope));
}

double access_cost(const AccessOutcome& outcome, AccessKind kind, const CostModel& cost, Tier tier) {
    const TierCosts& t = tier == Tier::Fast ? cost.fast : cost.slow;
    double c = cost.tlb_hit_cost;
    c += cost.per_walk_ref_cost * outcome.walk_refs;
    if (outcome.vm_exit)
        c += cost.vm_exit_cost;
    c += kind == AccessKind::Write ? t.write : t.read;
    return c;
}

AccessOutcome access(EptSpace& space, Tlb& tlb, const AccessEvent& event) {
    const GuestFrame frame = frame_of_gpa(event.gpa);
    AccessOutcome out;

    if (tlb.lookup(frame)) {
        out.tlb_hit = true;
        out.hpa = space.translate(event.gpa).hpa;
        if (event.kind == AccessKind::Write) {
            EptEntry* leaf = space.effective_leaf(frame);
            leaf->accessed = true;
            leaf->dirty = true;
        }
        return out;
    }

    auto t = space.try_translate(event.gpa);
    if (!t) {
        out.vm_exit = true;
        out.exit_reason = ExitReason::EptViolation;
        space.refill(frame);
        t = space.translate(event.gpa);
    }
    out.hpa = t->hpa;
    out.walk_refs = t->walk_refs;
    if (t->level == LeafLevel::Huge)
        tlb.insert_huge(region_of(frame));
    else
        tlb.insert_base(frame);

    EptEntry* leaf = space.effective_leaf(frame);
    leaf->accessed = true;
    if (event.kind == AccessKind::Write)
        leaf->dirty = true;
    return out;
}

MutationOutcome host_mutate(EptSpace& space, Tlb& tlb, RegionIndex region) {
    MutationOutcome out;
    if (space.is_redirected(region)) {
        space.revert_redirection(region);
        out.conflict = true;
    }
    tlb.flush_region(region);
    return out;
}

Machine::Machine(EptSpace space, TlbConfig tlb) : space_(std::move(space)), tlb_(tlb) {}

AccessOutcome Machine::access(const AccessEvent& event) {
    AccessOutcome out = fhpm::access(space_, tlb_, event);
    ++counters_.accesses;
    if (out.tlb_hit)
        ++counters_.tlb_hits;
    counters_.walk_refs += out.walk_refs;
    if (out.vm_exit) {
        ++counters_.vm_exits;
        if (out.exit_reason == ExitReason::EptViolation)
            ++counters_.ept_violations;
    }
    if (observer_)
        observer_(event, out);
    return out;
}

void Machine::replay(std::span<const AccessEvent> events) {
    for (const AccessEvent& e : events)
        access(e);
}

MutationOutcome Machine::host_mutate(RegionIndex region) {
    MutationOutcome out = fhpm::host_mutate(space_, tlb_, region);
    ++counters_.host_mutations;
    if (out.conflict) {
        ++counters_.conflicts;
        invalidated_.push_back(region);
    }
    return out;
}

std::vector<RegionIndex> Machine::take_invalidated() {
    std::vector<RegionIndex> out;
    out.swap(invalidated_);
    return out;
}

} // namespace fhpm
