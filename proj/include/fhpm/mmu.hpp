#pragma once

#include <cstdint>
#include <functional>
#include <list>
#include <span>
#include <unordered_map>
#include <variant>
#include <vector>

#include "fhpm/ept.hpp"
#include "fhpm/types.hpp"

namespace fhpm {

enum class AccessKind : std::uint8_t { Read = 0, Write = 1 };

struct AccessEvent {
    std::uint64_t gpa = 0;
    AccessKind kind = AccessKind::Read;
    Tick tick = 0;

    friend bool operator==(const AccessEvent&, const AccessEvent&) = default;
};

using Trace = std::vector<AccessEvent>;

enum class ExitReason : std::uint8_t { None, EptViolation, Conflict };

struct AccessOutcome {
    std::uint64_t hpa = 0;
    bool tlb_hit = false;
    std::uint32_t walk_refs = 0;
    bool vm_exit = false;
    ExitReason exit_reason = ExitReason::None;

    friend bool operator==(const AccessOutcome&, const AccessOutcome&) = default;
};

struct TlbConfig {
    std::size_t base_entries = 64;
    std::size_t huge_entries = 32;
};

// Fully associative LRU set of tags.
class LruTags {
public:
    explicit LruTags(std::size_t capacity) : capacity_(capacity) {}
    // index_ holds iterators into order_, so copies would alias the source.
    LruTags(const LruTags&) = delete;
    LruTags& operator=(const LruTags&) = delete;
    LruTags(LruTags&&) = default;
    LruTags& operator=(LruTags&&) = default;

    bool touch(std::uint64_t tag);
    void insert(std::uint64_t tag);
    bool erase(std::uint64_t tag);
    bool contains(std::uint64_t tag) const { return index_.contains(tag); }
    void clear();
    std::size_t size() const { return order_.size(); }
    std::size_t capacity() const { return capacity_; }

private:
    std::size_t capacity_;
    std::list<std::uint64_t> order_; // front = most recent
    std::unordered_map<std::uint64_t, std::list<std::uint64_t>::iterator> index_;
};

// Split 4 KiB / 2 MiB TLB.
class Tlb {
public:
    explicit Tlb(TlbConfig config = {});

    bool lookup(GuestFrame f);
    void insert_huge(RegionIndex r) { huge_.insert(r.value); }
    void insert_base(GuestFrame f) { base_.insert(f.value); }
    bool contains_huge(RegionIndex r) const { return huge_.contains(r.value); }
    bool contains_base(GuestFrame f) const { return base_.contains(f.value); }
    std::size_t huge_size() const { return huge_.size(); }
    std::size_t base_size() const { return base_.size(); }

    void flush_all();
    void flush_region(RegionIndex r);
    void flush_frame(GuestFrame f) { base_.erase(f.value); }

private:
    LruTags base_;
    LruTags huge_;
};

struct FlushAll {};
using FlushScope = std::variant<FlushAll, RegionIndex>;

void tlb_flush(Tlb& tlb, FlushScope scope);

enum class Tier : std::uint8_t { Fast, Slow };

struct TierCosts {
    double read = 0;
    double write = 0;
};

struct CostModel {
    double tlb_hit_cost = 1;
    double per_walk_ref_cost = 1;
    double vm_exit_cost = 2000;
    TierCosts fast{200, 200};
    TierCosts slow{600, 1000};
    double migration_cost_per_byte = 0.05;
};

// The TLB lookup is paid on every access; a miss adds the walk.
double access_cost(const AccessOutcome& outcome, AccessKind kind, const CostModel& cost, Tier tier);

struct MutationOutcome {
    bool conflict = false;
};

// One guest memory access. On an EPT violation the leaf is lazily refilled
// from the host mapping and the walk is retried once.
AccessOutcome access(EptSpace& space, Tlb& tlb, const AccessEvent& event);

// Host-side change to the VM process mapping of `region`, delivered through
// the second-level fault handler. A redirected region loses its companion and
// gets its saved PDE back.
MutationOutcome host_mutate(EptSpace& space, Tlb& tlb, RegionIndex region);

struct MmuCounters {
    std::uint64_t accesses = 0;
    std::uint64_t tlb_hits = 0;
    std::uint64_t walk_refs = 0;
    std::uint64_t vm_exits = 0;
    std::uint64_t ept_violations = 0;
    std::uint64_t host_mutations = 0;
    std::uint64_t conflicts = 0;
};

using AccessObserver = std::function<void(const AccessEvent&, const AccessOutcome&)>;

// An address space plus its TLB and exit bookkeeping: the unit every
// experiment drives.
class Machine {
public:
    explicit Machine(EptSpace space, TlbConfig tlb = {});

    AccessOutcome access(const AccessEvent& event);
    void replay(std::span<const AccessEvent> events);
    MutationOutcome host_mutate(RegionIndex region);
    void flush_region(RegionIndex r) { tlb_.flush_region(r); }
    // Called after every access; pass an empty function to detach.
    void set_observer(AccessObserver observer) { observer_ = std::move(observer); }

    // Regions whose fine-grained monitoring was invalidated by a conflict
    // since the last call.
    std::vector<RegionIndex> take_invalidated();

    EptSpace& space() { return space_; }
    const EptSpace& space() const { return space_; }
    Tlb& tlb() { return tlb_; }
    const MmuCounters& counters() const { return counters_; }

private:
    EptSpace space_;
    Tlb tlb_;
    MmuCounters counters_;
    std::vector<RegionIndex> invalidated_;
    AccessObserver observer_;
};

} // namespace fhpm
