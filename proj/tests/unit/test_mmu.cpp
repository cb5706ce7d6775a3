#include <gtest/gtest.h>

#include <set>

#include "fhpm/mmu.hpp"
#include "fhpm/remap.hpp"
#include "fhpm/workload.hpp"
#include "test_util.hpp"

using namespace fhpm;
using fhpm::test::make_machine;
using fhpm::test::rd;
using fhpm::test::wr;

TEST(MmuAccess, FirstThenSecondTouch) {
    Machine m = make_machine(4_MiB);
    const AccessOutcome first = m.access(rd(100));
    EXPECT_FALSE(first.tlb_hit);
    EXPECT_EQ(first.walk_refs, 15u);
    EXPECT_FALSE(first.vm_exit);
    EXPECT_TRUE(m.space().pde(RegionIndex{0}).accessed);

    const AccessOutcome second = m.access(rd(5000));
    EXPECT_TRUE(second.tlb_hit);
    EXPECT_EQ(second.walk_refs, 0u);
    EXPECT_EQ(second.hpa, m.space().translate(5000).hpa);
}

TEST(MmuAccess, WriteThroughCompanionSetsEntryDirty) {
    Machine m = make_machine(2_MiB);
    const RegionIndex r{0};
    m.space().redirect_to_companion(r);
    const EptEntry pde = m.space().pde(r);
    const AccessOutcome o = m.access(wr(9 * kBasePageBytes + 12));
    EXPECT_EQ(o.walk_refs, 24u);
    const CompanionPage* c = m.space().companion(r);
    ASSERT_NE(c, nullptr);
    EXPECT_TRUE(c->entries[9].accessed);
    EXPECT_TRUE(c->entries[9].dirty);
    EXPECT_FALSE(c->entries[8].accessed);
    EXPECT_EQ(m.space().pde(r), pde);
}

TEST(MmuAccess, LazyRefillTakesOneExit) {
    Machine m = make_machine(2_MiB);
    RemapStats st;
    split_huge_page(m, RegionIndex{0}, SplitMode::LinuxLazy, st);
    const AccessOutcome a = m.access(rd(0));
    EXPECT_TRUE(a.vm_exit);
    EXPECT_EQ(a.exit_reason, ExitReason::EptViolation);
    const AccessOutcome b = m.access(rd(8));
    EXPECT_FALSE(b.vm_exit);
    EXPECT_EQ(m.counters().vm_exits, 1u);
    EXPECT_EQ(m.counters().ept_violations, 1u);
}

TEST(Tlb, FlushAllEmptiesBothSets) {
    Tlb tlb;
    tlb.insert_huge(RegionIndex{1});
    tlb.insert_base(GuestFrame{7});
    tlb_flush(tlb, FlushAll{});
    EXPECT_EQ(tlb.huge_size(), 0u);
    EXPECT_EQ(tlb.base_size(), 0u);
}

TEST(Tlb, FlushRegionRemovesOnlyThatRegion) {
    Tlb tlb;
    tlb.insert_huge(RegionIndex{3});
    tlb.insert_huge(RegionIndex{4});
    tlb.insert_base(GuestFrame{3 * 512 + 1});
    tlb.insert_base(GuestFrame{3 * 512 + 511});
    tlb.insert_base(GuestFrame{4 * 512});
    tlb_flush(tlb, RegionIndex{3});
    EXPECT_FALSE(tlb.contains_huge(RegionIndex{3}));
    EXPECT_FALSE(tlb.contains_base(GuestFrame{3 * 512 + 1}));
    EXPECT_FALSE(tlb.contains_base(GuestFrame{3 * 512 + 511}));
    EXPECT_TRUE(tlb.contains_huge(RegionIndex{4}));
    EXPECT_TRUE(tlb.contains_base(GuestFrame{4 * 512}));
}

TEST(Tlb, FlushRegionOnEmptyIsNoop) {
    Tlb tlb;
    tlb_flush(tlb, RegionIndex{3});
    EXPECT_EQ(tlb.huge_size() + tlb.base_size(), 0u);
}

TEST(Tlb, LruEviction) {
    LruTags tags(2);
    tags.insert(1);
    tags.insert(2);
    EXPECT_TRUE(tags.touch(1));
    tags.insert(3); // evicts 2
    EXPECT_TRUE(tags.contains(1));
    EXPECT_FALSE(tags.contains(2));
    EXPECT_TRUE(tags.contains(3));
    EXPECT_EQ(tags.size(), 2u);
}

TEST(HostMutate, RedirectedRegionConflicts) {
    Machine m = make_machine(4_MiB);
    const RegionIndex r{1};
    const EptEntry origin = m.space().pde(r);
    m.space().redirect_to_companion(r);
    const MutationOutcome o = m.host_mutate(r);
    EXPECT_TRUE(o.conflict);
    EXPECT_EQ(m.space().kind(r), LeafKind::HugeLeaf);
    EXPECT_FALSE(m.space().is_redirected(r));
    EXPECT_EQ(m.space().companion(r), nullptr);
    EXPECT_EQ(m.space().pde(r), origin);
    EXPECT_EQ(m.take_invalidated(), std::vector<RegionIndex>{r});
    EXPECT_TRUE(m.take_invalidated().empty());
}

TEST(HostMutate, PlainRegionNoConflict) {
    Machine m = make_machine(4_MiB);
    EXPECT_FALSE(m.host_mutate(RegionIndex{0}).conflict);
    EXPECT_EQ(m.counters().conflicts, 0u);
}

TEST(HostMutate, SecondMutationSeesNoRedirection) {
    Machine m = make_machine(4_MiB);
    m.space().redirect_to_companion(RegionIndex{0});
    EXPECT_TRUE(m.host_mutate(RegionIndex{0}).conflict);
    EXPECT_FALSE(m.host_mutate(RegionIndex{0}).conflict);
    EXPECT_EQ(m.counters().conflicts, 1u);
    EXPECT_EQ(m.counters().host_mutations, 2u);
}

TEST(Cost, Examples) {
    CostModel c;
    c.tlb_hit_cost = 1;
    c.per_walk_ref_cost = 10;
    c.vm_exit_cost = 1000;
    c.fast = {1, 1};
    c.slow = {3, 3};

    AccessOutcome hit;
    hit.tlb_hit = true;
    EXPECT_DOUBLE_EQ(access_cost(hit, AccessKind::Read, c, Tier::Fast), 2.0);

    AccessOutcome miss;
    miss.walk_refs = 15;
    EXPECT_DOUBLE_EQ(access_cost(miss, AccessKind::Read, c, Tier::Fast), 152.0);

    AccessOutcome exit;
    exit.walk_refs = 24;
    exit.vm_exit = true;
    exit.exit_reason = ExitReason::EptViolation;
    EXPECT_DOUBLE_EQ(access_cost(exit, AccessKind::Read, c, Tier::Slow), 1244.0);
}

TEST(Cost, WriteUsesWriteCost) {
    CostModel c;
    AccessOutcome hit;
    hit.tlb_hit = true;
    EXPECT_DOUBLE_EQ(access_cost(hit, AccessKind::Write, c, Tier::Slow), 1.0 + c.slow.write);
}

namespace {

Trace random_trace(Rng& rng, Bytes total, std::size_t n) {
    Trace t;
    for (std::size_t i = 0; i < n; ++i)
        t.push_back({rng.below(total), rng.bernoulli(0.5) ? AccessKind::Write : AccessKind::Read, i});
    return t;
}

std::vector<RegionLayout> random_layout(Rng& rng, std::size_t regions) {
    std::vector<RegionLayout> l;
    for (std::size_t i = 0; i < regions; ++i)
        l.push_back(rng.bernoulli(0.5) ? RegionLayout::Huge : RegionLayout::Base);
    return l;
}

} // namespace

TEST(MmuProperty, AdSoundness) {
    Rng rng(21);
    for (int round = 0; round < 30; ++round) {
        const Bytes total = 8_MiB;
        const auto layout = random_layout(rng, 4);
        Machine m(build_address_space(total, layout));
        std::set<RegionIndex> redirected;
        for (std::uint64_t r = 0; r < 4; ++r)
            if (layout[r] == RegionLayout::Huge && rng.bernoulli(0.5)) {
                m.space().redirect_to_companion(RegionIndex{r});
                redirected.insert(RegionIndex{r});
            }
        const Trace t = random_trace(rng, total, rng.below(60));
        std::set<RegionIndex> want_regions;
        std::set<GuestFrame> want_frames;
        for (const auto& e : t) {
            const RegionIndex r = region_of_gpa(e.gpa);
            if (layout[r.value] == RegionLayout::Huge && !redirected.contains(r))
                want_regions.insert(r);
            else
                want_frames.insert(frame_of_gpa(e.gpa));
        }
        m.replay(t);
        const AdSnapshot snap = m.space().clear_and_collect_ad(AdGranularity::All);
        const auto regions = snap.accessed_regions();
        const auto frames = snap.accessed_frames();
        EXPECT_EQ(std::set<RegionIndex>(regions.begin(), regions.end()), want_regions);
        EXPECT_EQ(std::set<GuestFrame>(frames.begin(), frames.end()), want_frames);
    }
}

TEST(MmuProperty, TlbReach) {
    Rng rng(8);
    for (int round = 0; round < 20; ++round) {
        Machine m = make_machine(64_MiB);
        const std::uint64_t k = 1 + rng.below(32);
        Trace t;
        for (int i = 0; i < 2000; ++i)
            t.push_back(rd(rng.below(k) * kHugePageBytes + rng.below(kHugePageBytes)));
        std::uint64_t misses = 0;
        for (const auto& e : t)
            misses += m.access(e).tlb_hit ? 0 : 1;
        EXPECT_LE(misses, k);
    }
}

TEST(MmuProperty, ConflictCountMatchesRedirectedTargets) {
    Rng rng(4);
    for (int round = 0; round < 30; ++round) {
        Machine m = make_machine(16_MiB);
        std::uint64_t expected = 0;
        for (int step = 0; step < 40; ++step) {
            const RegionIndex r{rng.below(8)};
            if (rng.bernoulli(0.4)) {
                if (!m.space().is_redirected(r))
                    m.space().redirect_to_companion(r);
            } else {
                expected += m.space().is_redirected(r) ? 1 : 0;
                m.host_mutate(r);
            }
        }
        EXPECT_EQ(m.counters().conflicts, expected);
    }
}

TEST(MmuProperty, Determinism) {
    Rng seed_rng(99);
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t seed = seed_rng.next();
        std::vector<AccessOutcome> runs[2];
        std::vector<EptEntry> pdes[2];
        for (int k = 0; k < 2; ++k) {
            Rng rng(seed);
            const auto layout = random_layout(rng, 4);
            Machine m(build_address_space(8_MiB, layout), TlbConfig{8, 2});
            for (const auto& e : random_trace(rng, 8_MiB, 500))
                runs[k].push_back(m.access(e));
            for (std::uint64_t r = 0; r < 4; ++r)
                if (m.space().kind(RegionIndex{r}) == LeafKind::HugeLeaf)
                    pdes[k].push_back(m.space().pde(RegionIndex{r}));
        }
        EXPECT_EQ(runs[0], runs[1]);
        EXPECT_EQ(pdes[0], pdes[1]);
    }
}

TEST(Machine, ObserverSeesEveryAccess) {
    Machine m = make_machine(2_MiB);
    int seen = 0;
    m.set_observer([&](const AccessEvent&, const AccessOutcome&) { ++seen; });
    m.replay(std::vector<AccessEvent>{rd(0), rd(1), wr(2)});
    EXPECT_EQ(seen, 3);
    m.set_observer({});
    m.access(rd(3));
    EXPECT_EQ(seen, 3);
}
