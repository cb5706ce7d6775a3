#include <gtest/gtest.h>

#include "fhpm/tmm.hpp"
#include "fhpm/workload.hpp"
#include "test_util.hpp"

using namespace fhpm;
using fhpm::test::make_machine;
using fhpm::test::rd;

namespace {

std::vector<HostFrame> frames(std::uint64_t first, std::uint64_t count) {
    std::vector<HostFrame> out;
    for (std::uint64_t i = 0; i < count; ++i)
        out.push_back(HostFrame{first + i});
    return out;
}

TmmConfig micro_config(Bytes fast, Bytes slow) {
    TmmConfig c;
    c.tiers = {fast, slow};
    c.scan.window_ticks = 20000;
    c.scan.interval_ticks = 2000;
    return c;
}

Trace micro_trace(double unbalanced, std::uint64_t seed, std::uint32_t epochs = 1) {
    TraceSpec spec;
    spec.wss = 40_MiB;
    spec.pattern = Pattern::Hotspot;
    spec.hot_fraction = 0.1;
    spec.hot_op_fraction = 1.0;
    spec.unbalanced_fraction = unbalanced;
    spec.target_psr = 0.9;
    spec.events = epochs * 3 * 20000ull;
    spec.seed = seed;
    return generate_trace(spec);
}

EpochReport run_one(const char* strategy, const Trace& t, Bytes fast = 8_MiB) {
    TmmSimulator sim(40_MiB, parse_tmm_strategy(strategy), micro_config(fast, 64_MiB));
    return sim.run_epoch(t, 0);
}

} // namespace

TEST(TmmStrategy, ParseNames) {
    for (const char* n : {"fhpm", "hmmv-huge", "hmmv-base", "fhpm-fixed-10", "fhpm-fixed-256"})
        EXPECT_EQ(parse_tmm_strategy(n).name(), n);
    EXPECT_EQ(parse_tmm_strategy("fhpm-fixed-10").fixed_threshold, 10u);
    EXPECT_THROW(parse_tmm_strategy("fhpm-fixed-513"), Error);
    EXPECT_THROW(parse_tmm_strategy("fhpm-fixed-"), Error);
    EXPECT_THROW(parse_tmm_strategy("autonuma"), Error);
}

TEST(Migrate, FitsWithoutEviction) {
    Placement p({4_MiB, 64_MiB});
    for (auto f : frames(0, 512))
        p.place(f, Tier::Fast);
    for (auto f : frames(512, 512))
        p.place(f, Tier::Slow);
    MigrationStats st;
    const auto moving = frames(512, 512);
    migrate(p, moving, Tier::Fast, st);
    EXPECT_EQ(st.evicted_frames, 0u);
    EXPECT_EQ(st.migrated_bytes, 2_MiB);
    EXPECT_EQ(p.fast_used(), 4_MiB);
    EXPECT_EQ(p.tier(HostFrame{0}), Tier::Fast);
}

TEST(Migrate, EvictsColdestFirst) {
    Placement p({2_MiB, 64_MiB});
    for (auto f : frames(0, 512)) {
        p.place(f, Tier::Fast);
        p.set_frequency(f, f.value < 256 ? 5 : 1);
    }
    for (auto f : frames(512, 256)) {
        p.place(f, Tier::Slow);
        p.set_frequency(f, 9);
    }
    MigrationStats st;
    const auto moving = frames(512, 256);
    migrate(p, moving, Tier::Fast, st);
    EXPECT_EQ(st.evicted_frames, 256u);
    EXPECT_EQ(p.tier(HostFrame{0}), Tier::Fast);
    EXPECT_EQ(p.tier(HostFrame{255}), Tier::Fast);
    EXPECT_EQ(p.tier(HostFrame{256}), Tier::Slow);
    EXPECT_EQ(p.tier(HostFrame{600}), Tier::Fast);
    EXPECT_LE(p.fast_used(), 2_MiB);
}

TEST(Migrate, AlreadyInTargetIsNoop) {
    Placement p({2_MiB, 2_MiB});
    for (auto f : frames(0, 10))
        p.place(f, Tier::Fast);
    MigrationStats st;
    const auto same = frames(0, 10);
    migrate(p, same, Tier::Fast, st);
    EXPECT_EQ(st.migrated_bytes, 0u);
    EXPECT_EQ(st.evicted_frames, 0u);
    EXPECT_THROW(p.tier(HostFrame{99}), Error);
}

TEST(EpochCost, TlbHitsAndTiers) {
    CostModel c;
    Machine m = make_machine(2_MiB);
    Placement fast({2_MiB, 0});
    Placement slow({0, 2_MiB});
    for (std::uint64_t f = 0; f < 512; ++f) {
        fast.place(m.space().backing(GuestFrame{f}), Tier::Fast);
        slow.place(m.space().backing(GuestFrame{f}), Tier::Slow);
    }
    m.access(rd(0)); // warm the TLB
    Trace t;
    for (int i = 0; i < 100; ++i)
        t.push_back(rd(static_cast<std::uint64_t>(i) * 64));
    EXPECT_DOUBLE_EQ(estimate_epoch_cost(m, t, fast, c), 100 * (c.tlb_hit_cost + c.fast.read));
    EXPECT_GT(estimate_epoch_cost(m, t, slow, c), estimate_epoch_cost(m, t, fast, c));
    EXPECT_DOUBLE_EQ(estimate_epoch_cost(m, Trace{}, fast, c), 0.0);
}

TEST(TmmSimulator, RejectsBadTiers) {
    EXPECT_THROW(TmmSimulator(40_MiB, parse_tmm_strategy("fhpm"), micro_config(0, 64_MiB)), Error);
    EXPECT_THROW(TmmSimulator(40_MiB, parse_tmm_strategy("fhpm"), micro_config(8_MiB, 16_MiB)), Error);
}

TEST(TmmSimulator, NoUnbalancedPagesHugeStrategiesAgree) {
    const Trace t = micro_trace(0.0, 3);
    const EpochReport f = run_one("fhpm", t);
    const EpochReport h = run_one("hmmv-huge", t);
    EXPECT_DOUBLE_EQ(f.fast_ratio, 1.0);
    EXPECT_DOUBLE_EQ(h.fast_ratio, 1.0);
    EXPECT_DOUBLE_EQ(f.huge_ratio_in_fast, 1.0);
    EXPECT_DOUBLE_EQ(h.huge_ratio_in_fast, 1.0);
    EXPECT_EQ(f.splits, 0u);
}

TEST(TmmSimulator, AllUnbalancedHotBloat) {
    const Trace t = micro_trace(1.0, 4);
    const EpochReport h = run_one("hmmv-huge", t);
    const EpochReport b = run_one("hmmv-base", t);
    const EpochReport f = run_one("fhpm", t);
    // Each 2 MiB hot region carries 51 touched slices.
    const double utilization = static_cast<double>(h.fast_accessed_bytes) / static_cast<double>(8_MiB);
    EXPECT_NEAR(utilization, 51.0 / 512.0, 0.02);
    EXPECT_GT(f.splits, 0u);
    EXPECT_EQ(f.fast_accessed_bytes, b.fast_accessed_bytes);
    EXPECT_DOUBLE_EQ(f.fast_ratio, 1.0);
}

TEST(TmmSimulator, FastHoldsEverything) {
    const Trace t = micro_trace(0.5, 5);
    for (const char* s : {"fhpm", "hmmv-huge", "hmmv-base", "fhpm-fixed-10"}) {
        TmmSimulator sim(40_MiB, parse_tmm_strategy(s), micro_config(64_MiB, 8_MiB));
        const EpochReport r = sim.run_epoch(t, 0);
        EXPECT_DOUBLE_EQ(r.fast_ratio, 1.0) << s;
        EXPECT_EQ(sim.placement().slow_used(), 0u) << s;
    }
}

TEST(TmmProperty, CapacityAndUtilization) {
    Rng rng(6);
    for (int round = 0; round < 6; ++round) {
        const double u = 0.25 * static_cast<double>(rng.below(5));
        const Trace t = micro_trace(u, rng.next(), 2);
        Bytes fhpm_fast = 0;
        Bytes huge_fast = 0;
        for (const char* s : {"fhpm", "hmmv-huge", "hmmv-base"}) {
            TmmSimulator sim(40_MiB, parse_tmm_strategy(s), micro_config(8_MiB, 64_MiB));
            for (std::uint32_t e = 0; e < 2; ++e) {
                const EpochReport r = sim.run_epoch(t, e);
                const Placement& p = sim.placement();
                ASSERT_LE(p.fast_used(), 8_MiB);
                ASSERT_EQ(p.fast_used() + p.slow_used(), 40_MiB) << s;
                for (std::uint64_t g = 0; g < sim.machine().space().total_guest_frames(); ++g)
                    ASSERT_TRUE(p.placed(sim.machine().space().backing(GuestFrame{g})));
                if (std::string(s) == "fhpm")
                    fhpm_fast = r.fast_accessed_bytes;
                if (std::string(s) == "hmmv-huge")
                    huge_fast = r.fast_accessed_bytes;
            }
        }
        EXPECT_GE(fhpm_fast, huge_fast) << "unbalanced " << u;
    }
}

TEST(TmmProperty, PlanLogMatchesReports) {
    const Trace t = micro_trace(0.75, 8);
    TmmSimulator sim(40_MiB, parse_tmm_strategy("fhpm"), micro_config(8_MiB, 64_MiB));
    const EpochReport r = sim.run_epoch(t, 0);
    ASSERT_FALSE(sim.plan_log().empty());
    std::uint64_t demotes = 0;
    for (const auto& row : sim.plan_log()) {
        EXPECT_EQ(row.hp_before, r.hp_before);
        EXPECT_EQ(row.hp_after, r.hp_after);
        demotes += row.action == "demote" ? 1 : 0;
    }
    EXPECT_EQ(demotes, r.splits);
    EXPECT_GT(r.hp_before, 0);
    EXPECT_LE(r.hp_after, 0);
}
