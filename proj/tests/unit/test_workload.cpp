#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fhpm/share.hpp"
#include "fhpm/workload.hpp"

using namespace fhpm;

namespace {

std::set<GuestFrame> hot_frames_of(const std::vector<RegionPlan>& plan) {
    std::set<GuestFrame> hot;
    for (std::size_t r = 0; r < plan.size(); ++r)
        if (plan[r].role != RegionRole::Cold)
            for (auto o : plan[r].offsets)
                hot.insert(GuestFrame{r * kFramesPerHuge + o});
    return hot;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("fhpm_test_" + name);
}

} // namespace

TEST(Rng, StableAndBounded) {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i)
        ASSERT_EQ(a.next(), b.next());
    Rng c(7);
    for (int i = 0; i < 10000; ++i) {
        ASSERT_LT(c.below(13), 13u);
        const double u = c.unit();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
    EXPECT_NE(Rng(1).next(), Rng(2).next());
}

TEST(Rng, SplitDoesNotAdvanceParent) {
    Rng a(5);
    Rng b(5);
    Rng child = a.split(3);
    EXPECT_EQ(a.next(), b.next());
    EXPECT_NE(child.next(), Rng(5).split(4).next());
    EXPECT_EQ(Rng(5).split(3).next(), Rng(5).split(3).next());
}

TEST(Rng, BelowIsRoughlyUniform) {
    Rng r(3);
    std::vector<int> counts(10, 0);
    for (int i = 0; i < 100000; ++i)
        ++counts[r.below(10)];
    for (int c : counts)
        EXPECT_NEAR(c, 10000, 500);
}

TEST(TraceLayout, TouchedSlicesRounding) {
    EXPECT_EQ(touched_slices_for_psr(0.9), 51u);
    EXPECT_DOUBLE_EQ(1.0 - 51.0 / 512.0, 0.900390625);
    EXPECT_EQ(touched_slices_for_psr(0.0), 512u);
    EXPECT_EQ(touched_slices_for_psr(1.0), 1u);
    // 0.5 * 512 = 256 exactly; 1 - 255.5/512 rounds half up.
    EXPECT_EQ(touched_slices_for_psr(1.0 - 255.5 / 512.0), 256u);
}

TEST(TraceLayout, UnbalancedRegionsUseRoundedSliceCount) {
    TraceSpec spec;
    spec.wss = 16_MiB;
    spec.pattern = Pattern::UniformRandom;
    spec.unbalanced_fraction = 1.0;
    spec.target_psr = 0.9;
    spec.seed = 4;
    const auto plan = plan_trace_layout(spec);
    ASSERT_EQ(plan.size(), 8u);
    for (const auto& p : plan) {
        EXPECT_EQ(p.role, RegionRole::Unbalanced);
        EXPECT_EQ(p.offsets.size(), 51u);
        EXPECT_TRUE(std::is_sorted(p.offsets.begin(), p.offsets.end()));
        EXPECT_EQ(std::set<std::uint16_t>(p.offsets.begin(), p.offsets.end()).size(), 51u);
    }
}

TEST(TraceLayout, ExplicitRolesOverride) {
    TraceSpec spec;
    spec.wss = 8_MiB;
    spec.pattern = Pattern::Hotspot;
    spec.region_roles = {RegionRole::Cold, RegionRole::Unbalanced, RegionRole::Balanced, RegionRole::Cold};
    spec.target_psr = 0.9;
    const auto plan = plan_trace_layout(spec);
    ASSERT_EQ(plan.size(), 4u);
    EXPECT_EQ(plan[0].role, RegionRole::Cold);
    EXPECT_EQ(plan[1].role, RegionRole::Unbalanced);
    EXPECT_EQ(plan[1].offsets.size(), 51u);
    EXPECT_EQ(plan[2].role, RegionRole::Balanced);
    EXPECT_EQ(plan[2].offsets.size(), 512u);
}

TEST(Trace, HotspotEventShare) {
    TraceSpec spec;
    spec.wss = 64_MiB;
    spec.pattern = Pattern::Hotspot;
    spec.hot_fraction = 0.2;
    spec.hot_op_fraction = 0.8;
    spec.events = 1'000'000;
    spec.seed = 17;
    const auto hot = hot_frames_of(plan_trace_layout(spec));
    const double hot_share = static_cast<double>(hot.size()) / (64_MiB / kBasePageBytes);
    EXPECT_NEAR(hot_share, 0.2, 0.01);
    const Trace t = generate_trace(spec);
    ASSERT_EQ(t.size(), spec.events);
    std::uint64_t in_hot = 0;
    for (const auto& e : t)
        in_hot += hot.contains(frame_of_gpa(e.gpa)) ? 1 : 0;
    EXPECT_NEAR(static_cast<double>(in_hot) / static_cast<double>(t.size()), 0.8, 0.01);
}

TEST(Trace, EventsStayInsideEligibleSlices) {
    TraceSpec spec;
    spec.wss = 8_MiB;
    spec.pattern = Pattern::UniformRandom;
    spec.unbalanced_fraction = 0.5;
    spec.events = 5000;
    spec.seed = 9;
    const auto plan = plan_trace_layout(spec);
    std::set<GuestFrame> eligible;
    for (std::size_t r = 0; r < plan.size(); ++r)
        for (auto o : plan[r].offsets)
            eligible.insert(GuestFrame{r * kFramesPerHuge + o});
    Tick prev = 0;
    for (const auto& e : generate_trace(spec)) {
        ASSERT_LT(e.gpa, spec.wss);
        ASSERT_TRUE(eligible.contains(frame_of_gpa(e.gpa)));
        ASSERT_GE(e.tick, prev);
        prev = e.tick;
    }
}

TEST(Trace, SequentialCyclesInOrder) {
    TraceSpec spec;
    spec.wss = 2_MiB;
    spec.pattern = Pattern::Sequential;
    spec.events = 1024;
    const Trace t = generate_trace(spec);
    for (std::size_t i = 0; i < t.size(); ++i)
        EXPECT_EQ(frame_of_gpa(t[i].gpa).value, i % 512);
}

TEST(Trace, Determinism) {
    TraceSpec spec;
    spec.wss = 16_MiB;
    spec.pattern = Pattern::Hotspot;
    spec.unbalanced_fraction = 0.5;
    spec.events = 20000;
    spec.seed = 1234;
    EXPECT_EQ(generate_trace(spec), generate_trace(spec));
    TraceSpec other = spec;
    other.seed = 1235;
    EXPECT_NE(generate_trace(spec), generate_trace(other));
}

TEST(TraceFile, RoundTrip) {
    TraceSpec spec;
    spec.wss = 4_MiB;
    spec.events = 300;
    spec.seed = 2;
    const Trace t = generate_trace(spec);
    const auto path = temp_file("roundtrip.trc");
    write_trace(path, t);
    EXPECT_EQ(std::filesystem::file_size(path), 16 + 17 * t.size());
    EXPECT_EQ(read_trace(path), t);
    std::filesystem::remove(path);
}

TEST(TraceFile, RejectsGarbage) {
    const auto path = temp_file("garbage.trc");
    {
        std::ofstream os(path, std::ios::binary);
        os << "not a trace file at all";
    }
    EXPECT_THROW(read_trace(path), Error);
    std::filesystem::remove(path);
    EXPECT_THROW(read_trace(path), Error);
}

TEST(Contents, FullDuplicationAcrossTwoVms) {
    ContentSpec cs;
    cs.vm_count = 2;
    cs.frames_per_vm = 1024;
    cs.duplicate_fraction = 1.0;
    cs.seed = 5;
    const auto stores = generate_contents(cs);
    EXPECT_EQ(dedup_oracle(stores), 1024 * kBasePageBytes);
}

TEST(Contents, AllDistinct) {
    ContentSpec cs;
    cs.vm_count = 3;
    cs.frames_per_vm = 512;
    cs.seed = 5;
    EXPECT_EQ(dedup_oracle(generate_contents(cs)), 0u);
}

TEST(Contents, ZeroFramesGroupTogether) {
    ContentSpec cs;
    cs.frames_per_vm = 5120;
    cs.zero_fraction = 0.1;
    cs.seed = 8;
    const auto stores = generate_contents(cs);
    std::uint64_t zeros = 0;
    for (const auto& c : stores.front())
        zeros += c.zero ? 1 : 0;
    EXPECT_EQ(zeros, 512u);
    EXPECT_EQ(dedup_oracle(stores), (512 - 1) * kBasePageBytes);
}

TEST(Contents, PermutationStaysInsideBlocks) {
    ContentSpec cs;
    cs.vm_count = 2;
    cs.frames_per_vm = 2048;
    cs.duplicate_fraction = 1.0;
    cs.permutation_blocks = {{0, 512}, {512, 2048}};
    cs.seed = 3;
    const auto stores = generate_contents(cs);
    std::multiset<std::uint64_t> a0, a1, b0, b1;
    std::uint64_t same_position = 0;
    for (std::uint64_t f = 0; f < 2048; ++f) {
        (f < 512 ? a0 : b0).insert(stores[0][f].digest);
        (f < 512 ? a1 : b1).insert(stores[1][f].digest);
        same_position += stores[0][f].digest == stores[1][f].digest ? 1 : 0;
    }
    EXPECT_EQ(a0, a1);
    EXPECT_EQ(b0, b1);
    EXPECT_LT(same_position, 20u);
    cs.permutation_blocks = {{0, 512}, {600, 2048}};
    EXPECT_THROW(generate_contents(cs), Error);
}

TEST(Contents, Determinism) {
    ContentSpec cs;
    cs.vm_count = 2;
    cs.frames_per_vm = 1024;
    cs.duplicate_fraction = 0.4;
    cs.zero_fraction = 0.1;
    cs.seed = 77;
    const auto a = generate_contents(cs);
    const auto b = generate_contents(cs);
    for (std::size_t v = 0; v < a.size(); ++v)
        for (std::size_t f = 0; f < a[v].size(); ++f)
            ASSERT_TRUE(same_bytes(a[v][f], b[v][f]));
}

TEST(Ccdf, EqualFrequenciesGiveStep) {
    const std::vector<FrequencyMass> m{{5, 4096}, {5, 8192}};
    const auto c = ccdf(m, 10);
    ASSERT_EQ(c.size(), 101u);
    for (const auto& p : c)
        EXPECT_DOUBLE_EQ(p.fraction, p.x < 50 ? 1.0 : 0.0);
}

TEST(Ccdf, HalfAtZeroHalfAtMax) {
    const std::vector<FrequencyMass> m{{0, 4096}, {10, 4096}};
    const auto c = ccdf(m, 10);
    for (const auto& p : c)
        EXPECT_DOUBLE_EQ(p.fraction, p.x < 100 ? 0.5 : 0.0);
}

TEST(Ccdf, SingleEntry) {
    const std::vector<FrequencyMass> m{{3, 2_MiB}};
    const auto c = ccdf(m, 4);
    for (const auto& p : c)
        EXPECT_DOUBLE_EQ(p.fraction, p.x < 75 ? 1.0 : 0.0);
    EXPECT_THROW(ccdf(std::vector<FrequencyMass>{}, 4), Error);
}

TEST(CcdfProperty, NonIncreasing) {
    Rng rng(12);
    for (int round = 0; round < 200; ++round) {
        const auto maxf = static_cast<std::uint32_t>(1 + rng.below(20));
        std::vector<FrequencyMass> m;
        const auto n = 1 + rng.below(30);
        for (std::uint64_t i = 0; i < n; ++i)
            m.push_back({static_cast<std::uint32_t>(rng.below(maxf + 1)), 1 + rng.below(1 << 20)});
        const auto c = ccdf(m, maxf);
        for (std::size_t i = 1; i < c.size(); ++i)
            ASSERT_LE(c[i].fraction, c[i - 1].fraction);
        ASSERT_DOUBLE_EQ(c.back().fraction, 0.0);
    }
}
