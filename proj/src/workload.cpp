#include "fhpm/workload.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <fmt/core.h>

namespace fhpm {

namespace {

std::uint64_t splitmix_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

std::uint64_t round_half_up(double x) { return static_cast<std::uint64_t>(std::floor(x + 0.5)); }

void check_fraction(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
        throw Error(fmt::format("{} = {} is outside [0, 1]", name, v));
}

std::vector<std::uint16_t> choose_offsets(Rng& rng, std::uint32_t count) {
    std::array<std::uint16_t, kFramesPerHuge> all{};
    for (std::uint16_t i = 0; i < kFramesPerHuge; ++i)
        all[i] = i;
    // Partial Fisher-Yates: the first `count` slots end up a uniform sample.
    for (std::uint32_t i = 0; i < count; ++i)
        std::swap(all[i], all[i + rng.below(kFramesPerHuge - i)]);
    std::vector<std::uint16_t> out(all.begin(), all.begin() + count);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::uint16_t> all_offsets() {
    std::vector<std::uint16_t> out(kFramesPerHuge);
    for (std::uint16_t i = 0; i < kFramesPerHuge; ++i)
        out[i] = i;
    return out;
}

void put_u64(std::ostream& os, std::uint64_t v) {
    std::array<char, 8> b;
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), b.size());
}

void put_u32(std::ostream& os, std::uint32_t v) {
    std::array<char, 4> b;
    for (int i = 0; i < 4; ++i)
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), b.size());
}

std::uint64_t get_le(const unsigned char* p, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

constexpr std::array<char, 8> kTraceMagic = {'F', 'H', 'P', 'M', 'T', 'R', 'C', '\0'};
constexpr std::size_t kRecordBytes = 17;

} // namespace

// ---------------------------------------------------------------------------
// Rng

Rng::Rng(std::uint64_t seed) {
    std::uint64_t state = seed;
    for (auto& s : s_)
        s = splitmix_next(state);
}

std::uint64_t Rng::next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

std::uint64_t Rng::below(std::uint64_t bound) {
    if (bound == 0)
        throw Error("Rng::below called with an empty range");
    std::uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * bound;
    std::uint64_t low = static_cast<std::uint64_t>(m);
    if (low < bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        while (low < threshold) {
            x = next();
            m = static_cast<__uint128_t>(x) * bound;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

double Rng::unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

Rng Rng::split(std::uint64_t stream) const { return Rng(mix64(s_[0] ^ rotl(s_[2], 23), stream)); }

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t state = a ^ (b * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull);
    return splitmix_next(state);
}

// ---------------------------------------------------------------------------
// Traces

std::uint32_t touched_slices_for_psr(double target_psr) {
    check_fraction(target_psr, "target_psr");
    const std::uint64_t n = round_half_up((1.0 - target_psr) * kFramesPerHuge);
    return static_cast<std::uint32_t>(std::clamp<std::uint64_t>(n, 1, kFramesPerHuge));
}

std::vector<RegionPlan> plan_trace_layout(const TraceSpec& spec) {
    if (spec.wss == 0)
        throw Error("trace wss is zero");
    if (spec.wss % kHugePageBytes != 0)
        throw Error(fmt::format("trace wss {} is not a multiple of 2 MiB", spec.wss));
    check_fraction(spec.hot_fraction, "hot_fraction");
    check_fraction(spec.hot_op_fraction, "hot_op_fraction");
    check_fraction(spec.read_fraction, "read_fraction");
    check_fraction(spec.unbalanced_fraction, "unbalanced_fraction");

    const std::uint64_t regions = spec.wss / kHugePageBytes;
    const std::uint32_t n_s = touched_slices_for_psr(spec.target_psr);
    Rng rng = Rng(spec.seed).split(1);
    std::vector<RegionPlan> plan(regions);

    if (!spec.region_roles.empty()) {
        if (spec.region_roles.size() != regions)
            throw Error(fmt::format("region_roles has {} entries, working set has {} regions",
                                    spec.region_roles.size(), regions));
        for (std::uint64_t r = 0; r < regions; ++r) {
            plan[r].role = spec.region_roles[r];
            plan[r].offsets = plan[r].role == RegionRole::Unbalanced ? choose_offsets(rng, n_s)
                                                                      : all_offsets();
        }
        return plan;
    }

    std::vector<std::uint64_t> order(regions);
    for (std::uint64_t r = 0; r < regions; ++r)
        order[r] = r;
    rng.shuffle(std::span<std::uint64_t>(order));

    std::uint64_t unbalanced = 0;
    std::uint64_t balanced_frames = 0;
    if (spec.pattern == Pattern::Hotspot) {
        const std::uint64_t frames = regions * kFramesPerHuge;
        const std::uint64_t hot_frames = round_half_up(spec.hot_fraction * static_cast<double>(frames));
        unbalanced = round_half_up(spec.unbalanced_fraction * static_cast<double>(hot_frames) / n_s);
        unbalanced = std::min(unbalanced, regions);
        balanced_frames = round_half_up((1.0 - spec.unbalanced_fraction) * static_cast<double>(hot_frames));
        balanced_frames = std::min(balanced_frames, (regions - unbalanced) * kFramesPerHuge);
    } else {
        unbalanced = round_half_up(spec.unbalanced_fraction * static_cast<double>(regions));
        balanced_frames = (regions - unbalanced) * kFramesPerHuge;
    }

    std::uint64_t next = 0;
    for (; next < unbalanced; ++next) {
        plan[order[next]].role = RegionRole::Unbalanced;
        plan[order[next]].offsets = choose_offsets(rng, n_s);
    }
    while (balanced_frames > 0) {
        const auto take = static_cast<std::uint32_t>(std::min<std::uint64_t>(balanced_frames, kFramesPerHuge));
        RegionPlan& p = plan[order[next++]];
        p.role = RegionRole::Balanced;
        p.offsets = take == kFramesPerHuge ? all_offsets() : choose_offsets(rng, take);
        balanced_frames -= take;
    }
    for (; next < regions; ++next) {
        plan[order[next]].role = RegionRole::Cold;
        plan[order[next]].offsets = all_offsets();
    }
    return plan;
}

Trace generate_trace(const TraceSpec& spec) {
    if (spec.events == 0)
        throw Error("trace event count is zero");
    const std::vector<RegionPlan> plan = plan_trace_layout(spec);

    std::vector<std::uint64_t> hot;
    std::vector<std::uint64_t> cold;
    for (std::uint64_t r = 0; r < plan.size(); ++r) {
        auto& bucket = plan[r].role == RegionRole::Cold ? cold : hot;
        for (std::uint16_t off : plan[r].offsets)
            bucket.push_back(r * kFramesPerHuge + off);
    }
    std::vector<std::uint64_t> all;
    if (spec.pattern != Pattern::Hotspot) {
        all = hot;
        all.insert(all.end(), cold.begin(), cold.end());
        std::sort(all.begin(), all.end());
    }

    Rng rng = Rng(spec.seed).split(2);
    Trace trace;
    trace.reserve(spec.events);
    for (std::uint64_t i = 0; i < spec.events; ++i) {
        std::uint64_t frame = 0;
        switch (spec.pattern) {
        case Pattern::Sequential:
            frame = all[i % all.size()];
            break;
        case Pattern::UniformRandom:
            frame = all[rng.below(all.size())];
            break;
        case Pattern::Hotspot: {
            bool pick_hot = rng.bernoulli(spec.hot_op_fraction);
            if (hot.empty())
                pick_hot = false;
            if (cold.empty())
                pick_hot = true;
            const auto& bucket = pick_hot ? hot : cold;
            frame = bucket[rng.below(bucket.size())];
            break;
        }
        }
        const std::uint64_t word = rng.below(kBasePageBytes / 8);
        const AccessKind kind = rng.bernoulli(spec.read_fraction) ? AccessKind::Read : AccessKind::Write;
        trace.push_back(AccessEvent{frame * kBasePageBytes + word * 8, kind, i});
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Contents

std::vector<ContentStore> generate_contents(const ContentSpec& spec) {
    check_fraction(spec.duplicate_fraction, "duplicate_fraction");
    check_fraction(spec.zero_fraction, "zero_fraction");
    const std::uint64_t frames = spec.frames_per_vm;

    auto blocks = spec.permutation_blocks;
    if (blocks.empty())
        blocks.emplace_back(0, frames);
    std::sort(blocks.begin(), blocks.end());
    std::uint64_t covered = 0;
    for (const auto& [lo, hi] : blocks) {
        if (lo != covered || hi < lo)
            throw Error("permutation_blocks must partition the VM's frames");
        covered = hi;
    }
    if (covered != frames)
        throw Error("permutation_blocks must partition the VM's frames");

    const std::uint64_t dup = round_half_up(spec.duplicate_fraction * static_cast<double>(frames));
    const std::uint64_t zero =
        std::min(round_half_up(spec.zero_fraction * static_cast<double>(frames)), frames - dup);

    // Item codes: [0, dup) shared items, dup = zero, dup + 1 = unique.
    const std::uint64_t kZero = dup;
    const std::uint64_t kUnique = dup + 1;
    std::vector<std::uint64_t> base(frames, kUnique);
    for (std::uint64_t i = 0; i < dup; ++i)
        base[i] = i;
    for (std::uint64_t i = dup; i < dup + zero; ++i)
        base[i] = kZero;
    Rng(spec.seed).split(3).shuffle(std::span<std::uint64_t>(base));

    std::vector<ContentStore> out(spec.vm_count);
    for (std::uint32_t vm = 0; vm < spec.vm_count; ++vm) {
        std::vector<std::uint64_t> items = base;
        Rng rng = Rng(spec.seed).split(100 + vm);
        for (const auto& [lo, hi] : blocks)
            rng.shuffle(std::span<std::uint64_t>(items.data() + lo, hi - lo));
        ContentStore& store = out[vm];
        store.reserve(frames);
        for (std::uint64_t pos = 0; pos < frames; ++pos) {
            const std::uint64_t item = items[pos];
            if (item == kZero)
                store.push_back(PageContent::zero_page());
            else if (item == kUnique)
                store.push_back(PageContent::from_seed(mix64(spec.seed, (1ull << 62) | (std::uint64_t{vm} << 40) | pos)));
            else
                store.push_back(PageContent::from_seed(mix64(spec.seed, item)));
        }
    }
    return out;
}

void load_contents(EptSpace& space, const ContentStore& store) {
    if (store.size() != space.total_guest_frames())
        throw Error(fmt::format("content store has {} frames, address space has {}", store.size(),
                                space.total_guest_frames()));
    for (std::uint64_t g = 0; g < store.size(); ++g)
        space.host().set_content(space.backing(GuestFrame{g}), store[g]);
}

// ---------------------------------------------------------------------------
// CCDF

std::vector<CcdfPoint> ccdf(std::span<const FrequencyMass> masses, std::uint32_t max_frequency,
                            std::uint32_t normalize_to) {
    if (masses.empty())
        throw Error("ccdf of an empty histogram");
    if (max_frequency == 0)
        throw Error("ccdf needs a positive maximum frequency");
    Bytes total = 0;
    for (const auto& m : masses)
        total += m.bytes;
    if (total == 0)
        throw Error("ccdf of a histogram with no memory");

    // Normalized frequency is frequency * normalize_to / max_frequency; compare
    // in integers: f * N > x * max.
    std::vector<CcdfPoint> out;
    out.reserve(normalize_to + 1);
    for (std::uint32_t x = 0; x <= normalize_to; ++x) {
        Bytes above = 0;
        for (const auto& m : masses)
            if (std::uint64_t{m.frequency} * normalize_to > std::uint64_t{x} * max_frequency)
                above += m.bytes;
        out.push_back(CcdfPoint{x, static_cast<double>(above) / static_cast<double>(total)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trace files

void write_trace(const std::filesystem::path& path, std::span<const AccessEvent> trace) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error(fmt::format("cannot open {} for writing", path.string()));
    os.write(kTraceMagic.data(), kTraceMagic.size());
    put_u32(os, kTraceFormatVersion);
    put_u32(os, 0);
    for (const AccessEvent& e : trace) {
        put_u64(os, e.tick);
        put_u64(os, e.gpa);
        os.put(static_cast<char>(e.kind));
    }
    if (!os)
        throw Error(fmt::format("write to {} failed", path.string()));
}

Trace read_trace(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error(fmt::format("cannot open {}", path.string()));
    std::array<unsigned char, 16> header{};
    if (!is.read(reinterpret_cast<char*>(header.data()), header.size()))
        throw Error(fmt::format("{}: truncated trace header", path.string()));
    if (!std::equal(kTraceMagic.begin(), kTraceMagic.end(), header.begin(),
                    [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; }))
        throw Error(fmt::format("{}: not a trace file", path.string()));
    const auto version = static_cast<std::uint32_t>(get_le(header.data() + 8, 4));
    if (version != kTraceFormatVersion)
        throw Error(fmt::format("{}: unsupported trace version {}", path.string(), version));

    Trace trace;
    std::array<unsigned char, kRecordBytes> rec{};
    while (is.read(reinterpret_cast<char*>(rec.data()), rec.size())) {
        if (rec[16] > 1)
            throw Error(fmt::format("{}: bad access kind {}", path.string(), rec[16]));
        trace.push_back(AccessEvent{get_le(rec.data() + 8, 8), static_cast<AccessKind>(rec[16]),
                                    get_le(rec.data(), 8)});
    }
    if (is.gcount() != 0)
        throw Error(fmt::format("{}: truncated trace record", path.string()));
    return trace;
}

} // namespace fhpm
