#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "fhpm/content.hpp"
#include "fhpm/ept.hpp"
#include "fhpm/mmu.hpp"

namespace fhpm {

// xoshiro256** seeded through SplitMix64. Bounded draws use Lemire's
// multiply-shift rejection and doubles take the top 53 bits, so a seed gives
// the same stream on every platform and standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next();
    std::uint64_t below(std::uint64_t bound); // uniform in [0, bound)
    double unit();                            // uniform in [0, 1)
    bool bernoulli(double p) { return unit() < p; }
    // Independent child stream keyed by `stream`; does not advance *this.
    Rng split(std::uint64_t stream) const;

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i)
            std::swap(items[i - 1], items[below(i)]);
    }

private:
    std::uint64_t s_[4];
};

std::uint64_t mix64(std::uint64_t a, std::uint64_t b);

enum class Pattern : std::uint8_t { Sequential, UniformRandom, Hotspot };
enum class RegionRole : std::uint8_t { Balanced, Unbalanced, Cold };

struct TraceSpec {
    Bytes wss = 0;
    Pattern pattern = Pattern::UniformRandom;
    double hot_fraction = 0.2;     // Hotspot: share of the working set's frames that is hot
    double hot_op_fraction = 0.8;  // Hotspot: share of events sent to the hot set
    double read_fraction = 0.5;
    double unbalanced_fraction = 0.0;
    double target_psr = 0.9;
    std::uint64_t events = 0;
    std::uint64_t seed = 0;
    // Optional explicit per-region roles; overrides the fraction-driven layout.
    std::vector<RegionRole> region_roles;
};

struct RegionPlan {
    RegionRole role = RegionRole::Balanced;
    std::vector<std::uint16_t> offsets; // eligible 4 KiB slices, ascending
};

// Number of distinct slices an unbalanced region of the given PSR touches:
// round-half-up of (1 - psr) * 512, never below 1.
std::uint32_t touched_slices_for_psr(double target_psr);

std::vector<RegionPlan> plan_trace_layout(const TraceSpec& spec);
Trace generate_trace(const TraceSpec& spec);

struct ContentSpec {
    std::uint32_t vm_count = 1;
    std::uint64_t frames_per_vm = 0;
    double duplicate_fraction = 0.0;
    double zero_fraction = 0.0;
    std::uint64_t seed = 0;
    // Half-open guest-frame ranges partitioning [0, frames_per_vm); each VM
    // shuffles its items only inside a block. Empty means one block.
    std::vector<std::pair<std::uint64_t, std::uint64_t>> permutation_blocks;
};

using ContentStore = std::vector<PageContent>; // indexed by guest frame

std::vector<ContentStore> generate_contents(const ContentSpec& spec);
// Write a VM's contents into the host frames currently backing its guest frames.
void load_contents(EptSpace& space, const ContentStore& store);

struct FrequencyMass {
    std::uint32_t frequency = 0;
    Bytes bytes = 0;
};

struct CcdfPoint {
    std::uint32_t x = 0;
    double fraction = 0.0; // share of memory whose normalized frequency exceeds x
};

std::vector<CcdfPoint> ccdf(std::span<const FrequencyMass> masses, std::uint32_t max_frequency,
                            std::uint32_t normalize_to = 100);

// Binary trace: 16-byte header ("FHPMTRC\0", u32 version, u32 reserved)
// followed by little-endian (tick u64, gpa u64, kind u8) records.
inline constexpr std::uint32_t kTraceFormatVersion = 1;
void write_trace(const std::filesystem::path& path, std::span<const AccessEvent> trace);
Trace read_trace(const std::filesystem::path& path);

} // namespace fhpm
