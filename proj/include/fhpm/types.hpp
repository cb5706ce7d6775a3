#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

namespace fhpm {

using Bytes = std::uint64_t;
using Tick = std::uint64_t;

inline constexpr Bytes kBasePageBytes = 4096;
inline constexpr Bytes kHugePageBytes = 2ull << 20;
inline constexpr std::uint32_t kFramesPerHuge = 512;
inline constexpr unsigned kBasePageShift = 12;
inline constexpr unsigned kHugePageShift = 21;

inline constexpr Bytes operator""_KiB(unsigned long long v) { return v << 10; }
inline constexpr Bytes operator""_MiB(unsigned long long v) { return v << 20; }

// Strongly typed 64-bit index. Arithmetic goes through .value on purpose so
// guest frames, host frames and huge regions never mix silently.
template <class Tag>
struct Index {
    std::uint64_t value = 0;

    constexpr Index() = default;
    constexpr explicit Index(std::uint64_t v) : value(v) {}

    friend constexpr auto operator<=>(Index, Index) = default;
};

using HostFrame = Index<struct HostFrameTag>;   // 4 KiB host-physical frame
using GuestFrame = Index<struct GuestFrameTag>; // 4 KiB guest-physical frame
using RegionIndex = Index<struct RegionTag>;    // 2 MiB guest-physical region

inline constexpr HostFrame kNoFrame{std::numeric_limits<std::uint64_t>::max()};

constexpr RegionIndex region_of(GuestFrame f) { return RegionIndex{f.value / kFramesPerHuge}; }
constexpr std::uint32_t offset_in_region(GuestFrame f) {
    return static_cast<std::uint32_t>(f.value % kFramesPerHuge);
}
constexpr GuestFrame first_frame(RegionIndex r) { return GuestFrame{r.value * kFramesPerHuge}; }
constexpr GuestFrame frame_of_gpa(std::uint64_t gpa) { return GuestFrame{gpa >> kBasePageShift}; }
constexpr RegionIndex region_of_gpa(std::uint64_t gpa) { return RegionIndex{gpa >> kHugePageShift}; }

// Base error for every precondition / contract violation in the simulator.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace fhpm

template <class Tag>
struct std::hash<fhpm::Index<Tag>> {
    std::size_t operator()(fhpm::Index<Tag> i) const noexcept {
        return std::hash<std::uint64_t>{}(i.value);
    }
};
