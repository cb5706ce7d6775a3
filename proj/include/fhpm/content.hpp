#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

#include "fhpm/types.hpp"

namespace fhpm {

using PageBytes = std::array<std::byte, kBasePageBytes>;

// Logical content of one 4 KiB frame. The bytes are never stored; they are
// regenerated from `seed` whenever a full comparison is needed, so two frames
// compare equal exactly when (zero, seed) agree.
struct PageContent {
    std::uint64_t seed = 0;
    bool zero = true;
    std::uint64_t digest = 0;

    static PageContent zero_page();
    static PageContent from_seed(std::uint64_t seed);
};

void materialize(const PageContent& c, std::span<std::byte, kBasePageBytes> out);

// 64-bit FNV-1a over the materialized bytes.
std::uint64_t digest_of(std::span<const std::byte, kBasePageBytes> bytes);

// Full byte comparison; the digest is only a filter.
bool same_bytes(const PageContent& a, const PageContent& b);

} // namespace fhpm
