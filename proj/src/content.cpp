#include "fhpm/content.hpp"

#include <algorithm>
#include <cstring>

namespace fhpm {

namespace {

std::uint64_t splitmix(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace

PageContent PageContent::zero_page() {
    PageContent c;
    c.zero = true;
    c.seed = 0;
    PageBytes bytes{};
    c.digest = digest_of(bytes);
    return c;
}

PageContent PageContent::from_seed(std::uint64_t seed) {
    PageContent c;
    c.zero = false;
    c.seed = seed;
    PageBytes bytes;
    materialize(c, bytes);
    c.digest = digest_of(bytes);
    return c;
}

void materialize(const PageContent& c, std::span<std::byte, kBasePageBytes> out) {
    if (c.zero) {
        std::fill(out.begin(), out.end(), std::byte{0});
        return;
    }
    std::uint64_t state = c.seed;
    for (std::size_t i = 0; i < out.size(); i += 8) {
        std::uint64_t word = splitmix(state);
        // Force at least one non-zero byte per word so a seeded page is never
        // mistaken for the zero page.
        word |= 1;
        for (std::size_t b = 0; b < 8; ++b)
            out[i + b] = static_cast<std::byte>((word >> (8 * b)) & 0xFF);
    }
}

std::uint64_t digest_of(std::span<const std::byte, kBasePageBytes> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ull;
    }
    return h;
}

bool same_bytes(const PageContent& a, const PageContent& b) {
    if (a.digest != b.digest)
        return false;
    PageBytes lhs;
    PageBytes rhs;
    materialize(a, lhs);
    materialize(b, rhs);
    return std::memcmp(lhs.data(), rhs.data(), lhs.size()) == 0;
}

} // namespace fhpm
