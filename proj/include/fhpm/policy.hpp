#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fhpm/monitor.hpp"

namespace fhpm {

struct PolicyConfig {
    double f_use = 1.0;
    double psr_lower_bound = 0.5;
    Bytes s_tot = 0;
    Bytes huge_page_bytes = kHugePageBytes;
};

// Signed bytes of hot memory above the budget s_tot * f_use.
struct HotPagePressure {
    std::int64_t hp = 0;
};

void validate(const PolicyConfig& config);

HotPagePressure init_hot_page_pressure(Bytes s_hot, const PolicyConfig& config);

struct PlanEntry {
    RegionIndex region;
    std::uint32_t touched = 0;

    double psr() const { return 1.0 - static_cast<double>(touched) / kFramesPerHuge; }
};

struct Plan {
    std::vector<PlanEntry> demote;
    std::vector<PlanEntry> promote;
    std::int64_t hp_before = 0;
    std::int64_t hp_after = 0;
};

// psr * S_huge in bytes, computed as (512 - n_s) * S_huge / 512.
std::int64_t skew_bytes(std::uint32_t touched, const PolicyConfig& config);

Plan plan_demotions(HotPagePressure hp, std::span<const PsrRecord> candidates, const PolicyConfig& config);
Plan plan_promotions(HotPagePressure hp, std::span<const PsrRecord> candidates, const PolicyConfig& config);

// Demote huge regions with n_s <= threshold, promote base regions with more
// than threshold touched slices, both in region order. hp is carried through
// the same bookkeeping as the dynamic plans.
Plan fixed_threshold_plan(std::span<const PsrRecord> huge, std::span<const PsrRecord> base_regions,
                          std::uint32_t threshold, HotPagePressure hp, const PolicyConfig& config);

} // namespace fhpm
