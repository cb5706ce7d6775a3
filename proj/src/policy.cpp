#include "fhpm/policy.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

namespace fhpm {

namespace {

Plan empty_plan(HotPagePressure hp) { return Plan{{}, {}, hp.hp, hp.hp}; }

std::vector<PsrRecord> sorted_by(std::span<const PsrRecord> in, bool high_psr_first) {
    std::vector<PsrRecord> out(in.begin(), in.end());
    std::stable_sort(out.begin(), out.end(), [high_psr_first](const PsrRecord& a, const PsrRecord& b) {
        if (a.touched != b.touched)
            return high_psr_first ? a.touched < b.touched : a.touched > b.touched;
        return a.region < b.region;
    });
    return out;
}

} // namespace

void validate(const PolicyConfig& config) {
    if (!(config.f_use > 0.0 && config.f_use <= 1.0))
        throw Error(fmt::format("f_use = {} is outside (0, 1]", config.f_use));
    if (!(config.psr_lower_bound >= 0.0 && config.psr_lower_bound <= 1.0))
        throw Error(fmt::format("psr_lower_bound = {} is outside [0, 1]", config.psr_lower_bound));
    if (config.huge_page_bytes == 0 || config.huge_page_bytes % kFramesPerHuge != 0)
        throw Error(fmt::format("huge_page_bytes = {} is not a multiple of 512", config.huge_page_bytes));
}

HotPagePressure init_hot_page_pressure(Bytes s_hot, const PolicyConfig& config) {
    validate(config);
    if (s_hot > config.s_tot)
        throw Error(fmt::format("hot set of {} bytes exceeds VM memory of {} bytes", s_hot, config.s_tot));
    const auto budget = static_cast<std::int64_t>(std::llround(static_cast<double>(config.s_tot) * config.f_use));
    return HotPagePressure{static_cast<std::int64_t>(s_hot) - budget};
}

std::int64_t skew_bytes(std::uint32_t touched, const PolicyConfig& config) {
    if (touched > kFramesPerHuge)
        throw Error(fmt::format("touched count {} exceeds 512", touched));
    return static_cast<std::int64_t>(kFramesPerHuge - touched) *
           static_cast<std::int64_t>(config.huge_page_bytes / kFramesPerHuge);
}

Plan plan_demotions(HotPagePressure hp, std::span<const PsrRecord> candidates, const PolicyConfig& config) {
    Plan plan = empty_plan(hp);
    if (hp.hp <= 0)
        return plan;
    std::int64_t cur = hp.hp;
    for (const PsrRecord& c : sorted_by(candidates, true)) {
        if (cur <= 0)
            break;
        if (c.psr() < config.psr_lower_bound)
            continue;
        plan.demote.push_back(PlanEntry{c.region, c.touched});
        cur -= skew_bytes(c.touched, config);
    }
    plan.hp_after = cur;
    return plan;
}

Plan plan_promotions(HotPagePressure hp, std::span<const PsrRecord> candidates, const PolicyConfig& config) {
    Plan plan = empty_plan(hp);
    if (hp.hp >= 0)
        return plan;
    std::int64_t cur = hp.hp;
    for (const PsrRecord& c : sorted_by(candidates, false)) {
        const std::int64_t next = cur + skew_bytes(c.touched, config);
        if (next > 0)
            break;
        plan.promote.push_back(PlanEntry{c.region, c.touched});
        cur = next;
    }
    plan.hp_after = cur;
    return plan;
}

Plan fixed_threshold_plan(std::span<const PsrRecord> huge, std::span<const PsrRecord> base_regions,
                          std::uint32_t threshold, HotPagePressure hp, const PolicyConfig& config) {
    if (threshold > kFramesPerHuge)
        throw Error(fmt::format("fixed threshold {} is outside [0, 512]", threshold));
    Plan plan = empty_plan(hp);
    std::vector<PsrRecord> h(huge.begin(), huge.end());
    std::vector<PsrRecord> b(base_regions.begin(), base_regions.end());
    auto by_region = [](const PsrRecord& x, const PsrRecord& y) { return x.region < y.region; };
    std::sort(h.begin(), h.end(), by_region);
    std::sort(b.begin(), b.end(), by_region);
    std::int64_t cur = hp.hp;
    for (const PsrRecord& c : h)
        if (c.touched <= threshold) {
            plan.demote.push_back(PlanEntry{c.region, c.touched});
            cur -= skew_bytes(c.touched, config);
        }
    for (const PsrRecord& c : b)
        if (c.touched > threshold) {
            plan.promote.push_back(PlanEntry{c.region, c.touched});
            cur += skew_bytes(c.touched, config);
        }
    plan.hp_after = cur;
    return plan;
}

} // namespace fhpm
