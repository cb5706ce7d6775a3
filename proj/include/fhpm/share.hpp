#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fhpm/monitor.hpp"
#include "fhpm/policy.hpp"
#include "fhpm/remap.hpp"
#include "fhpm/workload.hpp"

namespace fhpm {

enum class ShareStrategyKind : std::uint8_t { FhpmShare, HugePageShare, LinuxKsm, Ingens, ZeroScan };

struct ShareStrategy {
    ShareStrategyKind kind = ShareStrategyKind::FhpmShare;
    double f_use = 0.85; // FhpmShare waterline

    std::string name() const;
};

// "fhpm-share", "huge-page-share", "linux-ksm", "ingens", "zero-scan".
ShareStrategy parse_share_strategy(const std::string& name, double f_use);

struct ShareConfig {
    ScanConfig scan;
    double psr_lower_bound = 0.5;
    CostModel cost;
};

struct ShareStats {
    std::string strategy;
    Bytes bytes_saved = 0;
    double saved_pct = 0; // of total VM memory
    Bytes oracle_bytes = 0;
    std::uint64_t shared_frames = 0;
    std::uint64_t cow_breaks = 0;
    std::uint64_t splits = 0;
    std::uint64_t collapses = 0;
    std::uint64_t vm_exits = 0;
    std::uint32_t passes = 0;
    std::vector<double> huge_ratio;
    std::vector<double> est_cost;
};

// A guest frame of one VM.
struct VmFrame {
    std::uint32_t vm = 0;
    GuestFrame frame;

    friend auto operator<=>(const VmFrame&, const VmFrame&) = default;
};

// Several VMs on one host with KSM-style merge trees. Merged frames are
// write-protected; a write goes through cow_write_break first.
class SharingSystem {
public:
    SharingSystem(std::uint32_t vm_count, Bytes vm_bytes, TlbConfig tlb = {}, WalkConfig walk = {});

    std::uint32_t vm_count() const { return static_cast<std::uint32_t>(vms_.size()); }
    Bytes vm_bytes() const { return vm_bytes_; }
    Machine& vm(std::uint32_t i) { return vms_.at(i); }
    const Machine& vm(std::uint32_t i) const { return vms_.at(i); }
    HostMemory& host() { return *host_; }

    void load(std::span<const ContentStore> stores);
    PageContent read(VmFrame f) const;

    Bytes bytes_saved() const;
    std::uint64_t shared_frames() const { return groups_.size(); }
    bool is_shared(VmFrame f) const;
    std::size_t group_size(VmFrame f) const;

    // Merge every candidate that matches a stable or unstable-tree entry.
    // Candidates must lie in base-mapped regions. Returns the merge count.
    std::uint64_t ksm_pass(std::span<const VmFrame> candidates);
    // Merge whole huge regions with identical content. Returns regions merged.
    std::uint64_t share_huge_regions();

    void cow_write_break(VmFrame f, ShareStats& stats);
    // Guest access that privatizes a shared frame on write.
    AccessOutcome access(std::uint32_t vm, const AccessEvent& event, ShareStats& stats);

    std::uint32_t shared_in_region(std::uint32_t vm, RegionIndex r) const;
    double huge_ratio(std::uint32_t vm) const;

private:
    void merge_into(VmFrame f, HostFrame target);
    void drop_group_member(HostFrame h, VmFrame f);

    Bytes vm_bytes_;
    std::shared_ptr<HostMemory> host_;
    std::vector<Machine> vms_;
    std::multimap<std::uint64_t, HostFrame> stable_;
    std::map<HostFrame, std::vector<VmFrame>> groups_;
};

ShareStats run_share_epoch(SharingSystem& system, std::span<const Trace> traces, ShareStrategy strategy,
                           const ShareConfig& config);

// Maximum achievable saving: every group of byte-identical frames keeps one copy.
Bytes dedup_oracle(const SharingSystem& system);
Bytes dedup_oracle(std::span<const ContentStore> stores);

} // namespace fhpm
