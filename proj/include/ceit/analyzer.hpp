#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ceit/config.hpp"

namespace ceit {

/// Per-layer parameter / multiply-accumulate accounting, produced by
/// structural enumeration (no network execution).
struct CostEntry {
    std::string name;
    std::int64_t params = 0;        // learnable scalars
    std::int64_t param_buffers = 0; // norm running statistics
    /// MACs of linear and convolution layers, one extra MAC per output
    /// element when a bias is present. This is the headline count under
    /// which the reference model tables reproduce.
    std::int64_t macs = 0;
    /// Attention score/aggregation products (QK^T and attn*V), reported
    /// separately; add via `include_attention`.
    std::int64_t attention_macs = 0;
    /// Elements touched by norms/activations/softmax and pooling
    /// comparisons; excluded by default, one op per element convention.
    std::int64_t norm_act_ops = 0;
};

struct CostReport {
    std::vector<CostEntry> entries;
    std::int64_t resolution = 0;

    std::int64_t total_params() const;         // learnable
    std::int64_t total_param_buffers() const;
    std::int64_t total_state() const { return total_params() + total_param_buffers(); }
    std::int64_t total_macs(bool include_attention = false, bool include_norm_act = false) const;
    std::int64_t total_attention_macs() const;

    std::string to_table() const;  // human-readable
    std::string to_json() const;   // machine-readable
};

CostReport count_params(const ModelConfig& cfg);
CostReport count_flops(const ModelConfig& cfg, std::int64_t resolution);

/// Component-wise cost ratios between two configurations at one resolution.
struct CompareReport {
    double param_ratio = 0.0;       // total state a / b
    double flop_ratio = 0.0;        // headline MACs a / b
    double tokenization_ratio = 0.0;  // stem+embedding MACs a / b
    double ffn_slot_ratio = 0.0;      // per-block FFN-slot MACs a / b
    /// LCA cost of `a` relative to one of its encoder blocks, restricted to
    /// the attention-and-FFN portion (score/aggregate products plus the
    /// FFN-slot linears) -- the part whose cost scales with query length.
    double lca_block_ratio = 0.0;

    std::string to_table() const;
};

CompareReport compare(const ModelConfig& a, const ModelConfig& b, std::int64_t resolution);

}  // namespace ceit
