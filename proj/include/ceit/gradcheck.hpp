#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ceit/config.hpp"
#include "ceit/tensor.hpp"

namespace ceit {

struct GradCheckEntry {
    std::string name;
    std::int64_t checked = 0;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    double worst = 0.0;
    std::string worst_name;
    bool passed = false;

    std::string to_table() const;
};

struct GradCheckOptions {
    double fd_step = 1e-5;
    double tolerance = 1e-4;
    /// Relative error is measured only where max(|analytic|, |numeric|)
    /// exceeds this; below it both are treated as zero.
    double zero_threshold = 1e-8;
    /// Adds 1.0 to this parameter's first analytic gradient entry before
    /// comparing (negative-control hook).
    std::string corrupt_param;
};

/// Central-difference check of d loss / d param for every tensor in `params`.
/// `loss_fn` must be a pure function of the current parameter values.
GradCheckReport gradcheck(std::map<std::string, Tensor>& params,
                          const std::function<Tensor()>& loss_fn,
                          const GradCheckOptions& opts = {});

/// Full-model check: cross-entropy loss of a training-mode forward pass
/// (running BatchNorm statistics frozen) on a small random batch.
GradCheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed,
                                const GradCheckOptions& opts = {});

/// Same oracle scoped to the layer-wise class-token attention head: loss is a
/// weighted sum of lca_forward over a random class-token trace; only lca.*
/// parameters are checked.
GradCheckReport gradcheck_lca(const ModelConfig& cfg, std::uint64_t seed,
                              const GradCheckOptions& opts = {});

}  // namespace ceit
