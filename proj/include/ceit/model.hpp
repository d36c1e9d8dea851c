#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ceit/config.hpp"
#include "ceit/tensor.hpp"

namespace ceit {

/// (N+1) x C token matrix per batch element; the class token always sits in
/// row 0 and is never restored to the spatial grid.
struct TokenSequence {
    Tensor tokens;  // [B, N+1, C]
    std::int64_t grid_side = 0;
    static constexpr std::int64_t class_index = 0;

    std::int64_t num_patch_tokens() const { return grid_side * grid_side; }
};

/// Class tokens captured after each encoder block, one [B, 1, C] entry per
/// layer.
struct ClassTokenTrace {
    std::vector<Tensor> per_layer;
};

struct ForwardOptions {
    bool training = false;
    /// When false, training-mode BatchNorm still normalizes by batch
    /// statistics but leaves the running stats untouched (pure function;
    /// required by the finite-difference oracle).
    bool update_bn_stats = true;
    /// Optional permutation of the N patch tokens, applied jointly to the
    /// embedded tokens and their positional embeddings.
    std::vector<std::int64_t> patch_permutation;
};

struct ForwardResult {
    Tensor logits;              // [B, num_classes]
    ClassTokenTrace trace;      // empty unless depth was run
    Tensor lca_attention;       // [B, h, 1, L] softmax weights; undefined without LCA
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    /// Learnable parameters, ordered by name.
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    /// Non-learnable state (BatchNorm running statistics).
    std::map<std::string, Tensor>& buffers() { return buffers_; }
    const std::map<std::string, Tensor>& buffers() const { return buffers_; }

    Tensor& param(const std::string& name);
    std::int64_t num_param_scalars() const;   // learnable only
    std::int64_t num_state_scalars() const;   // learnable + buffers

    void zero_grads();

    ForwardResult forward(const Tensor& images, const ForwardOptions& opts = {}) const;

    // Sub-passes, exposed for unit tests and the Python bindings.
    Tensor i2t_forward(const Tensor& images, const ForwardOptions& opts) const;
    TokenSequence patch_embed(const Tensor& features, const ForwardOptions& opts) const;
    TokenSequence msa_forward(const TokenSequence& x, const std::string& prefix) const;
    TokenSequence ffn_forward(const TokenSequence& x, const std::string& prefix) const;
    TokenSequence leff_forward(const TokenSequence& x, const std::string& prefix,
                               const ForwardOptions& opts) const;
    TokenSequence encoder_block_forward(const TokenSequence& x, int block,
                                        const ForwardOptions& opts) const;
    /// Returns the final [B, C] representation; fills `attention_out` with the
    /// [B, h, 1, L] weights when non-null.
    Tensor lca_forward(const ClassTokenTrace& trace, const ForwardOptions& opts,
                       Tensor* attention_out = nullptr) const;

private:
    Tensor attention(const Tensor& q_tokens, const Tensor& kv_tokens, const std::string& q_name,
                     const std::string& k_name, const std::string& v_name,
                     const std::string& proj_name, Tensor* attention_out) const;
    Tensor norm(const Tensor& x, const std::string& prefix) const;
    Tensor bn(const Tensor& x, const std::string& prefix, int channel_axis,
              const ForwardOptions& opts) const;

    ModelConfig cfg_;
    std::map<std::string, Tensor> params_;
    std::map<std::string, Tensor> buffers_;
};

constexpr double kLayerNormEps = 1e-5;
constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

}  // namespace ceit
