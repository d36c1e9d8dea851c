#include "ceit/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ceit {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

bool is_zero_init(const std::string& name) {
    // Final projections of residual branches start at zero so a fresh block is
    // the identity map.
    const auto ends_with = [&name](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with("attn.proj.weight") || ends_with("ffn.fc2.weight") ||
           ends_with("leff.fc2.weight");
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::int64_t C = cfg_.embed_dim;
    const std::int64_t K = cfg_.hidden_dim();
    const std::int64_t N = cfg_.num_patch_tokens();

    // Creation order is fixed so identical seeds give identical parameters.
    std::vector<std::pair<std::string, Shape>> learnable;
    std::vector<std::pair<std::string, Shape>> norm_stats;

    if (cfg_.i2t.enabled) {
        learnable.emplace_back("i2t.conv.weight",
                               Shape{cfg_.i2t.channels, cfg_.in_channels, cfg_.i2t.conv_kernel,
                                     cfg_.i2t.conv_kernel});
        learnable.emplace_back("i2t.conv.bias", Shape{cfg_.i2t.channels});
        if (cfg_.i2t.use_bn) {
            learnable.emplace_back("i2t.bn.weight", Shape{cfg_.i2t.channels});
            learnable.emplace_back("i2t.bn.bias", Shape{cfg_.i2t.channels});
            norm_stats.emplace_back("i2t.bn.running_mean", Shape{cfg_.i2t.channels});
            norm_stats.emplace_back("i2t.bn.running_var", Shape{cfg_.i2t.channels});
        }
    }
    learnable.emplace_back("embed.weight", Shape{cfg_.patch_values(), C});
    learnable.emplace_back("embed.bias", Shape{C});
    learnable.emplace_back("cls_token", Shape{C});
    learnable.emplace_back("pos_embed", Shape{N + 1, C});

    for (std::int64_t b = 0; b < cfg_.depth; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        learnable.emplace_back(p + "norm1.weight", Shape{C});
        learnable.emplace_back(p + "norm1.bias", Shape{C});
        learnable.emplace_back(p + "attn.qkv.weight", Shape{C, 3 * C});
        learnable.emplace_back(p + "attn.qkv.bias", Shape{3 * C});
        learnable.emplace_back(p + "attn.proj.weight", Shape{C, C});
        learnable.emplace_back(p + "attn.proj.bias", Shape{C});
        learnable.emplace_back(p + "norm2.weight", Shape{C});
        learnable.emplace_back(p + "norm2.bias", Shape{C});
        if (cfg_.ffn_kind == FfnKind::leff) {
            learnable.emplace_back(p + "leff.fc1.weight", Shape{C, K});
            learnable.emplace_back(p + "leff.fc1.bias", Shape{K});
            learnable.emplace_back(p + "leff.dwconv.weight",
                                   Shape{K, 1, cfg_.leff_kernel, cfg_.leff_kernel});
            learnable.emplace_back(p + "leff.dwconv.bias", Shape{K});
            learnable.emplace_back(p + "leff.fc2.weight", Shape{K, C});
            learnable.emplace_back(p + "leff.fc2.bias", Shape{C});
            if (cfg_.leff_use_bn) {
                for (const auto& [bn, ch] :
                     std::vector<std::pair<std::string, std::int64_t>>{
                         {"leff.bn1", K}, {"leff.bn2", K}, {"leff.bn3", C}}) {
                    learnable.emplace_back(p + bn + ".weight", Shape{ch});
                    learnable.emplace_back(p + bn + ".bias", Shape{ch});
                    norm_stats.emplace_back(p + bn + ".running_mean", Shape{ch});
                    norm_stats.emplace_back(p + bn + ".running_var", Shape{ch});
                }
            }
        } else {
            learnable.emplace_back(p + "ffn.fc1.weight", Shape{C, K});
            learnable.emplace_back(p + "ffn.fc1.bias", Shape{K});
            learnable.emplace_back(p + "ffn.fc2.weight", Shape{K, C});
            learnable.emplace_back(p + "ffn.fc2.bias", Shape{C});
        }
    }

    if (cfg_.use_lca) {
        learnable.emplace_back("lca.norm1.weight", Shape{C});
        learnable.emplace_back("lca.norm1.bias", Shape{C});
        for (const char* w : {"q", "k", "v", "proj"}) {
            learnable.emplace_back("lca.attn." + std::string(w) + ".weight", Shape{C, C});
            learnable.emplace_back("lca.attn." + std::string(w) + ".bias", Shape{C});
        }
        learnable.emplace_back("lca.norm2.weight", Shape{C});
        learnable.emplace_back("lca.norm2.bias", Shape{C});
        learnable.emplace_back("lca.ffn.fc1.weight", Shape{C, K});
        learnable.emplace_back("lca.ffn.fc1.bias", Shape{K});
        learnable.emplace_back("lca.ffn.fc2.weight", Shape{K, C});
        learnable.emplace_back("lca.ffn.fc2.bias", Shape{C});
    }
    if (cfg_.norm_order == NormOrder::pre) {
        learnable.emplace_back("norm.weight", Shape{C});
        learnable.emplace_back("norm.bias", Shape{C});
    }
    learnable.emplace_back("head.weight", Shape{C, cfg_.num_classes});
    learnable.emplace_back("head.bias", Shape{cfg_.num_classes});

    for (auto& [name, shape] : learnable) {
        Tensor t;
        const bool is_norm_gain = name.size() > 7 && (name.find("norm") != std::string::npos ||
                                                      name.find(".bn") != std::string::npos) &&
                                  name.ends_with("weight");
        const bool is_bias = name.ends_with("bias");
        if (is_norm_gain) {
            t = Tensor::full(shape, 1.0, true);
        } else if (is_bias || is_zero_init(name)) {
            t = Tensor::zeros(shape, true);
        } else {
            t = Tensor::trunc_normal(shape, rng, 0.02, true);
        }
        params_.emplace(name, t);
    }
    for (auto& [name, shape] : norm_stats) {
        buffers_.emplace(name, Tensor::full(shape, name.ends_with("var") ? 1.0 : 0.0, false));
    }
}

Tensor& Model::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) fail("model: no parameter named '" + name + "'");
    return it->second;
}

std::int64_t Model::num_param_scalars() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

std::int64_t Model::num_state_scalars() const {
    std::int64_t n = num_param_scalars();
    for (const auto& [name, t] : buffers_) n += t.numel();
    return n;
}

void Model::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

Tensor Model::norm(const Tensor& x, const std::string& prefix) const {
    return layer_norm(x, params_.at(prefix + ".weight"), params_.at(prefix + ".bias"),
                      x.ndim() - 1, kLayerNormEps);
}

Tensor Model::bn(const Tensor& x, const std::string& prefix, int channel_axis,
                 const ForwardOptions& opts) const {
    return batch_norm(x, params_.at(prefix + ".weight"), params_.at(prefix + ".bias"),
                      buffers_.at(prefix + ".running_mean"), buffers_.at(prefix + ".running_var"),
                      channel_axis, kBatchNormMomentum, kBatchNormEps, opts.training,
                      opts.training && opts.update_bn_stats);
}

Tensor Model::i2t_forward(const Tensor& images, const ForwardOptions& opts) const {
    if (!cfg_.i2t.enabled) return images;
    Tensor x = conv2d(images, params_.at("i2t.conv.weight"), params_.at("i2t.conv.bias"),
                      cfg_.i2t.conv_stride, (cfg_.i2t.conv_kernel - 1) / 2, 1);
    if (cfg_.i2t.use_bn) x = bn(x, "i2t.bn", 1, opts);
    if (cfg_.i2t.use_maxpool) {
        x = max_pool2d(x, cfg_.i2t.pool_kernel, cfg_.i2t.pool_stride,
                       (cfg_.i2t.pool_kernel - 1) / 2);
    }
    return x;
}

TokenSequence Model::patch_embed(const Tensor& features, const ForwardOptions& opts) const {
    const std::int64_t B = features.dim(0);
    const std::int64_t D = features.dim(1);
    const std::int64_t H = features.dim(2);
    const std::int64_t W = features.dim(3);
    const std::int64_t P = cfg_.stem_patch_size();
    if (H % P != 0 || W % P != 0) {
        fail("patch_embed: feature map " + shape_str(features.shape()) +
             " not divisible by patch side " + std::to_string(P));
    }
    const std::int64_t G = H / P;
    const std::int64_t N = G * (W / P);
    // [B,D,G,P,G,P] -> [B,G,G,D,P,P] -> [B,N,D*P*P]; patch order is row-major
    // over the grid.
    Tensor x = reshape(features, {B, D, G, P, W / P, P});
    x = permute(x, {0, 2, 4, 1, 3, 5});
    x = reshape(x, {B, N, D * P * P});
    Tensor tokens = linear(x, params_.at("embed.weight"), params_.at("embed.bias"));

    Tensor pos = params_.at("pos_embed");  // [N+1, C]
    if (!opts.patch_permutation.empty()) {
        if (static_cast<std::int64_t>(opts.patch_permutation.size()) != N) {
            fail("patch_permutation must have length N");
        }
        tokens = index_select(tokens, 1, opts.patch_permutation);
        std::vector<std::int64_t> pos_rows{0};
        for (auto i : opts.patch_permutation) pos_rows.push_back(i + 1);
        pos = index_select(pos, 0, pos_rows);
    }

    Tensor cls = expand_leading(reshape(params_.at("cls_token"), {1, cfg_.embed_dim}), B);
    Tensor seq = concat(cls, tokens, 1);
    seq = add(seq, expand_leading(pos, B));
    TokenSequence out;
    out.tokens = seq;
    out.grid_side = G;
    return out;
}

TokenSequence Model::msa_forward(const TokenSequence& x, const std::string& prefix) const {
    const std::int64_t B = x.tokens.dim(0);
    const std::int64_t T = x.tokens.dim(1);
    const std::int64_t C = cfg_.embed_dim;
    const std::int64_t h = cfg_.heads;
    const std::int64_t dh = cfg_.head_dim();
    Tensor qkv = linear(x.tokens, params_.at(prefix + "qkv.weight"),
                        params_.at(prefix + "qkv.bias"));  // [B,T,3C]
    auto split_head = [&](std::int64_t offset) {
        Tensor t = narrow(qkv, 2, offset, C);
        t = reshape(t, {B, T, h, dh});
        return permute(t, {0, 2, 1, 3});  // [B,h,T,dh]
    };
    Tensor q = split_head(0);
    Tensor k = split_head(C);
    Tensor v = split_head(2 * C);
    q = scale(q, 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor scores = matmul(q, permute(k, {0, 1, 3, 2}));  // [B,h,T,T]
    Tensor attn = softmax(scores, 3);
    Tensor ctx = matmul(attn, v);                 // [B,h,T,dh]
    ctx = permute(ctx, {0, 2, 1, 3});             // [B,T,h,dh]
    ctx = reshape(ctx, {B, T, C});
    Tensor out = linear(ctx, params_.at(prefix + "proj.weight"), params_.at(prefix + "proj.bias"));
    return TokenSequence{out, x.grid_side};
}

TokenSequence Model::ffn_forward(const TokenSequence& x, const std::string& prefix) const {
    Tensor h = linear(x.tokens, params_.at(prefix + "fc1.weight"), params_.at(prefix + "fc1.bias"));
    h = gelu(h);
    Tensor out = linear(h, params_.at(prefix + "fc2.weight"), params_.at(prefix + "fc2.bias"));
    return TokenSequence{out, x.grid_side};
}

TokenSequence Model::leff_forward(const TokenSequence& x, const std::string& prefix,
                                  const ForwardOptions& opts) const {
    const std::int64_t B = x.tokens.dim(0);
    const std::int64_t N = x.num_patch_tokens();
    const std::int64_t G = x.grid_side;
    if (x.tokens.dim(1) != N + 1) fail("leff: token count does not match grid");
    const std::int64_t K = cfg_.hidden_dim();
    const bool use_bn = cfg_.leff_use_bn;

    Tensor cls = narrow(x.tokens, 1, 0, 1);       // identical mapping
    Tensor p = narrow(x.tokens, 1, 1, N);

    p = linear(p, params_.at(prefix + "fc1.weight"), params_.at(prefix + "fc1.bias"));
    if (use_bn) p = bn(p, prefix + "bn1", 2, opts);
    p = gelu(p);

    // restore to the spatial grid in original row-major patch order
    p = reshape(p, {B, G, G, K});
    p = permute(p, {0, 3, 1, 2});  // [B,K,G,G]
    p = conv2d(p, params_.at(prefix + "dwconv.weight"), params_.at(prefix + "dwconv.bias"), 1,
               (cfg_.leff_kernel - 1) / 2, K);
    if (use_bn) p = bn(p, prefix + "bn2", 1, opts);
    p = gelu(p);

    p = permute(p, {0, 2, 3, 1});
    p = reshape(p, {B, N, K});  // flatten
    p = linear(p, params_.at(prefix + "fc2.weight"), params_.at(prefix + "fc2.bias"));
    if (use_bn) p = bn(p, prefix + "bn3", 2, opts);
    p = gelu(p);

    return TokenSequence{concat(cls, p, 1), x.grid_side};
}

TokenSequence Model::encoder_block_forward(const TokenSequence& x, int block,
                                           const ForwardOptions& opts) const {
    const std::string p = "blocks." + std::to_string(block) + ".";
    auto ffn_slot = [&](const TokenSequence& t) {
        return cfg_.ffn_kind == FfnKind::leff ? leff_forward(t, p + "leff.", opts)
                                              : ffn_forward(t, p + "ffn.");
    };
    if (cfg_.norm_order == NormOrder::pre) {
        TokenSequence n1{norm(x.tokens, p + "norm1"), x.grid_side};
        Tensor xp = add(x.tokens, msa_forward(n1, p + "attn.").tokens);
        TokenSequence n2{norm(xp, p + "norm2"), x.grid_side};
        Tensor y = add(xp, ffn_slot(n2).tokens);
        return TokenSequence{y, x.grid_side};
    }
    // post-norm, the literal encoder equation
    Tensor xp = norm(add(x.tokens, msa_forward(x, p + "attn.").tokens), p + "norm1");
    TokenSequence xps{xp, x.grid_side};
    Tensor y = norm(add(xp, ffn_slot(xps).tokens), p + "norm2");
    return TokenSequence{y, x.grid_side};
}

Tensor Model::attention(const Tensor& q_tokens, const Tensor& kv_tokens, const std::string& q_name,
                        const std::string& k_name, const std::string& v_name,
                        const std::string& proj_name, Tensor* attention_out) const {
    const std::int64_t B = q_tokens.dim(0);
    const std::int64_t Tq = q_tokens.dim(1);
    const std::int64_t Tk = kv_tokens.dim(1);
    const std::int64_t C = cfg_.embed_dim;
    const std::int64_t h = cfg_.heads;
    const std::int64_t dh = cfg_.head_dim();
    auto to_heads = [&](Tensor t, std::int64_t T) {
        return permute(reshape(t, {B, T, h, dh}), {0, 2, 1, 3});
    };
    Tensor q = to_heads(
        linear(q_tokens, params_.at(q_name + ".weight"), params_.at(q_name + ".bias")), Tq);
    Tensor k = to_heads(
        linear(kv_tokens, params_.at(k_name + ".weight"), params_.at(k_name + ".bias")), Tk);
    Tensor v = to_heads(
        linear(kv_tokens, params_.at(v_name + ".weight"), params_.at(v_name + ".bias")), Tk);
    q = scale(q, 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(matmul(q, permute(k, {0, 1, 3, 2})), 3);  // [B,h,Tq,Tk]
    if (attention_out != nullptr) *attention_out = attn;
    Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, Tq, C});
    return linear(ctx, params_.at(proj_name + ".weight"), params_.at(proj_name + ".bias"));
}

Tensor Model::lca_forward(const ClassTokenTrace& trace, const ForwardOptions& opts,
                          Tensor* attention_out) const {
    if (trace.per_layer.empty()) fail("lca: empty class-token trace");
    const std::int64_t L = static_cast<std::int64_t>(trace.per_layer.size());
    Tensor stack = trace.per_layer[0];  // [B,1,C]
    for (std::int64_t l = 1; l < L; ++l) stack = concat(stack, trace.per_layer[l], 1);
    const std::int64_t B = stack.dim(0);
    const std::int64_t C = cfg_.embed_dim;
    Tensor last = narrow(stack, 1, L - 1, 1);  // residual stream: the L-th class token

    Tensor y;
    if (cfg_.norm_order == NormOrder::pre) {
        Tensor normed = norm(stack, "lca.norm1");
        Tensor q_in = narrow(normed, 1, L - 1, 1);
        Tensor xp = add(last, attention(q_in, normed, "lca.attn.q", "lca.attn.k", "lca.attn.v",
                                        "lca.attn.proj", attention_out));
        Tensor n2 = norm(xp, "lca.norm2");
        Tensor h = linear(n2, params_.at("lca.ffn.fc1.weight"), params_.at("lca.ffn.fc1.bias"));
        y = add(xp, linear(gelu(h), params_.at("lca.ffn.fc2.weight"),
                           params_.at("lca.ffn.fc2.bias")));
    } else {
        Tensor xp = norm(add(last, attention(last, stack, "lca.attn.q", "lca.attn.k",
                                             "lca.attn.v", "lca.attn.proj", attention_out)),
                         "lca.norm1");
        Tensor h = linear(xp, params_.at("lca.ffn.fc1.weight"), params_.at("lca.ffn.fc1.bias"));
        y = norm(add(xp, linear(gelu(h), params_.at("lca.ffn.fc2.weight"),
                                params_.at("lca.ffn.fc2.bias"))),
                 "lca.norm2");
    }
    return reshape(y, {B, C});
}

ForwardResult Model::forward(const Tensor& images, const ForwardOptions& opts) const {
    if (images.ndim() != 4 || images.dim(1) != cfg_.in_channels ||
        images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size) {
        fail("forward: expected images [B," + std::to_string(cfg_.in_channels) + "," +
             std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "], got " +
             shape_str(images.shape()));
    }
    ForwardResult result;
    Tensor features = i2t_forward(images, opts);
    TokenSequence seq = patch_embed(features, opts);
    for (std::int64_t b = 0; b < cfg_.depth; ++b) {
        seq = encoder_block_forward(seq, static_cast<int>(b), opts);
        result.trace.per_layer.push_back(narrow(seq.tokens, 1, 0, 1));
    }
    Tensor rep;
    if (cfg_.use_lca) {
        rep = lca_forward(result.trace, opts, &result.lca_attention);
    } else {
        rep = reshape(narrow(seq.tokens, 1, 0, 1), {seq.tokens.dim(0), cfg_.embed_dim});
    }
    if (cfg_.norm_order == NormOrder::pre) rep = norm(rep, "norm");
    result.logits = linear(rep, params_.at("head.weight"), params_.at("head.bias"));
    return result;
}

}  // namespace ceit
