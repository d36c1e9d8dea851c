#include "ceit/analyzer.hpp"

#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ceit {

namespace {

std::int64_t conv_out(std::int64_t in, std::int64_t kernel, std::int64_t stride) {
    const std::int64_t pad = (kernel - 1) / 2;
    return (in + 2 * pad - kernel) / stride + 1;
}

struct Breakdown {
    CostEntry stem;
    CostEntry embed;
    CostEntry block;  // one encoder block
    CostEntry block_attn_products_and_ffn;  // subset used for the LCA ratio
    CostEntry lca;
    CostEntry lca_attn_products_and_ffn;
    CostEntry final_norm;
    CostEntry head;
};

// Closed-form enumeration, independent of the model's parameter schema: the
// correspondence is asserted by tests against an actually-constructed model
// and an instrumented forward pass.
Breakdown enumerate(const ModelConfig& cfg, std::int64_t resolution) {
    Breakdown r;
    const std::int64_t C = cfg.embed_dim;
    const std::int64_t K = cfg.hidden_dim();
    const std::int64_t L = cfg.depth;
    const std::int64_t G = cfg.grid_side(resolution);
    const std::int64_t N = G * G;
    const std::int64_t T = N + 1;
    const std::int64_t values = cfg.patch_values();

    if (cfg.i2t.enabled) {
        const std::int64_t D = cfg.i2t.channels;
        const std::int64_t ck = cfg.i2t.conv_kernel;
        const std::int64_t co = conv_out(resolution, ck, cfg.i2t.conv_stride);
        r.stem.name = "i2t";
        r.stem.params = D * cfg.in_channels * ck * ck + D;
        r.stem.macs = co * co * D * (cfg.in_channels * ck * ck + 1);
        if (cfg.i2t.use_bn) {
            r.stem.params += 2 * D;
            r.stem.param_buffers += 2 * D;
            r.stem.norm_act_ops += co * co * D;
        }
        if (cfg.i2t.use_maxpool) {
            const std::int64_t po = conv_out(co, cfg.i2t.pool_kernel, cfg.i2t.pool_stride);
            r.stem.norm_act_ops +=
                po * po * D * (cfg.i2t.pool_kernel * cfg.i2t.pool_kernel - 1);
        }
    }

    r.embed.name = "patch_embed";
    r.embed.params = values * C + C  // projection
                     + C             // class token
                     + (cfg.num_patch_tokens() + 1) * C;  // positional embedding
    r.embed.macs = N * C * (values + 1);

    r.block.name = "encoder_block";
    r.block.params = 2 * 2 * C                      // two layer norms
                     + C * 3 * C + 3 * C            // qkv
                     + C * C + C;                   // output projection
    r.block.macs = T * 3 * C * (C + 1) + T * C * (C + 1);
    r.block.attention_macs = 2 * static_cast<std::int64_t>(T) * T * C;
    r.block.norm_act_ops = 2 * T * C + cfg.heads * T * T;
    std::int64_t ffn_macs = 0;
    std::int64_t ffn_params = 0;
    if (cfg.ffn_kind == FfnKind::leff) {
        ffn_params = C * K + K + K * 1 * cfg.leff_kernel * cfg.leff_kernel + K + K * C + C;
        ffn_macs = N * K * (C + 1) + N * K * (cfg.leff_kernel * cfg.leff_kernel + 1) +
                   N * C * (K + 1);
        r.block.norm_act_ops += 2 * N * K + N * C;  // three GELUs
        if (cfg.leff_use_bn) {
            ffn_params += 2 * (K + K + C);
            r.block.param_buffers += 2 * (K + K + C);
            r.block.norm_act_ops += 2 * N * K + N * C;
        }
    } else {
        ffn_params = C * K + K + K * C + C;
        ffn_macs = T * K * (C + 1) + T * C * (K + 1);
        r.block.norm_act_ops += T * K;  // GELU
    }
    r.block.params += ffn_params;
    r.block.macs += ffn_macs;
    r.block_attn_products_and_ffn.name = "encoder_block(attention+ffn portion)";
    r.block_attn_products_and_ffn.macs = r.block.attention_macs + ffn_macs;

    if (cfg.use_lca) {
        r.lca.name = "lca";
        r.lca.params = 2 * 2 * C                      // two layer norms
                       + 4 * (C * C + C)              // q,k,v,proj
                       + C * K + K + K * C + C;       // ffn
        const std::int64_t lca_ffn_macs = K * (C + 1) + C * (K + 1);
        r.lca.macs = C * (C + 1)                  // q from the last class token
                     + 2 * L * C * (C + 1)        // k,v over the L class tokens
                     + C * (C + 1)                // output projection
                     + lca_ffn_macs;
        r.lca.attention_macs = 2 * L * C;
        r.lca.norm_act_ops = (L + 1) * C + cfg.heads * L + K;
        r.lca_attn_products_and_ffn.name = "lca(attention+ffn portion)";
        r.lca_attn_products_and_ffn.macs = r.lca.attention_macs + lca_ffn_macs;
    }

    if (cfg.norm_order == NormOrder::pre) {
        r.final_norm.name = "norm";
        r.final_norm.params = 2 * C;
        r.final_norm.norm_act_ops = C;
    }
    r.head.name = "head";
    r.head.params = C * cfg.num_classes + cfg.num_classes;
    r.head.macs = cfg.num_classes * (C + 1);
    return r;
}

CostReport build_report(const ModelConfig& cfg, std::int64_t resolution, bool with_flops) {
    cfg.validate();
    if (resolution % cfg.patch_size != 0 ||
        (cfg.i2t.enabled && resolution % cfg.i2t.total_stride() != 0)) {
        throw std::invalid_argument("analyzer: resolution " + std::to_string(resolution) +
                                    " incompatible with patch/stem geometry");
    }
    Breakdown b = enumerate(cfg, resolution);
    CostReport report;
    report.resolution = resolution;
    auto push = [&](CostEntry e) {
        if (e.name.empty()) return;
        if (!with_flops) {
            e.macs = 0;
            e.attention_macs = 0;
            e.norm_act_ops = 0;
        }
        report.entries.push_back(std::move(e));
    };
    push(b.stem);
    push(b.embed);
    for (std::int64_t i = 0; i < cfg.depth; ++i) {
        CostEntry e = b.block;
        e.name = "blocks." + std::to_string(i);
        push(e);
    }
    push(b.lca);
    push(b.final_norm);
    push(b.head);
    return report;
}

}  // namespace

std::int64_t CostReport::total_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.params;
    return n;
}

std::int64_t CostReport::total_param_buffers() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.param_buffers;
    return n;
}

std::int64_t CostReport::total_macs(bool include_attention, bool include_norm_act) const {
    std::int64_t n = 0;
    for (const auto& e : entries) {
        n += e.macs;
        if (include_attention) n += e.attention_macs;
        if (include_norm_act) n += e.norm_act_ops;
    }
    return n;
}

std::int64_t CostReport::total_attention_macs() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.attention_macs;
    return n;
}

std::string CostReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(18) << "layer" << std::right << std::setw(14) << "params"
       << std::setw(10) << "buffers" << std::setw(16) << "macs" << std::setw(16) << "attn macs"
       << "\n";
    for (const auto& e : entries) {
        os << std::left << std::setw(18) << e.name << std::right << std::setw(14) << e.params
           << std::setw(10) << e.param_buffers << std::setw(16) << e.macs << std::setw(16)
           << e.attention_macs << "\n";
    }
    os << std::left << std::setw(18) << "total" << std::right << std::setw(14) << total_params()
       << std::setw(10) << total_param_buffers() << std::setw(16) << total_macs() << std::setw(16)
       << total_attention_macs() << "\n";
    os << std::fixed << std::setprecision(3);
    os << "params (incl. norm stats): " << static_cast<double>(total_state()) / 1e6 << " M\n";
    os << "macs:                      " << static_cast<double>(total_macs()) / 1e9 << " G"
       << " (" << static_cast<double>(total_macs(true)) / 1e9 << " G incl. attention products)\n";
    return os.str();
}

std::string CostReport::to_json() const {
    nlohmann::json j;
    j["resolution"] = resolution;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries) {
        j["entries"].push_back({{"name", e.name},
                                {"params", e.params},
                                {"param_buffers", e.param_buffers},
                                {"macs", e.macs},
                                {"attention_macs", e.attention_macs},
                                {"norm_act_ops", e.norm_act_ops}});
    }
    j["totals"] = {{"params", total_params()},
                   {"param_buffers", total_param_buffers()},
                   {"state", total_state()},
                   {"macs", total_macs()},
                   {"macs_incl_attention", total_macs(true)},
                   {"attention_macs", total_attention_macs()}};
    return j.dump(2) + "\n";
}

CostReport count_params(const ModelConfig& cfg) {
    return build_report(cfg, cfg.image_size, /*with_flops=*/false);
}

CostReport count_flops(const ModelConfig& cfg, std::int64_t resolution) {
    return build_report(cfg, resolution, /*with_flops=*/true);
}

CompareReport compare(const ModelConfig& a, const ModelConfig& b, std::int64_t resolution) {
    const CostReport ra = count_flops(a, resolution);
    const CostReport rb = count_flops(b, resolution);
    const Breakdown ba = enumerate(a, resolution);
    const Breakdown bb = enumerate(b, resolution);
    CompareReport r;
    r.param_ratio = static_cast<double>(ra.total_state()) / static_cast<double>(rb.total_state());
    r.flop_ratio = static_cast<double>(ra.total_macs()) / static_cast<double>(rb.total_macs());
    r.tokenization_ratio = static_cast<double>(ba.stem.macs + ba.embed.macs) /
                           static_cast<double>(bb.stem.macs + bb.embed.macs);
    const auto ffn_slot = [](const Breakdown& x) {
        return x.block_attn_products_and_ffn.macs - x.block.attention_macs;
    };
    r.ffn_slot_ratio = static_cast<double>(ffn_slot(ba)) / static_cast<double>(ffn_slot(bb));
    if (a.use_lca) {
        r.lca_block_ratio = static_cast<double>(ba.lca_attn_products_and_ffn.macs) /
                            static_cast<double>(ba.block_attn_products_and_ffn.macs);
    }
    return r;
}

std::string CompareReport::to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "param ratio (a/b):          " << param_ratio << "\n";
    os << "flop ratio (a/b):           " << flop_ratio << "\n";
    os << "tokenization flop ratio:    " << tokenization_ratio << "\n";
    os << "ffn-slot flop ratio:        " << ffn_slot_ratio << "\n";
    if (lca_block_ratio > 0.0) {
        os << "lca vs one block (attention+ffn portion): " << lca_block_ratio << "\n";
    }
    return os.str();
}

}  // namespace ceit
