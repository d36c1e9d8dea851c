#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include <json.hpp>

#include "ceit/analyzer.hpp"
#include "ceit/config.hpp"
#include "ceit/model.hpp"

using namespace ceit;

namespace {

bool within(double value, double target, double tol) {
    return value >= target * (1.0 - tol) && value <= target * (1.0 + tol);
}

}  // namespace

TEST_CASE("parameter totals hit the reference table for T, S and the baseline") {
    CHECK(within(static_cast<double>(count_params(preset("ceit-t").model).total_state()), 6.4e6,
                 0.02));
    CHECK(within(static_cast<double>(count_params(preset("ceit-s").model).total_state()), 24.2e6,
                 0.02));
    CHECK(within(static_cast<double>(count_params(preset("deit-t").model).total_state()), 5.7e6,
                 0.02));
}

TEST_CASE("ceit-b parameter total is a known deviation from the reference table") {
    // The reference table lists the B variant at the same 86.6M as its plain
    // ViT counterpart, which cannot include the extra attention head and
    // LeFF kernels this architecture adds (~7.4M at C=768 for the head
    // alone). Enumeration gives the value below; the acceptance suite
    // reports the band check honestly as failing.
    CHECK(count_params(preset("ceit-b").model).total_params() == 93998248);
    CHECK(count_params(preset("ceit-b").model).total_state() == 94164200);
}

TEST_CASE("parameter totals equal the constructed model's scalar counts exactly") {
    for (const char* name : {"ceit-t", "deit-t", "ceit-toy"}) {
        const ModelConfig cfg = preset(name).model;
        Model model(cfg, 1);
        const CostReport report = count_params(cfg);
        CHECK(report.total_params() == model.num_param_scalars());
        CHECK(report.total_state() == model.num_state_scalars());
    }
}

TEST_CASE("flop totals hit the reference table at 224 and the 384 fine-tune row") {
    CHECK(within(static_cast<double>(count_flops(preset("ceit-t").model, 224).total_macs()),
                 1.2e9, 0.05));
    CHECK(within(static_cast<double>(count_flops(preset("ceit-s").model, 224).total_macs()),
                 4.5e9, 0.05));
    CHECK(within(static_cast<double>(count_flops(preset("ceit-b").model, 224).total_macs()),
                 17.4e9, 0.05));
    CHECK(within(static_cast<double>(count_flops(preset("ceit-t").model, 384).total_macs()),
                 3.6e9, 0.10));
}

TEST_CASE("totals equal the sum of entries and are non-negative") {
    const CostReport r = count_flops(preset("ceit-t").model, 224);
    std::int64_t params = 0, macs = 0, attn = 0;
    for (const auto& e : r.entries) {
        CHECK(e.params >= 0);
        CHECK(e.macs >= 0);
        params += e.params;
        macs += e.macs;
        attn += e.attention_macs;
    }
    CHECK(params == r.total_params());
    CHECK(macs == r.total_macs());
    CHECK(attn == r.total_attention_macs());
    CHECK(r.total_macs(true) == macs + attn);
}

TEST_CASE("flop scaling: 4x for convolutional terms, ~16x for attention products") {
    const ModelConfig cfg = preset("ceit-t").model;
    const CostReport a = count_flops(cfg, 224);
    const CostReport b = count_flops(cfg, 448);
    CHECK(b.entries[0].macs == 4 * a.entries[0].macs);  // stem conv
    CHECK(b.entries[1].macs == 4 * a.entries[1].macs);  // patch embedding
    const double attn_ratio = static_cast<double>(b.total_attention_macs()) /
                              static_cast<double>(a.total_attention_macs());
    // (4N+1)^2 / (N+1)^2 with N=196 -> 15.85
    CHECK(attn_ratio > 15.0);
    CHECK(attn_ratio < 16.2);
}

TEST_CASE("compare: identical configs give unit ratios") {
    const ModelConfig cfg = preset("ceit-t").model;
    const CompareReport r = compare(cfg, cfg, 224);
    CHECK(r.param_ratio == 1.0);
    CHECK(r.flop_ratio == 1.0);
    CHECK(r.tokenization_ratio == 1.0);
    CHECK(r.ffn_slot_ratio == 1.0);
}

TEST_CASE("compare: ceit-t and deit-t totals are within 10% of each other") {
    const CompareReport r = compare(preset("ceit-t").model, preset("deit-t").model, 224);
    CHECK(r.flop_ratio > 0.9);
    CHECK(r.flop_ratio < 1.1);
}

TEST_CASE("compare: lca costs about 1/N of a block's attention-and-ffn portion") {
    const CompareReport r = compare(preset("ceit-t").model, preset("deit-t").model, 224);
    const double n = 196.0;
    CHECK(r.lca_block_ratio > 0.0);
    CHECK(r.lca_block_ratio <= 1.2 / n);
}

TEST_CASE("analyzer rejects resolutions incompatible with the patch geometry") {
    CHECK_THROWS_AS(count_flops(preset("ceit-t").model, 225), std::invalid_argument);
}

TEST_CASE("json report parses and matches the table totals") {
    const CostReport r = count_flops(preset("ceit-toy").model, 32);
    const nlohmann::json j = nlohmann::json::parse(r.to_json());
    CHECK(j["totals"]["macs"].get<std::int64_t>() == r.total_macs());
    CHECK(j["totals"]["state"].get<std::int64_t>() == r.total_state());
    CHECK(j["entries"].size() == r.entries.size());
}

TEST_CASE("analytic totals match the instrumented forward pass exactly per preset") {
    for (const char* name : {"ceit-t", "ceit-s", "ceit-b", "deit-t", "ceit-toy"}) {
        CAPTURE(name);
        ModelConfig cfg = preset(name).model;
        cfg.image_size = 32;  // toy resolution: grid 2x2
        const CostReport report = count_flops(cfg, 32);
        Model model(cfg, 1);
        std::mt19937_64 rng(2);
        Tensor img = Tensor::randn({1, cfg.in_channels, 32, 32}, rng, 1.0);
        NoGradGuard no_grad;
        MacCounters::reset();
        model.forward(img, {});
        CHECK(static_cast<std::int64_t>(MacCounters::linear_conv()) == report.total_macs());
        CHECK(static_cast<std::int64_t>(MacCounters::matmul()) == report.total_attention_macs());
    }
}
