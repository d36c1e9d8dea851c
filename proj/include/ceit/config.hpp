#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ceit {

struct I2TConfig {
    bool enabled = true;
    std::int64_t conv_kernel = 7;
    std::int64_t conv_stride = 2;
    std::int64_t channels = 32;
    bool use_maxpool = true;
    std::int64_t pool_kernel = 3;
    std::int64_t pool_stride = 2;
    bool use_bn = true;

    std::int64_t total_stride() const {
        return conv_stride * (use_maxpool ? pool_stride : 1);
    }
};

enum class FfnKind { baseline_ffn, leff };
enum class NormOrder { pre, post };

struct ModelConfig {
    std::int64_t image_size = 224;
    std::int64_t in_channels = 3;
    I2TConfig i2t;
    /// Patch size measured on the original image; the stem-grid patch side is
    /// patch_size / i2t.total_stride() when the stem is enabled.
    std::int64_t patch_size = 16;
    std::int64_t depth = 12;
    std::int64_t embed_dim = 192;
    std::int64_t heads = 3;
    FfnKind ffn_kind = FfnKind::leff;
    std::int64_t expand_ratio = 4;
    std::int64_t leff_kernel = 3;
    bool leff_use_bn = true;
    bool use_lca = true;
    std::int64_t num_classes = 1000;
    NormOrder norm_order = NormOrder::pre;

    void validate() const;  // throws std::invalid_argument with a diagnostic

    std::int64_t stem_channels() const { return i2t.enabled ? i2t.channels : in_channels; }
    std::int64_t stem_patch_size() const {
        return i2t.enabled ? patch_size / i2t.total_stride() : patch_size;
    }
    /// Values per flattened patch fed to the embedding layer.
    std::int64_t patch_values() const {
        return stem_channels() * stem_patch_size() * stem_patch_size();
    }
    std::int64_t grid_side(std::int64_t resolution) const { return resolution / patch_size; }
    std::int64_t grid_side() const { return grid_side(image_size); }
    std::int64_t num_patch_tokens(std::int64_t resolution) const {
        const std::int64_t g = grid_side(resolution);
        return g * g;
    }
    std::int64_t num_patch_tokens() const { return num_patch_tokens(image_size); }
    std::int64_t head_dim() const { return embed_dim / heads; }
    std::int64_t hidden_dim() const { return expand_ratio * embed_dim; }
};

enum class Schedule { cosine, constant };

struct DatasetSpec {
    std::int64_t num_classes = 2;
    std::int64_t samples = 8;
    double noise = 0.0;
};

struct TrainConfig {
    std::int64_t epochs = 25;
    std::int64_t batch_size = 4;
    double base_lr = 1e-3;
    std::int64_t warmup_epochs = 2;
    Schedule schedule = Schedule::cosine;
    double weight_decay = 0.05;
    /// Cosine decay floor as a fraction of base_lr.
    double lr_floor_ratio = 0.01;
    std::uint64_t seed = 42;
    DatasetSpec dataset;

    void validate() const;
};

struct Config {
    ModelConfig model;
    TrainConfig train;
};

/// Preset names: ceit-t, ceit-s, ceit-b, deit-t, ceit-toy.
std::vector<std::string> preset_names();
bool is_preset(const std::string& name);
Config preset(const std::string& name);

Config config_from_json(const std::string& json_text);
std::string config_to_json(const Config& cfg);
Config load_config_file(const std::string& path);

/// Applies a dotted `key=value` override (e.g. "model.depth=2",
/// "train.base_lr=0.01"). Unknown keys or mistyped values throw.
void apply_override(Config& cfg, const std::string& assignment);

}  // namespace ceit
