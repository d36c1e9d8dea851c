#include "ceit/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ceit {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string ffn_kind_str(FfnKind k) {
    return k == FfnKind::leff ? "leff" : "baseline_ffn";
}

FfnKind ffn_kind_parse(const std::string& s) {
    if (s == "leff") return FfnKind::leff;
    if (s == "baseline_ffn") return FfnKind::baseline_ffn;
    fail("ffn_kind must be 'leff' or 'baseline_ffn', got '" + s + "'");
}

std::string norm_order_str(NormOrder n) { return n == NormOrder::pre ? "pre" : "post"; }

NormOrder norm_order_parse(const std::string& s) {
    if (s == "pre") return NormOrder::pre;
    if (s == "post") return NormOrder::post;
    fail("norm_order must be 'pre' or 'post', got '" + s + "'");
}

std::string schedule_str(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

Schedule schedule_parse(const std::string& s) {
    if (s == "cosine") return Schedule::cosine;
    if (s == "constant") return Schedule::constant;
    fail("schedule must be 'cosine' or 'constant', got '" + s + "'");
}

json i2t_to_json(const I2TConfig& c) {
    return json{{"enabled", c.enabled},
                {"conv_kernel", c.conv_kernel},
                {"conv_stride", c.conv_stride},
                {"channels", c.channels},
                {"use_maxpool", c.use_maxpool},
                {"pool_kernel", c.pool_kernel},
                {"pool_stride", c.pool_stride},
                {"use_bn", c.use_bn}};
}

json model_to_json(const ModelConfig& m) {
    return json{{"image_size", m.image_size},
                {"in_channels", m.in_channels},
                {"i2t", i2t_to_json(m.i2t)},
                {"patch_size", m.patch_size},
                {"depth", m.depth},
                {"embed_dim", m.embed_dim},
                {"heads", m.heads},
                {"ffn_kind", ffn_kind_str(m.ffn_kind)},
                {"expand_ratio", m.expand_ratio},
                {"leff_kernel", m.leff_kernel},
                {"leff_use_bn", m.leff_use_bn},
                {"use_lca", m.use_lca},
                {"num_classes", m.num_classes},
                {"norm_order", norm_order_str(m.norm_order)}};
}

json train_to_json(const TrainConfig& t) {
    return json{{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"base_lr", t.base_lr},
                {"warmup_epochs", t.warmup_epochs},
                {"schedule", schedule_str(t.schedule)},
                {"weight_decay", t.weight_decay},
                {"lr_floor_ratio", t.lr_floor_ratio},
                {"seed", t.seed},
                {"dataset",
                 json{{"num_classes", t.dataset.num_classes},
                      {"samples", t.dataset.samples},
                      {"noise", t.dataset.noise}}}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& scope) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        fail("config: bad value for " + scope + "." + key);
    }
}

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed) ok = ok || (it.key() == k);
        if (!ok) fail("config: unknown key '" + scope + "." + it.key() + "'");
    }
}

I2TConfig i2t_from_json(const json& j) {
    I2TConfig c;
    check_keys(j,
               {"enabled", "conv_kernel", "conv_stride", "channels", "use_maxpool", "pool_kernel",
                "pool_stride", "use_bn"},
               "model.i2t");
    read_field(j, "enabled", c.enabled, "model.i2t");
    read_field(j, "conv_kernel", c.conv_kernel, "model.i2t");
    read_field(j, "conv_stride", c.conv_stride, "model.i2t");
    read_field(j, "channels", c.channels, "model.i2t");
    read_field(j, "use_maxpool", c.use_maxpool, "model.i2t");
    read_field(j, "pool_kernel", c.pool_kernel, "model.i2t");
    read_field(j, "pool_stride", c.pool_stride, "model.i2t");
    read_field(j, "use_bn", c.use_bn, "model.i2t");
    return c;
}

ModelConfig model_from_json(const json& j) {
    ModelConfig m;
    check_keys(j,
               {"image_size", "in_channels", "i2t", "patch_size", "depth", "embed_dim", "heads",
                "ffn_kind", "expand_ratio", "leff_kernel", "leff_use_bn", "use_lca", "num_classes",
                "norm_order"},
               "model");
    read_field(j, "image_size", m.image_size, "model");
    read_field(j, "in_channels", m.in_channels, "model");
    if (j.contains("i2t")) m.i2t = i2t_from_json(j.at("i2t"));
    read_field(j, "patch_size", m.patch_size, "model");
    read_field(j, "depth", m.depth, "model");
    read_field(j, "embed_dim", m.embed_dim, "model");
    read_field(j, "heads", m.heads, "model");
    if (j.contains("ffn_kind")) m.ffn_kind = ffn_kind_parse(j.at("ffn_kind").get<std::string>());
    read_field(j, "expand_ratio", m.expand_ratio, "model");
    read_field(j, "leff_kernel", m.leff_kernel, "model");
    read_field(j, "leff_use_bn", m.leff_use_bn, "model");
    read_field(j, "use_lca", m.use_lca, "model");
    read_field(j, "num_classes", m.num_classes, "model");
    if (j.contains("norm_order")) {
        m.norm_order = norm_order_parse(j.at("norm_order").get<std::string>());
    }
    return m;
}

TrainConfig train_from_json(const json& j) {
    TrainConfig t;
    check_keys(j,
               {"epochs", "batch_size", "base_lr", "warmup_epochs", "schedule", "weight_decay",
                "lr_floor_ratio", "seed", "dataset"},
               "train");
    read_field(j, "epochs", t.epochs, "train");
    read_field(j, "batch_size", t.batch_size, "train");
    read_field(j, "base_lr", t.base_lr, "train");
    read_field(j, "warmup_epochs", t.warmup_epochs, "train");
    if (j.contains("schedule")) t.schedule = schedule_parse(j.at("schedule").get<std::string>());
    read_field(j, "weight_decay", t.weight_decay, "train");
    read_field(j, "lr_floor_ratio", t.lr_floor_ratio, "train");
    read_field(j, "seed", t.seed, "train");
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, {"num_classes", "samples", "noise"}, "train.dataset");
        read_field(d, "num_classes", t.dataset.num_classes, "train.dataset");
        read_field(d, "samples", t.dataset.samples, "train.dataset");
        read_field(d, "noise", t.dataset.noise, "train.dataset");
    }
    return t;
}

}  // namespace

void ModelConfig::validate() const {
    if (embed_dim % heads != 0) {
        fail("model: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
             std::to_string(heads));
    }
    if (expand_ratio < 1) fail("model: expand_ratio must be >= 1");
    if (leff_kernel % 2 != 1) fail("model: leff_kernel must be odd");
    if (image_size % patch_size != 0) {
        fail("model: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
             std::to_string(patch_size));
    }
    if (i2t.enabled) {
        const std::int64_t s = i2t.total_stride();
        if (image_size % s != 0) {
            fail("model: image_size not divisible by stem stride " + std::to_string(s));
        }
        if (patch_size % s != 0) {
            fail("model: patch_size " + std::to_string(patch_size) +
                 " not divisible by stem stride " + std::to_string(s));
        }
        if ((image_size / s) % (patch_size / s) != 0) {
            fail("model: stem grid not divisible by stem patch size");
        }
    }
    if (depth < 1) fail("model: depth must be >= 1");
    if (num_classes < 2) fail("model: num_classes must be >= 2");
}

void TrainConfig::validate() const {
    if (base_lr <= 0.0) fail("train: base_lr must be positive");
    if (warmup_epochs >= epochs) fail("train: warmup_epochs must be < epochs");
    if (batch_size < 1) fail("train: batch_size must be >= 1");
    if (dataset.samples < 1 || dataset.num_classes < 2) fail("train: bad dataset spec");
}

std::vector<std::string> preset_names() {
    return {"ceit-t", "ceit-s", "ceit-b", "deit-t", "ceit-toy"};
}

bool is_preset(const std::string& name) {
    for (const auto& n : preset_names()) {
        if (n == name) return true;
    }
    return false;
}

Config preset(const std::string& name) {
    Config cfg;
    if (name == "ceit-t") {
        cfg.model.embed_dim = 192;
        cfg.model.heads = 3;
    } else if (name == "ceit-s") {
        cfg.model.embed_dim = 384;
        cfg.model.heads = 6;
    } else if (name == "ceit-b") {
        cfg.model.embed_dim = 768;
        cfg.model.heads = 12;
    } else if (name == "deit-t") {
        cfg.model.embed_dim = 192;
        cfg.model.heads = 3;
        cfg.model.i2t.enabled = false;
        cfg.model.ffn_kind = FfnKind::baseline_ffn;
        cfg.model.use_lca = false;
    } else if (name == "ceit-toy") {
        cfg.model.image_size = 32;
        cfg.model.patch_size = 16;
        cfg.model.depth = 2;
        cfg.model.embed_dim = 16;
        cfg.model.heads = 2;
        cfg.model.num_classes = 4;
        cfg.train.epochs = 25;
        cfg.train.batch_size = 4;
        cfg.train.warmup_epochs = 2;
        cfg.train.base_lr = 0.03;  // desk-scale set is tiny; the paper-shaped 1e-3 barely moves it
    } else {
        fail("unknown preset '" + name + "'; known presets: ceit-t, ceit-s, ceit-b, deit-t, ceit-toy");
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

Config config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        fail(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, {"model", "train"}, "");
    Config cfg;
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

std::string config_to_json(const Config& cfg) {
    json j{{"model", model_to_json(cfg.model)}, {"train", train_to_json(cfg.train)}};
    return j.dump(2) + "\n";
}

Config load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

void apply_override(Config& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        fail("override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    // Round-trip through JSON so type checking and key validation stay in one
    // place.
    json j = json::parse(config_to_json(cfg));
    json* cursor = &j;
    std::size_t pos = 0;
    std::string leaf;
    while (true) {
        const auto dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (!cursor->contains(part)) fail("override: unknown key '" + key + "'");
        if (dot == std::string::npos) {
            leaf = part;
            break;
        }
        cursor = &cursor->at(part);
        pos = dot + 1;
    }
    json& slot = cursor->at(leaf);
    if (slot.is_object()) fail("override: '" + key + "' is a section, not a value");
    if (slot.is_boolean()) {
        if (value == "true") {
            slot = true;
        } else if (value == "false") {
            slot = false;
        } else {
            fail("override: '" + key + "' expects true/false, got '" + value + "'");
        }
    } else if (slot.is_string()) {
        slot = value;
    } else if (slot.is_number_integer() || slot.is_number_unsigned()) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(value, &used);
            if (used != value.size()) throw std::invalid_argument("");
            slot = v;
        } catch (const std::exception&) {
            fail("override: '" + key + "' expects an integer, got '" + value + "'");
        }
    } else {
        try {
            std::size_t used = 0;
            const double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument("");
            slot = v;
        } catch (const std::exception&) {
            fail("override: '" + key + "' expects a number, got '" + value + "'");
        }
    }
    cfg = config_from_json(j.dump());
}

}  // namespace ceit
