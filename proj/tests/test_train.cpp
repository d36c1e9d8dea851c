#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "ceit/config.hpp"
#include "ceit/model.hpp"
#include "ceit/train.hpp"

using namespace ceit;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/ceit_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

Config toy() { return preset("ceit-toy"); }

}  // namespace

TEST_CASE("synth_dataset is reproducible and zero-noise classes are constant") {
    const Dataset a = synth_dataset(2, 8, 32, 3, 5, 0.0);
    const Dataset b = synth_dataset(2, 8, 32, 3, 5, 0.0);
    CHECK(a.images.data() == b.images.data());
    CHECK(a.labels == b.labels);

    // labels cycle and same-class images are identical at zero noise
    CHECK(a.labels[0] == 0);
    CHECK(a.labels[1] == 1);
    const std::int64_t per = 3 * 32 * 32;
    for (std::int64_t j = 0; j < per; ++j) {
        CHECK(a.images.data()[j] == a.images.data()[2 * per + j]);
    }

    const Dataset c = synth_dataset(2, 8, 32, 3, 6, 0.0);
    CHECK(a.images.data() != c.images.data());

    const Dataset noisy = synth_dataset(2, 8, 32, 3, 5, 0.1);
    CHECK(noisy.images.data() != a.images.data());
}

TEST_CASE("dataset file round-trips") {
    const Dataset a = synth_dataset(3, 6, 16, 3, 9, 0.25);
    TempFile f("ds.bin");
    save_dataset(a, f.path);
    const Dataset b = load_dataset(f.path);
    CHECK(b.images.shape() == a.images.shape());
    CHECK(b.images.data() == a.images.data());
    CHECK(b.labels == a.labels);
    CHECK(b.num_classes == 3);
}

TEST_CASE("adamw single-step closed forms") {
    // g=1, lr=0.1, wd=0 -> p ~ 0.9 (bias-corrected unit moments)
    std::map<std::string, Tensor> params;
    params.emplace("p", Tensor::from_data({1}, {1.0}, true));
    params.at("p").grad()[0] = 1.0;
    AdamW opt(0.0);
    opt.step(params, 0.1);
    CHECK(params.at("p").data()[0] == doctest::Approx(0.9).epsilon(1e-7));

    // zero grad, wd=0.05, lr=0.1 -> pure decoupled decay by (1 - 0.005)
    std::map<std::string, Tensor> params2;
    params2.emplace("p", Tensor::from_data({1}, {2.0}, true));
    params2.at("p").grad();  // zeros
    AdamW opt2(0.05);
    opt2.step(params2, 0.1);
    CHECK(params2.at("p").data()[0] == doctest::Approx(2.0 * (1.0 - 0.005)).epsilon(1e-12));

    // zero grads and zero wd leave parameters untouched
    std::map<std::string, Tensor> params3;
    params3.emplace("p", Tensor::from_data({2}, {1.5, -2.5}, true));
    params3.at("p").grad();
    AdamW opt3(0.0);
    opt3.step(params3, 0.1);
    CHECK(params3.at("p").data() == std::vector<double>{1.5, -2.5});
}

TEST_CASE("adamw rejects NaN gradients naming the parameter") {
    std::map<std::string, Tensor> params;
    params.emplace("blocks.0.attn.qkv.weight", Tensor::from_data({1}, {1.0}, true));
    params.at("blocks.0.attn.qkv.weight").grad()[0] = std::nan("");
    AdamW opt(0.0);
    CHECK_THROWS_WITH_AS(opt.step(params, 0.1),
                         doctest::Contains("blocks.0.attn.qkv.weight"), std::runtime_error);
}

TEST_CASE("adamw matches an independent reimplementation to 1e-12") {
    std::mt19937_64 rng(7);
    const std::size_t n = 13;
    std::vector<double> p(n), ref_p(n), m(n, 0.0), v(n, 0.0);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : p) x = dist(rng);
    ref_p = p;
    std::map<std::string, Tensor> params;
    params.emplace("w", Tensor::from_data({static_cast<std::int64_t>(n)}, p, true));
    const double lr = 0.017, wd = 0.03, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    AdamW opt(wd);
    for (int step = 1; step <= 5; ++step) {
        std::vector<double> g(n);
        for (auto& x : g) x = dist(rng);
        params.at("w").grad() = g;
        opt.step(params, lr);
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(b1, step));
            const double vh = v[i] / (1 - std::pow(b2, step));
            ref_p[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * ref_p[i]);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        CHECK(params.at("w").data()[i] == doctest::Approx(ref_p[i]).epsilon(1e-12));
    }
}

TEST_CASE("lr schedule: warmup end, cosine midpoint and final floor") {
    TrainConfig cfg = toy().train;  // epochs 25, warmup 2, cosine
    const std::int64_t spe = 2;
    const double base = cfg.base_lr;
    const double floor = base * cfg.lr_floor_ratio;
    CHECK(lr_at(cfg, spe, 4) == base);                       // warmup end
    CHECK(lr_at(cfg, spe, 50) == doctest::Approx(floor).epsilon(1e-12));
    CHECK(lr_at(cfg, spe, 27) == doctest::Approx(floor + (base - floor) * 0.5).epsilon(1e-12));
    CHECK(lr_at(cfg, spe, 2) == doctest::Approx(base * 0.5).epsilon(1e-12));  // mid-warmup

    TrainConfig flat = cfg;
    flat.schedule = Schedule::constant;
    CHECK(lr_at(flat, spe, 30) == base);
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
    Config cfg = toy();
    const Dataset ds = synth_dataset(2, 8, 32, 3, cfg.train.seed, 0.0);
    Model model(cfg.model, 3);
    const auto before = model.param("head.weight").data();
    AdamW opt(0.0);
    // drive two manual steps at lr = 0 through real gradients
    for (int s = 0; s < 2; ++s) {
        ForwardOptions fwd;
        fwd.training = true;
        fwd.update_bn_stats = false;
        Tensor loss = cross_entropy(model.forward(ds.images, fwd).logits, ds.labels);
        model.zero_grads();
        backward(loss);
        opt.step(model.params(), 0.0);
    }
    CHECK(model.param("head.weight").data() == before);
}

TEST_CASE("training is bitwise deterministic for a fixed seed") {
    Config cfg = toy();
    const Dataset ds = synth_dataset(2, 8, 32, 3, cfg.train.seed, 0.0);
    auto run = [&] {
        Model model(cfg.model, cfg.train.seed);
        AdamW opt(cfg.train.weight_decay);
        return train_steps(model, opt, ds, cfg.train, 0, 8);
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].loss == b[i].loss);
        CHECK(a[i].lr == b[i].lr);
        CHECK(a[i].accuracy == b[i].accuracy);
    }
}

TEST_CASE("training reports divergence with the step index") {
    Config cfg = toy();
    const Dataset ds = synth_dataset(2, 8, 32, 3, 1, 0.0);
    Model model(cfg.model, 1);
    model.param("head.bias").data()[0] = std::nan("");
    AdamW opt(cfg.train.weight_decay);
    CHECK_THROWS_WITH_AS(train_steps(model, opt, ds, cfg.train, 0, 1),
                         doctest::Contains("step 1"), std::runtime_error);
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
    Config cfg = toy();
    const Dataset ds = synth_dataset(2, 8, 32, 3, cfg.train.seed, 0.0);
    Model model(cfg.model, cfg.train.seed);
    AdamW opt(cfg.train.weight_decay);
    train_steps(model, opt, ds, cfg.train, 0, 3);
    TempFile f1("ck1.bin"), f2("ck2.bin");
    save_checkpoint(make_checkpoint(model, opt, cfg, 3), f1.path);
    const Checkpoint loaded = load_checkpoint(f1.path);
    save_checkpoint(loaded, f2.path);
    const std::string a = slurp(f1.path), b = slurp(f2.path);
    CHECK(a.size() > 0);
    CHECK(a == b);
}

TEST_CASE("resume from a checkpoint reproduces the unbroken run exactly") {
    Config cfg = toy();
    const Dataset ds = synth_dataset(2, 8, 32, 3, cfg.train.seed, 0.0);

    Model straight(cfg.model, cfg.train.seed);
    AdamW opt_straight(cfg.train.weight_decay);
    const auto full = train_steps(straight, opt_straight, ds, cfg.train, 0, 20);

    Model part(cfg.model, cfg.train.seed);
    AdamW opt_part(cfg.train.weight_decay);
    const auto first = train_steps(part, opt_part, ds, cfg.train, 0, 10);
    TempFile f("ck_resume.bin");
    save_checkpoint(make_checkpoint(part, opt_part, cfg, 10), f.path);

    const Checkpoint ckpt = load_checkpoint(f.path);
    Model resumed(ckpt.config.model, ckpt.config.train.seed);
    AdamW opt_resumed(ckpt.config.train.weight_decay);
    restore_model(resumed, opt_resumed, ckpt);
    const auto rest = train_steps(resumed, opt_resumed, ds, ckpt.config.train, ckpt.step, 10);

    REQUIRE(first.size() + rest.size() == full.size());
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(full[i].loss == first[i].loss);
        CHECK(full[10 + i].loss == rest[i].loss);
    }
    for (const auto& [name, p] : straight.params()) {
        CHECK(p.data() == resumed.params().at(name).data());
    }
    for (const auto& [name, b] : straight.buffers()) {
        CHECK(b.data() == resumed.buffers().at(name).data());
    }
}

TEST_CASE("loading a checkpoint into a mismatched config names the offending tensor") {
    Config cfg = toy();
    Model model(cfg.model, 1);
    AdamW opt(cfg.train.weight_decay);
    TempFile f("ck_mismatch.bin");
    save_checkpoint(make_checkpoint(model, opt, cfg, 0), f.path);
    const Checkpoint ckpt = load_checkpoint(f.path);

    Config wide = toy();
    wide.model.embed_dim = 32;
    wide.model.heads = 2;
    Model other(wide.model, 1);
    AdamW opt2(cfg.train.weight_decay);
    try {
        restore_model(other, opt2, ckpt);
        FAIL("expected a shape mismatch");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("shape mismatch") != std::string::npos);
        CHECK(msg.find("blocks.0.attn.proj.bias") != std::string::npos);  // first in name order
    }

    Config other_kind = toy();
    other_kind.model.ffn_kind = FfnKind::baseline_ffn;
    Model ffn_model(other_kind.model, 1);
    AdamW opt3(cfg.train.weight_decay);
    CHECK_THROWS_AS(restore_model(ffn_model, opt3, ckpt), std::runtime_error);
}

TEST_CASE("checkpoint loader rejects non-checkpoint files") {
    TempFile f("not_ck.bin");
    std::ofstream(f.path) << "definitely not binary state";
    CHECK_THROWS_AS(load_checkpoint(f.path), std::runtime_error);
}

TEST_CASE("metrics render as a step,lr,loss,accuracy csv") {
    std::vector<StepMetrics> h{{1, 0.5, 2.0, 0.25}};
    const std::string csv = metrics_csv(h);
    CHECK(csv.rfind("step,lr,loss,accuracy\n", 0) == 0);
    CHECK(csv.find("1,0.5,2,0.25") != std::string::npos);
}

TEST_CASE("evaluate runs the eval path and reports finite metrics") {
    Config cfg = toy();
    const Dataset ds = synth_dataset(2, 8, 32, 3, 4, 0.0);
    Model model(cfg.model, 4);
    const EvalResult r = evaluate(model, ds, 4);
    CHECK(std::isfinite(r.loss));
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
}

TEST_CASE("ablation grid: every stem and feed-forward arm constructs, counts and trains") {
    const auto arms = run_ablation_grid(2, 11);
    CHECK(arms.size() == 13);  // 6 stem arms + baseline ffn + 3 kernels x 2 bn arms
    for (const auto& arm : arms) {
        CAPTURE(arm.name);
        CHECK(arm.params > 0);
        CHECK(arm.macs > 0);
        CHECK(std::isfinite(arm.first_loss));
        CHECK(std::isfinite(arm.last_loss));
    }
    const std::string table = ablation_table(arms);
    CHECK(table.find("leff k5") != std::string::npos);
    CHECK(table.find("stem: none") != std::string::npos);
}
