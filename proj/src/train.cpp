#include "ceit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "ceit/analyzer.hpp"

namespace ceit {

namespace {

constexpr char kDataMagic[8] = {'C', 'E', 'I', 'T', 'D', 'A', 'T', 'A'};
constexpr char kCkptMagic[8] = {'C', 'E', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kDataVersion = 1;
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw std::runtime_error("unexpected end of file");
    return value;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const auto n = read_pod<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("unexpected end of file");
    return s;
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("unexpected end of file");
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    write_string(os, name);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) write_pod<std::int64_t>(os, t.dim(i));
    write_doubles(os, t.data());
}

std::pair<std::string, Tensor> read_tensor(std::istream& is) {
    std::string name = read_string(is);
    const auto ndim = read_pod<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = read_pod<std::int64_t>(is);
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    read_doubles(is, data);
    return {std::move(name), Tensor::from_data(std::move(shape), std::move(data))};
}

/// Per-epoch sample order; pure function of (seed, epoch) so a resumed run
/// sees exactly the batches the unbroken run would have.
std::vector<std::int64_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::int64_t n) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

Tensor gather_images(const Dataset& ds, const std::vector<std::int64_t>& rows) {
    const std::int64_t per = ds.images.numel() / ds.images.dim(0);
    Shape shape = ds.images.shape();
    shape[0] = static_cast<std::int64_t>(rows.size());
    std::vector<double> out(static_cast<std::size_t>(per * shape[0]));
    const auto& src = ds.images.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::memcpy(out.data() + r * per, src.data() + rows[r] * per,
                    static_cast<std::size_t>(per) * sizeof(double));
    }
    return Tensor::from_data(std::move(shape), std::move(out));
}

double batch_accuracy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    const std::int64_t b = logits.dim(0);
    const std::int64_t k = logits.dim(1);
    std::int64_t hits = 0;
    const auto& d = logits.data();
    for (std::int64_t i = 0; i < b; ++i) {
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < k; ++j) {
            if (d[i * k + j] > d[i * k + best]) best = j;
        }
        if (best == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(b);
}

}  // namespace

Dataset synth_dataset(std::int64_t num_classes, std::int64_t samples, std::int64_t image_size,
                      std::int64_t channels, std::uint64_t seed, double noise) {
    if (num_classes < 1 || samples < 1 || image_size < 1 || channels < 1) {
        throw std::invalid_argument("synth_dataset: all sizes must be positive");
    }
    const std::int64_t per = channels * image_size * image_size;
    std::vector<std::vector<double>> patterns(static_cast<std::size_t>(num_classes));
    for (std::int64_t k = 0; k < num_classes; ++k) {
        std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(k) + 1);
        std::normal_distribution<double> dist(0.0, 1.0);
        auto& p = patterns[static_cast<std::size_t>(k)];
        p.resize(static_cast<std::size_t>(per));
        for (auto& x : p) x = dist(rng);
    }
    Dataset ds;
    ds.num_classes = num_classes;
    ds.labels.resize(static_cast<std::size_t>(samples));
    std::vector<double> images(static_cast<std::size_t>(samples * per));
    std::mt19937_64 noise_rng(seed ^ 0xD1B54A32D192ED03ULL);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::int64_t i = 0; i < samples; ++i) {
        const std::int64_t k = i % num_classes;
        ds.labels[static_cast<std::size_t>(i)] = k;
        const auto& p = patterns[static_cast<std::size_t>(k)];
        double* row = images.data() + i * per;
        for (std::int64_t j = 0; j < per; ++j) {
            row[j] = p[static_cast<std::size_t>(j)] + (noise != 0.0 ? noise * dist(noise_rng) : 0.0);
        }
    }
    ds.images = Tensor::from_data({samples, channels, image_size, image_size}, std::move(images));
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kDataMagic, 8);
    write_pod<std::uint32_t>(os, kDataVersion);
    write_pod<std::int64_t>(os, ds.images.dim(0));
    write_pod<std::int64_t>(os, ds.images.dim(1));
    write_pod<std::int64_t>(os, ds.images.dim(2));
    write_pod<std::int64_t>(os, ds.images.dim(3));
    write_pod<std::int64_t>(os, ds.num_classes);
    for (auto l : ds.labels) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(l));
    write_doubles(os, ds.images.data());
    if (!os) throw std::runtime_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kDataMagic, 8) != 0) {
        throw std::runtime_error("not a dataset file: " + path);
    }
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kDataVersion) {
        throw std::runtime_error("dataset version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kDataVersion) + ")");
    }
    const auto count = read_pod<std::int64_t>(is);
    const auto channels = read_pod<std::int64_t>(is);
    const auto height = read_pod<std::int64_t>(is);
    const auto width = read_pod<std::int64_t>(is);
    Dataset ds;
    ds.num_classes = read_pod<std::int64_t>(is);
    ds.labels.resize(static_cast<std::size_t>(count));
    for (auto& l : ds.labels) l = read_pod<std::uint32_t>(is);
    std::vector<double> images(static_cast<std::size_t>(count * channels * height * width));
    read_doubles(is, images);
    ds.images = Tensor::from_data({count, channels, height, width}, std::move(images));
    return ds;
}

AdamW::AdamW(double weight_decay, double beta1, double beta2, double eps)
    : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(std::map<std::string, Tensor>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        const auto& g = p.grad();
        auto& mom = state_[name];
        auto& d = p.data();
        if (mom.m.empty()) {
            mom.m.assign(d.size(), 0.0);
            mom.v.assign(d.size(), 0.0);
        } else if (mom.m.size() != d.size()) {
            throw std::runtime_error("optimizer state size mismatch for parameter '" + name + "'");
        }
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (std::isnan(g[i])) {
                throw std::runtime_error("NaN gradient in parameter '" + name + "'");
            }
            mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g[i];
            mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double m_hat = mom.m[i] / bc1;
            const double v_hat = mom.v[i] / bc2;
            d[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps_) + weight_decay_ * d[i]);
        }
    }
}

double lr_at(const TrainConfig& cfg, std::int64_t steps_per_epoch, std::int64_t step) {
    const std::int64_t warmup = cfg.warmup_epochs * steps_per_epoch;
    const std::int64_t total = cfg.epochs * steps_per_epoch;
    if (warmup > 0 && step <= warmup) {
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (cfg.schedule == Schedule::constant) return cfg.base_lr;
    const double floor = cfg.base_lr * cfg.lr_floor_ratio;
    if (total <= warmup) return cfg.base_lr;
    double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    t = std::clamp(t, 0.0, 1.0);
    return floor + (cfg.base_lr - floor) * 0.5 * (1.0 + std::cos(M_PI * t));
}

std::string metrics_csv(const std::vector<StepMetrics>& history) {
    std::ostringstream os;
    os << "step,lr,loss,accuracy\n";
    os << std::setprecision(17);
    for (const auto& m : history) {
        os << m.step << "," << m.lr << "," << m.loss << "," << m.accuracy << "\n";
    }
    return os.str();
}

std::vector<StepMetrics> train_steps(Model& model, AdamW& opt, const Dataset& ds,
                                     const TrainConfig& cfg, std::int64_t start_step,
                                     std::int64_t num_steps) {
    cfg.validate();
    if (ds.size() < cfg.batch_size) {
        throw std::invalid_argument("dataset smaller than one batch (" +
                                    std::to_string(ds.size()) + " < " +
                                    std::to_string(cfg.batch_size) + ")");
    }
    if (ds.images.dim(2) != model.config().image_size) {
        throw std::invalid_argument("dataset image size " + std::to_string(ds.images.dim(2)) +
                                    " != model image size " +
                                    std::to_string(model.config().image_size));
    }
    const std::int64_t spe = ds.size() / cfg.batch_size;
    std::vector<StepMetrics> history;
    history.reserve(static_cast<std::size_t>(num_steps));
    std::vector<std::int64_t> order;
    std::int64_t order_epoch = -1;
    for (std::int64_t s = start_step; s < start_step + num_steps; ++s) {
        const std::int64_t epoch = s / spe;
        const std::int64_t pos = s % spe;
        if (epoch != order_epoch) {
            order = epoch_order(cfg.seed, epoch, ds.size());
            order_epoch = epoch;
        }
        std::vector<std::int64_t> rows(order.begin() + pos * cfg.batch_size,
                                       order.begin() + (pos + 1) * cfg.batch_size);
        Tensor batch = gather_images(ds, rows);
        std::vector<std::int64_t> labels(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            labels[i] = ds.labels[static_cast<std::size_t>(rows[i])];
        }
        ForwardOptions opts;
        opts.training = true;
        ForwardResult out = model.forward(batch, opts);
        Tensor loss = cross_entropy(out.logits, labels);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw std::runtime_error("training diverged: non-finite loss at step " +
                                     std::to_string(s + 1));
        }
        model.zero_grads();
        backward(loss);
        const double lr = lr_at(cfg, spe, s + 1);
        opt.step(model.params(), lr);
        StepMetrics m;
        m.step = s + 1;
        m.lr = lr;
        m.loss = loss_value;
        m.accuracy = batch_accuracy(out.logits, labels);
        history.push_back(m);
    }
    return history;
}

std::vector<StepMetrics> train(Model& model, AdamW& opt, const Dataset& ds,
                               const TrainConfig& cfg) {
    const std::int64_t spe = std::max<std::int64_t>(ds.size() / cfg.batch_size, 1);
    return train_steps(model, opt, ds, cfg, 0, cfg.epochs * spe);
}

EvalResult evaluate(const Model& model, const Dataset& ds, std::int64_t batch_size) {
    NoGradGuard no_grad;
    if (ds.images.dim(2) != model.config().image_size) {
        throw std::invalid_argument("dataset image size " + std::to_string(ds.images.dim(2)) +
                                    " != model image size " +
                                    std::to_string(model.config().image_size));
    }
    EvalResult r;
    std::int64_t done = 0;
    std::int64_t hits = 0;
    double loss_sum = 0.0;
    while (done < ds.size()) {
        const std::int64_t b = std::min(batch_size, ds.size() - done);
        std::vector<std::int64_t> rows(static_cast<std::size_t>(b));
        std::iota(rows.begin(), rows.end(), done);
        Tensor batch = gather_images(ds, rows);
        std::vector<std::int64_t> labels(ds.labels.begin() + done, ds.labels.begin() + done + b);
        ForwardResult out = model.forward(batch, {});
        loss_sum += cross_entropy(out.logits, labels).item() * static_cast<double>(b);
        hits += static_cast<std::int64_t>(
            std::lround(batch_accuracy(out.logits, labels) * static_cast<double>(b)));
        done += b;
    }
    r.loss = loss_sum / static_cast<double>(ds.size());
    r.accuracy = static_cast<double>(hits) / static_cast<double>(ds.size());
    return r;
}

Checkpoint make_checkpoint(const Model& model, const AdamW& opt, const Config& cfg,
                           std::int64_t step) {
    Checkpoint c;
    c.config = cfg;
    for (const auto& [name, t] : model.params()) c.params.emplace(name, t.clone_detached());
    for (const auto& [name, t] : model.buffers()) c.buffers.emplace(name, t.clone_detached());
    c.moments = opt.state();
    c.adam_t = opt.t();
    c.step = step;
    c.seed = cfg.train.seed;
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kCkptMagic, 8);
    write_pod<std::uint32_t>(os, kCkptVersion);
    write_pod<std::int64_t>(os, ckpt.step);
    write_pod<std::int64_t>(os, ckpt.adam_t);
    write_pod<std::uint64_t>(os, ckpt.seed);
    write_string(os, config_to_json(ckpt.config));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) write_tensor(os, name, t);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.buffers.size()));
    for (const auto& [name, t] : ckpt.buffers) write_tensor(os, name, t);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.moments.size()));
    for (const auto& [name, mom] : ckpt.moments) {
        write_string(os, name);
        write_pod<std::uint64_t>(os, mom.m.size());
        write_doubles(os, mom.m);
        write_doubles(os, mom.v);
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kCkptVersion) {
        throw std::runtime_error("checkpoint version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kCkptVersion) + ")");
    }
    Checkpoint c;
    c.step = read_pod<std::int64_t>(is);
    c.adam_t = read_pod<std::int64_t>(is);
    c.seed = read_pod<std::uint64_t>(is);
    c.config = config_from_json(read_string(is));
    const auto n_params = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_params; ++i) c.params.insert(read_tensor(is));
    const auto n_buffers = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_buffers; ++i) c.buffers.insert(read_tensor(is));
    const auto n_moments = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_moments; ++i) {
        std::string name = read_string(is);
        const auto len = read_pod<std::uint64_t>(is);
        AdamW::Moments mom;
        mom.m.resize(static_cast<std::size_t>(len));
        mom.v.resize(static_cast<std::size_t>(len));
        read_doubles(is, mom.m);
        read_doubles(is, mom.v);
        c.moments.emplace(std::move(name), std::move(mom));
    }
    return c;
}

namespace {

void restore_tensor_map(std::map<std::string, Tensor>& dst,
                        const std::map<std::string, Tensor>& src, const char* kind) {
    auto di = dst.begin();
    auto si = src.begin();
    while (di != dst.end() || si != src.end()) {
        if (di == dst.end() || (si != src.end() && si->first < di->first)) {
            throw std::runtime_error(std::string("checkpoint ") + kind + " '" + si->first +
                                     "' has no counterpart in the model");
        }
        if (si == src.end() || di->first < si->first) {
            throw std::runtime_error(std::string("model ") + kind + " '" + di->first +
                                     "' missing from checkpoint");
        }
        if (di->second.shape() != si->second.shape()) {
            throw std::runtime_error(std::string("shape mismatch for ") + kind + " '" + di->first +
                                     "': model " + shape_str(di->second.shape()) +
                                     " vs checkpoint " + shape_str(si->second.shape()));
        }
        di->second.data() = si->second.data();
        ++di;
        ++si;
    }
}

}  // namespace

void restore_model(Model& model, AdamW& opt, const Checkpoint& ckpt) {
    restore_tensor_map(model.params(), ckpt.params, "parameter");
    restore_tensor_map(model.buffers(), ckpt.buffers, "buffer");
    opt.state() = ckpt.moments;
    opt.set_t(ckpt.adam_t);
}

std::vector<AblationArm> run_ablation_grid(std::int64_t steps, std::uint64_t seed) {
    std::vector<AblationArm> arms;
    auto add = [&](const std::string& name, Config cfg) {
        AblationArm arm;
        arm.name = name;
        arm.config = std::move(cfg);
        arms.push_back(std::move(arm));
    };
    const Config toy = preset("ceit-toy");

    // Tokenization stem variants.
    {
        Config c = toy;
        c.model.i2t.enabled = false;
        add("stem: none (raw patches)", c);
    }
    add("stem: conv7 s2 + pool (default)", toy);
    {
        Config c = toy;
        c.model.i2t.use_maxpool = false;
        c.model.i2t.conv_stride = 4;
        c.model.i2t.conv_kernel = 5;
        add("stem: conv5 s4, no pool", c);
    }
    {
        Config c = toy;
        c.model.i2t.use_maxpool = false;
        c.model.i2t.conv_stride = 4;
        add("stem: conv7 s4, no pool", c);
    }
    {
        Config c = toy;
        c.model.i2t.use_bn = false;
        add("stem: conv7 s2 + pool, no BN", c);
    }
    {
        Config c = toy;
        c.model.i2t.channels = 64;
        add("stem: conv7 s2 + pool, 64 ch", c);
    }

    // Feed-forward variants.
    {
        Config c = toy;
        c.model.ffn_kind = FfnKind::baseline_ffn;
        add("ffn: baseline", c);
    }
    for (std::int64_t k : {1, 3, 5}) {
        for (bool bn : {true, false}) {
            Config c = toy;
            c.model.ffn_kind = FfnKind::leff;
            c.model.leff_kernel = k;
            c.model.leff_use_bn = bn;
            add("ffn: leff k" + std::to_string(k) + (bn ? ", BN" : ", no BN"), c);
        }
    }

    for (auto& arm : arms) {
        const CostReport report = count_flops(arm.config.model, arm.config.model.image_size);
        arm.params = report.total_state();
        arm.macs = report.total_macs();
        Dataset ds = synth_dataset(arm.config.model.num_classes, 8,
                                   arm.config.model.image_size, arm.config.model.in_channels,
                                   seed, 0.0);
        Model model(arm.config.model, seed);
        AdamW opt(arm.config.train.weight_decay);
        auto history = train_steps(model, opt, ds, arm.config.train, 0, steps);
        arm.first_loss = history.front().loss;
        arm.last_loss = history.back().loss;
    }
    return arms;
}

std::string ablation_table(const std::vector<AblationArm>& arms) {
    std::ostringstream os;
    os << std::left << std::setw(34) << "arm" << std::right << std::setw(10) << "params"
       << std::setw(12) << "macs" << std::setw(12) << "loss[1]" << std::setw(12) << "loss[end]"
       << "\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& a : arms) {
        os << std::left << std::setw(34) << a.name << std::right << std::setw(10) << a.params
           << std::setw(12) << a.macs << std::setw(12) << a.first_loss << std::setw(12)
           << a.last_loss << "\n";
    }
    return os.str();
}

}  // namespace ceit
