#include "ceit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

#include "ceit/model.hpp"

namespace ceit {

std::string GradCheckReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(28) << "parameter" << std::right << std::setw(10) << "elements"
       << std::setw(16) << "max rel err" << "\n";
    os << std::scientific << std::setprecision(3);
    for (const auto& e : entries) {
        os << std::left << std::setw(28) << e.name << std::right << std::setw(10) << e.checked
           << std::setw(16) << e.max_rel_err << "\n";
    }
    os << (passed ? "PASS" : "FAIL") << " (worst " << worst << " in '" << worst_name
       << "', tolerance " << tolerance << ")\n";
    return os.str();
}

GradCheckReport gradcheck(std::map<std::string, Tensor>& params,
                          const std::function<Tensor()>& loss_fn, const GradCheckOptions& opts) {
    for (auto& [name, p] : params) p.zero_grad();
    Tensor loss = loss_fn();
    backward(loss);

    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, p] : params) analytic[name] = p.grad();
    if (!opts.corrupt_param.empty()) {
        auto it = analytic.find(opts.corrupt_param);
        if (it == analytic.end() || it->second.empty()) {
            throw std::invalid_argument("corrupt_param '" + opts.corrupt_param +
                                        "' not among checked parameters");
        }
        it->second[0] += 1.0;
    }

    GradCheckReport report;
    report.tolerance = opts.tolerance;
    NoGradGuard no_grad;
    for (auto& [name, p] : params) {
        GradCheckEntry entry;
        entry.name = name;
        auto& d = p.data();
        const auto& a = analytic[name];
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double saved = d[i];
            d[i] = saved + opts.fd_step;
            const double up = loss_fn().item();
            d[i] = saved - opts.fd_step;
            const double down = loss_fn().item();
            d[i] = saved;
            const double numeric = (up - down) / (2.0 * opts.fd_step);
            const double mag = std::max(std::abs(a[i]), std::abs(numeric));
            ++entry.checked;
            if (mag <= opts.zero_threshold) continue;
            const double rel = std::abs(a[i] - numeric) / mag;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        if (entry.max_rel_err >= report.worst) {
            report.worst = entry.max_rel_err;
            report.worst_name = entry.name;
        }
        report.entries.push_back(std::move(entry));
    }
    report.passed = report.worst < opts.tolerance;
    return report;
}

GradCheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed,
                                const GradCheckOptions& opts) {
    Model model(cfg, seed);
    std::mt19937_64 rng(seed ^ 0xA3C59AC2ED10F849ULL);
    const std::int64_t batch = 2;
    Tensor images = Tensor::randn({batch, cfg.in_channels, cfg.image_size, cfg.image_size}, rng,
                                  1.0);
    std::vector<std::int64_t> labels(static_cast<std::size_t>(batch));
    for (std::int64_t i = 0; i < batch; ++i) labels[static_cast<std::size_t>(i)] = i % cfg.num_classes;

    // update_bn_stats=false keeps the loss a pure function of the parameters,
    // which the finite-difference probe requires.
    auto loss_fn = [&]() {
        ForwardOptions fwd;
        fwd.training = true;
        fwd.update_bn_stats = false;
        return cross_entropy(model.forward(images, fwd).logits, labels);
    };
    return gradcheck(model.params(), loss_fn, opts);
}

GradCheckReport gradcheck_lca(const ModelConfig& cfg, std::uint64_t seed,
                              const GradCheckOptions& opts) {
    if (!cfg.use_lca) throw std::invalid_argument("gradcheck_lca: config has use_lca=false");
    Model model(cfg, seed);
    std::mt19937_64 rng(seed ^ 0x5851F42D4C957F2DULL);
    const std::int64_t batch = 2;
    ClassTokenTrace trace;
    for (std::int64_t l = 0; l < cfg.depth; ++l) {
        trace.per_layer.push_back(Tensor::randn({batch, 1, cfg.embed_dim}, rng, 1.0));
    }
    Tensor probe = Tensor::randn({batch, cfg.embed_dim}, rng, 1.0);

    std::map<std::string, Tensor> lca_params;
    for (auto& [name, p] : model.params()) {
        if (name.rfind("lca.", 0) == 0) lca_params.emplace(name, p);
    }
    auto loss_fn = [&]() {
        ForwardOptions fwd;
        fwd.training = true;
        fwd.update_bn_stats = false;
        Tensor out = model.lca_forward(trace, fwd);
        return sum_all(mul(out, probe));
    };
    return gradcheck(lca_params, loss_fn, opts);
}

}  // namespace ceit
