#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ceit/config.hpp"
#include "ceit/model.hpp"
#include "ceit/tensor.hpp"

namespace ceit {

struct Dataset {
    Tensor images;  // [M, C, H, W]
    std::vector<std::int64_t> labels;
    std::int64_t num_classes = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

/// Deterministic classes: each class is one fixed random pattern, samples are
/// that pattern plus `noise` * fresh Gaussian noise. Labels cycle 0..K-1.
Dataset synth_dataset(std::int64_t num_classes, std::int64_t samples, std::int64_t image_size,
                      std::int64_t channels, std::uint64_t seed, double noise);

/// Binary container: magic "CEITDATA", u32 version, then count/channels/
/// height/width/num_classes, labels as u32, images as little-endian f64.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Decoupled-weight-decay Adam; bias-corrected moments, per-parameter state
/// keyed by name.
class AdamW {
public:
    explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8);

    /// One update over every parameter in the map; consumes and clears no
    /// gradients (caller zeroes them). Throws on a NaN gradient, naming the
    /// parameter.
    void step(std::map<std::string, Tensor>& params, double lr);

    std::int64_t t() const { return t_; }

    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments>& state() { return state_; }
    const std::map<std::string, Moments>& state() const { return state_; }
    void set_t(std::int64_t t) { t_ = t; }

    double weight_decay() const { return weight_decay_; }

private:
    double weight_decay_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

/// Learning rate for 1-indexed `step` of `total_steps`: linear warmup to
/// base_lr over the warmup steps, then (for the cosine schedule) cosine decay
/// to base_lr * lr_floor_ratio at the final step.
double lr_at(const TrainConfig& cfg, std::int64_t steps_per_epoch, std::int64_t step);

struct StepMetrics {
    std::int64_t step = 0;  // 1-indexed
    double lr = 0.0;
    double loss = 0.0;
    double accuracy = 0.0;  // on the step's batch
};

std::string metrics_csv(const std::vector<StepMetrics>& history);

/// Runs `num_steps` optimization steps starting after global step
/// `start_step` (0 for a fresh run). Batch order within an epoch is a pure
/// function of (seed, epoch), so resuming from a checkpoint replays the
/// interrupted run exactly. Throws on non-finite loss, naming the step.
std::vector<StepMetrics> train_steps(Model& model, AdamW& opt, const Dataset& ds,
                                     const TrainConfig& cfg, std::int64_t start_step,
                                     std::int64_t num_steps);

/// Full run: cfg.epochs * (dataset size / batch size) steps from scratch.
std::vector<StepMetrics> train(Model& model, AdamW& opt, const Dataset& ds,
                               const TrainConfig& cfg);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Forward in eval mode (running BatchNorm statistics), no gradients.
EvalResult evaluate(const Model& model, const Dataset& ds, std::int64_t batch_size);

struct Checkpoint {
    Config config;
    std::map<std::string, Tensor> params;
    std::map<std::string, Tensor> buffers;
    std::map<std::string, AdamW::Moments> moments;
    std::int64_t adam_t = 0;
    std::int64_t step = 0;       // completed optimization steps
    std::uint64_t seed = 0;      // drives the batch-order stream on resume
};

Checkpoint make_checkpoint(const Model& model, const AdamW& opt, const Config& cfg,
                           std::int64_t step);

/// Versioned little-endian binary; saving a just-loaded checkpoint is
/// byte-identical. Layout documented in the README.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint state into a model built from a (possibly different)
/// config. Name-set or shape mismatches throw, naming the first offending
/// tensor in name order.
void restore_model(Model& model, AdamW& opt, const Checkpoint& ckpt);

struct AblationArm {
    std::string name;
    Config config;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
};

/// Constructs, counts and briefly trains every stem variant and every LeFF
/// kernel/BatchNorm arm at toy scale; returns the arms plus a rendered table.
std::vector<AblationArm> run_ablation_grid(std::int64_t steps, std::uint64_t seed);
std::string ablation_table(const std::vector<AblationArm>& arms);

}  // namespace ceit
