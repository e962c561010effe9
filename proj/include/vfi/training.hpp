#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vfi/data.hpp"
#include "vfi/layers.hpp"
#include "vfi/losses.hpp"
#include "vfi/synthesis.hpp"

namespace vfi {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
    std::int64_t step = 0;
};

/// Bias-corrected Adam over every parameter of `store`. Throws ContractError
/// if any parameter lacks a gradient.
void adam_step(ParameterStore& store, OptimizerState& state, const AdamConfig& config);

/// Patience-based stopping on a metric that should increase.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience);

    /// Records the metric of `epoch`; returns true when training should stop.
    bool update(int epoch, double metric);
    bool improved() const { return improved_; }
    int best_epoch() const { return best_epoch_; }
    double best() const { return best_; }
    int stale_epochs() const { return stale_; }
    int patience() const { return patience_; }
    void restore(int best_epoch, double best, int stale);

private:
    int patience_;
    int best_epoch_ = -1;
    double best_ = 0.0;
    int stale_ = 0;
    bool improved_ = false;
};

struct TrainConfig {
    ModelConfig model;
    LossConfig loss;  // extractor is created by the trainer when `perceptual` is set
    bool perceptual = true;
    std::uint64_t perceptual_seed = 0x5eed;
    AdamConfig adam;
    DiscriminatorSpec discriminator;
    int batch_size = 8;
    int crop = 128;
    int patience = 10;
    int max_epochs = 100;
    std::int64_t max_steps = 0;  // 0: unlimited
    std::uint64_t seed = 1;
    std::string dump_dir;  // divergence diagnostics, empty to disable

    void validate() const;
    /// Flat key=value representation; the inverse of apply_config_text.
    std::string to_text() const;
};

/// Applies "key=value" lines (# comments allowed) on top of `config`. Unknown
/// keys or malformed values throw std::invalid_argument.
void apply_config_text(TrainConfig& config, const std::string& text);
void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value);

struct StepRecord {
    std::int64_t step = 0;
    int epoch = 0;
    LossBreakdown loss;

    std::string to_json() const;
};

struct EpochRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double train_total = 0.0;
    std::vector<double> train_scale_tau;
    double train_refine = 0.0;
    double train_gan_d = 0.0;
    double val_psnr = 0.0;
    bool improved = false;

    std::string to_json() const;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_psnr = 0.0;
    std::string stop_reason;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Predictor = std::function<Frame(const Frame& first, const Frame& last)>;

/// Mean PSNR of predictions against the middle frames, on full frames.
double validate(const Predictor& predictor, const Dataset& val_set);
double validate(const InterpolationModel& model, const Dataset& val_set);
/// The (I0 + I1) / 2 reference interpolator.
Frame frame_average(const Frame& first, const Frame& last);
double frame_average_psnr(const Dataset& val_set);

class Trainer {
public:
    Trainer(TrainConfig config, const Dataset& train_set, const Dataset& val_set);

    /// Runs until early stopping, max_epochs or max_steps and restores the best weights.
    TrainHistory run();

    /// One optimisation step on a batch (a discriminator step first when GAN is on).
    StepRecord train_step(const Batch& batch);

    InterpolationModel& model() { return model_; }
    Discriminator* discriminator() { return disc_ ? &*disc_ : nullptr; }
    ParameterStore* discriminator_parameters() { return disc_store_.get(); }
    const TrainConfig& config() const { return config_; }
    const TrainHistory& history() const { return history_; }
    std::int64_t step() const { return step_; }

    void on_step(std::function<void(const StepRecord&)> callback) { on_step_ = std::move(callback); }
    void on_epoch(std::function<void(const EpochRecord&)> callback) { on_epoch_ = std::move(callback); }

    /// Resumable state: weights, optimiser moments, best weights and progress.
    void save_state(const std::string& path) const;
    void load_state(const std::string& path);

private:
    void dump_divergence(const Batch& batch, const LossBreakdown& loss) const;

    TrainConfig config_;
    const Dataset* train_;
    const Dataset* val_;
    InterpolationModel model_;
    std::unique_ptr<ParameterStore> disc_store_;
    std::optional<Discriminator> disc_;
    OptimizerState gen_opt_, disc_opt_;
    EarlyStopping stopper_;
    TrainHistory history_;
    ParameterStore::Snapshot best_;
    int next_epoch_ = 0;
    std::int64_t step_ = 0;
    std::function<void(const StepRecord&)> on_step_;
    std::function<void(const EpochRecord&)> on_epoch_;
};

}  // namespace vfi
