#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "semdiff/data.hpp"
#include "semdiff/schedule.hpp"
#include "semdiff/unet.hpp"

namespace semdiff {

struct ScheduleConfig {
    int64_t steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    NoiseSchedule build() const { return NoiseSchedule::linear(steps, beta_start, beta_end); }
    nlohmann::json to_json() const;
    static ScheduleConfig from_json(const nlohmann::json& j);
    bool operator==(const ScheduleConfig&) const = default;
};

struct TrainConfig {
    int64_t iterations = 150000;
    int64_t batch_size = 16;
    double learning_rate = 1e-4;
    double lambda_vlb = 0.001;
    int64_t checkpoint_every = 50000;
    int64_t metrics_every = 100;
    uint64_t seed = 0;
    Conditioning variant = Conditioning::MaskGuided;
    std::optional<double> ema_decay;
    std::optional<double> grad_clip_norm;

    static TrainConfig paper(Conditioning variant);
    /// 3000 iterations, batch 8, checkpoints every 1000.
    static TrainConfig toy(Conditioning variant);

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    bool operator==(const TrainConfig&) const = default;
};

/// Everything that determines a training run's numerics.
struct RunConfig {
    ScheduleConfig schedule;
    DenoiserConfig model;
    TrainConfig train;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    /// Canonical JSON text (sorted keys, compact).
    std::string canonical() const { return to_json().dump(); }
};

/// Field-level differences between two configs, "model.variant: a -> b".
/// Fields that may legitimately change on resume (iterations, checkpoint
/// cadence) are ignored.
std::vector<std::string> incompatible_fields(const RunConfig& saved, const RunConfig& requested);

struct MetricsRow {
    int64_t step = 0;
    double l_simple = 0.0;
    double l_vlb = 0.0;
    double total = 0.0;
    double wallclock_s = 0.0;
};

/// Per-step loss values kept in memory for analysis.
struct StepLoss {
    int64_t step;
    double l_simple;
    double l_vlb;
    double total;
};

struct TrainResult {
    int64_t final_step = 0;
    std::filesystem::path final_checkpoint;
    std::vector<StepLoss> history;  // steps run by this call only
};

struct TrainOptions {
    std::filesystem::path out_dir;
    // Zeroes wall-clock columns so that metrics files are byte-reproducible.
    bool deterministic = false;
    // Called after every optimizer step; return false to stop early.
    std::function<bool(const StepLoss&)> on_step;
};

/// Owns the denoiser, its Adam state, and the step counter.
class Trainer {
public:
    /// Fresh run: seeds torch, builds the denoiser from `config.model`.
    Trainer(RunConfig config, const Dataset& dataset, TrainOptions options);

    /// Continues from a checkpoint. Throws CheckpointError on schema problems
    /// and ConfigError listing mismatched fields.
    static Trainer resume(const std::filesystem::path& checkpoint, RunConfig config, const Dataset& dataset,
                          TrainOptions options);

    /// Runs until `config.train.iterations` optimizer steps have been taken in
    /// total. Writes the metrics CSV and checkpoints into `options.out_dir`.
    TrainResult run();

    /// One optimizer step on the batch scheduled for `step()` + 1.
    StepLoss train_step();

    int64_t step() const { return step_; }
    Denoiser denoiser() const { return net_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const RunConfig& config() const { return config_; }

    std::filesystem::path save_checkpoint() const;

private:
    Trainer(RunConfig config, const Dataset& dataset, TrainOptions options, bool seed_init);

    Batch batch_for_step(int64_t step) const;
    ConditioningBundle conditioning(const Batch& batch) const;
    void append_metrics(const MetricsRow& row) const;
    void truncate_metrics_after(int64_t step) const;

    RunConfig config_;
    const Dataset* dataset_;
    TrainOptions options_;
    NoiseSchedule schedule_;
    Denoiser net_{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer_;
    std::vector<torch::Tensor> ema_;
    std::vector<std::size_t> train_indices_;
    int64_t step_ = 0;
};

struct Checkpoint {
    RunConfig config;
    int64_t step = 0;
    Denoiser denoiser{nullptr};
    bool has_ema = false;
};

/// Loads the config and weights of a checkpoint (optionally the EMA weights).
Checkpoint load_checkpoint(const std::filesystem::path& path, bool use_ema = false);

/// Resolves `ckpt_latest` pointer files to the checkpoint they name.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path);

std::vector<MetricsRow> read_metrics(const std::filesystem::path& csv);

}  // namespace semdiff
