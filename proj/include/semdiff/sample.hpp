#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "semdiff/data.hpp"
#include "semdiff/schedule.hpp"
#include "semdiff/unet.hpp"

namespace semdiff {

/// Anything that predicts (eps_hat, v) for a noisy batch.
using DenoiseFn =
    std::function<DenoiserOutput(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond)>;

DenoiseFn as_denoise_fn(Denoiser net);

struct SampleOptions {
    uint64_t seed = 0;
    // Drops the sigma_t * z term at every step; the trajectory then depends
    // only on x_T.
    bool zero_variance = false;
    // Clamps the implied x_0 estimate to [-1, 1] and takes the posterior mean
    // around it. Without clamping this equals the noise-form mean exactly.
    bool clip_denoised = false;
    // Called with each step index after the update, T down to 1.
    std::function<void(int64_t)> on_step;
};

/// One ancestral update x_t -> x_{t-1}. `z` is ignored at t = 1.
torch::Tensor reverse_step(const DenoiseFn& fn, const NoiseSchedule& schedule, const torch::Tensor& x_t, int64_t t,
                           const ConditioningBundle& cond, const torch::Tensor& z, bool zero_variance = false,
                           bool clip_denoised = false);

/// Full reverse trajectory from x_T ~ N(0, I). `cond` has batch 1 (shared by
/// all n samples) or n. Returns [n, 1, size, size] in [0, 1].
torch::Tensor sample(const DenoiseFn& fn, const NoiseSchedule& schedule, const ConditioningBundle& cond, int64_t n,
                     int64_t size, const SampleOptions& options = {});

/// Checks the bundle variant and spatial size against the denoiser config.
torch::Tensor sample(Denoiser net, const NoiseSchedule& schedule, const ConditioningBundle& cond, int64_t n,
                     const SampleOptions& options = {});

/// Bundle with the inputs the variant needs.
ConditioningBundle conditioning_for(const Batch& batch, Conditioning variant);

struct SampleGridOptions {
    uint64_t seed = 0;
    Split split = Split::Test;
    int64_t max_masks = 0;    // 0: every mask in the split
    int64_t batch_size = 16;  // trajectories run side by side
    bool use_ema = false;
    bool clip_denoised = false;
    std::function<void(int64_t done, int64_t total)> on_progress;
};

struct SampleGridResult {
    std::filesystem::path index_path;
    std::filesystem::path grid_path;  // empty when no image was produced
    std::vector<std::filesystem::path> synthetic;
    std::vector<std::string> errors;  // per-file I/O failures
};

/// Samples n_per_mask images for each mask of the manifest split. Layout:
/// synth/<stem>[_r<k>].png, real/<stem>.png, masks/<stem>.png, index.json and
/// grid.png (mask | synthetic | real per row).
SampleGridResult sample_grid(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                             const std::filesystem::path& out_dir, int64_t n_per_mask,
                             const SampleGridOptions& options = {});

/// Output stem for repeat k of a mask: "<stem>" when n == 1, else "<stem>_r<k>".
std::string synthetic_stem(const std::string& stem, int64_t repeat, int64_t n_per_mask);

}  // namespace semdiff
