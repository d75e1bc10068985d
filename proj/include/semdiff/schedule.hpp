#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace semdiff {

/// Precomputed constants of a discrete Gaussian diffusion process.
///
/// Steps are 1-based: valid indices are 1..steps(). All constants are held in
/// double precision and cast to the tensor dtype at the point of use. Step
/// arguments are either a scalar (applied to the whole tensor) or an int64
/// tensor of shape [B], in which case the first tensor dimension is the batch.
///
/// Immutable after construction.
class NoiseSchedule {
public:
    /// Evenly spaced betas from beta_start to beta_end.
    static NoiseSchedule linear(int64_t steps, double beta_start, double beta_end);

    /// Arbitrary betas in [0, 1). Used for hand-built schedules in tests and
    /// for experiments with non-linear ladders.
    static NoiseSchedule from_betas(std::vector<double> betas);

    int64_t steps() const { return static_cast<int64_t>(betas_.size()); }

    std::span<const double> betas() const { return betas_; }
    std::span<const double> alphas() const { return alphas_; }
    std::span<const double> alpha_bars() const { return alpha_bars_; }
    std::span<const double> posterior_variances() const { return posterior_variances_; }

    double beta(int64_t t) const { return betas_[index(t)]; }
    double alpha(int64_t t) const { return alphas_[index(t)]; }
    double alpha_bar(int64_t t) const { return alpha_bars_[index(t)]; }
    // alpha_bar(0) := 1.
    double alpha_bar_prev(int64_t t) const { return alpha_bars_prev_[index(t)]; }
    double posterior_variance(int64_t t) const { return posterior_variances_[index(t)]; }
    double sqrt_alpha_bar(int64_t t) const { return sqrt_alpha_bars_[index(t)]; }
    double sqrt_one_minus_alpha_bar(int64_t t) const { return sqrt_one_minus_alpha_bars_[index(t)]; }
    double recip_sqrt_alpha(int64_t t) const { return recip_sqrt_alphas_[index(t)]; }

    /// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
    torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps) const;
    torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps) const;

    /// One Markov transition: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps
    torch::Tensor forward_step(const torch::Tensor& x_prev, const torch::Tensor& t, const torch::Tensor& eps) const;
    torch::Tensor forward_step(const torch::Tensor& x_prev, int64_t t, const torch::Tensor& eps) const;

    /// Mean of the learned reverse transition given predicted noise:
    /// (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    torch::Tensor reverse_step_mean(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& eps_hat) const;
    torch::Tensor reverse_step_mean(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat) const;

    /// Log of the reverse-process variance interpolated between the posterior
    /// variance (v = -1) and beta_t (v = +1). v is clamped to [-1, 1].
    torch::Tensor interpolate_log_variance(const torch::Tensor& t, const torch::Tensor& v) const;
    torch::Tensor interpolate_variance(const torch::Tensor& t, const torch::Tensor& v) const;
    torch::Tensor interpolate_variance(int64_t t, const torch::Tensor& v) const;

    /// Mean of q(x_{t-1} | x_t, x0).
    torch::Tensor posterior_mean(const torch::Tensor& x0, const torch::Tensor& x_t, const torch::Tensor& t) const;
    /// Posterior variance broadcast against `like`.
    torch::Tensor posterior_variance(const torch::Tensor& t, const torch::Tensor& like) const;

    /// Gathers per-step constants for `t` into a tensor broadcastable against
    /// `like` (shape [B, 1, ...] for batched steps, 0-dim for a scalar step).
    torch::Tensor gather(std::span<const double> table, const torch::Tensor& t, const torch::Tensor& like) const;

    /// Step tensor of shape [batch] filled with `t`, validated.
    torch::Tensor steps_tensor(int64_t t, int64_t batch) const;

private:
    explicit NoiseSchedule(std::vector<double> betas);

    std::size_t index(int64_t t) const;
    void check_steps(const torch::Tensor& t) const;

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
    std::vector<double> alpha_bars_prev_;
    std::vector<double> posterior_variances_;
    std::vector<double> log_betas_;
    std::vector<double> log_posterior_variances_;
    std::vector<double> sqrt_alpha_bars_;
    std::vector<double> sqrt_one_minus_alpha_bars_;
    std::vector<double> recip_sqrt_alphas_;
    std::vector<double> eps_coefficients_;  // beta_t / sqrt(1 - abar_t)
    std::vector<double> sqrt_betas_;
    std::vector<double> sqrt_one_minus_betas_;
    std::vector<double> posterior_mean_x0_coef_;
    std::vector<double> posterior_mean_xt_coef_;
};

}  // namespace semdiff
