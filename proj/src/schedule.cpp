#include "semdiff/schedule.hpp"

#include <cmath>
#include <sstream>

#include "semdiff/errors.hpp"

namespace semdiff {

namespace {

std::string shape_string(const torch::Tensor& x) {
    std::ostringstream os;
    os << x.sizes();
    return os.str();
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(int64_t steps, double beta_start, double beta_end) {
    if (steps < 1) {
        throw ParameterError("linear_schedule: steps must be >= 1, got " + std::to_string(steps));
    }
    if (!(beta_start > 0.0)) {
        throw ParameterError("linear_schedule: beta_start must be > 0, got " + std::to_string(beta_start));
    }
    if (!(beta_end < 1.0)) {
        throw ParameterError("linear_schedule: beta_end must be < 1, got " + std::to_string(beta_end));
    }
    if (beta_start > beta_end) {
        throw ParameterError("linear_schedule: beta_start (" + std::to_string(beta_start) +
                             ") exceeds beta_end (" + std::to_string(beta_end) + ")");
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int64_t i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    }
    betas.back() = beta_end;
    return NoiseSchedule(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) {
        throw ParameterError("from_betas: empty beta list");
    }
    for (std::size_t i = 0; i < betas.size(); ++i) {
        if (!(betas[i] >= 0.0 && betas[i] < 1.0)) {
            throw ParameterError("from_betas: beta at step " + std::to_string(i + 1) + " outside [0, 1)");
        }
    }
    return NoiseSchedule(std::move(betas));
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    const std::size_t n = betas_.size();
    alphas_.resize(n);
    alpha_bars_.resize(n);
    alpha_bars_prev_.resize(n);
    posterior_variances_.resize(n);
    log_betas_.resize(n);
    log_posterior_variances_.resize(n);
    sqrt_alpha_bars_.resize(n);
    sqrt_one_minus_alpha_bars_.resize(n);
    recip_sqrt_alphas_.resize(n);
    eps_coefficients_.resize(n);
    sqrt_betas_.resize(n);
    sqrt_one_minus_betas_.resize(n);
    posterior_mean_x0_coef_.resize(n);
    posterior_mean_xt_coef_.resize(n);

    double running = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double beta = betas_[i];
        const double alpha = 1.0 - beta;
        const double prev = running;
        running *= alpha;

        alphas_[i] = alpha;
        alpha_bars_[i] = running;
        alpha_bars_prev_[i] = prev;

        const double one_minus_bar = 1.0 - running;
        // At t = 1, 1 - abar_{0} = 0 and the formula collapses; use beta_1.
        posterior_variances_[i] = (i == 0 || one_minus_bar == 0.0) ? beta : beta * (1.0 - prev) / one_minus_bar;
        log_betas_[i] = std::log(beta);
        log_posterior_variances_[i] = std::log(posterior_variances_[i]);

        sqrt_alpha_bars_[i] = std::sqrt(running);
        sqrt_one_minus_alpha_bars_[i] = std::sqrt(one_minus_bar);
        recip_sqrt_alphas_[i] = 1.0 / std::sqrt(alpha);
        eps_coefficients_[i] = beta == 0.0 ? 0.0 : beta / std::sqrt(one_minus_bar);
        sqrt_betas_[i] = std::sqrt(beta);
        sqrt_one_minus_betas_[i] = std::sqrt(alpha);
        if (one_minus_bar == 0.0) {
            posterior_mean_x0_coef_[i] = 1.0;
            posterior_mean_xt_coef_[i] = 0.0;
        } else {
            posterior_mean_x0_coef_[i] = beta * std::sqrt(prev) / one_minus_bar;
            posterior_mean_xt_coef_[i] = (1.0 - prev) * std::sqrt(alpha) / one_minus_bar;
        }
    }
}

std::size_t NoiseSchedule::index(int64_t t) const {
    if (t < 1 || t > steps()) {
        throw ParameterError("step index " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
}

void NoiseSchedule::check_steps(const torch::Tensor& t) const {
    if (t.scalar_type() != torch::kLong) {
        throw ParameterError("step tensor must be int64");
    }
    if (t.dim() > 1) {
        throw ShapeError("step tensor must be 0-dim or [B], got " + shape_string(t));
    }
    if (t.numel() == 0) {
        return;
    }
    const int64_t lo = t.min().item<int64_t>();
    const int64_t hi = t.max().item<int64_t>();
    if (lo < 1 || hi > steps()) {
        throw ParameterError("step index outside [1, " + std::to_string(steps()) + "]: range [" +
                             std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

torch::Tensor NoiseSchedule::steps_tensor(int64_t t, int64_t batch) const {
    index(t);
    return torch::full({batch}, t, torch::TensorOptions().dtype(torch::kLong));
}

torch::Tensor NoiseSchedule::gather(std::span<const double> table, const torch::Tensor& t, const torch::Tensor& like) const {
    check_steps(t);
    const auto table_t = torch::from_blob(const_cast<double*>(table.data()), {static_cast<int64_t>(table.size())},
                                          torch::TensorOptions().dtype(torch::kFloat64));
    auto values = table_t.index_select(0, (t.reshape({-1}) - 1).to(torch::kCPU)).to(like.options());
    if (t.dim() == 0) {
        return values.reshape({});
    }
    if (like.dim() == 0 || like.size(0) != t.size(0)) {
        throw ShapeError("batched steps of size " + std::to_string(t.size(0)) + " do not match tensor " +
                         shape_string(like));
    }
    std::vector<int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
    shape[0] = t.size(0);
    return values.reshape(shape);
}

torch::Tensor NoiseSchedule::q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps) const {
    check_same_shape(x0, eps, "q_sample");
    return gather(sqrt_alpha_bars_, t, x0) * x0 + gather(sqrt_one_minus_alpha_bars_, t, x0) * eps;
}

torch::Tensor NoiseSchedule::q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps) const {
    index(t);
    return q_sample(x0, torch::tensor(t), eps);
}

torch::Tensor NoiseSchedule::forward_step(const torch::Tensor& x_prev, const torch::Tensor& t, const torch::Tensor& eps) const {
    check_same_shape(x_prev, eps, "forward_step");
    return gather(sqrt_one_minus_betas_, t, x_prev) * x_prev + gather(sqrt_betas_, t, x_prev) * eps;
}

torch::Tensor NoiseSchedule::forward_step(const torch::Tensor& x_prev, int64_t t, const torch::Tensor& eps) const {
    index(t);
    return forward_step(x_prev, torch::tensor(t), eps);
}

torch::Tensor NoiseSchedule::reverse_step_mean(const torch::Tensor& x_t, const torch::Tensor& t,
                                               const torch::Tensor& eps_hat) const {
    check_same_shape(x_t, eps_hat, "reverse_step_mean");
    return gather(recip_sqrt_alphas_, t, x_t) * (x_t - gather(eps_coefficients_, t, x_t) * eps_hat);
}

torch::Tensor NoiseSchedule::reverse_step_mean(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat) const {
    index(t);
    return reverse_step_mean(x_t, torch::tensor(t), eps_hat);
}

torch::Tensor NoiseSchedule::interpolate_log_variance(const torch::Tensor& t, const torch::Tensor& v) const {
    const auto frac = (v.clamp(-1.0, 1.0) + 1.0) * 0.5;
    return frac * gather(log_betas_, t, v) + (1.0 - frac) * gather(log_posterior_variances_, t, v);
}

torch::Tensor NoiseSchedule::interpolate_variance(const torch::Tensor& t, const torch::Tensor& v) const {
    // exp(log(x)) is not always x to the last ulp; return the endpoints verbatim.
    const auto clamped = v.clamp(-1.0, 1.0);
    const auto interior = torch::exp(interpolate_log_variance(t, v));
    return torch::where(clamped == 1.0, gather(betas_, t, v),
                        torch::where(clamped == -1.0, gather(posterior_variances_, t, v), interior));
}

torch::Tensor NoiseSchedule::interpolate_variance(int64_t t, const torch::Tensor& v) const {
    index(t);
    return interpolate_variance(torch::tensor(t), v);
}

torch::Tensor NoiseSchedule::posterior_mean(const torch::Tensor& x0, const torch::Tensor& x_t, const torch::Tensor& t) const {
    check_same_shape(x0, x_t, "posterior_mean");
    return gather(posterior_mean_x0_coef_, t, x0) * x0 + gather(posterior_mean_xt_coef_, t, x_t) * x_t;
}

torch::Tensor NoiseSchedule::posterior_variance(const torch::Tensor& t, const torch::Tensor& like) const {
    return gather(posterior_variances_, t, like);
}

}  // namespace semdiff
