#include "semdiff/loss.hpp"

#include <cmath>

#include "semdiff/errors.hpp"

namespace semdiff {

LossTerms::Values LossTerms::values() const {
    return {l_simple.item<double>(), l_vlb.item<double>(), total.item<double>()};
}

torch::Tensor l2_eps_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat) {
    if (eps.sizes() != eps_hat.sizes()) {
        throw ShapeError("l2_eps_loss: eps and eps_hat shapes differ");
    }
    return (eps - eps_hat).pow(2).mean();
}

torch::Tensor gaussian_kl_log(const torch::Tensor& mu1, const torch::Tensor& logvar1, const torch::Tensor& mu2,
                              const torch::Tensor& logvar2) {
    return 0.5 * (logvar2 - logvar1 + torch::exp(logvar1 - logvar2) + (mu1 - mu2).pow(2) * torch::exp(-logvar2) - 1.0);
}

torch::Tensor gaussian_kl(const torch::Tensor& mu1, const torch::Tensor& var1, const torch::Tensor& mu2,
                          const torch::Tensor& var2) {
    if (!(var1 > 0).all().item<bool>() || !(var2 > 0).all().item<bool>()) {
        throw DomainError("gaussian_kl: variances must be strictly positive");
    }
    return gaussian_kl_log(mu1, torch::log(var1), mu2, torch::log(var2));
}

namespace {

torch::Tensor standard_normal_cdf(const torch::Tensor& z) {
    return 0.5 * (1.0 + torch::erf(z * M_SQRT1_2));
}

}  // namespace

torch::Tensor discretized_gaussian_log_likelihood(const torch::Tensor& x, const torch::Tensor& mean,
                                                  const torch::Tensor& log_var) {
    if (x.sizes() != mean.sizes()) {
        throw ShapeError("discretized_gaussian_log_likelihood: x and mean shapes differ");
    }
    constexpr double half_bin = 1.0 / 255.0;
    constexpr double floor = 1e-12;
    const auto centered = x - mean;
    const auto inv_std = torch::exp(-0.5 * log_var);
    const auto cdf_plus = standard_normal_cdf(inv_std * (centered + half_bin));
    const auto cdf_min = standard_normal_cdf(inv_std * (centered - half_bin));
    const auto log_cdf_plus = torch::log(cdf_plus.clamp_min(floor));
    const auto log_one_minus_cdf_min = torch::log((1.0 - cdf_min).clamp_min(floor));
    const auto log_delta = torch::log((cdf_plus - cdf_min).clamp_min(floor));
    return torch::where(x < -0.999, log_cdf_plus, torch::where(x > 0.999, log_one_minus_cdf_min, log_delta));
}

torch::Tensor vlb_term(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& x_t,
                       const torch::Tensor& t, const DenoiserOutput& out) {
    if (x0.sizes() != x_t.sizes() || x0.sizes() != out.eps_hat.sizes() || x0.sizes() != out.v.sizes()) {
        throw ShapeError("vlb_term: x0, x_t, eps_hat and v must share a shape");
    }
    const auto true_mean = schedule.posterior_mean(x0, x_t, t);
    const auto true_log_var = torch::log(schedule.posterior_variance(t, x0));
    const auto model_mean = schedule.reverse_step_mean(x_t, t, out.eps_hat.detach());
    const auto model_log_var = schedule.interpolate_log_variance(t, out.v);

    std::vector<int64_t> pixel_dims;
    for (int64_t d = 1; d < x0.dim(); ++d) pixel_dims.push_back(d);

    auto kl = gaussian_kl_log(true_mean, true_log_var, model_mean, model_log_var);
    auto nll = -discretized_gaussian_log_likelihood(x0, model_mean, model_log_var.expand_as(x0));
    if (!pixel_dims.empty()) {
        kl = kl.mean(pixel_dims);
        nll = nll.mean(pixel_dims);
    }
    return torch::where(t == 1, nll, kl).mean();
}

LossTerms hybrid_loss(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                      const torch::Tensor& eps, const DenoiserOutput& out, double lambda_vlb) {
    if (lambda_vlb < 0.0) {
        throw ParameterError("hybrid_loss: lambda_vlb must be non-negative");
    }
    const auto x_t = schedule.q_sample(x0, t, eps);
    LossTerms terms;
    terms.lambda_vlb = lambda_vlb;
    terms.l_simple = l2_eps_loss(eps, out.eps_hat);
    terms.l_vlb = vlb_term(schedule, x0, x_t, t, out);
    terms.total = terms.l_simple + lambda_vlb * terms.l_vlb;
    return terms;
}

}  // namespace semdiff
