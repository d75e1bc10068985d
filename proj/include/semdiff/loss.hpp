#pragma once

#include <torch/torch.h>

#include "semdiff/schedule.hpp"
#include "semdiff/unet.hpp"

namespace semdiff {

/// Components of the hybrid objective. Tensors are 0-dim and carry autograd
/// history; `values()` reads them out as doubles.
struct LossTerms {
    torch::Tensor l_simple;
    torch::Tensor l_vlb;
    torch::Tensor total;
    double lambda_vlb = 0.0;

    struct Values {
        double l_simple;
        double l_vlb;
        double total;
    };
    Values values() const;
};

/// Mean of (eps - eps_hat)^2 over all elements.
torch::Tensor l2_eps_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat);

/// Elementwise KL( N(mu1, var1) || N(mu2, var2) ) in nats.
torch::Tensor gaussian_kl(const torch::Tensor& mu1, const torch::Tensor& var1, const torch::Tensor& mu2,
                          const torch::Tensor& var2);
/// Same, parameterized by log-variances. No domain check.
torch::Tensor gaussian_kl_log(const torch::Tensor& mu1, const torch::Tensor& logvar1, const torch::Tensor& mu2,
                              const torch::Tensor& logvar2);

/// Elementwise log-likelihood of x (on the [-1, 1] scale quantized to 8 bits)
/// under N(mean, exp(log_var)) integrated over the pixel's bin of width 2/255.
/// The outermost bins extend to +-infinity.
torch::Tensor discretized_gaussian_log_likelihood(const torch::Tensor& x, const torch::Tensor& mean,
                                                  const torch::Tensor& log_var);

/// Per-step variational-bound term, averaged over pixels and batch.
///
/// For t > 1: KL between the closed-form posterior q(x_{t-1} | x_t, x0) and the
/// model's reverse Gaussian; for t = 1: discretized NLL of x0. The model mean
/// uses a detached eps_hat, so gradients reach only the variance logits v.
torch::Tensor vlb_term(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& x_t,
                       const torch::Tensor& t, const DenoiserOutput& out);

/// l_simple + lambda_vlb * l_vlb, with x_t = q_sample(x0, t, eps).
LossTerms hybrid_loss(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                      const torch::Tensor& eps, const DenoiserOutput& out, double lambda_vlb);

}  // namespace semdiff
