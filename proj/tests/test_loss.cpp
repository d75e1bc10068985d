#include <cmath>

#include <gtest/gtest.h>

#include "semdiff/errors.hpp"
#include "semdiff/loss.hpp"
#include "test_util.hpp"

using namespace semdiff;

namespace {

torch::Tensor d(std::vector<double> v) {
    return torch::tensor(v, torch::kFloat64);
}

double normal_pdf(double x, double mu, double var) {
    return std::exp(-(x - mu) * (x - mu) / (2 * var)) / std::sqrt(2 * M_PI * var);
}

// KL(p || q) by trapezoidal integration of p log(p / q).
double kl_by_integration(double mu1, double var1, double mu2, double var2) {
    const double lo = -30, hi = 30;
    const int n = 600000;
    const double h = (hi - lo) / n;
    double sum = 0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + i * h;
        const double p = normal_pdf(x, mu1, var1);
        const double q = normal_pdf(x, mu2, var2);
        const double f = p > 0 ? p * std::log(p / q) : 0.0;
        sum += (i == 0 || i == n) ? 0.5 * f : f;
    }
    return sum * h;
}

double phi(double z) {
    return 0.5 * (1 + std::erf(z / std::sqrt(2.0)));
}

DenoiserOutput output(const torch::Tensor& eps_hat, const torch::Tensor& v) {
    return DenoiserOutput{eps_hat, v};
}

}  // namespace

TEST(Loss, L2Examples) {
    const auto e = torch::randn({2, 1, 4, 4}, torch::kFloat64);
    EXPECT_EQ(l2_eps_loss(e, e).item<double>(), 0.0);
    EXPECT_EQ(l2_eps_loss(torch::ones({3, 3}), torch::zeros({3, 3})).item<double>(), 1.0);
    EXPECT_DOUBLE_EQ(l2_eps_loss(d({1, 2}), d({0, 0})).item<double>(), 2.5);
    EXPECT_THROW(l2_eps_loss(d({1, 2}), d({0})), ShapeError);
}

TEST(Loss, GaussianKlAgainstIntegration) {
    EXPECT_EQ(gaussian_kl(d({0.3}), d({2.0}), d({0.3}), d({2.0})).item<double>(), 0.0);

    const double a = gaussian_kl(d({0}), d({1}), d({1}), d({1})).item<double>();
    EXPECT_NEAR(a, 0.5, 1e-12);
    EXPECT_NEAR(a, kl_by_integration(0, 1, 1, 1), 1e-8);

    const double b = gaussian_kl(d({0}), d({2}), d({0}), d({1})).item<double>();
    EXPECT_NEAR(b, 0.5 * (std::log(0.5) + 2 - 1), 1e-12);
    EXPECT_NEAR(b, 0.1534264097200273, 1e-12);
    EXPECT_NEAR(b, kl_by_integration(0, 2, 0, 1), 1e-8);

    const double c = gaussian_kl(d({0.4}), d({0.3}), d({-0.2}), d({1.7})).item<double>();
    EXPECT_NEAR(c, kl_by_integration(0.4, 0.3, -0.2, 1.7), 1e-8);
}

TEST(Loss, GaussianKlDomain) {
    EXPECT_THROW(gaussian_kl(d({0}), d({0}), d({0}), d({1})), DomainError);
    EXPECT_THROW(gaussian_kl(d({0}), d({1}), d({0}), d({-1})), DomainError);
}

TEST(Loss, VlbVanishesForPerfectPrediction) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    torch::manual_seed(1);
    const auto x0 = torch::rand({3, 1, 8, 8}, torch::kFloat64) * 2 - 1;
    const auto eps = torch::randn_like(x0);
    const auto t = torch::tensor({2, 100, 999}, torch::kLong);
    const auto xt = s.q_sample(x0, t, eps);
    // v = -1 selects the posterior variance exactly
    const auto out = output(eps, -torch::ones_like(x0));
    EXPECT_LT(vlb_term(s, x0, xt, t, out).item<double>(), 1e-6);
    const auto terms = hybrid_loss(s, x0, t, eps, out, 0.001);
    EXPECT_LT(std::abs(terms.total.item<double>()), 1e-6);
}

TEST(Loss, VlbMeanMismatchMatchesClosedForm) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    torch::manual_seed(2);
    const int64_t step = 300;
    const auto x0 = torch::rand({1, 1, 4, 4}, torch::kFloat64) * 2 - 1;
    const auto eps = torch::randn_like(x0);
    const auto delta = torch::randn_like(x0) * 0.3;
    const auto t = torch::tensor({step}, torch::kLong);
    const auto xt = s.q_sample(x0, t, eps);
    const auto term = vlb_term(s, x0, xt, t, output(eps + delta, -torch::ones_like(x0))).item<double>();

    // model mean shift = beta / (sqrt(alpha) sqrt(1 - abar)) * delta
    const double coef = s.beta(step) / (std::sqrt(s.alpha(step)) * std::sqrt(1 - s.alpha_bar(step)));
    const double expected = (coef * delta).pow(2).mean().item<double>() / (2 * s.posterior_variance(step));
    EXPECT_NEAR(term, expected, 1e-9 * std::max(1.0, expected));
}

TEST(Loss, FirstStepIsDiscretizedNll) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    const double center = -1.0 + 2.0 * 128.0 / 255.0;  // an 8-bit bin center
    const auto x0 = torch::full({1, 1, 2, 2}, center, torch::kFloat64);
    const auto eps = torch::zeros_like(x0);
    const auto t = torch::tensor({1}, torch::kLong);
    const auto xt = s.q_sample(x0, t, eps);
    const auto term = vlb_term(s, x0, xt, t, output(eps, -torch::ones_like(x0))).item<double>();
    const double sigma = std::sqrt(s.posterior_variance(1));
    const double mass = phi((1.0 / 255.0) / sigma) - phi(-(1.0 / 255.0) / sigma);
    EXPECT_NEAR(term, -std::log(mass), 1e-9);
}

TEST(Loss, DiscretizedLikelihoodTails) {
    const auto x = d({-1.0, 1.0});
    const auto mean = d({-1.0, 1.0});
    const auto log_var = torch::full({2}, std::log(0.01), torch::kFloat64);
    const auto ll = discretized_gaussian_log_likelihood(x, mean, log_var);
    const double edge = phi((1.0 / 255.0) / 0.1);
    EXPECT_NEAR(ll[0].item<double>(), std::log(edge), 1e-12);
    EXPECT_NEAR(ll[1].item<double>(), std::log(edge), 1e-12);
}

TEST(Loss, HybridLambdaBehaviour) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    torch::manual_seed(3);
    const auto x0 = torch::rand({4, 1, 4, 4}, torch::kFloat64) * 2 - 1;
    const auto eps = torch::randn_like(x0);
    const auto t = torch::tensor({1, 20, 400, 1000}, torch::kLong);
    const auto out = output(torch::randn_like(x0), torch::rand_like(x0) * 2 - 1);
    const auto l0 = hybrid_loss(s, x0, t, eps, out, 0.0).values();
    EXPECT_EQ(l0.total, l0.l_simple);
    const double lam = 0.37;
    const double t1 = hybrid_loss(s, x0, t, eps, out, lam).values().total;
    const double t2 = hybrid_loss(s, x0, t, eps, out, 2 * lam).values().total;
    EXPECT_NEAR(t2 - l0.total, 2 * (t1 - l0.total), 1e-9);
    const auto v = hybrid_loss(s, x0, t, eps, out, 0.001).values();
    EXPECT_NEAR(v.total, v.l_simple + 0.001 * v.l_vlb, 1e-9);
    EXPECT_THROW(hybrid_loss(s, x0, t, eps, out, -1.0), ParameterError);
}

TEST(Loss, TermsAreNonnegative) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    torch::manual_seed(4);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x0 = torch::rand({2, 1, 4, 4}, torch::kFloat64) * 2 - 1;
        const auto eps = torch::randn_like(x0);
        const auto t = torch::randint(1, 1001, {2}, torch::kLong);
        const auto v = hybrid_loss(s, x0, t, eps, output(torch::randn_like(x0), torch::randn_like(x0) * 3), 0.001).values();
        EXPECT_GE(v.l_simple, 0.0);
        EXPECT_GE(v.l_vlb, 0.0);
    }
}

TEST(Loss, VlbDoesNotTrainTheNoisePrediction) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    torch::manual_seed(5);
    const auto x0 = torch::rand({2, 1, 4, 4}, torch::kFloat64) * 2 - 1;
    const auto eps = torch::randn_like(x0);
    const auto t = torch::tensor({1, 300}, torch::kLong);
    const auto eps_hat0 = torch::randn_like(x0);
    const auto v_init = torch::rand_like(x0) - 0.5;
    auto grads = [&](double lambda) {
        auto eps_hat = eps_hat0.clone().requires_grad_(true);
        auto v = v_init.clone().requires_grad_(true);
        hybrid_loss(s, x0, t, eps, output(eps_hat, v), lambda).total.backward();
        return std::make_pair(eps_hat.grad().clone(), v.grad().clone());
    };
    const auto [e0, v0] = grads(0.0);
    const auto [e1, v1] = grads(1.0);
    EXPECT_TRUE(torch::equal(e0, e1));
    EXPECT_EQ(v0.abs().max().item<double>(), 0.0);
    EXPECT_GT(v1.abs().max().item<double>(), 0.0);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    torch::manual_seed(8);
    auto net = build_denoiser(semdiff::testing::tiny_config(Conditioning::MaskGuided));
    net->to(torch::kFloat64);
    const auto cond = semdiff::testing::random_bundle(Conditioning::MaskGuided, 2, 2, 4, 1).to(torch::kFloat64);
    const auto x0 = torch::rand({2, 1, 4, 4}, torch::kFloat64) * 2 - 1;
    const auto eps = torch::randn_like(x0);
    const auto t = torch::tensor({1, 250}, torch::kLong);
    const auto xt = s.q_sample(x0, t, eps);
    const double lambda = 0.5;

    const auto params = net->parameters();
    const auto out0 = net->forward(xt, t, cond);
    hybrid_loss(s, x0, t, eps, out0, lambda).total.backward();
    const auto frozen_eps = out0.eps_hat.detach();

    // The VLB uses eps_hat frozen at the base point; finite differences see it the same way.
    auto surrogate = [&] {
        torch::NoGradGuard guard;
        const auto out = net->forward(xt, t, cond);
        return (l2_eps_loss(eps, out.eps_hat) + lambda * vlb_term(s, x0, xt, t, {frozen_eps, out.v})).item<double>();
    };
    for (int k = 0; k < 5; ++k) {
        std::vector<torch::Tensor> dir;
        double norm2 = 0;
        for (const auto& p : params) {
            dir.push_back(torch::randn_like(p));
            norm2 += dir.back().pow(2).sum().item<double>();
        }
        double analytic = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            dir[i] /= std::sqrt(norm2);
            analytic += (params[i].grad() * dir[i]).sum().item<double>();
        }
        const double h = 1e-6;
        auto shift = [&](double a) {
            torch::NoGradGuard guard;
            for (std::size_t i = 0; i < params.size(); ++i) params[i].add_(dir[i], a);
        };
        shift(h);
        const double plus = surrogate();
        shift(-2 * h);
        const double minus = surrogate();
        shift(h);
        const double numeric = (plus - minus) / (2 * h);
        EXPECT_LE(std::abs(numeric - analytic), 1e-3 * std::max(std::abs(numeric), std::abs(analytic)) + 1e-10)
            << "direction " << k << ": numeric " << numeric << " analytic " << analytic;
    }
}
