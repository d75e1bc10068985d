#include <gtest/gtest.h>

#include "semdiff/errors.hpp"
#include "semdiff/loss.hpp"
#include "semdiff/schedule.hpp"
#include "semdiff/unet.hpp"
#include "test_util.hpp"

using namespace semdiff;
using semdiff::testing::random_bundle;
using semdiff::testing::small_config;

namespace {

const Conditioning kVariants[] = {Conditioning::Concat, Conditioning::MaskGuided, Conditioning::EdgeGuided};

}  // namespace

TEST(Unet, VariantNamesRoundTrip) {
    for (auto v : kVariants) EXPECT_EQ(conditioning_from_string(to_string(v)), v);
    EXPECT_THROW(conditioning_from_string("film"), ConfigError);
}

TEST(Unet, InputChannelArithmetic) {
    auto config = DenoiserConfig::toy(Conditioning::Concat);
    config.num_mask_classes = 16;
    torch::manual_seed(0);
    {
        auto net = build_denoiser(config);
        EXPECT_EQ(net->first_layer_in_channels(), 17);
        EXPECT_TRUE(net->aux_encoder().is_empty());
    }
    config.variant = Conditioning::EdgeGuided;
    {
        auto net = build_denoiser(config);
        EXPECT_EQ(net->first_layer_in_channels(), 17);
        ASSERT_FALSE(net->aux_encoder().is_empty());
        EXPECT_EQ(net->aux_encoder()->conv_in->options.in_channels(), 1);
    }
    config.variant = Conditioning::MaskGuided;
    {
        auto net = build_denoiser(config);
        EXPECT_EQ(net->first_layer_in_channels(), 1);
        EXPECT_EQ(net->aux_encoder()->conv_in->options.in_channels(), 16);
        EXPECT_EQ(net->aux_encoder()->feature_channels.size(), 3u);
    }
}

TEST(Unet, ConfigValidation) {
    auto c = DenoiserConfig::toy(Conditioning::Concat);
    c.image_size = 30;  // not divisible by 4
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(build_denoiser(c), ConfigError);
    c = DenoiserConfig::toy(Conditioning::Concat);
    c.channel_multipliers.clear();
    EXPECT_THROW(c.validate(), ConfigError);
    c = DenoiserConfig::toy(Conditioning::Concat);
    c.num_res_blocks = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Unet, PresetsAndJson) {
    const auto paper = DenoiserConfig::paper(Conditioning::MaskGuided);
    EXPECT_EQ(paper.image_size, 256);
    EXPECT_EQ(paper.num_mask_classes, 17);
    EXPECT_EQ(paper.levels(), 6);
    EXPECT_EQ(DenoiserConfig::from_json(paper.to_json()), paper);
    const auto toy = DenoiserConfig::toy(Conditioning::EdgeGuided);
    EXPECT_EQ(DenoiserConfig::from_json(toy.to_json()), toy);
    EXPECT_THROW(DenoiserConfig::from_json(nlohmann::json{{"image_size", 32}}), ConfigError);
}

TEST(Unet, OutputShapesForAllVariants) {
    torch::NoGradGuard guard;
    for (auto variant : kVariants) {
        torch::manual_seed(1);
        auto net = build_denoiser(DenoiserConfig::toy(variant));
        const auto cond = random_bundle(variant, 2, 17, 32, 5);
        const auto out = net->forward(torch::randn({2, 1, 32, 32}), torch::tensor({1, 500}, torch::kLong), cond);
        EXPECT_EQ(out.eps_hat.sizes(), (std::vector<int64_t>{2, 1, 32, 32})) << to_string(variant);
        EXPECT_EQ(out.v.sizes(), (std::vector<int64_t>{2, 1, 32, 32})) << to_string(variant);
        EXPECT_TRUE(torch::isfinite(out.eps_hat).all().item<bool>());
    }
}

TEST(Unet, MaskPathIsLive) {
    torch::NoGradGuard guard;
    for (auto variant : kVariants) {
        torch::manual_seed(2);
        auto net = build_denoiser(small_config(variant));
        const auto x = torch::randn({1, 1, 32, 32});
        const auto t = torch::tensor({200}, torch::kLong);
        const auto a = net->forward(x, t, random_bundle(variant, 1, 17, 32, 11));
        const auto b = net->forward(x, t, random_bundle(variant, 1, 17, 32, 12));
        EXPECT_GT((a.eps_hat - b.eps_hat).abs().max().item<double>(), 0.0) << to_string(variant);
    }
}

TEST(Unet, ZeroingAuxFeaturesChangesOutput) {
    torch::NoGradGuard guard;
    for (auto variant : {Conditioning::MaskGuided, Conditioning::EdgeGuided}) {
        torch::manual_seed(3);
        auto net = build_denoiser(small_config(variant));
        const auto cond = random_bundle(variant, 2, 17, 32, 4);
        const auto x = torch::randn({2, 1, 32, 32});
        const auto t = torch::tensor({10, 900}, torch::kLong);
        const auto full = net->forward(x, t, cond);
        const auto ablated = net->forward_without_aux_features(x, t, cond);
        EXPECT_GT((full.eps_hat - ablated.eps_hat).abs().max().item<double>(), 0.0);
    }
}

TEST(Unet, TimeSensitivity) {
    torch::NoGradGuard guard;
    torch::manual_seed(4);
    auto net = build_denoiser(small_config(Conditioning::Concat));
    const auto cond = random_bundle(Conditioning::Concat, 1, 17, 32, 1);
    const auto x = torch::randn({1, 1, 32, 32});
    const auto a = net->forward(x, torch::tensor({1}, torch::kLong), cond);
    const auto b = net->forward(x, torch::tensor({1000}, torch::kLong), cond);
    EXPECT_FALSE(torch::equal(a.eps_hat, b.eps_hat));
}

TEST(Unet, EveryParameterReceivesGradient) {
    const auto schedule = NoiseSchedule::linear(1000, 1e-4, 0.02);
    for (auto variant : kVariants) {
        torch::manual_seed(5);
        auto net = build_denoiser(small_config(variant));
        const auto cond = random_bundle(variant, 2, 17, 32, 6);
        const auto x0 = torch::rand({2, 1, 32, 32}) * 2 - 1;
        const auto eps = torch::randn_like(x0);
        const auto t = torch::tensor({1, 400}, torch::kLong);
        const auto out = net->forward(schedule.q_sample(x0, t, eps), t, cond);
        hybrid_loss(schedule, x0, t, eps, out, 0.001).total.backward();
        for (const auto& p : net->named_parameters()) {
            ASSERT_TRUE(p.value().grad().defined()) << to_string(variant) << " " << p.key();
            EXPECT_GT(p.value().grad().abs().max().item<double>(), 0.0) << to_string(variant) << " " << p.key();
        }
    }
}

TEST(Unet, RejectsMismatchedInputs) {
    torch::manual_seed(6);
    auto net = build_denoiser(small_config(Conditioning::MaskGuided));
    const auto x = torch::randn({1, 1, 32, 32});
    const auto t = torch::tensor({5}, torch::kLong);
    EXPECT_THROW(net->forward(x, t, random_bundle(Conditioning::Concat, 1, 17, 32, 1)), ConfigError);
    EXPECT_THROW(net->forward(torch::randn({1, 1, 16, 16}), t, random_bundle(Conditioning::MaskGuided, 1, 17, 32, 1)),
                 ShapeError);
    EXPECT_THROW(net->forward(x, t, random_bundle(Conditioning::MaskGuided, 1, 5, 32, 1)), ShapeError);
    EXPECT_THROW(net->forward(x, torch::tensor({5, 6}, torch::kLong), random_bundle(Conditioning::MaskGuided, 1, 17, 32, 1)),
                 ShapeError);
}

TEST(Unet, BundleValidation) {
    const auto onehot = semdiff::testing::random_onehot(1, 4, 8, 1);
    EXPECT_THROW(ConditioningBundle::make(onehot * 2, std::nullopt, Conditioning::Concat), DataError);
    EXPECT_THROW(ConditioningBundle::make(torch::zeros({1, 4, 8, 8}), std::nullopt, Conditioning::Concat), DataError);
    EXPECT_THROW(ConditioningBundle::make(onehot, std::nullopt, Conditioning::EdgeGuided), ShapeError);
    EXPECT_THROW(ConditioningBundle::make(onehot, torch::zeros({1, 1, 8, 8}), Conditioning::MaskGuided), ShapeError);
    EXPECT_THROW(ConditioningBundle::make(onehot, torch::zeros({1, 1, 4, 4}), Conditioning::EdgeGuided), ShapeError);
    const auto ok = ConditioningBundle::make(onehot, torch::zeros({1, 1, 8, 8}), Conditioning::EdgeGuided);
    EXPECT_EQ(ok.repeat(3).batch(), 3);
    EXPECT_EQ(ok.repeat(3).edge_map()->size(0), 3);
}

TEST(Unet, TimeEmbeddingProperties) {
    const auto zero = time_embedding(torch::zeros({1}, torch::kLong), 64);
    EXPECT_TRUE(torch::equal(zero.slice(1, 0, 32), torch::ones({1, 32}, torch::kFloat64)));
    EXPECT_TRUE(torch::equal(zero.slice(1, 32, 64), torch::zeros({1, 32}, torch::kFloat64)));
    EXPECT_THROW(time_embedding(torch::ones({1}, torch::kLong), 63), ConfigError);

    const auto steps = torch::arange(1, 1001, torch::kLong);
    const auto emb = time_embedding(steps, 64);
    EXPECT_EQ(emb.sizes(), (std::vector<int64_t>{1000, 64}));
    auto d = torch::cdist(emb, emb);
    d.fill_diagonal_(1.0);
    EXPECT_GT(d.min().item<double>(), 0.0);
}

TEST(Unet, NormGroups) {
    EXPECT_EQ(norm_groups(32), 8);
    EXPECT_EQ(norm_groups(64), 16);
    EXPECT_EQ(norm_groups(128), 32);
    EXPECT_EQ(norm_groups(512), 32);
    EXPECT_EQ(norm_groups(48), 12);
    EXPECT_EQ(norm_groups(8), 2);
    EXPECT_EQ(norm_groups(2), 1);
    EXPECT_EQ(norm_groups(1), 1);
    EXPECT_EQ(norm_groups(37), 1);
}
