#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "semdiff/errors.hpp"
#include "semdiff/sample.hpp"
#include "semdiff/train.hpp"
#include "test_util.hpp"

using namespace semdiff;
using semdiff::testing::read_file;
using semdiff::testing::TempDir;

namespace {

// Predicts the exact noise that maps x_t back to a fixed clean image.
DenoiseFn oracle_denoiser(const NoiseSchedule& schedule, torch::Tensor x0) {
    return [&schedule, x0](const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle&) {
        const int64_t step = t[0].item<int64_t>();
        const auto eps = (x_t - schedule.sqrt_alpha_bar(step) * x0) / schedule.sqrt_one_minus_alpha_bar(step);
        return DenoiserOutput{eps, torch::zeros_like(x_t)};
    };
}

DenoiseFn constant_denoiser(double eps_value, double v_value) {
    return [=](const torch::Tensor& x_t, const torch::Tensor&, const ConditioningBundle&) {
        return DenoiserOutput{torch::full_like(x_t, eps_value), torch::full_like(x_t, v_value)};
    };
}

ConditioningBundle bundle(int64_t batch, int64_t size, torch::ScalarType dtype = torch::kFloat32) {
    return semdiff::testing::random_bundle(Conditioning::MaskGuided, batch, 3, size, 1).to(dtype);
}

}  // namespace

TEST(Sample, SyntheticStems) {
    EXPECT_EQ(synthetic_stem("s1_0003", 0, 1), "s1_0003");
    EXPECT_EQ(synthetic_stem("s1_0003", 0, 3), "s1_0003_r0");
    EXPECT_EQ(synthetic_stem("s1_0003", 2, 3), "s1_0003_r2");
}

TEST(Sample, ReverseStepMatchesHandComputation) {
    const auto schedule = NoiseSchedule::linear(10, 1e-4, 0.02);
    const auto cond = bundle(1, 4, torch::kFloat64);
    const auto x = torch::linspace(-1, 1, 16, torch::kFloat64).reshape({1, 1, 4, 4});
    const auto z = torch::full_like(x, 0.5);
    const double eps = 0.3, v = 0.25;
    const int64_t t = 6;
    const double mean_scale = 1.0 / std::sqrt(schedule.alpha(t));
    const double coef = schedule.beta(t) / schedule.sqrt_one_minus_alpha_bar(t);
    const double frac = (v + 1) / 2;
    const double log_var = frac * std::log(schedule.beta(t)) + (1 - frac) * std::log(schedule.posterior_variance(t));
    const auto expected = mean_scale * (x - coef * eps) + std::exp(0.5 * log_var) * z;
    const auto got = reverse_step(constant_denoiser(eps, v), schedule, x, t, cond, z);
    EXPECT_TRUE(torch::allclose(got, expected, 0, 1e-12));

    const auto mean_only = reverse_step(constant_denoiser(eps, v), schedule, x, t, cond, z, true);
    EXPECT_TRUE(torch::allclose(mean_only, mean_scale * (x - coef * eps), 0, 1e-12));

    const auto last = reverse_step(constant_denoiser(eps, v), schedule, x, 1, cond, z);
    const auto last_mean = (x - schedule.beta(1) / schedule.sqrt_one_minus_alpha_bar(1) * eps) / std::sqrt(schedule.alpha(1));
    EXPECT_TRUE(torch::allclose(last, last_mean, 0, 1e-12));
}

TEST(Sample, ClippedMeanMatchesNoiseFormInsideRange) {
    const auto schedule = NoiseSchedule::linear(50, 1e-4, 0.02);
    const auto cond = bundle(1, 4, torch::kFloat64);
    const auto inside = torch::linspace(-0.8, 0.8, 16, torch::kFloat64).reshape({1, 1, 4, 4});
    const auto outside = inside * 2.0;
    const auto eps = torch::randn({1, 1, 4, 4}, torch::kFloat64);
    const auto zero = torch::zeros_like(inside);
    for (int64_t t : {2, 25, 50}) {
        const auto x_in = schedule.q_sample(inside, t, eps);
        const auto plain = reverse_step(oracle_denoiser(schedule, inside), schedule, x_in, t, cond, zero);
        const auto clipped = reverse_step(oracle_denoiser(schedule, inside), schedule, x_in, t, cond, zero, false, true);
        EXPECT_TRUE(torch::allclose(plain, clipped, 0, 1e-10)) << t;

        const auto x_out = schedule.q_sample(outside, t, eps);
        const auto got = reverse_step(oracle_denoiser(schedule, outside), schedule, x_out, t, cond, zero, false, true);
        const auto tt = torch::full({1}, t, torch::kLong);
        const auto want = schedule.posterior_mean(outside.clamp(-1, 1), x_out, tt);
        EXPECT_TRUE(torch::allclose(got, want, 0, 1e-10)) << t;
    }
}

TEST(Sample, OracleDenoiserRecoversTarget) {
    const auto schedule = NoiseSchedule::linear(100, 1e-4, 0.02);
    const auto x0 = torch::linspace(-0.9, 0.9, 64, torch::kFloat64).reshape({1, 1, 8, 8});
    for (bool zero_variance : {false, true}) {
        SampleOptions o;
        o.seed = 4;
        o.zero_variance = zero_variance;
        const auto out = sample(oracle_denoiser(schedule, x0), schedule, bundle(1, 8, torch::kFloat64), 2, 8, o);
        EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, 1, 8, 8}));
        EXPECT_TRUE(torch::allclose(out, to_unit_range(x0).expand_as(out), 0, 1e-9));
    }
}

TEST(Sample, SeededAndOrdered) {
    const auto schedule = NoiseSchedule::linear(20, 1e-4, 0.02);
    const auto fn = constant_denoiser(0.0, 0.5);
    std::vector<int64_t> seen;
    SampleOptions o;
    o.seed = 11;
    o.on_step = [&](int64_t t) { seen.push_back(t); };
    const auto a = sample(fn, schedule, bundle(3, 8), 3, 8, o);
    o.on_step = nullptr;
    const auto b = sample(fn, schedule, bundle(3, 8), 3, 8, o);
    o.seed = 12;
    const auto c = sample(fn, schedule, bundle(3, 8), 3, 8, o);
    EXPECT_TRUE(torch::equal(a, b));
    EXPECT_FALSE(torch::equal(a, c));
    ASSERT_EQ(seen.size(), 20u);
    EXPECT_EQ(seen.front(), 20);
    EXPECT_EQ(seen.back(), 1);
    EXPECT_GE(a.min().item<float>(), 0.0f);
    EXPECT_LE(a.max().item<float>(), 1.0f);
}

TEST(Sample, Errors) {
    const auto schedule = NoiseSchedule::linear(5, 1e-4, 0.02);
    EXPECT_THROW(sample(constant_denoiser(0, 0), schedule, bundle(2, 8), 3, 8), ShapeError);
    EXPECT_THROW(sample(constant_denoiser(0, 0), schedule, bundle(1, 8), 3, 16), ShapeError);
    EXPECT_THROW(sample(constant_denoiser(0, 0), schedule, bundle(1, 8), 0, 8), ParameterError);
    try {
        sample(constant_denoiser(std::nan(""), 0), schedule, bundle(1, 8), 1, 8);
        FAIL();
    } catch (const SamplingError& e) {
        EXPECT_NE(std::string(e.what()).find("step 5"), std::string::npos) << e.what();
    }
    DenoiserConfig c = semdiff::testing::tiny_config(Conditioning::Concat, 3);
    c.image_size = 8;
    const auto net = build_denoiser(c);
    EXPECT_THROW(sample(net, schedule, bundle(1, 8), 1), ConfigError);
}

class SampleGridTest : public ::testing::Test {
protected:
    void SetUp() override {
        ToyOptions o;
        o.subjects = 4;
        o.slices_per_subject = 2;
        manifest_ = write_dataset(generate_toy_dataset(o), data_.path());
        DatasetOptions d;
        d.image_size = 8;
        const auto ds = Dataset::load_manifest(manifest_, d);
        RunConfig c;
        c.schedule.steps = 10;
        c.model.image_size = 8;
        c.model.base_width = 4;
        c.model.channel_multipliers = {1};
        c.model.num_res_blocks = 1;
        c.model.attention_resolutions = {};
        c.model.variant = Conditioning::EdgeGuided;
        c.train.variant = Conditioning::EdgeGuided;
        c.train.iterations = 1;
        c.train.checkpoint_every = 1;
        c.train.ema_decay = 0.5;
        TrainOptions t;
        t.out_dir = run_.path();
        t.deterministic = true;
        Trainer(c, ds, t).run();
    }

    TempDir data_, run_, out_;
    std::filesystem::path manifest_;
};

TEST_F(SampleGridTest, LayoutIndexAndDeterminism) {
    SampleGridOptions o;
    o.seed = 3;
    o.batch_size = 3;
    const auto r = sample_grid(run_.path(), manifest_, out_ / "a", 2, o);
    EXPECT_TRUE(r.errors.empty());
    ASSERT_EQ(r.synthetic.size(), 4u);  // two test masks, two repeats
    EXPECT_TRUE(std::filesystem::exists(r.grid_path));
    const auto index = nlohmann::json::parse(read_file(r.index_path));
    for (const char* key : {"checkpoint", "checkpoint_step", "manifest", "variant", "seed", "n_per_mask", "batch_size"}) {
        EXPECT_TRUE(index.contains(key)) << key;
    }
    EXPECT_EQ(index["variant"], "edge_guided");
    EXPECT_EQ(index["checkpoint_step"], 1);
    ASSERT_EQ(index["entries"].size(), 4u);
    std::set<std::string> names;
    for (const auto& e : index["entries"]) {
        names.insert(e["synthetic"].get<std::string>());
        EXPECT_TRUE(std::filesystem::exists(out_ / "a" / e["mask"].get<std::string>()));
        EXPECT_TRUE(std::filesystem::exists(out_ / "a" / e["real"].get<std::string>()));
        EXPECT_EQ(e["subject_id"], "toy003");
    }
    EXPECT_EQ(names, (std::set<std::string>{"synth/toy003_0000_r0.png", "synth/toy003_0000_r1.png",
                                             "synth/toy003_0001_r0.png", "synth/toy003_0001_r1.png"}));

    const auto again = sample_grid(run_.path(), manifest_, out_ / "b", 2, o);
    for (const auto& name : names) {
        EXPECT_EQ(read_file(out_ / "a" / name), read_file(out_ / "b" / name)) << name;
    }
    o.seed = 4;
    sample_grid(run_.path(), manifest_, out_ / "c", 2, o);
    EXPECT_NE(read_file(out_ / "a/synth/toy003_0000_r0.png"), read_file(out_ / "c/synth/toy003_0000_r0.png"));
}

TEST_F(SampleGridTest, SingleRepeatUsesPlainStemsAndEma) {
    SampleGridOptions o;
    o.max_masks = 1;
    o.use_ema = true;
    std::vector<std::pair<int64_t, int64_t>> progress;
    o.on_progress = [&](int64_t d, int64_t t) { progress.emplace_back(d, t); };
    const auto r = sample_grid(run_ / "ckpt_latest", manifest_, out_.path(), 1, o);
    ASSERT_EQ(r.synthetic.size(), 1u);
    EXPECT_EQ(r.synthetic[0].filename(), "toy003_0000.png");
    ASSERT_FALSE(progress.empty());
    EXPECT_EQ(progress.back(), (std::pair<int64_t, int64_t>{1, 1}));
}

TEST_F(SampleGridTest, EmptySplitAndBadCounts) {
    SampleGridOptions o;
    TempDir only_test;
    ToyOptions t;
    t.subjects = 1;
    t.slices_per_subject = 1;
    t.test_fraction = 0.0;
    const auto m = write_dataset(generate_toy_dataset(t), only_test.path());
    EXPECT_THROW(sample_grid(run_.path(), m, out_.path(), 1, o), DataError);
    EXPECT_THROW(sample_grid(run_.path(), manifest_, out_.path(), 0, o), ParameterError);
    o.batch_size = 0;
    EXPECT_THROW(sample_grid(run_.path(), manifest_, out_.path(), 1, o), ParameterError);
}
