#include "semdiff/sample.hpp"

#include <cstdio>
#include <fstream>

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>

#include "semdiff/errors.hpp"
#include "semdiff/train.hpp"

namespace semdiff {

namespace fs = std::filesystem;

DenoiseFn as_denoise_fn(Denoiser net) {
    return [net](const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond) mutable {
        return net->forward(x_t, t, cond);
    };
}

torch::Tensor reverse_step(const DenoiseFn& fn, const NoiseSchedule& schedule, const torch::Tensor& x_t, int64_t t,
                           const ConditioningBundle& cond, const torch::Tensor& z, bool zero_variance,
                           bool clip_denoised) {
    const auto steps = schedule.steps_tensor(t, x_t.size(0));
    const DenoiserOutput out = fn(x_t, steps, cond);
    torch::Tensor mean;
    if (clip_denoised) {
        const auto x0 = (x_t - schedule.sqrt_one_minus_alpha_bar(t) * out.eps_hat) / schedule.sqrt_alpha_bar(t);
        mean = schedule.posterior_mean(x0.clamp(-1.0, 1.0), x_t, steps);
    } else {
        mean = schedule.reverse_step_mean(x_t, t, out.eps_hat);
    }
    if (t == 1 || zero_variance) return mean;
    return mean + torch::sqrt(schedule.interpolate_variance(t, out.v)) * z;
}

torch::Tensor sample(const DenoiseFn& fn, const NoiseSchedule& schedule, const ConditioningBundle& cond, int64_t n,
                     int64_t size, const SampleOptions& options) {
    if (n < 1) throw ParameterError("sample count must be positive, got " + std::to_string(n));
    if (cond.batch() != 1 && cond.batch() != n) {
        throw ShapeError("conditioning batch " + std::to_string(cond.batch()) + " must be 1 or " + std::to_string(n));
    }
    if (cond.mask_onehot().size(2) != size || cond.mask_onehot().size(3) != size) {
        throw ShapeError("conditioning is " + std::to_string(cond.mask_onehot().size(2)) + "x" +
                         std::to_string(cond.mask_onehot().size(3)) + ", expected " + std::to_string(size));
    }
    const ConditioningBundle batch_cond = cond.batch() == n ? cond : cond.repeat(n);

    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
    const auto opts = torch::TensorOptions().dtype(batch_cond.mask_onehot().scalar_type());
    auto x = torch::randn({n, 1, size, size}, gen, opts);
    for (int64_t t = schedule.steps(); t >= 1; --t) {
        const auto z = t > 1 && !options.zero_variance ? torch::randn(x.sizes(), gen, opts) : torch::zeros_like(x);
        x = reverse_step(fn, schedule, x, t, batch_cond, z, options.zero_variance, options.clip_denoised);
        if (!torch::isfinite(x).all().item<bool>()) {
            throw SamplingError("non-finite values in the reverse trajectory at step " + std::to_string(t));
        }
        if (options.on_step) options.on_step(t);
    }
    return to_unit_range(x.clamp(-1.0, 1.0));
}

torch::Tensor sample(Denoiser net, const NoiseSchedule& schedule, const ConditioningBundle& cond, int64_t n,
                     const SampleOptions& options) {
    const auto& config = net->config();
    if (cond.variant() != config.variant) {
        throw ConfigError("conditioning variant " + to_string(cond.variant()) + " does not match denoiser variant " +
                          to_string(config.variant));
    }
    net->eval();
    return sample(as_denoise_fn(net), schedule, cond, n, config.image_size, options);
}

ConditioningBundle conditioning_for(const Batch& batch, Conditioning variant) {
    std::optional<torch::Tensor> edge;
    if (variant == Conditioning::EdgeGuided) edge = batch.edge;
    return ConditioningBundle::make(batch.onehot, edge, variant);
}

std::string synthetic_stem(const std::string& stem, int64_t repeat, int64_t n_per_mask) {
    return n_per_mask == 1 ? stem : stem + "_r" + std::to_string(repeat);
}

namespace {

Image mask_preview(const LabelMap& mask, int64_t classes) {
    Image out(mask.rows(), mask.cols());
    const double scale = classes > 1 ? 1.0 / static_cast<double>(classes - 1) : 1.0;
    for (std::size_t i = 0; i < mask.size(); ++i) out.values()[i] = static_cast<float>(mask.values()[i] * scale);
    return out;
}

template <class F>
void guarded(std::vector<std::string>& errors, const fs::path& path, F&& write) {
    try {
        write();
    } catch (const std::exception& e) {
        errors.push_back(path.string() + ": " + e.what());
        std::fprintf(stderr, "warning: %s: %s\n", path.string().c_str(), e.what());
    }
}

}  // namespace

SampleGridResult sample_grid(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out_dir,
                             int64_t n_per_mask, const SampleGridOptions& options) {
    if (n_per_mask < 1) throw ParameterError("n_per_mask must be positive");
    if (options.batch_size < 1) throw ParameterError("sampling batch size must be positive");

    const Checkpoint ck = load_checkpoint(checkpoint, options.use_ema);
    const auto& model = ck.config.model;
    const NoiseSchedule schedule = ck.config.schedule.build();

    DatasetOptions data_opts;
    data_opts.image_size = model.image_size;
    data_opts.classes = model.num_mask_classes;
    data_opts.num_workers = workers_from_environment();
    const Dataset dataset = Dataset::load_manifest(manifest, data_opts);

    auto indices = dataset.split_indices(options.split);
    if (options.max_masks > 0 && static_cast<int64_t>(indices.size()) > options.max_masks) {
        indices.resize(static_cast<std::size_t>(options.max_masks));
    }
    if (indices.empty()) throw DataError("no masks in split " + to_string(options.split) + " of " + manifest.string());

    for (const char* sub : {"synth", "real", "masks"}) fs::create_directories(out_dir / sub);

    SampleGridResult result;
    nlohmann::json entries = nlohmann::json::array();

    // Every (mask, repeat) pair, run in chunks of batch_size trajectories.
    struct Job {
        std::size_t index;
        int64_t repeat;
    };
    std::vector<Job> jobs;
    for (auto idx : indices) {
        for (int64_t k = 0; k < n_per_mask; ++k) jobs.push_back({idx, k});
    }

    for (auto idx : indices) {
        const auto rec = dataset.record(idx);
        const auto stem = rec.stem();
        guarded(result.errors, out_dir / "real" / (stem + ".png"),
                [&] { write_png8(out_dir / "real" / (stem + ".png"), rec.image); });
        guarded(result.errors, out_dir / "masks" / (stem + ".png"),
                [&] { write_png_mask(out_dir / "masks" / (stem + ".png"), rec.mask); });
    }

    std::vector<std::pair<Image, std::size_t>> rows;
    const auto total = static_cast<int64_t>(jobs.size());
    for (std::size_t start = 0, chunk = 0; start < jobs.size(); start += static_cast<std::size_t>(options.batch_size), ++chunk) {
        const auto end = std::min(jobs.size(), start + static_cast<std::size_t>(options.batch_size));
        std::vector<std::size_t> batch_indices;
        for (auto j = start; j < end; ++j) batch_indices.push_back(jobs[j].index);
        const Batch batch = dataset.load_batch(batch_indices);
        SampleOptions so;
        so.seed = options.seed + 0x9E3779B97F4A7C15ull * chunk;
        so.clip_denoised = options.clip_denoised;
        const auto images =
            sample(ck.denoiser, schedule, conditioning_for(batch, model.variant), static_cast<int64_t>(end - start), so);
        for (auto j = start; j < end; ++j) {
            const auto& job = jobs[j];
            const auto& entry = dataset.entries()[job.index];
            SliceRecord meta;
            meta.subject_id = entry.subject_id;
            meta.slice_index = entry.slice_index;
            const auto stem = meta.stem();
            const auto name = synthetic_stem(stem, job.repeat, n_per_mask) + ".png";
            const Image img = tensor_to_image(images[static_cast<int64_t>(j - start)]);
            guarded(result.errors, out_dir / "synth" / name, [&] {
                write_png8(out_dir / "synth" / name, img);
                result.synthetic.push_back(out_dir / "synth" / name);
            });
            rows.emplace_back(img, job.index);
            entries.push_back({{"synthetic", "synth/" + name},
                               {"mask", "masks/" + stem + ".png"},
                               {"real", "real/" + stem + ".png"},
                               {"source_mask", entry.mask_path.string()},
                               {"subject_id", entry.subject_id},
                               {"slice_index", entry.slice_index},
                               {"repeat", job.repeat}});
        }
        if (options.on_progress) options.on_progress(static_cast<int64_t>(end), total);
    }

    if (!rows.empty()) {
        const int64_t s = model.image_size;
        Image grid(s * static_cast<int64_t>(rows.size()), 3 * s, 0.0f);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto rec = dataset.record(rows[r].second);
            const Image panels[3] = {mask_preview(rec.mask, model.num_mask_classes), rows[r].first, rec.image};
            for (int p = 0; p < 3; ++p) {
                for (int64_t y = 0; y < s; ++y) {
                    for (int64_t x = 0; x < s; ++x) grid(static_cast<int64_t>(r) * s + y, p * s + x) = panels[p](y, x);
                }
            }
        }
        result.grid_path = out_dir / "grid.png";
        guarded(result.errors, result.grid_path, [&] { write_png8(result.grid_path, grid); });
    }

    nlohmann::json index{{"checkpoint", fs::absolute(resolve_checkpoint(checkpoint)).string()},
                         {"checkpoint_step", ck.step},
                         {"manifest", fs::absolute(manifest).string()},
                         {"variant", to_string(model.variant)},
                         {"seed", options.seed},
                         {"n_per_mask", n_per_mask},
                         {"batch_size", options.batch_size},
                         {"clip_denoised", options.clip_denoised},
                         {"entries", entries}};
    result.index_path = out_dir / "index.json";
    std::ofstream os(result.index_path);
    os << index.dump(2) << '\n';
    if (!os) throw SamplingError("cannot write " + result.index_path.string());
    return result;
}

}  // namespace semdiff
