#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "semdiff/config.hpp"
#include "semdiff/data.hpp"
#include "semdiff/errors.hpp"
#include "semdiff/eval.hpp"
#include "semdiff/sample.hpp"
#include "semdiff/train.hpp"

namespace fs = std::filesystem;
using namespace semdiff;

namespace {

void write_snapshot(const fs::path& dir, const AppConfig& config, const nlohmann::json& command) {
    fs::create_directories(dir);
    std::ofstream os(dir / "resolved_config.toml", std::ios::trunc);
    os << config.to_toml(command);
    if (!os) throw std::runtime_error("cannot write " + (dir / "resolved_config.toml").string());
}

void configure_threads() {
    if (deterministic_from_environment()) torch::set_num_threads(1);
}

struct IngestArgs {
    fs::path manifest, out;
    IngestOptions options;
};

struct ToyArgs {
    fs::path out;
    ToyOptions options;
};

struct TrainArgs {
    fs::path config, manifest, out, resume;
    std::string preset, variant;
    std::optional<int64_t> iterations, batch_size, checkpoint_every, seed;
    std::optional<double> lr, ema_decay;
};

struct SampleArgs {
    fs::path ckpt, manifest, out;
    int64_t n = 1;
    uint64_t seed = 0;
    int64_t max_masks = 0;
    int64_t batch_size = 16;
    std::string split = "test";
    bool ema = false;
    bool clip = false;
};

struct EvalArgs {
    fs::path config, real, synth, masks, out = "report.json";
    std::string oracle, oracle_command, extractor, label;
    bool volume_wise = false;
};

struct ReportArgs {
    std::vector<fs::path> inputs;
    fs::path out;
};

int run_ingest(const IngestArgs& a) {
    const auto summary = ingest_manifest(a.manifest, a.out, a.options);
    AppConfig snapshot = AppConfig::defaults();
    snapshot.data.manifest = summary.manifest;
    snapshot.data.image_size = a.options.size;
    snapshot.data.window = a.options.window;
    write_snapshot(a.out, snapshot,
                   {{"subcommand", "ingest"},
                    {"manifest", a.manifest.string()},
                    {"size", a.options.size},
                    {"label_offset", a.options.label_offset},
                    {"body_threshold", a.options.body.threshold},
                    {"closing_radius_at_256", a.options.body.closing_radius_at_256}});
    std::printf("wrote %lld slices to %s (%zu excluded with an empty body)\n", static_cast<long long>(summary.written),
                summary.manifest.string().c_str(), summary.excluded.size());
    return 0;
}

int run_toy(const ToyArgs& a) {
    const auto records = generate_toy_dataset(a.options);
    const auto manifest = write_dataset(records, a.out);
    AppConfig snapshot = AppConfig::defaults("toy");
    snapshot.data.manifest = manifest;
    snapshot.data.image_size = a.options.size;
    write_snapshot(a.out, snapshot,
                   {{"subcommand", "toy-gen"},
                    {"subjects", a.options.subjects},
                    {"slices", a.options.slices_per_subject},
                    {"size", a.options.size},
                    {"seed", a.options.seed},
                    {"test_fraction", a.options.test_fraction}});
    std::printf("wrote %zu slices, manifest %s\n", records.size(), manifest.string().c_str());
    return 0;
}

int run_train(const TrainArgs& a) {
    AppConfig config = a.config.empty() ? AppConfig::defaults(a.preset.empty() ? "paper" : a.preset)
                                        : load_config(a.config);
    if (!a.config.empty() && !a.preset.empty()) apply_preset(config, a.preset);
    if (!a.variant.empty()) set_variant(config, conditioning_from_string(a.variant));
    if (!a.manifest.empty()) config.data.manifest = a.manifest;
    if (a.iterations) config.run.train.iterations = *a.iterations;
    if (a.batch_size) config.run.train.batch_size = *a.batch_size;
    if (a.checkpoint_every) config.run.train.checkpoint_every = *a.checkpoint_every;
    if (a.seed) config.run.train.seed = static_cast<uint64_t>(*a.seed);
    if (a.lr) config.run.train.learning_rate = *a.lr;
    if (a.ema_decay) config.run.train.ema_decay = *a.ema_decay;
    if (config.data.manifest.empty()) throw ConfigError("no manifest: pass --manifest or set data.manifest");
    if (config.data.image_size == 0) config.data.image_size = config.run.model.image_size;
    config.run.model.validate();
    config.run.train.validate();

    DatasetOptions data_opts;
    data_opts.image_size = config.data.image_size;
    data_opts.classes = config.run.model.num_mask_classes;
    data_opts.window = config.data.window;
    data_opts.num_workers = deterministic_from_environment() ? 1 : std::max(config.data.num_workers, workers_from_environment());
    const Dataset dataset = Dataset::load_manifest(config.data.manifest, data_opts);

    TrainOptions options;
    options.out_dir = a.out;
    options.deterministic = deterministic_from_environment();
    const int64_t every = config.run.train.metrics_every;
    options.on_step = [every](const StepLoss& s) {
        if (s.step % every == 0) {
            std::printf("step %lld  l_simple %.5f  l_vlb %.5f  total %.5f\n", static_cast<long long>(s.step), s.l_simple,
                        s.l_vlb, s.total);
            std::fflush(stdout);
        }
        return true;
    };
    write_snapshot(a.out, config, {{"subcommand", "train"}, {"resume", a.resume.string()}});

    auto trainer = a.resume.empty() ? Trainer(config.run, dataset, options)
                                    : Trainer::resume(a.resume, config.run, dataset, options);
    const auto result = trainer.run();
    std::printf("finished at step %lld, checkpoint %s\n", static_cast<long long>(result.final_step),
                result.final_checkpoint.string().c_str());
    return 0;
}

int run_sample(const SampleArgs& a) {
    SampleGridOptions options;
    options.seed = a.seed;
    options.max_masks = a.max_masks;
    options.batch_size = a.batch_size;
    options.split = split_from_string(a.split);
    options.use_ema = a.ema;
    options.clip_denoised = a.clip;
    options.on_progress = [](int64_t done, int64_t total) {
        std::printf("sampled %lld / %lld\n", static_cast<long long>(done), static_cast<long long>(total));
        std::fflush(stdout);
    };
    const auto result = sample_grid(a.ckpt, a.manifest, a.out, a.n, options);

    AppConfig snapshot = AppConfig::defaults();
    const auto ck = load_checkpoint(a.ckpt);
    snapshot.run = ck.config;
    snapshot.data.manifest = a.manifest;
    snapshot.data.image_size = ck.config.model.image_size;
    write_snapshot(a.out, snapshot,
                   {{"subcommand", "sample"},
                    {"ckpt", a.ckpt.string()},
                    {"n", a.n},
                    {"seed", a.seed},
                    {"max_masks", a.max_masks},
                    {"batch_size", a.batch_size},
                    {"split", a.split},
                    {"ema", a.ema},
                    {"clip_denoised", a.clip}});
    for (const auto& e : result.errors) std::fprintf(stderr, "error: %s\n", e.c_str());
    std::printf("wrote %zu images, index %s\n", result.synthetic.size(), result.index_path.string().c_str());
    return result.errors.empty() ? 0 : 2;
}

int run_eval(const EvalArgs& a) {
    AppConfig config = a.config.empty() ? AppConfig::defaults() : load_config(a.config);
    if (!a.oracle.empty()) config.eval.oracle = a.oracle;
    if (!a.oracle_command.empty()) config.eval.oracle_command = a.oracle_command;
    if (!a.extractor.empty()) config.eval.extractor = a.extractor;
    if (a.volume_wise) config.eval.volume_wise = true;

    std::unique_ptr<SegmentationOracle> oracle;
    if (config.eval.oracle == "toy") {
        oracle = std::make_unique<IntensityBandOracle>();
    } else if (config.eval.oracle == "external") {
        oracle = std::make_unique<ExternalCommandOracle>(config.eval.oracle_command);
    } else {
        throw ConfigError("unknown oracle \"" + config.eval.oracle + "\"");
    }
    std::unique_ptr<FeatureExtractor> extractor;
    if (config.eval.extractor == "random") {
        extractor = std::make_unique<RandomProjectionExtractor>(config.eval.extractor_seed);
    } else {
        extractor = std::make_unique<TorchScriptExtractor>(config.eval.extractor);
    }

    EvalOptions options;
    options.label = a.label;
    options.volume_wise = config.eval.volume_wise;
    options.classes = config.run.model.num_mask_classes;
    const auto report = evaluate(a.real, a.synth, a.masks, *oracle, *extractor, options);
    write_report(report, a.out);
    write_snapshot(a.out.has_parent_path() ? a.out.parent_path() : fs::path("."), config,
                   {{"subcommand", "eval"},
                    {"real", a.real.string()},
                    {"synth", a.synth.string()},
                    {"masks", a.masks.string()},
                    {"out", a.out.string()},
                    {"label", a.label}});
    std::cout << format_table({report});
    return 0;
}

int run_report(const ReportArgs& a) {
    std::vector<EvalReport> reports;
    for (const auto& p : a.inputs) {
        auto r = read_report(p);
        if (r.label.empty()) r.label = p.stem().string();
        reports.push_back(std::move(r));
    }
    const auto table = format_table(reports);
    std::cout << table;
    if (!a.out.empty()) {
        if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
        std::ofstream(a.out) << table;
        std::ofstream(fs::path(a.out).replace_extension(".csv")) << format_csv(reports);
        nlohmann::json inputs = nlohmann::json::array();
        for (const auto& p : a.inputs) inputs.push_back(p.string());
        write_snapshot(a.out.has_parent_path() ? a.out.parent_path() : fs::path("."), AppConfig::defaults(),
                       {{"subcommand", "report"}, {"inputs", inputs}, {"out", a.out.string()}});
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semdiff: mask-conditioned diffusion for abdominal CT slices"};
    app.require_subcommand(1);

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Convert raw CT slices and organ masks into a training manifest");
    c_ingest->add_option("--manifest", ingest.manifest, "Raw JSON-lines manifest")->required();
    c_ingest->add_option("--out", ingest.out, "Output directory")->required();
    c_ingest->add_option("--size", ingest.options.size, "Output size in pixels")->capture_default_str();
    c_ingest->add_option("--label-offset", ingest.options.label_offset, "Added to nonzero source labels")
        ->capture_default_str();
    c_ingest->add_option("--window-level", ingest.options.window.level)->capture_default_str();
    c_ingest->add_option("--window-width", ingest.options.window.width)->capture_default_str();
    c_ingest->add_option("--body-threshold", ingest.options.body.threshold)->capture_default_str();
    c_ingest->add_option("--closing-radius", ingest.options.body.closing_radius_at_256, "Radius at 256 px")
        ->capture_default_str();

    ToyArgs toy;
    auto* c_toy = app.add_subcommand("toy-gen", "Generate the procedural phantom dataset");
    c_toy->add_option("--out", toy.out, "Output directory")->required();
    c_toy->add_option("--subjects", toy.options.subjects)->capture_default_str();
    c_toy->add_option("--slices", toy.options.slices_per_subject, "Slices per subject")->capture_default_str();
    c_toy->add_option("--size", toy.options.size)->capture_default_str();
    c_toy->add_option("--seed", toy.options.seed)->capture_default_str();
    c_toy->add_option("--test-fraction", toy.options.test_fraction)->capture_default_str();

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Train a denoiser (flags override the config file)");
    c_train->add_option("--config", train.config, "TOML config")->check(CLI::ExistingFile);
    c_train->add_option("--preset", train.preset, "toy or paper")->check(CLI::IsMember({"toy", "paper"}));
    c_train->add_option("--variant", train.variant)->check(CLI::IsMember({"concat", "mask_guided", "edge_guided"}));
    c_train->add_option("--manifest", train.manifest);
    c_train->add_option("--out", train.out, "Run directory")->required();
    c_train->add_option("--iterations", train.iterations);
    c_train->add_option("--batch-size", train.batch_size);
    c_train->add_option("--checkpoint-every", train.checkpoint_every);
    c_train->add_option("--seed", train.seed);
    c_train->add_option("--lr", train.lr);
    c_train->add_option("--ema-decay", train.ema_decay);
    c_train->add_option("--resume", train.resume, "Checkpoint file, ckpt_latest, or run directory");

    SampleArgs sample;
    auto* c_sample = app.add_subcommand("sample", "Sample images for the masks of a manifest split");
    c_sample->add_option("--ckpt", sample.ckpt)->required();
    c_sample->add_option("--manifest", sample.manifest)->required();
    c_sample->add_option("--out", sample.out)->required();
    c_sample->add_option("--n", sample.n, "Samples per mask")->capture_default_str();
    c_sample->add_option("--seed", sample.seed)->capture_default_str();
    c_sample->add_option("--max-masks", sample.max_masks, "0 uses every mask")->capture_default_str();
    c_sample->add_option("--batch-size", sample.batch_size)->capture_default_str();
    c_sample->add_option("--split", sample.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    c_sample->add_flag("--ema", sample.ema, "Use EMA weights");
    c_sample->add_flag("--clip", sample.clip, "Clamp the x0 estimate to [-1, 1] at every step");

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval", "Score synthetic images against real images and masks");
    c_eval->add_option("--config", eval.config)->check(CLI::ExistingFile);
    c_eval->add_option("--real", eval.real)->required();
    c_eval->add_option("--synth", eval.synth)->required();
    c_eval->add_option("--masks", eval.masks)->required();
    c_eval->add_option("--oracle", eval.oracle)->check(CLI::IsMember({"toy", "external"}));
    c_eval->add_option("--oracle-command", eval.oracle_command, "Command for --oracle external");
    c_eval->add_option("--extractor", eval.extractor, "random or a TorchScript file");
    c_eval->add_option("--label", eval.label, "Row label in tables");
    c_eval->add_flag("--volume-wise", eval.volume_wise, "Pool DSC per subject");
    c_eval->add_option("--out", eval.out)->capture_default_str();

    ReportArgs report;
    auto* c_report = app.add_subcommand("report", "Merge eval reports into one table");
    c_report->add_option("--in", report.inputs, "Report JSON files")->required()->check(CLI::ExistingFile);
    c_report->add_option("--out", report.out, "Write the table (and a .csv) here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        configure_threads();
        if (*c_ingest) return run_ingest(ingest);
        if (*c_toy) return run_toy(toy);
        if (*c_train) return run_train(train);
        if (*c_sample) return run_sample(sample);
        if (*c_eval) return run_eval(eval);
        if (*c_report) return run_report(report);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
