#include "semdiff/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "semdiff/errors.hpp"
#include "semdiff/loss.hpp"

namespace semdiff {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormatTag = "semdiff-checkpoint-v1";
constexpr const char* kMetricsHeader = "step,l_simple,l_vlb,total,wallclock_s";

// SplitMix64 finalizer; decorrelates per-step generator seeds.
uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    return j.contains(key) && !j.at(key).is_null() ? j.at(key).get<T>() : fallback;
}

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
}

void diff_json(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix, std::vector<std::string>& out) {
    if (a.is_object() && b.is_object()) {
        for (const auto& [key, value] : a.items()) {
            const auto path = prefix.empty() ? key : prefix + "." + key;
            if (!b.contains(key)) {
                out.push_back(path + ": " + value.dump() + " -> (missing)");
            } else {
                diff_json(value, b.at(key), path, out);
            }
        }
        for (const auto& [key, value] : b.items()) {
            if (!a.contains(key)) out.push_back((prefix.empty() ? key : prefix + "." + key) + ": (missing) -> " + value.dump());
        }
        return;
    }
    if (a != b) out.push_back(prefix + ": " + a.dump() + " -> " + b.dump());
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs

nlohmann::json ScheduleConfig::to_json() const {
    return {{"steps", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
    ScheduleConfig c;
    try {
        c.steps = j.at("steps").get<int64_t>();
        c.beta_start = j.at("beta_start").get<double>();
        c.beta_end = j.at("beta_end").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("schedule config: ") + e.what());
    }
    return c;
}

TrainConfig TrainConfig::paper(Conditioning variant) {
    TrainConfig c;
    c.variant = variant;
    return c;
}

TrainConfig TrainConfig::toy(Conditioning variant) {
    TrainConfig c;
    c.iterations = 3000;
    c.batch_size = 8;
    c.checkpoint_every = 1000;
    c.variant = variant;
    return c;
}

void TrainConfig::validate() const {
    if (iterations < 0) throw ConfigError("train.iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (lambda_vlb < 0.0) throw ConfigError("train.lambda_vlb must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be positive");
    if (iterations > 0 && checkpoint_every > iterations) {
        throw ConfigError("train.checkpoint_every (" + std::to_string(checkpoint_every) + ") exceeds train.iterations (" +
                          std::to_string(iterations) + ")");
    }
    if (metrics_every < 1) throw ConfigError("train.metrics_every must be positive");
    if (ema_decay && !(*ema_decay > 0.0 && *ema_decay < 1.0)) throw ConfigError("train.ema_decay must be in (0, 1)");
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ConfigError("train.grad_clip_norm must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j{
        {"iterations", iterations},
        {"batch_size", batch_size},
        {"learning_rate", learning_rate},
        {"lambda_vlb", lambda_vlb},
        {"checkpoint_every", checkpoint_every},
        {"metrics_every", metrics_every},
        {"seed", seed},
        {"variant", to_string(variant)},
    };
    j["ema_decay"] = ema_decay ? nlohmann::json(*ema_decay) : nlohmann::json(nullptr);
    j["grad_clip_norm"] = grad_clip_norm ? nlohmann::json(*grad_clip_norm) : nlohmann::json(nullptr);
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.iterations = j.at("iterations").get<int64_t>();
        c.batch_size = j.at("batch_size").get<int64_t>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.lambda_vlb = j.at("lambda_vlb").get<double>();
        c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
        c.metrics_every = get_or<int64_t>(j, "metrics_every", 100);
        c.seed = j.at("seed").get<uint64_t>();
        c.variant = conditioning_from_string(j.at("variant").get<std::string>());
        if (j.contains("ema_decay") && !j.at("ema_decay").is_null()) c.ema_decay = j.at("ema_decay").get<double>();
        if (j.contains("grad_clip_norm") && !j.at("grad_clip_norm").is_null()) {
            c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    return c;
}

nlohmann::json RunConfig::to_json() const {
    return {{"schedule", schedule.to_json()}, {"model", model.to_json()}, {"train", train.to_json()}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        c.schedule = ScheduleConfig::from_json(j.at("schedule"));
        c.model = DenoiserConfig::from_json(j.at("model"));
        c.train = TrainConfig::from_json(j.at("train"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    return c;
}

std::vector<std::string> incompatible_fields(const RunConfig& saved, const RunConfig& requested) {
    auto a = saved.to_json();
    auto b = requested.to_json();
    for (const char* key : {"iterations", "checkpoint_every", "metrics_every"}) {
        a["train"].erase(key);
        b["train"].erase(key);
    }
    std::vector<std::string> out;
    diff_json(a, b, "", out);
    return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(RunConfig config, const Dataset& dataset, TrainOptions options)
    : Trainer(std::move(config), dataset, std::move(options), true) {}

Trainer::Trainer(RunConfig config, const Dataset& dataset, TrainOptions options, bool seed_init)
    : config_(std::move(config)),
      dataset_(&dataset),
      options_(std::move(options)),
      schedule_(config_.schedule.build()) {
    config_.train.validate();
    config_.model.validate();
    if (config_.train.variant != config_.model.variant) {
        throw ConfigError("train.variant (" + to_string(config_.train.variant) + ") differs from model.variant (" +
                          to_string(config_.model.variant) + ")");
    }
    train_indices_ = dataset.split_indices(Split::Train);
    if (train_indices_.empty()) {
        throw DataError("training split is empty");
    }
    if (seed_init) {
        torch::manual_seed(config_.train.seed);
    }
    net_ = build_denoiser(config_.model);
    net_->train();
    optimizer_ = std::make_unique<torch::optim::Adam>(net_->parameters(),
                                                      torch::optim::AdamOptions(config_.train.learning_rate));
    if (config_.train.ema_decay) {
        for (const auto& p : net_->parameters()) ema_.push_back(p.detach().clone());
    }
}

Batch Trainer::batch_for_step(int64_t step) const {
    const auto n = static_cast<int64_t>(train_indices_.size());
    const int64_t bs = config_.train.batch_size;
    const int64_t per_epoch = (n + bs - 1) / bs;
    const int64_t epoch = (step - 1) / per_epoch;
    const int64_t within = (step - 1) % per_epoch;
    const auto batches = dataset_->epoch_batches(Split::Train, bs, mix(config_.train.seed, static_cast<uint64_t>(epoch)));
    return dataset_->load_batch(batches[static_cast<std::size_t>(within)]);
}

ConditioningBundle Trainer::conditioning(const Batch& batch) const {
    std::optional<torch::Tensor> edge;
    if (config_.model.variant == Conditioning::EdgeGuided) edge = batch.edge;
    return ConditioningBundle::make(batch.onehot, edge, config_.model.variant);
}

StepLoss Trainer::train_step() {
    const int64_t next = step_ + 1;
    const Batch batch = batch_for_step(next);
    if (batch.image.size(2) != config_.model.image_size || batch.image.size(3) != config_.model.image_size) {
        throw ShapeError("dataset images are " + std::to_string(batch.image.size(2)) + "x" +
                         std::to_string(batch.image.size(3)) + ", model expects " +
                         std::to_string(config_.model.image_size));
    }
    const int64_t b = batch.image.size(0);

    auto gen = at::make_generator<at::CPUGeneratorImpl>(mix(config_.train.seed ^ 0x5EEDull, static_cast<uint64_t>(next)));
    const auto t = torch::randint(1, schedule_.steps() + 1, {b}, gen, torch::TensorOptions().dtype(torch::kLong));
    const auto eps = torch::randn(batch.image.sizes(), gen, batch.image.options());
    const auto x_t = schedule_.q_sample(batch.image, t, eps);

    const auto out = net_->forward(x_t, t, conditioning(batch));
    const auto terms = hybrid_loss(schedule_, batch.image, t, eps, out, config_.train.lambda_vlb);
    const auto v = terms.values();
    if (!std::isfinite(v.l_simple) || !std::isfinite(v.l_vlb) || !std::isfinite(v.total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << next << ": l_simple=" << v.l_simple << " l_vlb=" << v.l_vlb
           << " total=" << v.total;
        throw TrainingError(os.str());
    }

    optimizer_->zero_grad();
    terms.total.backward();
    if (config_.train.grad_clip_norm) {
        torch::nn::utils::clip_grad_norm_(net_->parameters(), *config_.train.grad_clip_norm);
    }
    optimizer_->step();

    if (config_.train.ema_decay) {
        torch::NoGradGuard guard;
        const double d = *config_.train.ema_decay;
        const auto params = net_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) ema_[i].mul_(d).add_(params[i].detach(), 1.0 - d);
    }

    step_ = next;
    return StepLoss{step_, v.l_simple, v.l_vlb, v.total};
}

TrainResult Trainer::run() {
    if (options_.out_dir.empty()) {
        throw ConfigError("training output directory is not set");
    }
    fs::create_directories(options_.out_dir);
    truncate_metrics_after(step_);

    TrainResult result;
    const auto start = std::chrono::steady_clock::now();
    const int64_t every = config_.train.metrics_every;
    double sums[3] = {0.0, 0.0, 0.0};
    int64_t count = 0;

    if (step_ == 0) {
        result.final_checkpoint = save_checkpoint();
    }
    while (step_ < config_.train.iterations) {
        const StepLoss loss = train_step();
        result.history.push_back(loss);
        sums[0] += loss.l_simple;
        sums[1] += loss.l_vlb;
        sums[2] += loss.total;
        ++count;
        if (step_ % every == 0) {
            const double elapsed =
                options_.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            append_metrics({step_, sums[0] / count, sums[1] / count, sums[2] / count, elapsed});
            sums[0] = sums[1] = sums[2] = 0.0;
            count = 0;
        }
        if (step_ % config_.train.checkpoint_every == 0 || step_ == config_.train.iterations) {
            result.final_checkpoint = save_checkpoint();
        }
        if (options_.on_step && !options_.on_step(loss)) {
            result.final_checkpoint = save_checkpoint();
            break;
        }
    }
    if (result.final_checkpoint.empty()) {
        result.final_checkpoint = save_checkpoint();
    }
    result.final_step = step_;
    return result;
}

void Trainer::append_metrics(const MetricsRow& row) const {
    const fs::path path = options_.out_dir / "metrics.csv";
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    std::ofstream os(path, std::ios::app);
    if (!os) throw TrainingError("cannot write " + path.string());
    if (fresh) os << kMetricsHeader << '\n';
    os << row.step << ',' << format_double(row.l_simple) << ',' << format_double(row.l_vlb) << ','
       << format_double(row.total) << ',' << format_double(row.wallclock_s) << '\n';
}

void Trainer::truncate_metrics_after(int64_t step) const {
    const fs::path path = options_.out_dir / "metrics.csv";
    if (!fs::exists(path)) return;
    std::vector<std::string> kept;
    {
        std::ifstream is(path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty() || line == kMetricsHeader) continue;
            if (std::stoll(line.substr(0, line.find(','))) <= step) kept.push_back(line);
        }
    }
    std::ofstream os(path, std::ios::trunc);
    os << kMetricsHeader << '\n';
    for (const auto& l : kept) os << l << '\n';
}

fs::path Trainer::save_checkpoint() const {
    fs::create_directories(options_.out_dir);
    const fs::path path = options_.out_dir / ("ckpt_" + std::to_string(step_) + ".bin");
    const fs::path tmp = path.string() + ".tmp";
    try {
        torch::serialize::OutputArchive archive;
        archive.write("format", c10::IValue(std::string(kFormatTag)));
        archive.write("config", c10::IValue(config_.canonical()));
        archive.write("step", c10::IValue(step_));

        torch::serialize::OutputArchive model;
        net_->save(model);
        archive.write("model", model);

        torch::serialize::OutputArchive optim;
        optimizer_->save(optim);
        archive.write("optimizer", optim);

        if (!ema_.empty()) {
            torch::serialize::OutputArchive ema;
            const auto named = net_->named_parameters();
            for (std::size_t i = 0; i < ema_.size(); ++i) ema.write(named[i].key(), ema_[i]);
            archive.write("ema", ema);
        }
        archive.save_to(tmp.string());
        fs::rename(tmp, path);

        std::ofstream latest(options_.out_dir / "ckpt_latest", std::ios::trunc);
        latest << path.filename().string() << '\n';
        if (!latest) throw CheckpointError("cannot write ckpt_latest");
    } catch (const c10::Error& e) {
        throw CheckpointError("writing " + path.string() + " failed: " + e.what_without_backtrace());
    } catch (const fs::filesystem_error& e) {
        throw CheckpointError("writing " + path.string() + " failed: " + e.what());
    }
    return path;
}

namespace {

struct RawCheckpoint {
    RunConfig config;
    int64_t step = 0;
    torch::serialize::InputArchive archive;
};

RawCheckpoint open_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) {
        throw CheckpointError("checkpoint not found: " + path.string());
    }
    RawCheckpoint raw;
    try {
        raw.archive.load_from(path.string());
        c10::IValue format, config, step;
        raw.archive.read("format", format);
        if (!format.isString() || format.toStringRef() != kFormatTag) {
            throw CheckpointError(path.string() + ": unrecognised checkpoint format");
        }
        raw.archive.read("config", config);
        raw.archive.read("step", step);
        if (!config.isString() || !step.isInt()) {
            throw CheckpointError(path.string() + ": malformed config or step entry");
        }
        raw.config = RunConfig::from_json(nlohmann::json::parse(config.toStringRef()));
        raw.step = step.toInt();
    } catch (const c10::Error& e) {
        throw CheckpointError(path.string() + ": not a readable checkpoint (" + e.what_without_backtrace() + ")");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path.string() + ": embedded config is not valid JSON (" + e.what() + ")");
    } catch (const ConfigError& e) {
        throw CheckpointError(path.string() + ": embedded config invalid (" + e.what() + ")");
    }
    return raw;
}

}  // namespace

fs::path resolve_checkpoint(const fs::path& path) {
    if (path.filename() == "ckpt_latest" || (fs::is_directory(path) && fs::exists(path / "ckpt_latest"))) {
        const fs::path pointer = fs::is_directory(path) ? path / "ckpt_latest" : path;
        std::ifstream is(pointer);
        std::string name;
        if (!(is >> name)) throw CheckpointError("empty checkpoint pointer " + pointer.string());
        return pointer.parent_path() / name;
    }
    return path;
}

Trainer Trainer::resume(const fs::path& checkpoint, RunConfig config, const Dataset& dataset, TrainOptions options) {
    const fs::path path = resolve_checkpoint(checkpoint);
    auto raw = open_checkpoint(path);
    if (const auto diff = incompatible_fields(raw.config, config); !diff.empty()) {
        std::string msg = "checkpoint " + path.string() + " is incompatible with the requested config:";
        for (const auto& d : diff) msg += "\n  " + d;
        throw ConfigError(msg);
    }
    Trainer trainer(std::move(config), dataset, std::move(options), false);
    try {
        torch::serialize::InputArchive model, optim;
        raw.archive.read("model", model);
        trainer.net_->load(model);
        raw.archive.read("optimizer", optim);
        trainer.optimizer_->load(optim);
        if (!trainer.ema_.empty()) {
            torch::serialize::InputArchive ema;
            if (raw.archive.try_read("ema", ema)) {
                const auto named = trainer.net_->named_parameters();
                for (std::size_t i = 0; i < trainer.ema_.size(); ++i) ema.read(named[i].key(), trainer.ema_[i]);
            }
        }
    } catch (const c10::Error& e) {
        throw CheckpointError(path.string() + ": parameter or optimizer state unreadable (" +
                              e.what_without_backtrace() + ")");
    }
    trainer.step_ = raw.step;
    return trainer;
}

Checkpoint load_checkpoint(const fs::path& checkpoint, bool use_ema) {
    const fs::path path = resolve_checkpoint(checkpoint);
    auto raw = open_checkpoint(path);
    Checkpoint ck;
    ck.config = raw.config;
    ck.step = raw.step;
    ck.denoiser = build_denoiser(raw.config.model);
    try {
        torch::serialize::InputArchive model;
        raw.archive.read("model", model);
        ck.denoiser->load(model);
        torch::serialize::InputArchive ema;
        ck.has_ema = raw.archive.try_read("ema", ema);
        if (use_ema) {
            if (!ck.has_ema) throw CheckpointError(path.string() + ": no EMA weights stored");
            torch::NoGradGuard guard;
            for (auto& p : ck.denoiser->named_parameters()) {
                torch::Tensor value;
                ema.read(p.key(), value);
                p.value().copy_(value);
            }
        }
    } catch (const c10::Error& e) {
        throw CheckpointError(path.string() + ": parameters unreadable (" + e.what_without_backtrace() + ")");
    }
    ck.denoiser->eval();
    return ck;
}

std::vector<MetricsRow> read_metrics(const fs::path& csv) {
    std::ifstream is(csv);
    if (!is) throw DataError("cannot read " + csv.string());
    std::vector<MetricsRow> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line == kMetricsHeader) continue;
        std::istringstream ls(line);
        MetricsRow r;
        char comma;
        if (!(ls >> r.step >> comma >> r.l_simple >> comma >> r.l_vlb >> comma >> r.total >> comma >> r.wallclock_s)) {
            throw DataError("malformed metrics row in " + csv.string() + ": " + line);
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace semdiff
