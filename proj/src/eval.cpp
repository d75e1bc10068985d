#include "semdiff/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <regex>
#include <set>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/script.h>
#include <unistd.h>

#include "semdiff/errors.hpp"

namespace semdiff {

namespace fs = std::filesystem;

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shapes differ (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                         ")");
    }
}

// Valid-mode separable filtering with a symmetric 1D kernel.
std::vector<double> filter_valid(const std::vector<double>& src, int64_t rows, int64_t cols,
                                 const std::vector<double>& k) {
    const auto n = static_cast<int64_t>(k.size());
    const int64_t oc = cols - n + 1;
    const int64_t orows = rows - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(rows * oc));
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < oc; ++c) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += k[i] * src[r * cols + c + i];
            tmp[r * oc + c] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(orows * oc));
    for (int64_t r = 0; r < orows; ++r) {
        for (int64_t c = 0; c < oc; ++c) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += k[i] * tmp[(r + i) * oc + c];
            out[r * oc + c] = s;
        }
    }
    return out;
}

torch::Tensor sqrt_psd(const torch::Tensor& s) {
    auto [values, vectors] = torch::linalg_eigh(s);
    return torch::matmul(vectors * torch::sqrt(values.clamp_min(0.0)).unsqueeze(0), vectors.transpose(0, 1));
}

// Tr((A B)^(1/2)) through the symmetric product A^(1/2) B A^(1/2). Returns
// NaN when the spectrum shows more than round-off negativity.
double trace_sqrt_product(const torch::Tensor& a, const torch::Tensor& b) {
    const auto ra = sqrt_psd(a);
    auto m = torch::matmul(torch::matmul(ra, b), ra);
    m = (m + m.transpose(0, 1)) * 0.5;
    const auto values = torch::linalg_eigvalsh(m);
    if (!torch::isfinite(values).all().item<bool>() || values.min().item<double>() < -1e-6) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return torch::sqrt(values.clamp_min(0.0)).sum().item<double>();
}

// Singular to working precision: smallest eigenvalue tiny relative to the largest.
bool is_singular(const torch::Tensor& s) {
    const auto values = torch::linalg_eigvalsh((s + s.transpose(0, 1)) * 0.5);
    const double hi = values.abs().max().item<double>();
    return hi == 0.0 || values.min().item<double>() <= 1e-12 * hi;
}

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.emplace(e.path().stem().string(), e.path());
    }
    return out;
}

std::string subject_of(const std::string& stem) {
    const auto pos = stem.rfind('_');
    return pos == std::string::npos ? stem : stem.substr(0, pos);
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// PSNR / SSIM

double psnr(const Image& ref, const Image& test, double data_range) {
    require_same_shape(ref, test, "psnr");
    if (!(data_range > 0.0)) throw ParameterError("psnr data_range must be positive");
    if (ref.empty()) throw ParameterError("psnr of empty images");
    double sum = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = static_cast<double>(ref.values()[i]) - static_cast<double>(test.values()[i]);
        sum += d * d;
    }
    const double mse = sum / static_cast<double>(ref.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

double ssim(const Image& ref, const Image& test, double data_range) {
    require_same_shape(ref, test, "ssim");
    constexpr int64_t kWin = 11;
    constexpr double kSigma = 1.5;
    if (ref.rows() < kWin || ref.cols() < kWin) {
        throw ParameterError("ssim needs images of at least 11x11, got " + std::to_string(ref.rows()) + "x" +
                             std::to_string(ref.cols()));
    }
    std::vector<double> k(kWin);
    double ksum = 0.0;
    for (int64_t i = 0; i < kWin; ++i) {
        const double d = static_cast<double>(i - kWin / 2);
        k[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        ksum += k[i];
    }
    for (auto& v : k) v /= ksum;

    const auto n = ref.size();
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = ref.values()[i];
        y[i] = test.values()[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, ref.rows(), ref.cols(), k);
    const auto my = filter_valid(y, ref.rows(), ref.cols(), k);
    const auto mxx = filter_valid(xx, ref.rows(), ref.cols(), k);
    const auto myy = filter_valid(yy, ref.rows(), ref.cols(), k);
    const auto mxy = filter_valid(xy, ref.rows(), ref.cols(), k);

    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = mxx[i] - mx[i] * mx[i];
        const double vy = myy[i] - my[i] * my[i];
        const double cxy = mxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

// ---------------------------------------------------------------------------
// FID

GaussianStats feature_stats(const torch::Tensor& features) {
    if (features.dim() != 2) throw ShapeError("features must be [N, D]");
    if (features.size(0) < 2) throw ParameterError("covariance needs at least two feature rows");
    const auto f = features.to(torch::kFloat64);
    GaussianStats s;
    s.mean = f.mean(0);
    const auto centered = f - s.mean;
    s.covariance = torch::matmul(centered.transpose(0, 1), centered) / static_cast<double>(f.size(0) - 1);
    return s;
}

double fid_from_stats(const GaussianStats& real, const GaussianStats& synth, std::vector<std::string>* warnings) {
    if (real.mean.numel() != synth.mean.numel()) {
        throw ShapeError("feature dimensions differ: " + std::to_string(real.mean.numel()) + " vs " +
                         std::to_string(synth.mean.numel()));
    }
    const auto d = real.mean.numel();
    const auto mr = real.mean.to(torch::kFloat64).reshape({d});
    const auto ms = synth.mean.to(torch::kFloat64).reshape({d});
    auto sr = real.covariance.to(torch::kFloat64).reshape({d, d});
    auto ss = synth.covariance.to(torch::kFloat64).reshape({d, d});

    if (is_singular(sr) || is_singular(ss)) {
        constexpr double kEps = 1e-6;
        const std::string msg = "fid: singular covariance, added 1e-6 * I to both";
        if (warnings) warnings->push_back(msg);
        std::fprintf(stderr, "warning: %s\n", msg.c_str());
        const auto eye = torch::eye(d, torch::kFloat64) * kEps;
        sr = sr + eye;
        ss = ss + eye;
    }
    const double tr_sqrt = trace_sqrt_product(sr, ss);
    if (std::isnan(tr_sqrt)) throw DomainError("fid: covariance product has no real square root");
    const double mean_term = (mr - ms).pow(2).sum().item<double>();
    const double value = mean_term + sr.trace().item<double>() + ss.trace().item<double>() - 2.0 * tr_sqrt;
    return std::max(0.0, value);
}

double fid(const torch::Tensor& features_real, const torch::Tensor& features_synth, std::vector<std::string>* warnings) {
    return fid_from_stats(feature_stats(features_real), feature_stats(features_synth), warnings);
}

// ---------------------------------------------------------------------------
// Feature extractors

RandomProjectionExtractor::RandomProjectionExtractor(uint64_t seed, int64_t pooled, int64_t dim)
    : seed_(seed), pooled_(pooled) {
    if (pooled < 1 || dim < 1) throw ParameterError("random projection sizes must be positive");
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    projection_ = torch::randn({pooled * pooled, dim}, gen, torch::TensorOptions().dtype(torch::kFloat64)) /
                  static_cast<double>(pooled);
}

torch::Tensor RandomProjectionExtractor::extract(const torch::Tensor& images) const {
    if (images.dim() != 4 || images.size(1) != 1) throw ShapeError("extractor input must be [N, 1, H, W]");
    torch::NoGradGuard guard;
    const auto pooled = torch::adaptive_avg_pool2d(images.to(torch::kFloat64), {pooled_, pooled_});
    return torch::matmul(pooled.flatten(1), projection_);
}

std::string RandomProjectionExtractor::name() const {
    return "random-projection(seed=" + std::to_string(seed_) + ",pool=" + std::to_string(pooled_) +
           ",dim=" + std::to_string(projection_.size(1)) + ")";
}

struct TorchScriptExtractor::Impl {
    mutable torch::jit::Module module;
};

TorchScriptExtractor::TorchScriptExtractor(const fs::path& path) : impl_(std::make_unique<Impl>()), path_(path) {
    try {
        impl_->module = torch::jit::load(path.string());
    } catch (const c10::Error& e) {
        throw DataError("cannot load TorchScript extractor " + path.string() + ": " + e.what_without_backtrace());
    }
    impl_->module.eval();
}

TorchScriptExtractor::~TorchScriptExtractor() = default;

torch::Tensor TorchScriptExtractor::extract(const torch::Tensor& images) const {
    if (images.dim() != 4 || images.size(1) != 1) throw ShapeError("extractor input must be [N, 1, H, W]");
    torch::NoGradGuard guard;
    torch::Tensor out;
    try {
        out = impl_->module.forward({images.to(torch::kFloat32)}).toTensor();
    } catch (const c10::Error& e) {
        throw DataError("TorchScript extractor failed: " + std::string(e.what_without_backtrace()));
    }
    if (out.dim() != 2 || out.size(0) != images.size(0)) {
        throw ShapeError("TorchScript extractor must return [N, D]");
    }
    return out.to(torch::kFloat64);
}

std::string TorchScriptExtractor::name() const {
    return "torchscript:" + path_.filename().string();
}

torch::Tensor extract_features(const std::vector<Image>& images, const FeatureExtractor& extractor, int64_t batch_size) {
    if (images.empty()) throw ParameterError("no images to embed");
    std::vector<torch::Tensor> rows;
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<torch::Tensor> batch;
        for (auto i = start; i < end; ++i) batch.push_back(image_to_tensor(images[i]).unsqueeze(0));
        rows.push_back(extractor.extract(torch::stack(batch)));
    }
    return torch::cat(rows, 0);
}

// ---------------------------------------------------------------------------
// Dice and oracles

DiceResult dice(const LabelMap& pred, const LabelMap& truth, int64_t class_id) {
    if (!pred.same_shape(truth)) throw ShapeError("dice: mask shapes differ");
    int64_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool in_p = pred.values()[i] == class_id;
        const bool in_g = truth.values()[i] == class_id;
        p += in_p;
        g += in_g;
        both += in_p && in_g;
    }
    if (p + g == 0) return {1.0, true};
    return {2.0 * static_cast<double>(both) / static_cast<double>(p + g), false};
}

LabelMap IntensityBandOracle::segment(const Image& image) const {
    const auto& bands = toy_intensity_bands();
    LabelMap out(image.rows(), image.cols());
    std::vector<float> window;
    for (int64_t r = 0; r < image.rows(); ++r) {
        for (int64_t c = 0; c < image.cols(); ++c) {
            window.clear();
            for (int64_t dr = -1; dr <= 1; ++dr) {
                for (int64_t dc = -1; dc <= 1; ++dc) {
                    const int64_t rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= image.rows() || cc >= image.cols()) continue;
                    window.push_back(image(rr, cc));
                }
            }
            const auto mid = window.begin() + static_cast<std::ptrdiff_t>(window.size() / 2);
            std::nth_element(window.begin(), mid, window.end());
            const double v = *mid;
            int64_t best = bands.front().label;
            double best_d = std::abs(v - bands.front().center);
            for (const auto& b : bands) {
                if (std::abs(v - b.center) < best_d) {
                    best_d = std::abs(v - b.center);
                    best = b.label;
                }
            }
            out(r, c) = static_cast<uint8_t>(best);
        }
    }
    return out;
}

ExternalCommandOracle::ExternalCommandOracle(std::string command, fs::path scratch_dir)
    : command_(std::move(command)), scratch_(std::move(scratch_dir)) {
    if (command_.empty()) throw ConfigError("external oracle command is empty");
    if (scratch_.empty()) scratch_ = fs::temp_directory_path() / ("semdiff-oracle-" + std::to_string(::getpid()));
}

LabelMap ExternalCommandOracle::segment(const Image& image) const {
    fs::create_directories(scratch_);
    const fs::path input = scratch_ / ("input_" + std::to_string(counter_++) + ".png");
    write_png16(input, image);
    const std::string cmd = command_ + " '" + input.string() + "'";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) throw DataError("cannot run oracle command: " + cmd);
    std::string output;
    std::array<char, 512> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) output += buf.data();
    const int status = ::pclose(pipe);
    if (status != 0) throw DataError("oracle command failed (status " + std::to_string(status) + "): " + cmd);

    std::istringstream lines(output);
    std::string line, last;
    while (std::getline(lines, line)) {
        line.erase(line.find_last_not_of(" \t\r") + 1);
        if (!line.empty()) last = line;
    }
    if (last.empty()) throw DataError("oracle command printed no mask path: " + cmd);
    auto mask = read_png_mask(last);
    if (mask.rows() != image.rows() || mask.cols() != image.cols()) {
        throw DataError("oracle mask " + last + " does not match the image size");
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Evaluation

nlohmann::json EvalReport::to_json() const {
    return {{"label", label},
            {"fid", fid},
            {"psnr_mean", psnr_mean},
            {"ssim_mean", ssim_mean},
            {"dsc_per_class", dsc_per_class},
            {"dsc_support", dsc_support},
            {"absent_classes", absent_classes},
            {"dsc_grouping", dsc_grouping},
            {"n_images", n_images},
            {"config_fingerprint", config_fingerprint},
            {"warnings", warnings}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        r.label = j.value("label", "");
        r.fid = j.at("fid").get<double>();
        r.psnr_mean = j.at("psnr_mean").get<double>();
        r.ssim_mean = j.at("ssim_mean").get<double>();
        r.dsc_per_class = j.at("dsc_per_class").get<std::map<std::string, double>>();
        r.dsc_support = j.value("dsc_support", std::map<std::string, int64_t>{});
        r.absent_classes = j.value("absent_classes", std::vector<std::string>{});
        r.dsc_grouping = j.value("dsc_grouping", "slice");
        r.n_images = j.at("n_images").get<int64_t>();
        r.config_fingerprint = j.value("config_fingerprint", "");
        r.warnings = j.value("warnings", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed eval report: ") + e.what());
    }
    return r;
}

std::string fingerprint(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

EvalReport evaluate(const fs::path& real_dir, const fs::path& synth_dir, const fs::path& mask_dir,
                    const SegmentationOracle& oracle, const FeatureExtractor& extractor, const EvalOptions& options) {
    const auto reals = list_pngs(real_dir);
    const auto synths = list_pngs(synth_dir);
    const auto masks = list_pngs(mask_dir);
    if (synths.empty()) throw DataError("no synthetic images in " + synth_dir.string());

    static const std::regex kRepeat("^(.*)_r[0-9]+$");
    std::vector<std::pair<std::string, std::string>> pairs;  // synth stem, base stem
    std::vector<std::string> unmatched;
    std::set<std::string> used;
    for (const auto& [stem, path] : synths) {
        std::string base = stem;
        std::smatch m;
        if (!reals.count(base) && std::regex_match(stem, m, kRepeat)) base = m[1].str();
        if (!reals.count(base)) {
            unmatched.push_back("synthetic " + path.filename().string() + " has no real image");
            continue;
        }
        if (!masks.count(base)) {
            unmatched.push_back("synthetic " + path.filename().string() + " has no mask");
            continue;
        }
        pairs.emplace_back(stem, base);
        used.insert(base);
    }
    for (const auto& [stem, path] : reals) {
        if (!used.count(stem)) unmatched.push_back("real " + path.filename().string() + " has no synthetic image");
    }
    if (!unmatched.empty()) {
        std::string msg = "directories are not aligned by file name:";
        for (const auto& u : unmatched) msg += "\n  " + u;
        throw DataError(msg);
    }

    const int64_t classes = options.classes;
    std::vector<double> dsc_sum(static_cast<std::size_t>(classes), 0.0);
    std::vector<int64_t> dsc_n(static_cast<std::size_t>(classes), 0);
    // subject -> class -> (intersection, |P| + |G|)
    std::map<std::string, std::map<int64_t, std::pair<int64_t, int64_t>>> volumes;

    EvalReport report;
    report.label = options.label;
    report.dsc_grouping = options.volume_wise ? "volume" : "slice";
    std::vector<Image> real_images, synth_images;
    double psnr_sum = 0.0, ssim_sum = 0.0;

    std::map<std::string, std::size_t> real_slot;
    for (const auto& [stem, base] : pairs) {
        const Image synth = read_png_image(synths.at(stem), true);
        if (!real_slot.count(base)) {
            real_slot[base] = real_images.size();
            real_images.push_back(read_png_image(reals.at(base), true));
        }
        const Image& real = real_images[real_slot.at(base)];
        const LabelMap truth = read_png_mask(masks.at(base));
        if (!real.same_shape(synth) || !real.same_shape(truth)) {
            throw DataError("size mismatch between real, synthetic and mask for " + stem);
        }
        psnr_sum += std::min(psnr(real, synth), kPsnrCap);
        ssim_sum += ssim(real, synth);

        const LabelMap pred = oracle.segment(synth);
        if (!pred.same_shape(truth)) throw DataError("oracle output size mismatch for " + stem);
        for (int64_t c = 1; c < classes; ++c) {
            int64_t p = 0, g = 0, both = 0;
            for (std::size_t i = 0; i < pred.size(); ++i) {
                const bool in_p = pred.values()[i] == c, in_g = truth.values()[i] == c;
                p += in_p;
                g += in_g;
                both += in_p && in_g;
            }
            if (g == 0) continue;
            if (options.volume_wise) {
                auto& acc = volumes[subject_of(base)][c];
                acc.first += both;
                acc.second += p + g;
            } else {
                dsc_sum[c] += 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
                ++dsc_n[c];
            }
        }
        synth_images.push_back(synth);
    }
    if (options.volume_wise) {
        for (const auto& [subject, per_class] : volumes) {
            for (const auto& [c, acc] : per_class) {
                dsc_sum[c] += 2.0 * static_cast<double>(acc.first) / static_cast<double>(acc.second);
                ++dsc_n[c];
            }
        }
    }

    const auto n = static_cast<double>(pairs.size());
    report.n_images = static_cast<int64_t>(pairs.size());
    report.psnr_mean = psnr_sum / n;
    report.ssim_mean = ssim_sum / n;
    if (real_images.size() < 2 || synth_images.size() < 2) {
        throw DataError("FID needs at least two real and two synthetic images");
    }
    report.fid = fid(extract_features(real_images, extractor), extract_features(synth_images, extractor),
                     &report.warnings);

    for (int64_t c = 1; c < classes; ++c) {
        if (dsc_n[c] > 0) {
            report.dsc_per_class[LabelSchema::name(c)] = dsc_sum[c] / static_cast<double>(dsc_n[c]);
            report.dsc_support[LabelSchema::name(c)] = dsc_n[c];
        }
    }
    for (int64_t c : LabelSchema::report_order()) {
        if (c < classes && dsc_n[c] == 0) report.absent_classes.push_back(LabelSchema::name(c));
    }

    nlohmann::json basis{{"oracle", oracle.name()},
                         {"extractor", extractor.name()},
                         {"grouping", report.dsc_grouping},
                         {"classes", classes}};
    std::vector<std::string> names;
    for (const auto& p : pairs) names.push_back(p.first);
    basis["synthetic"] = names;
    if (const auto index = synth_dir.parent_path() / "index.json"; fs::exists(index)) {
        try {
            std::ifstream is(index);
            const auto j = nlohmann::json::parse(is);
            for (const char* key : {"variant", "checkpoint_step", "seed", "n_per_mask"}) {
                if (j.contains(key)) basis["sampling"][key] = j.at(key);
            }
        } catch (const nlohmann::json::exception&) {
            report.warnings.push_back("index.json next to the synthetic directory is unreadable");
        }
    }
    report.config_fingerprint = fingerprint(basis.dump());
    return report;
}

// ---------------------------------------------------------------------------
// Formatting

namespace {

std::vector<int64_t> table_classes(const std::vector<EvalReport>& reports) {
    std::vector<int64_t> out;
    for (int64_t c : LabelSchema::report_order()) {
        for (const auto& r : reports) {
            if (r.dsc_per_class.count(LabelSchema::name(c))) {
                out.push_back(c);
                break;
            }
        }
    }
    return out;
}

std::string row_label(const EvalReport& r, std::size_t i) {
    return r.label.empty() ? "run" + std::to_string(i + 1) : r.label;
}

}  // namespace

std::string format_table(const std::vector<EvalReport>& reports) {
    const auto classes = table_classes(reports);
    const std::size_t cols = 3 + classes.size();

    // values[row][col]; NaN where missing.
    std::vector<std::vector<double>> values(reports.size(), std::vector<double>(cols, std::nan("")));
    for (std::size_t i = 0; i < reports.size(); ++i) {
        values[i][0] = reports[i].fid;
        values[i][1] = reports[i].psnr_mean;
        values[i][2] = reports[i].ssim_mean;
        for (std::size_t k = 0; k < classes.size(); ++k) {
            const auto it = reports[i].dsc_per_class.find(LabelSchema::name(classes[k]));
            if (it != reports[i].dsc_per_class.end()) values[i][3 + k] = it->second * 100.0;
        }
    }

    std::vector<std::string> header{"Method", "FID", "PSNR", "SSIM"};
    for (auto c : classes) header.push_back(LabelSchema::abbreviation(c));
    std::vector<std::vector<std::string>> cells{header};
    for (std::size_t i = 0; i < reports.size(); ++i) {
        std::vector<std::string> row{row_label(reports[i], i)};
        for (std::size_t k = 0; k < cols; ++k) {
            const double v = values[i][k];
            if (std::isnan(v)) {
                row.push_back("-");
                continue;
            }
            const int digits = k == 2 ? 3 : (k < 2 ? 2 : 1);
            bool best = reports.size() > 1;
            for (std::size_t j = 0; j < reports.size() && best; ++j) {
                const double o = values[j][k];
                if (std::isnan(o)) continue;
                // compare at displayed precision so printed ties share the mark
                const double a = std::stod(fixed(v, digits)), b = std::stod(fixed(o, digits));
                if (k == 0 ? b < a : b > a) best = false;
            }
            row.push_back(fixed(v, digits) + (best ? "*" : ""));
        }
        cells.push_back(row);
    }

    std::vector<std::size_t> width(cols + 1, 0);
    for (const auto& row : cells) {
        for (std::size_t k = 0; k < row.size(); ++k) width[k] = std::max(width[k], row[k].size());
    }
    std::ostringstream os;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t k = 0; k < cells[r].size(); ++k) {
            if (k == 0) {
                os << std::left << std::setw(static_cast<int>(width[k])) << cells[r][k];
            } else {
                os << "  " << std::right << std::setw(static_cast<int>(width[k])) << cells[r][k];
            }
        }
        os << '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            os << std::string(total - 2, '-') << '\n';
        }
    }
    os << "DSC columns in %. '*' marks the best value per column (lowest FID, highest otherwise).\n";

    std::set<std::string> absent;
    for (const auto& r : reports) {
        for (const auto& name : r.absent_classes) absent.insert(name);
    }
    std::vector<std::string> footnote;
    for (int64_t c : LabelSchema::report_order()) {
        const auto& name = LabelSchema::name(c);
        if (absent.count(name) && std::find(classes.begin(), classes.end(), c) == classes.end()) {
            footnote.push_back(LabelSchema::abbreviation(c));
        }
    }
    if (!footnote.empty()) {
        os << "Omitted (absent from every ground-truth mask):";
        for (const auto& f : footnote) os << ' ' << f;
        os << '\n';
    }
    return os.str();
}

std::string format_csv(const std::vector<EvalReport>& reports) {
    const auto classes = table_classes(reports);
    std::ostringstream os;
    os << "method,fid,psnr,ssim,n_images";
    for (auto c : classes) os << ",dsc_" << LabelSchema::name(c);
    os << '\n' << std::setprecision(9);
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        os << row_label(r, i) << ',' << r.fid << ',' << r.psnr_mean << ',' << r.ssim_mean << ',' << r.n_images;
        for (auto c : classes) {
            os << ',';
            const auto it = r.dsc_per_class.find(LabelSchema::name(c));
            if (it != r.dsc_per_class.end()) os << it->second;
        }
        os << '\n';
    }
    return os.str();
}

void write_report(const EvalReport& report, const fs::path& json_path) {
    if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
    auto write = [](const fs::path& p, const std::string& text) {
        std::ofstream os(p, std::ios::trunc);
        os << text;
        if (!os) throw DataError("cannot write " + p.string());
    };
    write(json_path, report.to_json().dump(2) + "\n");
    write(fs::path(json_path).replace_extension(".csv"), format_csv({report}));
    write(fs::path(json_path).replace_extension(".txt"), format_table({report}));
}

EvalReport read_report(const fs::path& json_path) {
    std::ifstream is(json_path);
    if (!is) throw DataError("cannot read " + json_path.string());
    try {
        return EvalReport::from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(json_path.string() + ": " + e.what());
    }
}

}  // namespace semdiff
