#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "semdiff/data.hpp"

namespace semdiff {

// ---------------------------------------------------------------------------
// Pairwise image metrics

/// 10 log10(range^2 / MSE). Identical images give +infinity.
double psnr(const Image& ref, const Image& test, double data_range = 1.0);
/// Cap applied to +infinity PSNR values when averaging.
inline constexpr double kPsnrCap = 99.0;

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), valid
/// filtering, K1 = 0.01, K2 = 0.03. Computed in double precision.
double ssim(const Image& ref, const Image& test, double data_range = 1.0);

// ---------------------------------------------------------------------------
// Frechet distance between feature distributions

struct GaussianStats {
    torch::Tensor mean;        // [D] float64
    torch::Tensor covariance;  // [D, D] float64
};

/// Mean and unbiased covariance of the rows of `features` (N >= 2).
GaussianStats feature_stats(const torch::Tensor& features);

/// |mu_r - mu_s|^2 + Tr(S_r + S_s - 2 (S_r S_s)^(1/2)). Warnings about
/// regularization are appended to `warnings` when given.
double fid_from_stats(const GaussianStats& real, const GaussianStats& synth,
                      std::vector<std::string>* warnings = nullptr);
double fid(const torch::Tensor& features_real, const torch::Tensor& features_synth,
           std::vector<std::string>* warnings = nullptr);

/// Maps [N, 1, H, W] images in [0, 1] to [N, D] embeddings.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual torch::Tensor extract(const torch::Tensor& images) const = 0;
    virtual std::string name() const = 0;
};

/// Average pooling to 8x8 followed by a fixed seeded Gaussian projection.
/// Hermetic; the values carry no meaning beyond this repository.
class RandomProjectionExtractor : public FeatureExtractor {
public:
    explicit RandomProjectionExtractor(uint64_t seed = 0, int64_t pooled = 8, int64_t dim = 16);
    torch::Tensor extract(const torch::Tensor& images) const override;
    std::string name() const override;

private:
    uint64_t seed_;
    int64_t pooled_;
    torch::Tensor projection_;  // [pooled^2, dim] float64
};

/// A serialized TorchScript module whose forward maps [N, 1, H, W] in [0, 1]
/// to [N, D]. Use this to plug in a pretrained embedding network.
class TorchScriptExtractor : public FeatureExtractor {
public:
    explicit TorchScriptExtractor(const std::filesystem::path& path);
    ~TorchScriptExtractor() override;
    torch::Tensor extract(const torch::Tensor& images) const override;
    std::string name() const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::filesystem::path path_;
};

torch::Tensor extract_features(const std::vector<Image>& images, const FeatureExtractor& extractor,
                               int64_t batch_size = 64);

// ---------------------------------------------------------------------------
// Segmentation agreement

struct DiceResult {
    double value = 0.0;
    bool both_empty = false;  // value is 1 by convention
};

DiceResult dice(const LabelMap& pred, const LabelMap& truth, int64_t class_id);

class SegmentationOracle {
public:
    virtual ~SegmentationOracle() = default;
    /// Labels under LabelSchema for an image in [0, 1]. Deterministic.
    virtual LabelMap segment(const Image& image) const = 0;
    virtual std::string name() const = 0;
};

/// Rule-based oracle for toy phantoms: 3x3 median filter, then the class whose
/// toy intensity band center is nearest.
class IntensityBandOracle : public SegmentationOracle {
public:
    LabelMap segment(const Image& image) const override;
    std::string name() const override { return "toy-intensity-band"; }
};

/// Runs `<command> <image.png>` through the shell. The command must print the
/// path of an 8-bit label PNG on the last line of its standard output.
class ExternalCommandOracle : public SegmentationOracle {
public:
    explicit ExternalCommandOracle(std::string command, std::filesystem::path scratch_dir = {});
    LabelMap segment(const Image& image) const override;
    std::string name() const override { return "external:" + command_; }

private:
    std::string command_;
    std::filesystem::path scratch_;
    mutable int64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    std::string label;
    double fid = 0.0;
    double psnr_mean = 0.0;  // dB, infinite pairs counted as kPsnrCap
    double ssim_mean = 0.0;
    std::map<std::string, double> dsc_per_class;    // class name -> [0, 1]
    std::map<std::string, int64_t> dsc_support;     // images (or volumes) averaged
    std::vector<std::string> absent_classes;        // never in the ground truth
    std::string dsc_grouping = "slice";             // "slice" or "volume"
    int64_t n_images = 0;
    std::string config_fingerprint;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

struct EvalOptions {
    std::string label;
    bool volume_wise = false;  // pool DSC counts per subject before averaging
    int64_t classes = LabelSchema::kClassCount;
};

/// Pairs synthetic images with real images and masks by file stem. Synthetic
/// names may carry a "_r<k>" repeat suffix. Throws DataError listing unmatched
/// names.
EvalReport evaluate(const std::filesystem::path& real_dir, const std::filesystem::path& synth_dir,
                    const std::filesystem::path& mask_dir, const SegmentationOracle& oracle,
                    const FeatureExtractor& extractor, const EvalOptions& options = {});

/// Writes <path> (JSON), <path without extension>.csv and .txt.
void write_report(const EvalReport& report, const std::filesystem::path& json_path);
EvalReport read_report(const std::filesystem::path& json_path);

/// One row per report, columns FID, PSNR, SSIM and DSC (%) in table order;
/// best value per column marked with '*'. Classes missing from every report
/// are dropped and listed in a footnote.
std::string format_table(const std::vector<EvalReport>& reports);
std::string format_csv(const std::vector<EvalReport>& reports);

/// 64-bit FNV-1a of `text` as 16 hex digits.
std::string fingerprint(const std::string& text);

}  // namespace semdiff
