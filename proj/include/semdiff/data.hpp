#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace semdiff {

/// Dense row-major 2D array with value semantics.
template <class T>
class Grid {
public:
    Grid() = default;
    Grid(int64_t rows, int64_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), fill) {}
    Grid(int64_t rows, int64_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {}

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(int64_t r, int64_t c) { return data_[static_cast<std::size_t>(r * cols_ + c)]; }
    const T& operator()(int64_t r, int64_t c) const { return data_[static_cast<std::size_t>(r * cols_ + c)]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    const std::vector<T>& values() const { return data_; }
    std::vector<T>& values() { return data_; }

    template <class U>
    bool same_shape(const Grid<U>& other) const { return rows_ == other.rows() && cols_ == other.cols(); }
    bool operator==(const Grid&) const = default;

private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<T> data_;
};

using Image = Grid<float>;          // intensities
using LabelMap = Grid<uint8_t>;     // class indices

// ---------------------------------------------------------------------------
// Label schema

/// Background, body, then the fifteen abdominal organs in annotation order.
class LabelSchema {
public:
    static constexpr int64_t kBackground = 0;
    static constexpr int64_t kBody = 1;
    static constexpr int64_t kClassCount = 17;

    static const std::vector<std::string>& names();
    static const std::string& name(int64_t index);
    /// Throws DataError on unknown names.
    static int64_t index_of(std::string_view name);
    /// Short column heading used by report tables, e.g. "Sple.".
    static const std::string& abbreviation(int64_t index);
    /// Classes in report-table column order (the fourteen tabulated organs,
    /// then body and prostate/uterus).
    static const std::vector<int64_t>& report_order();
};

// ---------------------------------------------------------------------------
// Preprocessing

struct CtWindow {
    double level = 40.0;
    double width = 400.0;
};

/// Clamp HU to [level - width/2, level + width/2] and map affinely to [0, 1].
Image window_ct(const Image& hu, CtWindow window = {});

struct BodyOptions {
    double threshold = 0.1;
    // Closing radius at 256 px; scaled linearly with the image width.
    double closing_radius_at_256 = 3.0;
};

struct BodyResult {
    LabelMap mask;      // organ labels kept, body = 1 where no organ, 0 outside
    bool empty = false; // no candidate body pixel; record should be excluded
};

/// Adds the body class: threshold-or-organ candidates, morphological closing,
/// largest connected component, holes filled.
BodyResult derive_body_class(const Image& windowed, const LabelMap& organ_mask, const BodyOptions& options = {});

/// Closing radius in pixels for an image of the given width.
int closing_radius_for(int64_t width, const BodyOptions& options);

/// [C, H, W] float one-hot. Throws DataError naming the first bad pixel.
torch::Tensor mask_to_onehot(const LabelMap& mask, int64_t classes);

/// 1 where any in-bounds 4-neighbour carries a different label.
LabelMap mask_to_edges(const LabelMap& mask);

/// Bilinear image resize, nearest-neighbour mask resize, to size x size.
std::pair<Image, LabelMap> resize_pair(const Image& image, const LabelMap& mask, int64_t size);

// ---------------------------------------------------------------------------
// Records and the toy generator

enum class Split { Train, Test };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct SliceRecord {
    Image image;     // windowed, [0, 1]
    LabelMap mask;   // labels < LabelSchema::kClassCount
    std::string subject_id;
    int64_t slice_index = 0;
    Split split = Split::Train;

    /// "<subject>_<slice, 4 digits>", used for file names.
    std::string stem() const;
};

/// Characteristic intensity of each class in toy phantoms. Classes that the
/// generator never draws have no band.
struct IntensityBand {
    int64_t label;
    double center;
};
const std::vector<IntensityBand>& toy_intensity_bands();
/// Half-width of the intensity band around each center.
inline constexpr double kToyBandHalfWidth = 0.04;

struct ToyOptions {
    int64_t subjects = 8;
    int64_t slices_per_subject = 16;
    int64_t size = 32;
    uint64_t seed = 7;
    // Last ceil(fraction * subjects) subjects form the test split.
    double test_fraction = 0.25;
};

/// Procedural phantom slices: an elliptical body with 2-5 non-overlapping
/// organ blobs, each class rendered in its own intensity band plus smooth
/// low-amplitude noise. Deterministic given the seed.
std::vector<SliceRecord> generate_toy_dataset(const ToyOptions& options);

// ---------------------------------------------------------------------------
// PNG I/O and manifests

/// Offset applied when storing Hounsfield units in unsigned 16-bit PNGs.
inline constexpr double kHuPngOffset = 32768.0;

Image read_png_image(const std::filesystem::path& path, bool prewindowed);
LabelMap read_png_mask(const std::filesystem::path& path);
/// [0, 1] image as 16-bit PNG (value * 65535, rounded).
void write_png16(const std::filesystem::path& path, const Image& image);
/// [0, 1] image as 8-bit PNG.
void write_png8(const std::filesystem::path& path, const Image& image);
void write_png_mask(const std::filesystem::path& path, const LabelMap& mask);

struct ManifestEntry {
    std::string subject_id;
    int64_t slice_index = 0;
    std::filesystem::path image_path;  // resolved against the manifest directory
    std::filesystem::path mask_path;
    Split split = Split::Train;
    bool prewindowed = true;
};

/// Writes `<out>/images/*.png`, `<out>/masks/*.png` and `<out>/manifest.jsonl`.
/// Returns the manifest path.
std::filesystem::path write_dataset(const std::vector<SliceRecord>& records, const std::filesystem::path& out_dir);

struct Batch {
    torch::Tensor image;   // [B, 1, H, W] in [-1, 1]
    torch::Tensor mask;    // [B, H, W] int64
    torch::Tensor onehot;  // [B, C, H, W] float
    torch::Tensor edge;    // [B, 1, H, W] float
    std::vector<std::size_t> indices;
};

struct DatasetOptions {
    int64_t image_size = 0;  // 0 keeps the stored size
    int64_t classes = LabelSchema::kClassCount;
    CtWindow window;
    int num_workers = 1;
    // Keep decoded records in memory after first use.
    bool cache = true;
};

struct RecordCache;

/// Read-only view over a JSON-lines manifest. Batches are loaded on demand.
class Dataset {
public:
    static Dataset load_manifest(const std::filesystem::path& path, DatasetOptions options = {});

    const std::vector<ManifestEntry>& entries() const { return entries_; }
    std::vector<std::size_t> split_indices(Split split) const;

    SliceRecord record(std::size_t index) const;

    /// Epoch ordering: batch lists for one pass over `split`, shuffled with
    /// `shuffle_seed` (no shuffle when nullopt).
    std::vector<std::vector<std::size_t>> epoch_batches(Split split, int64_t batch_size,
                                                        std::optional<uint64_t> shuffle_seed) const;
    Batch load_batch(const std::vector<std::size_t>& indices) const;

    /// Convenience: every batch of one epoch.
    std::vector<Batch> iterate(Split split, int64_t batch_size, std::optional<uint64_t> shuffle_seed) const;

    const DatasetOptions& options() const { return options_; }

private:
    std::vector<ManifestEntry> entries_;
    DatasetOptions options_;
    std::shared_ptr<RecordCache> cache_;
};

struct IngestOptions {
    int64_t size = 256;
    // Added to every nonzero source label; 1 maps AMOS organ ids onto the schema.
    int64_t label_offset = 1;
    CtWindow window;
    BodyOptions body;
};

struct IngestSummary {
    std::filesystem::path manifest;
    int64_t written = 0;
    std::vector<std::string> excluded;  // stems flagged with an empty body
};

/// Converts a manifest of raw slices (HU-valued or pre-windowed images, organ
/// label masks without the body class) into a training manifest: windowing,
/// label offset, body derivation at native resolution, then resizing.
IngestSummary ingest_manifest(const std::filesystem::path& raw_manifest, const std::filesystem::path& out_dir,
                              const IngestOptions& options = {});

/// Builds a batch from in-memory records.
Batch make_batch(const std::vector<const SliceRecord*>& records, int64_t classes);

/// Maps [0, 1] intensities to [-1, 1] and back.
torch::Tensor to_model_range(const torch::Tensor& unit);
torch::Tensor to_unit_range(const torch::Tensor& model);

torch::Tensor image_to_tensor(const Image& image);
Image tensor_to_image(const torch::Tensor& t);

/// Reads SEMDIFF_NUM_WORKERS / SEMDIFF_DETERMINISTIC.
int workers_from_environment();
bool deterministic_from_environment();

}  // namespace semdiff
