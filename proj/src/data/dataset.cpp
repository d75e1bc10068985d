#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <mutex>
#include <random>
#include <unordered_map>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "semdiff/data.hpp"
#include "semdiff/errors.hpp"

namespace semdiff {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG I/O

Image read_png_image(const fs::path& path, bool prewindowed) {
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) {
        throw DataError("cannot read image " + path.string());
    }
    if (m.channels() != 1) {
        throw DataError("image " + path.string() + " is not single-channel grayscale");
    }
    Image out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            double v = 0.0;
            if (m.depth() == CV_16U) {
                const double raw = m.at<uint16_t>(r, c);
                v = prewindowed ? raw / 65535.0 : raw - kHuPngOffset;
            } else if (m.depth() == CV_8U) {
                if (!prewindowed) throw DataError("HU-valued image " + path.string() + " must be 16-bit");
                v = m.at<uint8_t>(r, c) / 255.0;
            } else {
                throw DataError("unsupported bit depth in " + path.string());
            }
            out(r, c) = static_cast<float>(v);
        }
    }
    return out;
}

LabelMap read_png_mask(const fs::path& path) {
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) {
        throw DataError("cannot read mask " + path.string());
    }
    if (m.channels() != 1 || m.depth() != CV_8U) {
        throw DataError("mask " + path.string() + " must be an 8-bit single-channel label image");
    }
    LabelMap out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) out(r, c) = m.at<uint8_t>(r, c);
    }
    return out;
}

namespace {

void write_or_throw(const fs::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), m)) {
        throw DataError("cannot write " + path.string());
    }
}

template <class Pixel>
cv::Mat quantize(const Image& image, int type, double scale) {
    cv::Mat m(static_cast<int>(image.rows()), static_cast<int>(image.cols()), type);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            const double v = std::clamp(static_cast<double>(image(r, c)), 0.0, 1.0);
            m.at<Pixel>(r, c) = static_cast<Pixel>(std::lround(v * scale));
        }
    }
    return m;
}

}  // namespace

void write_png16(const fs::path& path, const Image& image) {
    write_or_throw(path, quantize<uint16_t>(image, CV_16U, 65535.0));
}

void write_png8(const fs::path& path, const Image& image) {
    write_or_throw(path, quantize<uint8_t>(image, CV_8U, 255.0));
}

void write_png_mask(const fs::path& path, const LabelMap& mask) {
    cv::Mat m(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), CV_8U,
              const_cast<uint8_t*>(mask.data()));
    write_or_throw(path, m);
}

// ---------------------------------------------------------------------------
// Manifests

fs::path write_dataset(const std::vector<SliceRecord>& records, const fs::path& out_dir) {
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");
    const fs::path manifest = out_dir / "manifest.jsonl";
    std::ofstream os(manifest);
    if (!os) {
        throw DataError("cannot write " + manifest.string());
    }
    for (const auto& rec : records) {
        const std::string name = rec.stem() + ".png";
        write_png16(out_dir / "images" / name, rec.image);
        write_png_mask(out_dir / "masks" / name, rec.mask);
        const nlohmann::ordered_json line{
            {"subject_id", rec.subject_id},
            {"slice_index", rec.slice_index},
            {"image_path", "images/" + name},
            {"mask_path", "masks/" + name},
            {"split", to_string(rec.split)},
            {"prewindowed", true},
        };
        os << line.dump() << '\n';
    }
    if (!os) {
        throw DataError("failed writing " + manifest.string());
    }
    return manifest;
}

struct RecordCache {
    std::mutex mutex;
    std::unordered_map<std::size_t, SliceRecord> records;
};

Dataset Dataset::load_manifest(const fs::path& path, DatasetOptions options) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("manifest not found: " + path.string());
    }
    Dataset ds;
    ds.options_ = options;
    ds.cache_ = std::make_shared<RecordCache>();
    const fs::path base = path.parent_path();
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + "invalid JSON (" + e.what() + ")");
        }
        ManifestEntry e;
        try {
            e.subject_id = j.at("subject_id").get<std::string>();
            e.slice_index = j.at("slice_index").get<int64_t>();
            e.image_path = j.at("image_path").get<std::string>();
            e.mask_path = j.at("mask_path").get<std::string>();
            e.split = split_from_string(j.at("split").get<std::string>());
            e.prewindowed = j.at("prewindowed").get<bool>();
        } catch (const nlohmann::json::exception& ex) {
            throw DataError(where + "schema violation (" + ex.what() + ")");
        } catch (const DataError& ex) {
            throw DataError(where + ex.what());
        }
        if (e.subject_id.empty()) throw DataError(where + "empty subject_id");
        if (e.image_path.is_relative()) e.image_path = base / e.image_path;
        if (e.mask_path.is_relative()) e.mask_path = base / e.mask_path;
        ds.entries_.push_back(std::move(e));
    }

    // Subject-level split: a subject may not appear in both splits.
    std::unordered_map<std::string, Split> subject_split;
    for (const auto& e : ds.entries_) {
        const auto [it, inserted] = subject_split.emplace(e.subject_id, e.split);
        if (!inserted && it->second != e.split) {
            throw DataError(path.string() + ": subject '" + e.subject_id + "' appears in both train and test splits");
        }
    }
    return ds;
}

std::vector<std::size_t> Dataset::split_indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].split == split) out.push_back(i);
    }
    return out;
}

SliceRecord Dataset::record(std::size_t index) const {
    if (index >= entries_.size()) {
        throw DataError("record index " + std::to_string(index) + " out of range");
    }
    if (options_.cache && cache_) {
        std::lock_guard lock(cache_->mutex);
        if (const auto it = cache_->records.find(index); it != cache_->records.end()) return it->second;
    }
    const auto& e = entries_[index];
    SliceRecord rec;
    rec.subject_id = e.subject_id;
    rec.slice_index = e.slice_index;
    rec.split = e.split;
    rec.image = read_png_image(e.image_path, e.prewindowed);
    if (!e.prewindowed) rec.image = window_ct(rec.image, options_.window);
    rec.mask = read_png_mask(e.mask_path);
    if (rec.image.rows() != rec.mask.rows() || rec.image.cols() != rec.mask.cols()) {
        throw DataError("image and mask sizes differ for " + e.image_path.string());
    }
    for (std::size_t i = 0; i < rec.mask.size(); ++i) {
        if (rec.mask.values()[i] >= options_.classes) {
            const auto r = static_cast<int64_t>(i) / rec.mask.cols();
            const auto c = static_cast<int64_t>(i) % rec.mask.cols();
            throw DataError("label " + std::to_string(rec.mask.values()[i]) + " at (row " + std::to_string(r) +
                            ", col " + std::to_string(c) + ") in " + e.mask_path.string() + " exceeds class count");
        }
    }
    if (options_.image_size > 0) {
        std::tie(rec.image, rec.mask) = resize_pair(rec.image, rec.mask, options_.image_size);
    }
    if (options_.cache && cache_) {
        std::lock_guard lock(cache_->mutex);
        cache_->records.emplace(index, rec);
    }
    return rec;
}

std::vector<std::vector<std::size_t>> Dataset::epoch_batches(Split split, int64_t batch_size,
                                                             std::optional<uint64_t> shuffle_seed) const {
    if (batch_size < 1) {
        throw ParameterError("batch size must be positive");
    }
    auto order = split_indices(split);
    if (shuffle_seed) {
        std::mt19937_64 engine(*shuffle_seed);
        std::shuffle(order.begin(), order.end(), engine);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Batch Dataset::load_batch(const std::vector<std::size_t>& indices) const {
    std::vector<SliceRecord> records(indices.size());
    const int workers = std::max(1, std::min<int>(options_.num_workers, static_cast<int>(indices.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < indices.size(); ++i) records[i] = record(indices[i]);
    } else {
        std::vector<std::future<void>> jobs;
        for (int w = 0; w < workers; ++w) {
            jobs.push_back(std::async(std::launch::async, [&, w] {
                for (std::size_t i = static_cast<std::size_t>(w); i < indices.size(); i += static_cast<std::size_t>(workers)) {
                    records[i] = record(indices[i]);
                }
            }));
        }
        for (auto& j : jobs) j.get();
    }
    std::vector<const SliceRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    Batch b = make_batch(ptrs, options_.classes);
    b.indices = indices;
    return b;
}

std::vector<Batch> Dataset::iterate(Split split, int64_t batch_size, std::optional<uint64_t> shuffle_seed) const {
    std::vector<Batch> out;
    for (const auto& idx : epoch_batches(split, batch_size, shuffle_seed)) out.push_back(load_batch(idx));
    return out;
}

Batch make_batch(const std::vector<const SliceRecord*>& records, int64_t classes) {
    if (records.empty()) {
        throw DataError("cannot build an empty batch");
    }
    std::vector<torch::Tensor> images, masks, onehots, edges;
    for (const auto* rec : records) {
        if (!rec->image.same_shape(records.front()->image)) {
            throw DataError("records in a batch must share a size");
        }
        images.push_back(image_to_tensor(rec->image).unsqueeze(0));
        const auto& m = rec->mask;
        masks.push_back(torch::from_blob(const_cast<uint8_t*>(m.data()), {m.rows(), m.cols()}, torch::kUInt8)
                            .to(torch::kLong));
        onehots.push_back(mask_to_onehot(m, classes));
        const auto e = mask_to_edges(m);
        edges.push_back(torch::from_blob(const_cast<uint8_t*>(e.data()), {1, e.rows(), e.cols()}, torch::kUInt8)
                            .to(torch::kFloat32));
    }
    Batch b;
    b.image = to_model_range(torch::stack(images));
    b.mask = torch::stack(masks);
    b.onehot = torch::stack(onehots);
    b.edge = torch::stack(edges);
    return b;
}

torch::Tensor to_model_range(const torch::Tensor& unit) {
    return unit * 2.0 - 1.0;
}

torch::Tensor to_unit_range(const torch::Tensor& model) {
    return (model + 1.0) * 0.5;
}

torch::Tensor image_to_tensor(const Image& image) {
    return torch::from_blob(const_cast<float*>(image.data()), {image.rows(), image.cols()}, torch::kFloat32).clone();
}

Image tensor_to_image(const torch::Tensor& t) {
    const auto c = t.detach().to(torch::kCPU).to(torch::kFloat32).contiguous().squeeze();
    if (c.dim() != 2) {
        throw ShapeError("tensor_to_image expects a single-channel 2D image");
    }
    Image out(c.size(0), c.size(1));
    std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), out.data());
    return out;
}

int workers_from_environment() {
    if (deterministic_from_environment()) return 1;
    if (const char* v = std::getenv("SEMDIFF_NUM_WORKERS")) {
        try {
            return std::max(1, std::stoi(v));
        } catch (const std::exception&) {
            throw ConfigError(std::string("SEMDIFF_NUM_WORKERS is not an integer: ") + v);
        }
    }
    return 1;
}

bool deterministic_from_environment() {
    const char* v = std::getenv("SEMDIFF_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

}  // namespace semdiff
