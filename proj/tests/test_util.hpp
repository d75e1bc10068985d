#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "semdiff/data.hpp"
#include "semdiff/unet.hpp"

namespace semdiff::testing {

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("semdiff_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Small enough for finite differences, still has every block type.
inline DenoiserConfig tiny_config(Conditioning variant, int64_t classes = 2) {
    DenoiserConfig c;
    c.image_size = 4;
    c.base_width = 2;
    c.channel_multipliers = {1};
    c.num_res_blocks = 1;
    c.attention_resolutions = {};
    c.num_mask_classes = classes;
    c.variant = variant;
    return c;
}

/// Two levels at 8x8 with attention; cheap enough for short training runs.
inline DenoiserConfig small_config(Conditioning variant, int64_t image_size = 32) {
    DenoiserConfig c;
    c.image_size = image_size;
    c.base_width = 8;
    c.channel_multipliers = {1, 2};
    c.num_res_blocks = 1;
    c.attention_resolutions = {image_size / 2};
    c.variant = variant;
    return c;
}

/// Random label map with labels in [0, classes).
inline LabelMap random_mask(int64_t rows, int64_t cols, int64_t classes, uint64_t seed) {
    std::mt19937_64 rng(seed);
    LabelMap m(rows, cols);
    for (auto& v : m.values()) v = static_cast<uint8_t>(rng() % static_cast<uint64_t>(classes));
    return m;
}

/// One-hot conditioning of shape [B, C, H, W] from random labels.
inline torch::Tensor random_onehot(int64_t batch, int64_t classes, int64_t size, uint64_t seed) {
    std::vector<torch::Tensor> maps;
    for (int64_t b = 0; b < batch; ++b) {
        maps.push_back(mask_to_onehot(random_mask(size, size, classes, seed + static_cast<uint64_t>(b)), classes));
    }
    return torch::stack(maps);
}

inline ConditioningBundle random_bundle(Conditioning variant, int64_t batch, int64_t classes, int64_t size,
                                        uint64_t seed) {
    const auto onehot = random_onehot(batch, classes, size, seed);
    std::optional<torch::Tensor> edge;
    if (variant == Conditioning::EdgeGuided) {
        std::vector<torch::Tensor> edges;
        for (int64_t b = 0; b < batch; ++b) {
            const auto labels = onehot[b].argmax(0).to(torch::kUInt8).contiguous();
            LabelMap m(size, size);
            std::copy(labels.data_ptr<uint8_t>(), labels.data_ptr<uint8_t>() + labels.numel(), m.data());
            const auto e = mask_to_edges(m);
            edges.push_back(
                torch::from_blob(const_cast<uint8_t*>(e.data()), {1, size, size}, torch::kUInt8).to(torch::kFloat32));
        }
        edge = torch::stack(edges);
    }
    return ConditioningBundle::make(onehot, edge, variant);
}

}  // namespace semdiff::testing
