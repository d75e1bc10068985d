#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace semdiff {

/// How the segmentation mask enters the denoiser.
enum class Conditioning {
    Concat,       // mask one-hot concatenated to the noisy image
    MaskGuided,   // mask through an auxiliary encoder, features injected
    EdgeGuided,   // mask concatenated, edge map through the auxiliary encoder
};

std::string to_string(Conditioning variant);
Conditioning conditioning_from_string(const std::string& name);

struct DenoiserConfig {
    int64_t image_size = 256;
    int64_t base_width = 128;
    std::vector<int64_t> channel_multipliers{1, 1, 2, 2, 4, 4};
    int64_t num_res_blocks = 2;
    std::set<int64_t> attention_resolutions{16};
    int64_t num_mask_classes = 17;
    Conditioning variant = Conditioning::MaskGuided;

    /// 256x256 ladder in the improved-DDPM lineage.
    static DenoiserConfig paper(Conditioning variant);
    /// 32x32, width 32, multipliers (1, 2, 2), one block per level.
    static DenoiserConfig toy(Conditioning variant);

    int64_t levels() const { return static_cast<int64_t>(channel_multipliers.size()); }
    int64_t time_embedding_dim() const { return 4 * base_width; }

    /// Channels consumed by the main branch input convolution.
    int64_t main_in_channels() const;
    /// Channels consumed by the auxiliary encoder; 0 when there is none.
    int64_t aux_in_channels() const;
    bool has_aux_encoder() const { return aux_in_channels() > 0; }

    /// Throws ConfigError on inconsistent sizes.
    void validate() const;

    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);

    bool operator==(const DenoiserConfig&) const = default;
};

/// The mask (and optional edge map) that steers one batch of denoising.
class ConditioningBundle {
public:
    ConditioningBundle() = default;

    /// Validates one-hot structure and edge presence against the variant.
    /// mask_onehot: [B, C, H, W] in {0, 1}; edge_map: [B, 1, H, W] in {0, 1}.
    static ConditioningBundle make(torch::Tensor mask_onehot, std::optional<torch::Tensor> edge_map,
                                   Conditioning variant);

    const torch::Tensor& mask_onehot() const { return mask_onehot_; }
    const std::optional<torch::Tensor>& edge_map() const { return edge_map_; }
    Conditioning variant() const { return variant_; }
    int64_t batch() const { return mask_onehot_.size(0); }

    /// Same bundle with every tensor cast to `dtype`.
    ConditioningBundle to(torch::ScalarType dtype) const;
    /// Rows `indices` of the bundle.
    ConditioningBundle select(const torch::Tensor& indices) const;
    /// The bundle repeated `times` along the batch dimension.
    ConditioningBundle repeat(int64_t times) const;

private:
    torch::Tensor mask_onehot_;
    std::optional<torch::Tensor> edge_map_;
    Conditioning variant_ = Conditioning::Concat;
};

struct DenoiserOutput {
    torch::Tensor eps_hat;  // [B, 1, H, W]
    torch::Tensor v;        // [B, 1, H, W] variance-interpolation logits
};

/// Sinusoidal embedding of (possibly zero) step indices: [cos | sin] halves.
torch::Tensor time_embedding(const torch::Tensor& t, int64_t dim);

/// Picks the largest group count <= 32 that divides `channels` with at least 4 channels per group.
int64_t norm_groups(int64_t channels);

struct ResBlockImpl : torch::nn::Module {
    ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

    torch::nn::GroupNorm norm1{nullptr};
    torch::nn::Conv2d conv1{nullptr};
    torch::nn::Linear emb_proj{nullptr};
    torch::nn::GroupNorm norm2{nullptr};
    torch::nn::Conv2d conv2{nullptr};
    torch::nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

struct AttentionBlockImpl : torch::nn::Module {
    explicit AttentionBlockImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::GroupNorm norm{nullptr};
    torch::nn::Conv2d qkv{nullptr};
    torch::nn::Conv2d proj{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// U-Net-like encoder over the conditioning input. Returns one feature map per
/// resolution level, taken after the level's last block and before its
/// downsampling convolution.
struct ConditionEncoderImpl : torch::nn::Module {
    explicit ConditionEncoderImpl(const DenoiserConfig& config);
    std::vector<torch::Tensor> forward(const torch::Tensor& cond);

    torch::nn::Conv2d conv_in{nullptr};
    std::vector<std::vector<ResBlock>> levels;
    std::vector<torch::nn::Conv2d> downsamples;
    std::vector<int64_t> feature_channels;
};
TORCH_MODULE(ConditionEncoder);

/// eps_theta with a 2-channel head (eps_hat, v).
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(DenoiserConfig config);

    DenoiserOutput forward(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond);

    /// Forward pass with every auxiliary-encoder feature map replaced by
    /// zeros. Used to probe that the conditioning path is live.
    DenoiserOutput forward_without_aux_features(const torch::Tensor& x_t, const torch::Tensor& t,
                                                const ConditioningBundle& cond);

    const DenoiserConfig& config() const { return config_; }
    /// Null unless the variant carries an auxiliary encoder.
    ConditionEncoder aux_encoder() const { return aux_; }
    int64_t first_layer_in_channels() const { return conv_in_->options.in_channels(); }

private:
    DenoiserOutput run(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond,
                       bool zero_aux);
    void check_inputs(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond) const;

    DenoiserConfig config_;
    torch::nn::Sequential time_mlp_{nullptr};
    torch::nn::Conv2d conv_in_{nullptr};
    struct Stage {
        ResBlock block{nullptr};
        AttentionBlock attn{nullptr};  // null when the resolution has no attention
    };

    // down_[level][i], up_[level][i]; up_ is indexed by level, deepest first in use.
    std::vector<std::vector<Stage>> down_;
    std::vector<torch::nn::Conv2d> downsamples_;
    ResBlock mid_block1_{nullptr};
    AttentionBlock mid_attn_{nullptr};
    ResBlock mid_block2_{nullptr};
    std::vector<std::vector<Stage>> up_;
    std::vector<torch::nn::Conv2d> upsamples_;
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
    ConditionEncoder aux_{nullptr};
};
TORCH_MODULE(Denoiser);

Denoiser build_denoiser(const DenoiserConfig& config);

}  // namespace semdiff
