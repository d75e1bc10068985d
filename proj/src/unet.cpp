#include "semdiff/unet.hpp"

#include <cmath>
#include <sstream>

#include "semdiff/errors.hpp"

namespace semdiff {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(Conditioning variant) {
    switch (variant) {
        case Conditioning::Concat: return "concat";
        case Conditioning::MaskGuided: return "mask_guided";
        case Conditioning::EdgeGuided: return "edge_guided";
    }
    return "unknown";
}

Conditioning conditioning_from_string(const std::string& name) {
    if (name == "concat" || name == "conditional") return Conditioning::Concat;
    if (name == "mask_guided" || name == "mask-guided") return Conditioning::MaskGuided;
    if (name == "edge_guided" || name == "edge-guided") return Conditioning::EdgeGuided;
    throw ConfigError("unknown conditioning variant '" + name + "' (expected concat, mask_guided, edge_guided)");
}

DenoiserConfig DenoiserConfig::paper(Conditioning variant) {
    DenoiserConfig c;
    c.variant = variant;
    return c;
}

DenoiserConfig DenoiserConfig::toy(Conditioning variant) {
    DenoiserConfig c;
    c.image_size = 32;
    c.base_width = 32;
    c.channel_multipliers = {1, 2, 2};
    c.num_res_blocks = 1;
    c.attention_resolutions = {8};
    c.variant = variant;
    return c;
}

int64_t DenoiserConfig::main_in_channels() const {
    return variant == Conditioning::MaskGuided ? 1 : 1 + num_mask_classes;
}

int64_t DenoiserConfig::aux_in_channels() const {
    switch (variant) {
        case Conditioning::Concat: return 0;
        case Conditioning::MaskGuided: return num_mask_classes;
        case Conditioning::EdgeGuided: return 1;
    }
    return 0;
}

void DenoiserConfig::validate() const {
    if (image_size < 1) throw ConfigError("model.image_size must be positive");
    if (base_width < 1) throw ConfigError("model.base_width must be positive");
    if (channel_multipliers.empty()) throw ConfigError("model.channel_multipliers must not be empty");
    for (auto m : channel_multipliers) {
        if (m < 1) throw ConfigError("model.channel_multipliers entries must be positive");
    }
    if (num_res_blocks < 1) throw ConfigError("model.num_res_blocks must be >= 1");
    if (num_mask_classes < 1) throw ConfigError("model.num_mask_classes must be >= 1");
    const int64_t factor = int64_t{1} << (levels() - 1);
    if (image_size % factor != 0) {
        throw ConfigError("model.image_size " + std::to_string(image_size) + " is not divisible by 2^(levels-1) = " +
                          std::to_string(factor));
    }
}

nlohmann::json DenoiserConfig::to_json() const {
    return nlohmann::json{
        {"image_size", image_size},
        {"base_width", base_width},
        {"channel_multipliers", channel_multipliers},
        {"num_res_blocks", num_res_blocks},
        {"attention_resolutions", std::vector<int64_t>(attention_resolutions.begin(), attention_resolutions.end())},
        {"num_mask_classes", num_mask_classes},
        {"variant", to_string(variant)},
    };
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    try {
        c.image_size = j.at("image_size").get<int64_t>();
        c.base_width = j.at("base_width").get<int64_t>();
        c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int64_t>>();
        c.num_res_blocks = j.at("num_res_blocks").get<int64_t>();
        const auto attn = j.at("attention_resolutions").get<std::vector<int64_t>>();
        c.attention_resolutions = std::set<int64_t>(attn.begin(), attn.end());
        c.num_mask_classes = j.at("num_mask_classes").get<int64_t>();
        c.variant = conditioning_from_string(j.at("variant").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

ConditioningBundle ConditioningBundle::make(torch::Tensor mask_onehot, std::optional<torch::Tensor> edge_map,
                                            Conditioning variant) {
    if (mask_onehot.dim() != 4) {
        throw ShapeError("mask one-hot must be [B, C, H, W]");
    }
    const auto binary = (mask_onehot == 0) | (mask_onehot == 1);
    if (!binary.all().item<bool>()) {
        throw DataError("mask one-hot has entries outside {0, 1}");
    }
    if (!(mask_onehot.sum(1) == 1).all().item<bool>()) {
        throw DataError("mask one-hot channel sum is not 1 at every pixel");
    }
    const bool wants_edge = variant == Conditioning::EdgeGuided;
    if (wants_edge != edge_map.has_value()) {
        throw ShapeError(wants_edge ? "edge-guided conditioning requires an edge map"
                                    : "edge map supplied to a variant that does not use it");
    }
    if (edge_map) {
        const auto& e = *edge_map;
        if (e.dim() != 4 || e.size(0) != mask_onehot.size(0) || e.size(1) != 1 || e.size(2) != mask_onehot.size(2) ||
            e.size(3) != mask_onehot.size(3)) {
            throw ShapeError("edge map must be [B, 1, H, W] matching the mask");
        }
    }
    ConditioningBundle b;
    b.mask_onehot_ = std::move(mask_onehot);
    b.edge_map_ = std::move(edge_map);
    b.variant_ = variant;
    return b;
}

ConditioningBundle ConditioningBundle::to(torch::ScalarType dtype) const {
    ConditioningBundle b = *this;
    b.mask_onehot_ = mask_onehot_.to(dtype);
    if (edge_map_) b.edge_map_ = edge_map_->to(dtype);
    return b;
}

ConditioningBundle ConditioningBundle::select(const torch::Tensor& indices) const {
    ConditioningBundle b = *this;
    b.mask_onehot_ = mask_onehot_.index_select(0, indices);
    if (edge_map_) b.edge_map_ = edge_map_->index_select(0, indices);
    return b;
}

ConditioningBundle ConditioningBundle::repeat(int64_t times) const {
    ConditioningBundle b = *this;
    b.mask_onehot_ = mask_onehot_.repeat({times, 1, 1, 1});
    if (edge_map_) b.edge_map_ = edge_map_->repeat({times, 1, 1, 1});
    return b;
}

torch::Tensor time_embedding(const torch::Tensor& t, int64_t dim) {
    if (dim <= 0 || dim % 2 != 0) {
        throw ConfigError("time embedding dimension must be positive and even, got " + std::to_string(dim));
    }
    const int64_t half = dim / 2;
    const auto opts = torch::TensorOptions().dtype(torch::kFloat64).device(t.device());
    const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / static_cast<double>(half));
    const auto args = t.reshape({-1, 1}).to(torch::kFloat64) * freqs.unsqueeze(0);
    return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

int64_t norm_groups(int64_t channels) {
    for (int64_t g = std::min<int64_t>(32, channels / 4); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

namespace {

nn::GroupNorm make_norm(int64_t channels) {
    return nn::GroupNorm(nn::GroupNormOptions(norm_groups(channels), channels));
}

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d conv1x1(int64_t in, int64_t out) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 1));
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_dim) {
    norm1 = register_module("norm1", make_norm(in_channels));
    conv1 = register_module("conv1", conv3x3(in_channels, out_channels));
    if (emb_dim > 0) {
        emb_proj = register_module("emb_proj", nn::Linear(emb_dim, out_channels));
    }
    norm2 = register_module("norm2", make_norm(out_channels));
    conv2 = register_module("conv2", conv3x3(out_channels, out_channels));
    if (in_channels != out_channels) {
        skip = register_module("skip", conv1x1(in_channels, out_channels));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1(F::silu(norm1(x)));
    if (emb_proj) {
        h = h + emb_proj(F::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    }
    h = conv2(F::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int64_t channels) {
    norm = register_module("norm", make_norm(channels));
    qkv = register_module("qkv", conv1x1(channels, 3 * channels));
    proj = register_module("proj", conv1x1(channels, channels));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto c = x.size(1);
    const auto hw = x.size(2) * x.size(3);
    const auto parts = qkv(norm(x)).reshape({b, 3, c, hw}).unbind(1);
    const auto scale = 1.0 / std::sqrt(static_cast<double>(c));
    const auto weights = torch::softmax(torch::bmm(parts[0].transpose(1, 2), parts[1]) * scale, -1);  // [b, hw, hw]
    const auto attended = torch::bmm(parts[2], weights.transpose(1, 2));                             // [b, c, hw]
    return x + proj(attended.reshape(x.sizes()));
}

ConditionEncoderImpl::ConditionEncoderImpl(const DenoiserConfig& config) {
    conv_in = register_module("conv_in", conv3x3(config.aux_in_channels(), config.base_width));
    int64_t ch = config.base_width;
    for (int64_t level = 0; level < config.levels(); ++level) {
        const int64_t out = config.base_width * config.channel_multipliers[static_cast<std::size_t>(level)];
        std::vector<ResBlock> blocks;
        for (int64_t i = 0; i < config.num_res_blocks; ++i) {
            blocks.push_back(register_module("level" + std::to_string(level) + "_block" + std::to_string(i),
                                             ResBlock(ch, out, 0)));
            ch = out;
        }
        levels.push_back(std::move(blocks));
        feature_channels.push_back(ch);
        if (level + 1 < config.levels()) {
            downsamples.push_back(register_module("down" + std::to_string(level), conv3x3(ch, ch, 2)));
        }
    }
}

std::vector<torch::Tensor> ConditionEncoderImpl::forward(const torch::Tensor& cond) {
    std::vector<torch::Tensor> features;
    const torch::Tensor none;
    auto h = conv_in(cond);
    for (std::size_t level = 0; level < levels.size(); ++level) {
        for (auto& block : levels[level]) {
            h = block(h, none);
        }
        features.push_back(h);
        if (level < downsamples.size()) {
            h = downsamples[level](h);
        }
    }
    return features;
}

DenoiserImpl::DenoiserImpl(DenoiserConfig config) : config_(std::move(config)) {
    config_.validate();
    const int64_t base = config_.base_width;
    const int64_t emb_dim = config_.time_embedding_dim();
    const int64_t levels = config_.levels();

    time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(base, emb_dim), nn::SiLU(),
                                                            nn::Linear(emb_dim, emb_dim)));
    conv_in_ = register_module("conv_in", conv3x3(config_.main_in_channels(), base));

    std::vector<int64_t> aux_channels(static_cast<std::size_t>(levels), 0);
    if (config_.has_aux_encoder()) {
        aux_ = register_module("aux_encoder", ConditionEncoder(config_));
        aux_channels = aux_->feature_channels;
    }

    // Encoder. Skip channels are recorded in push order for the decoder.
    std::vector<int64_t> skip_channels{base};
    int64_t ch = base;
    int64_t resolution = config_.image_size;
    for (int64_t level = 0; level < levels; ++level) {
        const auto lvl = static_cast<std::size_t>(level);
        const int64_t out = base * config_.channel_multipliers[lvl];
        std::vector<Stage> stages;
        for (int64_t i = 0; i < config_.num_res_blocks; ++i) {
            const int64_t in = ch + (i == 0 ? aux_channels[lvl] : 0);
            const std::string name = "down" + std::to_string(level) + "_" + std::to_string(i);
            Stage stage;
            stage.block = register_module(name + "_block", ResBlock(in, out, emb_dim));
            if (config_.attention_resolutions.count(resolution)) {
                stage.attn = register_module(name + "_attn", AttentionBlock(out));
            }
            stages.push_back(stage);
            ch = out;
            skip_channels.push_back(ch);
        }
        down_.push_back(std::move(stages));
        if (level + 1 < levels) {
            downsamples_.push_back(register_module("downsample" + std::to_string(level), conv3x3(ch, ch, 2)));
            skip_channels.push_back(ch);
            resolution /= 2;
        }
    }

    mid_block1_ = register_module("mid_block1", ResBlock(ch, ch, emb_dim));
    mid_attn_ = register_module("mid_attn", AttentionBlock(ch));
    mid_block2_ = register_module("mid_block2", ResBlock(ch, ch, emb_dim));

    // Decoder, built deepest level first.
    up_.resize(static_cast<std::size_t>(levels));
    for (int64_t level = levels - 1; level >= 0; --level) {
        const auto lvl = static_cast<std::size_t>(level);
        const int64_t out = base * config_.channel_multipliers[lvl];
        std::vector<Stage> stages;
        for (int64_t i = 0; i <= config_.num_res_blocks; ++i) {
            const int64_t skip = skip_channels.back();
            skip_channels.pop_back();
            const int64_t in = ch + skip + (i == 0 ? aux_channels[lvl] : 0);
            const std::string name = "up" + std::to_string(level) + "_" + std::to_string(i);
            Stage stage;
            stage.block = register_module(name + "_block", ResBlock(in, out, emb_dim));
            if (config_.attention_resolutions.count(resolution)) {
                stage.attn = register_module(name + "_attn", AttentionBlock(out));
            }
            stages.push_back(stage);
            ch = out;
        }
        up_[lvl] = std::move(stages);
        if (level > 0) {
            upsamples_.push_back(register_module("upsample" + std::to_string(level), conv3x3(ch, ch)));
            resolution *= 2;
        }
    }

    out_norm_ = register_module("out_norm", make_norm(ch));
    out_conv_ = register_module("out_conv", conv3x3(ch, 2));
}

void DenoiserImpl::check_inputs(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond) const {
    if (cond.variant() != config_.variant) {
        throw ConfigError("conditioning variant " + to_string(cond.variant()) + " does not match denoiser variant " +
                          to_string(config_.variant));
    }
    if (x_t.dim() != 4 || x_t.size(1) != 1) {
        throw ShapeError("x_t must be [B, 1, H, W]");
    }
    const auto& mask = cond.mask_onehot();
    if (mask.size(0) != x_t.size(0) || mask.size(2) != x_t.size(2) || mask.size(3) != x_t.size(3)) {
        std::ostringstream os;
        os << "conditioning mask " << mask.sizes() << " does not match x_t " << x_t.sizes();
        throw ShapeError(os.str());
    }
    if (mask.size(1) != config_.num_mask_classes) {
        throw ShapeError("conditioning mask has " + std::to_string(mask.size(1)) + " classes, denoiser expects " +
                         std::to_string(config_.num_mask_classes));
    }
    const int64_t factor = int64_t{1} << (config_.levels() - 1);
    if (x_t.size(2) % factor != 0 || x_t.size(3) % factor != 0) {
        throw ShapeError("spatial size must be divisible by " + std::to_string(factor));
    }
    if (t.dim() != 1 || t.size(0) != x_t.size(0)) {
        throw ShapeError("step tensor must be [B] matching the batch");
    }
}

DenoiserOutput DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond) {
    return run(x_t, t, cond, false);
}

DenoiserOutput DenoiserImpl::forward_without_aux_features(const torch::Tensor& x_t, const torch::Tensor& t,
                                                          const ConditioningBundle& cond) {
    return run(x_t, t, cond, true);
}

DenoiserOutput DenoiserImpl::run(const torch::Tensor& x_t, const torch::Tensor& t, const ConditioningBundle& cond,
                                 bool zero_aux) {
    check_inputs(x_t, t, cond);
    const auto dtype = x_t.scalar_type();
    const auto mask = cond.mask_onehot().to(dtype);

    const auto emb = time_mlp_->forward(time_embedding(t, config_.base_width).to(dtype));

    torch::Tensor input = x_t;
    if (config_.variant != Conditioning::MaskGuided) {
        input = torch::cat({x_t, mask}, 1);
    }

    std::vector<torch::Tensor> aux;
    if (aux_) {
        const auto aux_in = config_.variant == Conditioning::MaskGuided ? mask : cond.edge_map()->to(dtype);
        aux = aux_->forward(aux_in);
        if (zero_aux) {
            for (auto& f : aux) f = torch::zeros_like(f);
        }
    }

    auto h = conv_in_(input);
    std::vector<torch::Tensor> skips{h};
    for (std::size_t level = 0; level < down_.size(); ++level) {
        for (std::size_t i = 0; i < down_[level].size(); ++i) {
            if (i == 0 && !aux.empty()) {
                h = torch::cat({h, aux[level]}, 1);
            }
            h = down_[level][i].block(h, emb);
            if (down_[level][i].attn) h = down_[level][i].attn(h);
            skips.push_back(h);
        }
        if (level < downsamples_.size()) {
            h = downsamples_[level](h);
            skips.push_back(h);
        }
    }

    h = mid_block1_(h, emb);
    h = mid_attn_(h);
    h = mid_block2_(h, emb);

    std::size_t upsample_index = 0;
    for (std::size_t level = up_.size(); level-- > 0;) {
        for (std::size_t i = 0; i < up_[level].size(); ++i) {
            std::vector<torch::Tensor> parts{h, skips.back()};
            skips.pop_back();
            if (i == 0 && !aux.empty()) {
                parts.push_back(aux[level]);
            }
            h = up_[level][i].block(torch::cat(parts, 1), emb);
            if (up_[level][i].attn) h = up_[level][i].attn(h);
        }
        if (level > 0) {
            h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
            h = upsamples_[upsample_index++](h);
        }
    }

    const auto out = out_conv_(F::silu(out_norm_(h)));
    auto halves = out.chunk(2, 1);
    return DenoiserOutput{halves[0], halves[1]};
}

Denoiser build_denoiser(const DenoiserConfig& config) {
    return Denoiser(config);
}

}  // namespace semdiff
