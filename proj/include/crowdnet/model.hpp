#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crowdnet/layers.hpp"

namespace crowdnet {

enum class Variant { msfanet, msegnet };

inline std::string to_string(Variant v) { return v == Variant::msfanet ? "msfanet" : "msegnet"; }

inline Variant parse_variant(const std::string& s) {
    if (s == "msfanet") return Variant::msfanet;
    if (s == "msegnet") return Variant::msegnet;
    throw UsageError("unknown variant '" + s + "' (expected msfanet or msegnet)");
}

/// Architecture choice plus the ablation switches. The module flags only apply to M-SFANet.
struct ModelConfig {
    Variant variant = Variant::msfanet;
    double width_multiplier = 1.0;
    bool use_can = true;
    bool use_aspp = true;
    bool use_skip = true;
    std::uint64_t seed = 0;

    /// Scaled channel count: ceil(base * width), at least 1.
    std::size_t channels(std::size_t base) const {
        const double scaled = std::ceil(static_cast<double>(base) * width_multiplier - 1e-9);
        return std::max<std::size_t>(1, static_cast<std::size_t>(scaled));
    }

    /// Input height/width must be a multiple of this.
    std::size_t divisor() const { return variant == Variant::msfanet ? 16 : 8; }
};

/// Encoder outputs consumed by the decoders. Scales are relative to the input.
template <typename T>
struct EncoderTaps {
    Tensor<T> t2;                  // conv2_2, 1/2
    Tensor<T> t3;                  // conv3_3, 1/4
    Tensor<T> t4;                  // conv4_3, 1/8
    std::optional<Tensor<T>> t5;   // conv5_3, 1/16 (M-SFANet)
    std::vector<PoolIndices> pool_indices;  // pool1..pool3 (M-SegNet)
};

template <typename T>
struct NetworkOutputs {
    Tensor<T> density;    // (n,1,h/2,w/2)
    Tensor<T> attention;  // (n,1,h/2,w/2), in (0,1)
};

/// One convolution as seen by the analytic MAC counter.
struct ConvRecord {
    std::string name;
    std::size_t c_in, c_out, k;
    std::size_t spatial_div;   // runs at (h/div, w/div) ...
    std::size_t fixed_size;    // ... unless this is non-zero (then fixed_size x fixed_size)
    std::size_t applications;  // times applied per forward pass
    bool bias;
};

enum class PathKind { density, attention };

template <typename T>
class Model {
public:
    explicit Model(const ModelConfig& config) : config_(config), rng_(config.seed) {
        if (!(config.width_multiplier > 0.0) || config.width_multiplier > 1.0) {
            throw UsageError("width_multiplier must be in (0, 1], got " + std::to_string(config.width_multiplier));
        }
        build_encoder();
        if (config_.variant == Variant::msfanet) {
            build_context_modules();
            for (auto kind : {PathKind::density, PathKind::attention}) build_fusion_path(kind);
        } else {
            for (auto kind : {PathKind::density, PathKind::attention}) build_unpool_path(kind);
        }
        attention_head_ = add_conv(kind_name(PathKind::attention) + ".head", ch(32), 1, 1, 2, 0, 1, true, kHeadInitStd);
        density_head_ = add_conv(kind_name(PathKind::density) + ".head", ch(32), 1, 1, 2, 0, 1, true, kHeadInitStd);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelConfig& config() const { return config_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    const std::vector<ConvRecord>& conv_records() const { return records_; }

    void set_training(bool on) { mode_ = on ? NormMode::train : NormMode::eval; }
    bool training() const { return mode_ == NormMode::train; }

    void check_input(const Shape& s) const {
        if (s.c != 3) throw UsageError("model input must have 3 channels, got " + s.str());
        const std::size_t d = config_.divisor();
        if (s.h == 0 || s.w == 0 || s.h % d != 0 || s.w % d != 0) {
            throw UsageError("input spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                             " must be a positive multiple of " + std::to_string(d) + "; pad the image first");
        }
    }

    EncoderTaps<T> encode(const Tensor<T>& x) {
        check_input(x.shape());
        EncoderTaps<T> taps;
        const bool sfanet = config_.variant == Variant::msfanet;
        Tensor<T> h = x;
        std::size_t layer = 0;
        for (std::size_t block = 0; block < kBlockSizes.size(); ++block) {
            if (!sfanet && block == 4) break;
            if (block > 0) {
                auto [pooled, idx] = max_pool2x2(h);
                h = pooled;
                if (!sfanet) taps.pool_indices.push_back(std::move(idx));
            }
            for (std::size_t i = 0; i < kBlockSizes[block]; ++i) h = encoder_[layer++](h, mode_);
            if (block == 1) taps.t2 = h;
            if (block == 2) taps.t3 = h;
            if (block == 3) taps.t4 = h;
            if (block == 4) taps.t5 = h;
        }
        return taps;
    }

    /// Scale-aware context block on the 1/8 features. Output shape equals input shape.
    Tensor<T> context_module(const Tensor<T>& f) {
        require_sfanet("context_module");
        if (!config_.use_can) throw UsageError("context_module: model was built without CAN");
        const Shape s = f.shape();
        std::optional<Tensor<T>> numer, denom;
        for (std::size_t j = 0; j < kContextScales.size(); ++j) {
            Tensor<T> pooled = adaptive_avg_pool(f, kContextScales[j]);
            Tensor<T> scale_feat = resize_bilinear(can_scale_[j](pooled), s.h, s.w);
            Tensor<T> weight = sigmoid(can_weight_(sub(scale_feat, f)));
            Tensor<T> weighted = mul(weight, scale_feat);
            numer = numer ? add(*numer, weighted) : weighted;
            denom = denom ? add(*denom, weight) : weight;
        }
        return can_fuse_(div(*numer, *denom), mode_);
    }

    /// Atrous spatial pyramid pooling on the 1/16 features.
    Tensor<T> aspp(const Tensor<T>& f) {
        require_sfanet("aspp");
        if (!config_.use_aspp) throw UsageError("aspp: model was built without ASPP");
        const Shape s = f.shape();
        std::vector<Tensor<T>> branches;
        for (auto& b : aspp_branches_) branches.push_back(b(f, mode_));
        branches.push_back(resize_bilinear(aspp_pool_(adaptive_avg_pool(f, 1), mode_), s.h, s.w));
        return aspp_project_(concat_channels(branches), mode_);
    }

    /// Three-stage fusion decoder of M-SFANet; returns the 32-channel 1/2-scale features of one path.
    Tensor<T> fusion_path(const EncoderTaps<T>& taps, const Tensor<T>& context_out, const Tensor<T>& aspp_out,
                          PathKind kind) {
        require_sfanet("fusion_path");
        auto& p = paths_[static_cast<std::size_t>(kind)];
        auto stage_error = [](const char* stage, const std::exception& e) {
            return UsageError(std::string("fusion path ") + stage + ": " + e.what());
        };
        Tensor<T> h;
        try {
            h = concat_channels<T>({upsample_bilinear(aspp_out, 2), context_out});
            h = p.s1_conv(p.s1_reduce(h, mode_), mode_);
        } catch (const UsageError& e) {
            throw stage_error("stage 1", e);
        }
        try {
            std::vector<Tensor<T>> parts{upsample_bilinear(h, 2), taps.t3};
            if (config_.use_skip) parts.push_back(upsample_bilinear(aspp_out, 4));
            h = p.s2_conv(p.s2_reduce(concat_channels(parts), mode_), mode_);
        } catch (const UsageError& e) {
            throw stage_error("stage 2", e);
        }
        try {
            h = concat_channels<T>({upsample_bilinear(h, 2), taps.t2});
            h = p.s3_conv2(p.s3_conv1(p.s3_reduce(h, mode_), mode_), mode_);
        } catch (const UsageError& e) {
            throw stage_error("stage 3", e);
        }
        return h;
    }

    /// Max-unpooling decoder of M-SegNet for one path.
    Tensor<T> unpool_path(const EncoderTaps<T>& taps, PathKind kind) {
        if (config_.variant != Variant::msegnet) throw UsageError("unpool_path: model is not M-SegNet");
        auto& p = paths_[static_cast<std::size_t>(kind)];
        const auto& idx = taps.pool_indices;
        Tensor<T> h = p.s1_conv(p.s1_reduce(taps.t4, mode_), mode_);
        h = max_unpool2x2(h, idx[2], idx[2].in_h, idx[2].in_w);
        h = concat_channels<T>({h, taps.t3});
        h = p.s2_conv(p.s2_reduce(h, mode_), mode_);
        h = max_unpool2x2(h, idx[1], idx[1].in_h, idx[1].in_w);
        h = concat_channels<T>({h, taps.t2});
        return p.s3_conv2(p.s3_conv1(p.s3_reduce(h, mode_), mode_), mode_);
    }

    NetworkOutputs<T> forward(const Tensor<T>& x) {
        EncoderTaps<T> taps = encode(x);
        Tensor<T> density_feat, attention_feat;
        if (config_.variant == Variant::msfanet) {
            Tensor<T> ctx = config_.use_can ? context_module(taps.t4) : can_bypass_(taps.t4, mode_);
            Tensor<T> pyr = config_.use_aspp ? aspp(*taps.t5) : aspp_bypass_(*taps.t5, mode_);
            attention_feat = fusion_path(taps, ctx, pyr, PathKind::attention);
            density_feat = fusion_path(taps, ctx, pyr, PathKind::density);
        } else {
            attention_feat = unpool_path(taps, PathKind::attention);
            density_feat = unpool_path(taps, PathKind::density);
        }
        Tensor<T> attention = sigmoid(attention_head_(attention_feat));
        Tensor<T> density = density_head_(mul_broadcast(density_feat, attention));
        return {density, attention};
    }

    /// Trainable scalars: conv weights and biases, batch-norm gamma and beta.
    std::uint64_t count_params() const {
        std::uint64_t total = 0;
        for (const auto& [_, t] : params_) {
            if (t.requires_grad()) total += t.numel();
        }
        return total;
    }

    /// Conv multiply-accumulates for one (h, w) image; everything else counts as zero.
    std::uint64_t count_macs(std::size_t h, std::size_t w) const {
        check_input(Shape{1, 3, h, w});
        std::uint64_t total = 0;
        for (const auto& r : records_) {
            const std::uint64_t oh = r.fixed_size ? r.fixed_size : h / r.spatial_div;
            const std::uint64_t ow = r.fixed_size ? r.fixed_size : w / r.spatial_div;
            total += r.applications * r.c_out * r.c_in * r.k * r.k * oh * ow;
        }
        return total;
    }

    static constexpr std::array<std::size_t, 5> kBlockSizes{2, 2, 3, 3, 3};
    static constexpr std::array<std::size_t, 13> kEncoderWidths{64,  64,  128, 128, 256, 256, 256,
                                                                512, 512, 512, 512, 512, 512};
    static constexpr std::array<std::size_t, 4> kContextScales{1, 2, 3, 6};
    static constexpr std::array<std::size_t, 3> kAtrousRates{6, 12, 18};

private:
    struct DecoderPath {
        ConvBnRelu<T> s1_reduce, s1_conv, s2_reduce, s2_conv, s3_reduce, s3_conv1, s3_conv2;
    };

    static std::string kind_name(PathKind k) { return k == PathKind::density ? "density" : "attention"; }

    std::size_t ch(std::size_t base) const { return config_.channels(base); }

    void require_sfanet(const char* what) const {
        if (config_.variant != Variant::msfanet) throw UsageError(std::string(what) + ": model is not M-SFANet");
    }

    static constexpr double kHeadInitStd = 0.01;

    ConvBnRelu<T> add_cbr(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                          std::size_t div, std::size_t dilation = 1, std::size_t fixed = 0) {
        records_.push_back({name, c_in, c_out, k, div, fixed, 1, true});
        return ConvBnRelu<T>(params_, rng_, name, c_in, c_out, k, dilation);
    }

    Conv2d<T> add_conv(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                       std::size_t div, std::size_t fixed = 0, std::size_t applications = 1, bool bias = true,
                       std::optional<double> init_std = std::nullopt) {
        records_.push_back({name, c_in, c_out, k, div, fixed, applications, bias});
        return Conv2d<T>(params_, rng_, name, c_in, c_out, k, 1, bias, init_std);
    }

    void build_encoder() {
        const std::size_t blocks = config_.variant == Variant::msfanet ? 5 : 4;
        std::size_t c_in = 3;
        std::size_t layer = 0;
        for (std::size_t b = 0; b < blocks; ++b) {
            const std::size_t div = std::size_t{1} << b;
            for (std::size_t i = 0; i < kBlockSizes[b]; ++i) {
                const std::size_t c_out = ch(kEncoderWidths[layer]);
                const std::string name = "encoder.conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1);
                encoder_.push_back(add_cbr(name, c_in, c_out, 3, div));
                c_in = c_out;
                ++layer;
            }
        }
    }

    void build_context_modules() {
        const std::size_t c = ch(512);
        if (config_.use_can) {
            for (std::size_t s : kContextScales) {
                can_scale_.push_back(add_conv("can.scale" + std::to_string(s), c, c, 1, 8, s, 1, false));
            }
            can_weight_ = add_conv("can.weight_net", c, c, 1, 8, 0, kContextScales.size());
            can_fuse_ = add_cbr("can.fuse", c, c, 3, 8);
        } else {
            can_bypass_ = add_cbr("can_bypass", c, c, 1, 8);
        }
        const std::size_t a = ch(256);
        if (config_.use_aspp) {
            aspp_branches_.push_back(add_cbr("aspp.rate1", c, a, 1, 16));
            for (std::size_t r : kAtrousRates) {
                aspp_branches_.push_back(add_cbr("aspp.rate" + std::to_string(r), c, a, 3, 16, r));
            }
            aspp_pool_ = add_cbr("aspp.image_pool", c, a, 1, 16, 1, 1);
            aspp_project_ = add_cbr("aspp.project", 5 * a, a, 1, 16);
        } else {
            aspp_bypass_ = add_cbr("aspp_bypass", c, a, 1, 16);
        }
    }

    void build_fusion_path(PathKind kind) {
        const std::string pre = kind_name(kind) + ".";
        auto& p = paths_[static_cast<std::size_t>(kind)];
        const std::size_t aspp_c = ch(256);
        p.s1_reduce = add_cbr(pre + "stage1.reduce", aspp_c + ch(512), ch(256), 1, 8);
        p.s1_conv = add_cbr(pre + "stage1.conv", ch(256), ch(256), 3, 8);
        const std::size_t s2_in = ch(256) + ch(256) + (config_.use_skip ? aspp_c : 0);
        p.s2_reduce = add_cbr(pre + "stage2.reduce", s2_in, ch(128), 1, 4);
        p.s2_conv = add_cbr(pre + "stage2.conv", ch(128), ch(128), 3, 4);
        build_stage3(p, pre);
    }

    void build_unpool_path(PathKind kind) {
        const std::string pre = kind_name(kind) + ".";
        auto& p = paths_[static_cast<std::size_t>(kind)];
        // Widths before each unpool are pinned by the indices' channel counts (pool3: 256, pool2: 128).
        p.s1_reduce = add_cbr(pre + "stage1.reduce", ch(512), ch(256), 1, 8);
        p.s1_conv = add_cbr(pre + "stage1.conv", ch(256), ch(256), 3, 8);
        p.s2_reduce = add_cbr(pre + "stage2.reduce", ch(256) + ch(256), ch(128), 1, 4);
        p.s2_conv = add_cbr(pre + "stage2.conv", ch(128), ch(128), 3, 4);
        build_stage3(p, pre);
    }

    void build_stage3(DecoderPath& p, const std::string& pre) {
        p.s3_reduce = add_cbr(pre + "stage3.reduce", ch(128) + ch(128), ch(64), 1, 2);
        p.s3_conv1 = add_cbr(pre + "stage3.conv1", ch(64), ch(64), 3, 2);
        p.s3_conv2 = add_cbr(pre + "stage3.conv2", ch(64), ch(32), 3, 2);
    }

    ModelConfig config_;
    std::mt19937_64 rng_;
    ParamStore<T> params_;
    std::vector<ConvRecord> records_;
    NormMode mode_ = NormMode::train;

    std::vector<ConvBnRelu<T>> encoder_;
    std::vector<Conv2d<T>> can_scale_;
    Conv2d<T> can_weight_;
    ConvBnRelu<T> can_fuse_, can_bypass_;
    std::vector<ConvBnRelu<T>> aspp_branches_;
    ConvBnRelu<T> aspp_pool_, aspp_project_, aspp_bypass_;
    std::array<DecoderPath, 2> paths_;
    Conv2d<T> attention_head_, density_head_;
};

}  // namespace crowdnet
