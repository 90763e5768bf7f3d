#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixview/optim.hpp"
#include "mixview/rng.hpp"
#include "mixview/tensor.hpp"

namespace mixview {

enum class HeadInput { none, features, embedding };

/// Small fixed-input conv encoder: 3 strided conv layers, global average
/// pooling, then a 2-layer MLP projector. An optional affine head feeds the
/// distillation or supervised objectives.
struct EncoderConfig {
    int in_channels = 3;
    int input_hw = 32;
    int channels1 = 16;
    int channels2 = 32;
    int channels3 = 64;
    int kernel = 3;
    int stride = 2;
    int proj_hidden = 128;
    int embed_dim = 64;
    HeadInput head_input = HeadInput::none;
    int head_dim = 0;

    int feature_dim() const { return channels3; }
};

struct EncoderOut {
    Tensor features;   // B x channels3 (pooled backbone)
    Tensor embedding;  // B x embed_dim (projector output)
    Tensor head;       // B x head_dim, defined only when the config has a head
};

class Encoder {
  public:
    Encoder() = default;

    static Encoder init(const EncoderConfig& cfg, uint64_t seed, bool requires_grad) {
        Encoder e;
        e.cfg_ = cfg;
        Rng rng(derive_seed(seed, 0x454e43ull));  // one stream, fixed draw order
        auto kaiming = [&rng, requires_grad](Shape shape, int64_t fan_in) {
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::vector<double> d(static_cast<size_t>(numel_of(shape)));
            for (auto& v : d) v = rng.uniform(-bound, bound);
            return Tensor::from(std::move(shape), std::move(d), requires_grad);
        };
        const int64_t k = cfg.kernel;
        e.params_.insert("conv1.w", kaiming({cfg.channels1, cfg.in_channels, k, k},
                                            cfg.in_channels * k * k));
        e.params_.insert("conv1.b", Tensor::zeros({cfg.channels1}, requires_grad));
        e.params_.insert("conv2.w", kaiming({cfg.channels2, cfg.channels1, k, k},
                                            cfg.channels1 * k * k));
        e.params_.insert("conv2.b", Tensor::zeros({cfg.channels2}, requires_grad));
        e.params_.insert("conv3.w", kaiming({cfg.channels3, cfg.channels2, k, k},
                                            cfg.channels2 * k * k));
        e.params_.insert("conv3.b", Tensor::zeros({cfg.channels3}, requires_grad));
        e.params_.insert("proj1.w", kaiming({cfg.channels3, cfg.proj_hidden}, cfg.channels3));
        e.params_.insert("proj1.b", Tensor::zeros({cfg.proj_hidden}, requires_grad));
        e.params_.insert("proj2.w", kaiming({cfg.proj_hidden, cfg.embed_dim}, cfg.proj_hidden));
        e.params_.insert("proj2.b", Tensor::zeros({cfg.embed_dim}, requires_grad));
        if (cfg.head_input != HeadInput::none) {
            const int in_dim =
                cfg.head_input == HeadInput::features ? cfg.feature_dim() : cfg.embed_dim;
            e.params_.insert("head.w", kaiming({in_dim, cfg.head_dim}, in_dim));
            e.params_.insert("head.b", Tensor::zeros({cfg.head_dim}, requires_grad));
        }
        return e;
    }

    static Encoder from_params(const EncoderConfig& cfg, ParamStore params) {
        Encoder e;
        e.cfg_ = cfg;
        e.params_ = std::move(params);
        return e;
    }

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Encoder clone(bool requires_grad) const {
        return from_params(cfg_, params_.clone(requires_grad));
    }

    /// x: [B x in_channels x hw x hw] with pixels in [0,1]. Builds the
    /// differentiation graph when any parameter requires grad; otherwise a
    /// plain value pass. Inputs are recentered to [-1,1] before the stack.
    EncoderOut forward(const Tensor& x) const {
        if (x.rank() != 4 || x.shape()[1] != cfg_.in_channels ||
            x.shape()[2] != cfg_.input_hw || x.shape()[3] != cfg_.input_hw)
            throw DimensionError("Encoder::forward: bad input shape " + shape_str(x.shape()));
        Tensor xn = add_scalar(mul_scalar(x, 2.0), -1.0);
        Tensor h = conv2d(xn, params_.at("conv1.w"), cfg_.stride, &params_.at("conv1.b"), true);
        h = conv2d(h, params_.at("conv2.w"), cfg_.stride, &params_.at("conv2.b"), true);
        h = conv2d(h, params_.at("conv3.w"), cfg_.stride, &params_.at("conv3.b"), true);
        EncoderOut out;
        out.features = global_avg_pool(h);
        Tensor p = relu(affine(out.features, params_.at("proj1.w"), params_.at("proj1.b")));
        out.embedding = affine(p, params_.at("proj2.w"), params_.at("proj2.b"));
        if (cfg_.head_input != HeadInput::none) {
            const Tensor& head_in =
                cfg_.head_input == HeadInput::features ? out.features : out.embedding;
            out.head = affine(head_in, params_.at("head.w"), params_.at("head.b"));
        }
        return out;
    }

  private:
    EncoderConfig cfg_;
    ParamStore params_;
};

/// Stacks a list of equally sized pixel buffers into a [B x C x hw x hw] leaf.
inline Tensor stack_views(const std::vector<const std::vector<double>*>& views, int channels,
                          int hw) {
    const int64_t B = static_cast<int64_t>(views.size());
    const size_t per = static_cast<size_t>(channels) * hw * hw;
    std::vector<double> data(static_cast<size_t>(B) * per);
    for (int64_t i = 0; i < B; ++i) {
        if (views[static_cast<size_t>(i)]->size() != per)
            throw DimensionError("stack_views: view size mismatch");
        std::copy(views[static_cast<size_t>(i)]->begin(), views[static_cast<size_t>(i)]->end(),
                  data.begin() + i * static_cast<int64_t>(per));
    }
    return Tensor::from({B, channels, hw, hw}, std::move(data));
}

}  // namespace mixview
