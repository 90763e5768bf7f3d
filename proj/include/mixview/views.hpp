#pragma once

#include <set>
#include <string>
#include <vector>

#include "mixview/common.hpp"
#include "mixview/image.hpp"
#include "mixview/rng.hpp"
#include "mixview/synthworld.hpp"

namespace mixview {

enum class Aug { crop, flip, jitter, blur, solarization };

/// Augmentation policy. Fixed application order:
/// crop -> flip -> jitter -> blur -> solarization.
struct AugPolicy {
    std::set<Aug> enabled;

    double crop_scale_global_lo = 0.08, crop_scale_global_hi = 1.0;
    double crop_scale_local_lo = 0.05, crop_scale_local_hi = 0.4;
    double crop_aspect_lo = 0.75, crop_aspect_hi = 4.0 / 3.0;
    double flip_prob = 0.5;
    double jitter_lo = 0.6, jitter_hi = 1.4;
    double jitter_prob = 0.8;
    double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
    double blur_prob = 0.5;
    double solarization_threshold = 0.5;
    double solarization_prob = 0.2;

    bool has(Aug a) const { return enabled.count(a) != 0; }

    /// Named presets addressable from config files. "none" retains only the
    /// random flip; the single-augmentation presets keep flip as well.
    static AugPolicy preset(const std::string& name) {
        AugPolicy p;
        if (name == "all") {
            p.enabled = {Aug::crop, Aug::flip, Aug::jitter, Aug::blur, Aug::solarization};
        } else if (name == "none" || name == "flip") {
            p.enabled = {Aug::flip};
        } else if (name == "blur") {
            p.enabled = {Aug::flip, Aug::blur};
        } else if (name == "solarization") {
            p.enabled = {Aug::flip, Aug::solarization};
        } else if (name == "jitter") {
            p.enabled = {Aug::flip, Aug::jitter};
        } else {
            throw ParameterError("AugPolicy: unknown preset '" + name + "'");
        }
        return p;
    }
};

/// DINO view composition: how many local/global crops come from the real and
/// the synthetic branch.
struct CropMix {
    int real_local = 6;
    int real_global = 1;
    int syn_local = 2;
    int syn_global = 1;

    int total() const { return real_local + real_global + syn_local + syn_global; }
    int globals() const { return real_global + syn_global; }
};

struct View {
    std::vector<double> pixels;  // 3 x hw x hw, row-major
    bool is_synthetic = false;
    bool is_global = false;
};

struct ViewSet {
    std::vector<View> views;
    int64_t source_index = -1;
};

enum class PairMode { real_real, syn_syn, mix };

namespace detail {

inline std::vector<double> to_f64(const Image& img) {
    std::vector<double> out(img.px.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = img.px[i];
    return out;
}

}  // namespace detail

/// One augmented view of a sample, resized to out_hw x out_hw. Deterministic
/// given the seed; output clamped to [0,1].
inline std::vector<double> apply_augmentation(const ImageSample& img, const AugPolicy& policy,
                                              uint64_t rng_seed, bool global_crop = true,
                                              int out_hw = 32) {
    Rng rng(rng_seed);
    const Image& src = img.pixels;
    Image view;

    if (policy.has(Aug::crop)) {
        const double scale_lo = global_crop ? policy.crop_scale_global_lo : policy.crop_scale_local_lo;
        const double scale_hi = global_crop ? policy.crop_scale_global_hi : policy.crop_scale_local_hi;
        const double area = static_cast<double>(src.h) * src.w;
        double top = 0, left = 0, height = src.h, width = src.w;
        for (int attempt = 0; attempt < 10; ++attempt) {
            const double target = area * rng.uniform(scale_lo, scale_hi);
            const double aspect = rng.uniform(policy.crop_aspect_lo, policy.crop_aspect_hi);
            const double w = std::sqrt(target * aspect);
            const double h = std::sqrt(target / aspect);
            if (w <= src.w && h <= src.h) {
                top = rng.uniform(0.0, src.h - h);
                left = rng.uniform(0.0, src.w - w);
                height = h;
                width = w;
                break;
            }
        }
        view = resize_region(src, top, left, height, width, out_hw, out_hw);
    } else {
        view = resize(src, out_hw, out_hw);
    }

    if (policy.has(Aug::flip) && rng.bernoulli(policy.flip_prob)) {
        for (int ch = 0; ch < view.c; ++ch)
            for (int y = 0; y < view.h; ++y)
                for (int x = 0; x < view.w / 2; ++x)
                    std::swap(view.at(ch, y, x), view.at(ch, y, view.w - 1 - x));
    }

    if (policy.has(Aug::jitter) && rng.bernoulli(policy.jitter_prob)) {
        const double brightness = rng.uniform(policy.jitter_lo, policy.jitter_hi);
        const double contrast = rng.uniform(policy.jitter_lo, policy.jitter_hi);
        const double saturation = rng.uniform(policy.jitter_lo, policy.jitter_hi);
        double mean_lum = 0.0;
        for (int y = 0; y < view.h; ++y)
            for (int x = 0; x < view.w; ++x) mean_lum += luminance(view, y, x);
        mean_lum /= static_cast<double>(view.h) * view.w;
        for (int y = 0; y < view.h; ++y)
            for (int x = 0; x < view.w; ++x) {
                const double lum = luminance(view, y, x);
                for (int ch = 0; ch < view.c; ++ch) {
                    double v = view.at(ch, y, x);
                    v *= brightness;
                    v = mean_lum + (v - mean_lum) * contrast;
                    v = lum + (v - lum) * saturation;
                    view.at(ch, y, x) = clamp01(v);
                }
            }
    }

    if (policy.has(Aug::blur) && rng.bernoulli(policy.blur_prob)) {
        view = gaussian_blur(view, rng.uniform(policy.blur_sigma_lo, policy.blur_sigma_hi));
    }

    if (policy.has(Aug::solarization) && rng.bernoulli(policy.solarization_prob)) {
        for (auto& p : view.px)
            if (p > policy.solarization_threshold) p = 1.0f - p;
    }

    return detail::to_f64(view);
}

/// Two-view set for SimCLR / Barlow Twins. mix replaces the second branch
/// with the synthetic counterpart.
inline ViewSet build_pair(const ImageSample& real, const ImageSample* syn, PairMode mode,
                          const AugPolicy& policy, uint64_t rng_seed, int out_hw = 32) {
    if (mode != PairMode::real_real) {
        if (syn == nullptr)
            throw ContractError("build_pair: mode requires a synthetic counterpart");
        if (syn->latent.class_id != real.latent.class_id)
            throw ContractError("build_pair: class mismatch between real and synthetic");
    }
    const ImageSample& first = (mode == PairMode::syn_syn) ? *syn : real;
    const ImageSample& second = (mode == PairMode::real_real) ? real : *syn;

    ViewSet vs;
    View v1, v2;
    v1.pixels = apply_augmentation(first, policy, derive_seed(rng_seed, 1), true, out_hw);
    v1.is_synthetic = (mode == PairMode::syn_syn);
    v1.is_global = true;
    v2.pixels = apply_augmentation(second, policy, derive_seed(rng_seed, 2), true, out_hw);
    v2.is_synthetic = (mode != PairMode::real_real);
    v2.is_global = true;
    vs.views = {std::move(v1), std::move(v2)};
    return vs;
}

/// DINO multi-crop set. Emission order: real globals, synthetic globals,
/// real locals, synthetic locals. At least one global view is required.
inline ViewSet build_multicrop(const ImageSample& real, const ImageSample* syn,
                               const CropMix& mix, const AugPolicy& policy, uint64_t rng_seed,
                               int out_hw = 32) {
    if (mix.real_local < 0 || mix.real_global < 0 || mix.syn_local < 0 || mix.syn_global < 0)
        throw ParameterError("build_multicrop: negative view count");
    if (mix.globals() < 1)
        throw ContractError("build_multicrop: at least one global view is required");
    const bool needs_syn = mix.syn_local + mix.syn_global > 0;
    if (needs_syn) {
        if (syn == nullptr)
            throw ContractError("build_multicrop: crop mix requires a synthetic counterpart");
        if (syn->latent.class_id != real.latent.class_id)
            throw ContractError("build_multicrop: class mismatch between real and synthetic");
    }

    ViewSet vs;
    uint64_t stream = 0;
    auto emit = [&](const ImageSample& src, int count, bool global, bool synthetic) {
        for (int i = 0; i < count; ++i) {
            View v;
            v.pixels = apply_augmentation(src, policy, derive_seed(rng_seed, ++stream), global,
                                          out_hw);
            v.is_synthetic = synthetic;
            v.is_global = global;
            vs.views.push_back(std::move(v));
        }
    };
    emit(real, mix.real_global, true, false);
    if (needs_syn) emit(*syn, mix.syn_global, true, true);
    emit(real, mix.real_local, false, false);
    if (needs_syn) emit(*syn, mix.syn_local, false, true);
    return vs;
}

}  // namespace mixview
