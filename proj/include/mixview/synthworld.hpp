#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mixview/common.hpp"
#include "mixview/image.hpp"
#include "mixview/optim.hpp"
#include "mixview/rng.hpp"

namespace mixview {

// ---------------------------------------------------------------------------
// latent factors
// ---------------------------------------------------------------------------

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr int kGlyphFamilies = 20;  // 0-9 primary world, 10-19 transfer world

struct Latent {
    int class_id = 0;
    double pos_x = 0.5, pos_y = 0.5;  // in [0,1]
    double scale = 0.6;               // in [0.3, 0.9]
    double rotation = 0.0;            // radians, [-pi, pi)
    std::array<double, 3> fg{1, 1, 1};
    std::array<double, 3> bg{0, 0, 0};
    double texture_phase = 0.0;  // [0, 2*pi)
};

inline void validate_latent(const Latent& l, int classes) {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    if (l.class_id < 0 || l.class_id >= classes)
        throw ParameterError("Latent: class_id out of range");
    if (!in(l.pos_x, 0, 1) || !in(l.pos_y, 0, 1)) throw ParameterError("Latent: position out of range");
    if (!in(l.scale, 0.3, 0.9)) throw ParameterError("Latent: scale out of range");
    for (int i = 0; i < 3; ++i)
        if (!in(l.fg[i], 0, 1) || !in(l.bg[i], 0, 1))
            throw ParameterError("Latent: color out of range");
}

enum class Provenance { real, synthetic, shift };

enum class ShiftKind { v2, sketch, rendition, corrupted, adversarial_pose };

inline const char* shift_kind_name(ShiftKind k) {
    switch (k) {
        case ShiftKind::v2: return "v2";
        case ShiftKind::sketch: return "sketch";
        case ShiftKind::rendition: return "rendition";
        case ShiftKind::corrupted: return "corrupted";
        case ShiftKind::adversarial_pose: return "adversarial_pose";
    }
    return "?";
}

inline ShiftKind shift_kind_from_name(const std::string& s) {
    if (s == "v2") return ShiftKind::v2;
    if (s == "sketch") return ShiftKind::sketch;
    if (s == "rendition") return ShiftKind::rendition;
    if (s == "corrupted") return ShiftKind::corrupted;
    if (s == "adversarial_pose") return ShiftKind::adversarial_pose;
    throw ParameterError("unknown shift kind '" + s + "'");
}

struct ImageSample {
    Image pixels;
    Latent latent;
    Provenance provenance = Provenance::real;
    double guidance = 0.0;  // set when provenance == synthetic
    ShiftKind shift_kind = ShiftKind::v2;  // set when provenance == shift
    uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// glyph fields: negative inside, positive outside, in a local frame where the
// glyph spans roughly the unit disc
// ---------------------------------------------------------------------------

namespace glyph {

inline double length(double u, double v) { return std::sqrt(u * u + v * v); }

inline double field(int family, double u, double v) {
    const double r = length(u, v);
    const double theta = std::atan2(v, u);
    const double au = std::abs(u), av = std::abs(v);
    switch (family) {
        case 0:  // disc
            return r - 0.8;
        case 1:  // ring
            return std::abs(r - 0.62) - 0.18;
        case 2:  // square
            return std::max(au, av) - 0.72;
        case 3: {  // equilateral triangle, apex up
            const double r_in = 0.42;
            const double d1 = -v - r_in;                                // bottom edge
            const double d2 = 0.8660254 * u + 0.5 * v - r_in;          // right edge
            const double d3 = -0.8660254 * u + 0.5 * v - r_in;         // left edge
            return std::max({d1, d2, d3});
        }
        case 4:  // plus sign
            return std::min(std::max(au - 0.85, av - 0.28), std::max(au - 0.28, av - 0.85));
        case 5:  // five-point star
            return r - (0.45 + 0.35 * std::cos(5.0 * theta));
        case 6:  // horizontal bar
            return std::max(au - 0.9, av - 0.22);
        case 7:  // checkerboard-filled square (parity handled by the renderer)
            return std::max(au, av) - 0.8;
        case 8:  // irregular blob
            return r - (0.6 + 0.18 * std::sin(3.0 * theta + 1.3) + 0.1 * std::sin(7.0 * theta + 0.6));
        case 9: {  // spiral arm
            double t = theta / (2.0 * kPi) + r * 2.0;
            t -= std::floor(t);
            const double band = std::min(t, 1.0 - t);  // distance to arm centerline in cycles
            return std::max(r - 0.9, band * 0.8 - 0.22);
        }
        case 10:  // diamond
            return au + av - 0.9;
        case 11: {  // hexagon
            const double a = au * 0.8660254 + av * 0.5;
            return std::max(a, av) - 0.72;
        }
        case 12:  // ellipse
            return std::sqrt(u * u + (v / 0.55) * (v / 0.55)) - 0.85;
        case 13:  // crescent
            return std::max(r - 0.8, -(length(u - 0.38, v) - 0.62));
        case 14:  // tee
            return std::min(std::max(au - 0.8, std::abs(v - 0.55) - 0.24),
                            std::max(au - 0.26, std::abs(v + 0.12) - 0.62));
        case 15:  // ell
            return std::min(std::max(std::abs(u + 0.35) - 0.28, av - 0.8),
                            std::max(au - 0.75, std::abs(v + 0.55) - 0.26));
        case 16:  // two dots
            return std::min(length(u + 0.45, v) - 0.38, length(u - 0.45, v) - 0.38);
        case 17:  // sine wave band
            return std::max(std::abs(v - 0.45 * std::sin(3.0 * u)) - 0.24, au - 0.95);
        case 18: {  // pinwheel sectors
            double t = theta / (2.0 * kPi) + 0.15 * r;
            t -= std::floor(t);
            const double sector = t * 8.0;
            const double parity = sector - 2.0 * std::floor(sector / 2.0);  // in [0,2)
            const double band = std::min(parity, 2.0 - parity);
            return std::max(r - 0.85, 0.35 - band);
        }
        case 19:  // concentric double ring
            return std::min(std::abs(r - 0.75), std::abs(r - 0.4)) - 0.12;
        default:
            throw ParameterError("glyph::field: unknown family " + std::to_string(family));
    }
}

/// Checker parity multiplier for family 7 (1 = fg cell, 0 = bg cell).
inline bool checker_cell(double u, double v) {
    const int cu = static_cast<int>(std::floor((u + 2.0) * 2.5));
    const int cv = static_cast<int>(std::floor((v + 2.0) * 2.5));
    return ((cu + cv) & 1) == 0;
}

}  // namespace glyph

/// Renders a latent to pixels. texture_mode 0 is the native texture,
/// 1 is the swapped texture used by the rendition shift.
inline Image render_glyph(const Latent& l, int size, int family_base, int texture_mode = 0) {
    const int family = family_base + l.class_id;
    if (family < 0 || family >= kGlyphFamilies)
        throw ParameterError("render_glyph: glyph family out of range");
    Image img(3, size, size);
    const double half = 0.5 * l.scale;
    const double cosr = std::cos(l.rotation), sinr = std::sin(l.rotation);
    const double edge = std::max(1e-6, 1.5 / (size * half));  // ~1 pixel in local units
    for (int y = 0; y < size; ++y) {
        const double yn = (y + 0.5) / size;
        for (int x = 0; x < size; ++x) {
            const double xn = (x + 0.5) / size;
            const double dx = (xn - l.pos_x) / half;
            const double dy = (yn - l.pos_y) / half;
            const double u = cosr * dx + sinr * dy;
            const double v = -sinr * dx + cosr * dy;
            const double f = glyph::field(family, u, v);
            double cov = 0.5 - f / edge;
            cov = std::min(1.0, std::max(0.0, cov));
            if (family == 7 && cov > 0.0 && !glyph::checker_cell(u, v)) cov = 0.0;
            double tex;
            if (texture_mode == 0)
                tex = 0.85 + 0.15 * std::sin(l.texture_phase + 4.0 * u + 7.0 * v);
            else
                tex = 0.85 + 0.15 * std::sin(2.0 * l.texture_phase + 9.0 * u - 3.0 * v);
            for (int ch = 0; ch < 3; ++ch) {
                const double fg = l.fg[ch] * tex;
                img.at(ch, y, x) = clamp01(l.bg[ch] + (fg - l.bg[ch]) * cov);
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// dataset specification and the world
// ---------------------------------------------------------------------------

struct DatasetSpec {
    int classes = 10;
    int train_per_class = 200;
    int test_per_class = 50;
    int image_size = 64;
    uint64_t train_seed = 1;
    uint64_t test_seed = 2;
    std::vector<ShiftKind> shifts = {ShiftKind::v2, ShiftKind::sketch, ShiftKind::rendition,
                                     ShiftKind::corrupted, ShiftKind::adversarial_pose};
    std::vector<double> guidance_scales = {8.0};
    int glyph_family_base = 0;
};

inline void validate_spec(const DatasetSpec& s) {
    if (s.classes < 2 || s.glyph_family_base + s.classes > kGlyphFamilies)
        throw ParameterError("DatasetSpec: classes must be in [2, " +
                             std::to_string(kGlyphFamilies - s.glyph_family_base) + "]");
    if (s.train_per_class < 1) throw ParameterError("DatasetSpec: n_per_class must be >= 1");
    if (s.test_per_class < 1) throw ParameterError("DatasetSpec: test_per_class must be >= 1");
    if (s.image_size < 8) throw ParameterError("DatasetSpec: image_size too small");
    if (s.train_seed == s.test_seed)
        throw ParameterError("DatasetSpec: train and test split seeds must be disjoint");
    for (double k : s.guidance_scales)
        if (k < 1.0 || k > 16.0)
            throw ParameterError("DatasetSpec: guidance scale out of [1,16]");
}

/// Surrogate spread constants. Both grow strictly with the guidance scale,
/// which is what makes the quality/diversity trends hold by construction.
/// The pixel degradation is a smoothed (low-frequency) noise field rather
/// than i.i.d. noise: structured artifacts survive the encoder's pooling, so
/// they raise feature diversity the way generator artifacts do, instead of
/// averaging out.
struct GuidanceSurrogate {
    double pixel_noise_per_k = 0.004;  // sigma_p(k) = 0.004 * k, per-pixel std
    double nuisance_base = 0.08;       // sigma_n(k) = 0.08 * (1 + k/4), fraction of range
    double degradation_smoothing = 4.0;  // blur radius of the noise field, pixels
    double sigma_p(double k) const { return pixel_noise_per_k * k; }
    double sigma_n(double k) const { return nuisance_base * (1.0 + k / 4.0); }
};

namespace detail {
inline constexpr uint64_t kTagTrain = 0x545241494eull;
inline constexpr uint64_t kTagTest = 0x54455354ull;
inline constexpr uint64_t kTagSyn = 0x53594eull;
inline constexpr uint64_t kTagV2 = 0x5632ull;
inline constexpr uint64_t kTagShift = 0x5348494654ull;
inline constexpr uint64_t kTagFraction = 0x46524143ull;

inline double wrap_angle(double a, double lo, double hi) {
    const double width = hi - lo;
    a = std::fmod(a - lo, width);
    if (a < 0) a += width;
    return a + lo;
}
}  // namespace detail

/// Procedural image world: K glyph families under nuisance variation, a
/// guidance-scale surrogate for the synthetic-counterpart generator, and the
/// five engineered distribution shifts.
class World {
  public:
    explicit World(DatasetSpec spec, GuidanceSurrogate surrogate = {})
        : spec_(std::move(spec)), surrogate_(surrogate) {
        validate_spec(spec_);
    }

    const DatasetSpec& spec() const { return spec_; }
    const GuidanceSurrogate& surrogate() const { return surrogate_; }

    /// Fresh class draw under comfortable interior nuisance ranges.
    ImageSample sample_real(int class_id, uint64_t rng_seed) const {
        if (class_id < 0 || class_id >= spec_.classes)
            throw ParameterError("sample_real: class_id out of range");
        Rng rng(rng_seed);
        Latent l = interior_latent(class_id, rng);
        ImageSample s;
        s.pixels = render_glyph(l, spec_.image_size, spec_.glyph_family_base);
        s.latent = l;
        s.provenance = Provenance::real;
        s.seed = rng_seed;
        return s;
    }

    /// Synthetic counterpart of a real image: same class, nuisance resampled
    /// within sigma_n(k) of the source, pixel degradation of amplitude
    /// sigma_p(k). No chaining: the input must be a real sample.
    ImageSample synth_counterpart(const ImageSample& src, double k, uint64_t rng_seed) const {
        if (src.provenance != Provenance::real)
            throw ContractError("synth_counterpart: input must be a real sample");
        if (k < 1.0 || k > 16.0)
            throw ParameterError("synth_counterpart: guidance scale out of [1,16]");
        Rng rng(rng_seed);
        const double sn = surrogate_.sigma_n(k);
        Latent l = src.latent;
        l.pos_x = std::clamp(l.pos_x + rng.normal(0.0, sn * 1.0), 0.0, 1.0);
        l.pos_y = std::clamp(l.pos_y + rng.normal(0.0, sn * 1.0), 0.0, 1.0);
        l.scale = std::clamp(l.scale + rng.normal(0.0, sn * 0.6), 0.3, 0.9);
        l.rotation = detail::wrap_angle(l.rotation + rng.normal(0.0, sn * 2.0 * kPi), -kPi, kPi);
        for (int i = 0; i < 3; ++i) {
            l.fg[i] = std::clamp(l.fg[i] + rng.normal(0.0, sn), 0.0, 1.0);
            l.bg[i] = std::clamp(l.bg[i] + rng.normal(0.0, sn), 0.0, 1.0);
        }
        l.texture_phase =
            detail::wrap_angle(l.texture_phase + rng.normal(0.0, sn * 2.0 * kPi), 0.0, 2.0 * kPi);

        ImageSample out;
        out.pixels = render_glyph(l, spec_.image_size, spec_.glyph_family_base);
        const double sp = surrogate_.sigma_p(k);
        if (sp > 0.0) {
            Image field(out.pixels.c, out.pixels.h, out.pixels.w);
            for (auto& v : field.px) v = static_cast<float>(rng.normal());
            field = gaussian_blur_unclamped(field, surrogate_.degradation_smoothing);
            double ss = 0.0;
            for (float v : field.px) ss += static_cast<double>(v) * v;
            const double field_std = std::sqrt(ss / static_cast<double>(field.px.size()));
            const double gain = sp / std::max(1e-12, field_std);
            for (size_t i = 0; i < out.pixels.px.size(); ++i)
                out.pixels.px[i] = clamp01(static_cast<double>(out.pixels.px[i]) +
                                           gain * field.px[i]);
        }
        out.latent = l;
        out.provenance = Provenance::synthetic;
        out.guidance = k;
        out.seed = rng_seed;
        return out;
    }

    /// Engineered distribution shifts. stream_seed selects the seed stream for
    /// the randomized kinds and must not be the train stream (split hygiene).
    ImageSample render_shift(const ImageSample& src, ShiftKind kind, uint64_t stream_seed) const {
        if (src.provenance != Provenance::real)
            throw ContractError("render_shift: input must be a real sample");
        if (stream_seed == spec_.train_seed)
            throw ContractError("render_shift: train-split seed stream is not a valid shift stream");
        ImageSample out;
        out.latent = src.latent;
        out.provenance = Provenance::shift;
        out.shift_kind = kind;
        out.seed = derive_seed(stream_seed, src.seed);
        Rng rng(out.seed);
        switch (kind) {
            case ShiftKind::v2: {
                Latent l = interior_latent(src.latent.class_id, rng);
                out.latent = l;
                out.pixels = render_glyph(l, spec_.image_size, spec_.glyph_family_base);
                break;
            }
            case ShiftKind::sketch: {
                const auto mag = sobel_magnitude(src.pixels);
                Image img(3, src.pixels.h, src.pixels.w);
                for (int y = 0; y < img.h; ++y)
                    for (int x = 0; x < img.w; ++x) {
                        const double e =
                            std::min(1.0, 1.5 * mag[static_cast<size_t>(y) * img.w + x]);
                        const float v = clamp01(1.0 - e);
                        img.at(0, y, x) = v;
                        img.at(1, y, x) = v;
                        img.at(2, y, x) = v;
                    }
                out.pixels = std::move(img);
                break;
            }
            case ShiftKind::rendition: {
                Latent l = src.latent;
                l.fg = {src.latent.fg[1], src.latent.fg[2], src.latent.fg[0]};
                for (int i = 0; i < 3; ++i) l.bg[i] = 1.0 - src.latent.bg[i];
                out.latent = l;
                out.pixels = render_glyph(l, spec_.image_size, spec_.glyph_family_base, 1);
                break;
            }
            case ShiftKind::corrupted: {
                const double severity = rng.uniform(0.25, 1.0);
                Image img = gaussian_blur(src.pixels, 2.0 * severity);
                const double noise = 0.08 * severity;
                for (auto& p : img.px) p = clamp01(static_cast<double>(p) + rng.normal(0.0, noise));
                const int side = static_cast<int>((0.15 + 0.2 * severity) * img.w);
                const int oy = static_cast<int>(rng.next_below(static_cast<uint64_t>(img.h - side)));
                const int ox = static_cast<int>(rng.next_below(static_cast<uint64_t>(img.w - side)));
                for (int ch = 0; ch < 3; ++ch)
                    for (int y = oy; y < oy + side; ++y)
                        for (int x = ox; x < ox + side; ++x) img.at(ch, y, x) = 0.5f;
                out.pixels = std::move(img);
                break;
            }
            case ShiftKind::adversarial_pose: {
                Latent l;
                l.class_id = src.latent.class_id;
                l.pos_x = tail_draw(rng, 0.0, 1.0, 0.12);
                l.pos_y = tail_draw(rng, 0.0, 1.0, 0.12);
                l.scale = tail_draw(rng, 0.3, 0.9, 0.05);
                l.rotation = rng.uniform(-kPi, kPi);
                sample_colors(l, rng);
                l.texture_phase = rng.uniform(0.0, 2.0 * kPi);
                out.latent = l;
                out.pixels = render_glyph(l, spec_.image_size, spec_.glyph_family_base);
                break;
            }
        }
        return out;
    }

    /// Default shift stream for this world (held out from the train stream).
    uint64_t shift_stream(ShiftKind kind) const {
        return derive_seed(spec_.test_seed, detail::kTagShift, static_cast<uint64_t>(kind));
    }

  private:
    Latent interior_latent(int class_id, Rng& rng) const {
        Latent l;
        l.class_id = class_id;
        l.pos_x = rng.uniform(0.3, 0.7);
        l.pos_y = rng.uniform(0.3, 0.7);
        l.scale = rng.uniform(0.42, 0.78);
        l.rotation = rng.uniform(-kPi, kPi);
        sample_colors(l, rng);
        l.texture_phase = rng.uniform(0.0, 2.0 * kPi);
        return l;
    }

    /// fg free, bg displaced by 0.5 +- 0.2 per channel modulo 1 so the glyph
    /// never vanishes into the background.
    static void sample_colors(Latent& l, Rng& rng) {
        for (int i = 0; i < 3; ++i) {
            l.fg[i] = rng.uniform01();
            double b = l.fg[i] + 0.5 + rng.uniform(-0.2, 0.2);
            b -= std::floor(b);
            l.bg[i] = b;
        }
    }

    static double tail_draw(Rng& rng, double lo, double hi, double tail_frac) {
        const double width = (hi - lo) * tail_frac;
        return rng.bernoulli(0.5) ? rng.uniform(lo, lo + width) : rng.uniform(hi - width, hi);
    }

    DatasetSpec spec_;
    GuidanceSurrogate surrogate_;
};

// ---------------------------------------------------------------------------
// materialized dataset
// ---------------------------------------------------------------------------

/// Everything a pretraining run consumes, reproducible from the spec alone:
/// class-balanced train and test splits, one counterpart per train image per
/// requested guidance scale, the shift test sets, and the fixed shuffled
/// index order used for nested data-fraction subsets.
struct Dataset {
    DatasetSpec spec;
    std::vector<ImageSample> train;
    std::vector<ImageSample> test;
    std::map<double, std::vector<ImageSample>> counterparts;
    std::map<ShiftKind, std::vector<ImageSample>> shift_sets;
    std::vector<int64_t> subset_order;

    int64_t train_size() const { return static_cast<int64_t>(train.size()); }
    int label(int64_t i) const { return train[static_cast<size_t>(i)].latent.class_id; }

    const std::vector<ImageSample>& counterparts_at(double k) const {
        auto it = counterparts.find(k);
        if (it == counterparts.end())
            throw ConfigError("dataset: counterparts for guidance scale " + std::to_string(k) +
                              " are not materialized");
        return it->second;
    }

    /// Deterministic prefix of the fixed shuffled index list; fractions are
    /// nested (smaller subset of larger).
    std::vector<int64_t> subset_indices(double fraction) const {
        if (fraction <= 0.0 || fraction > 1.0)
            throw ParameterError("subset_indices: fraction out of (0,1]");
        const auto n = static_cast<size_t>(
            std::max<int64_t>(1, static_cast<int64_t>(std::ceil(fraction * subset_order.size()))));
        return {subset_order.begin(), subset_order.begin() + static_cast<int64_t>(n)};
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        auto mix_images = [&h](const std::vector<ImageSample>& v) {
            for (const auto& s : v) {
                h = fnv1a64(s.pixels.px.data(), s.pixels.px.size() * sizeof(float), h);
                h = fnv1a64(&s.latent.class_id, sizeof(int), h);
                h = fnv1a64(&s.seed, sizeof(uint64_t), h);
            }
        };
        mix_images(train);
        mix_images(test);
        for (const auto& [k, v] : counterparts) mix_images(v);
        for (const auto& [k, v] : shift_sets) mix_images(v);
        return h;
    }
};

inline Dataset make_dataset(const DatasetSpec& spec, GuidanceSurrogate surrogate = {}) {
    World world(spec, surrogate);
    Dataset ds;
    ds.spec = spec;

    const int64_t n_train = static_cast<int64_t>(spec.classes) * spec.train_per_class;
    ds.train.reserve(static_cast<size_t>(n_train));
    for (int64_t i = 0; i < n_train; ++i) {
        const int cls = static_cast<int>(i % spec.classes);
        ds.train.push_back(
            world.sample_real(cls, derive_seed(spec.train_seed, detail::kTagTrain, i)));
    }

    const int64_t n_test = static_cast<int64_t>(spec.classes) * spec.test_per_class;
    ds.test.reserve(static_cast<size_t>(n_test));
    for (int64_t i = 0; i < n_test; ++i) {
        const int cls = static_cast<int>(i % spec.classes);
        ds.test.push_back(
            world.sample_real(cls, derive_seed(spec.test_seed, detail::kTagTest, i)));
    }

    for (double k : spec.guidance_scales) {
        auto& cps = ds.counterparts[k];
        cps.reserve(ds.train.size());
        for (int64_t i = 0; i < n_train; ++i)
            cps.push_back(world.synth_counterpart(
                ds.train[static_cast<size_t>(i)], k,
                derive_seed(spec.train_seed, detail::kTagSyn, seed_tag(k), i)));
    }

    for (ShiftKind kind : spec.shifts) {
        auto& set = ds.shift_sets[kind];
        set.reserve(ds.test.size());
        const uint64_t stream = kind == ShiftKind::v2
                                    ? derive_seed(spec.test_seed, detail::kTagV2)
                                    : world.shift_stream(kind);
        for (const auto& t : ds.test) set.push_back(world.render_shift(t, kind, stream));
    }

    ds.subset_order.resize(static_cast<size_t>(n_train));
    for (int64_t i = 0; i < n_train; ++i) ds.subset_order[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(spec.train_seed, detail::kTagFraction));
    for (int64_t i = n_train - 1; i > 0; --i) {
        const auto j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
        std::swap(ds.subset_order[static_cast<size_t>(i)], ds.subset_order[static_cast<size_t>(j)]);
    }
    return ds;
}

}  // namespace mixview
