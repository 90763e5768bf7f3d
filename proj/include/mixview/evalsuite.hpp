#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mixview/encoder.hpp"
#include "mixview/image.hpp"
#include "mixview/objectives.hpp"
#include "mixview/optim.hpp"
#include "mixview/synthworld.hpp"
#include "mixview/tensor.hpp"

namespace mixview {

/// M x D matrix of pooled encoder features plus optional class labels.
struct FeatureSet {
    std::vector<double> data;  // row-major M x D
    int64_t rows = 0;
    int64_t dim = 0;
    std::vector<int> labels;  // empty or length rows
    std::string source_tag;

    std::span<const double> row(int64_t i) const {
        return {data.data() + i * dim, static_cast<size_t>(dim)};
    }
};

/// Deterministic frozen forward pass: resize to the encoder input, no
/// augmentation, batched. Returns pooled (pre-projector) features.
inline FeatureSet extract_features(const Encoder& encoder,
                                   const std::vector<ImageSample>& images,
                                   const std::string& tag = "", int64_t batch = 256) {
    FeatureSet fs;
    fs.dim = encoder.config().feature_dim();
    fs.rows = static_cast<int64_t>(images.size());
    fs.source_tag = tag;
    fs.data.reserve(static_cast<size_t>(fs.rows * fs.dim));
    fs.labels.reserve(images.size());
    const int hw = encoder.config().input_hw;
    for (int64_t start = 0; start < fs.rows; start += batch) {
        const int64_t bsz = std::min<int64_t>(batch, fs.rows - start);
        std::vector<std::vector<double>> pixels;
        pixels.reserve(static_cast<size_t>(bsz));
        for (int64_t b = 0; b < bsz; ++b) {
            const Image& src = images[static_cast<size_t>(start + b)].pixels;
            Image r = (src.h == hw && src.w == hw) ? src : resize(src, hw, hw);
            std::vector<double> buf(r.px.size());
            for (size_t i = 0; i < buf.size(); ++i) buf[i] = r.px[i];
            pixels.push_back(std::move(buf));
        }
        std::vector<const std::vector<double>*> vp;
        vp.reserve(pixels.size());
        for (const auto& p : pixels) vp.push_back(&p);
        Tensor x = stack_views(vp, encoder.config().in_channels, hw);
        EncoderOut out = encoder.forward(x);
        fs.data.insert(fs.data.end(), out.features.data().begin(), out.features.data().end());
    }
    for (const auto& s : images) fs.labels.push_back(s.latent.class_id);
    return fs;
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

struct LinearProbe {
    Tensor w;  // D x K
    Tensor b;  // K
    int classes = 0;
    std::vector<double> train_curve;  // per-epoch loss
};

/// Single affine layer trained with cross-entropy on the given features
/// (full batch, Adam). The backbone is never touched.
inline LinearProbe train_linear_probe(const FeatureSet& features, int epochs, double lr,
                                      uint64_t seed = 0) {
    if (features.labels.empty() || features.labels.size() != static_cast<size_t>(features.rows))
        throw ParameterError("train_linear_probe: features must carry labels");
    int classes = 0;
    for (int l : features.labels) classes = std::max(classes, l + 1);
    int distinct = 0;
    {
        std::vector<int> seen(static_cast<size_t>(classes), 0);
        for (int l : features.labels)
            if (!seen[static_cast<size_t>(l)]++) ++distinct;
    }
    if (distinct < 2) throw ParameterError("train_linear_probe: need at least 2 classes");
    if (epochs < 0) throw ParameterError("train_linear_probe: negative epoch count");

    LinearProbe probe;
    probe.classes = classes;
    probe.w = Tensor::zeros({features.dim, classes}, true);
    probe.b = Tensor::zeros({classes}, true);
    (void)seed;  // zero init keeps the probe deterministic without a stream

    Tensor x = Tensor::from({features.rows, features.dim}, features.data);
    OptimizerState opt{OptimizerConfig{}};
    for (int e = 0; e < epochs; ++e) {
        Tensor logits = affine(x, probe.w, probe.b);
        Tensor loss = supervised_ce(logits, features.labels);
        probe.w.zero_grad();
        probe.b.zero_grad();
        backward(loss);
        ParamStore ps;
        ps.insert("w", probe.w);
        ps.insert("b", probe.b);
        opt.step(ps, lr);
        probe.train_curve.push_back(loss.item());
    }
    return probe;
}

/// Top-1 accuracy of the probe on a feature set; argmax ties break toward
/// the lowest class index.
inline double probe_accuracy(const LinearProbe& probe, const FeatureSet& features) {
    if (features.rows == 0) throw ParameterError("probe_accuracy: empty split");
    if (features.dim != probe.w.shape()[0])
        throw ParameterError("probe_accuracy: probe dimension mismatch");
    int64_t correct = 0;
    const int64_t K = probe.classes;
    for (int64_t i = 0; i < features.rows; ++i) {
        const auto f = features.row(i);
        int best = 0;
        double best_v = -1e300;
        for (int64_t k = 0; k < K; ++k) {
            double v = probe.b.data()[k];
            for (int64_t d = 0; d < features.dim; ++d)
                v += f[static_cast<size_t>(d)] * probe.w.data()[d * K + k];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(k);
            }
        }
        if (best == features.labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(features.rows);
}

/// Per-split accuracies in the shape of the robustness tables.
struct ProbeResult {
    std::map<std::string, double> split_accuracy;  // includes "test" (in-distribution)
    std::map<std::string, int64_t> split_n;
    double mean_shift_accuracy = 0.0;
    double in_dist_accuracy = 0.0;
    std::vector<double> probe_curve;
};

inline ProbeResult evaluate_probe(const LinearProbe& probe, const Encoder& encoder,
                                  const Dataset& data) {
    ProbeResult r;
    r.probe_curve = probe.train_curve;
    FeatureSet test = extract_features(encoder, data.test, "test");
    r.in_dist_accuracy = probe_accuracy(probe, test);
    r.split_accuracy["test"] = r.in_dist_accuracy;
    r.split_n["test"] = test.rows;
    double shift_sum = 0.0;
    int shift_count = 0;
    for (const auto& [kind, images] : data.shift_sets) {
        FeatureSet fs = extract_features(encoder, images, shift_kind_name(kind));
        const double acc = probe_accuracy(probe, fs);
        r.split_accuracy[shift_kind_name(kind)] = acc;
        r.split_n[shift_kind_name(kind)] = fs.rows;
        shift_sum += acc;
        ++shift_count;
    }
    r.mean_shift_accuracy = shift_count ? shift_sum / shift_count : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits of two feature sets
// ---------------------------------------------------------------------------

namespace detail {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. a is destroyed;
/// eigenvectors land in the columns of v. Deterministic sweep order.
inline void jacobi_eigen(std::vector<double>& a, int64_t n, std::vector<double>& eigvals,
                         std::vector<double>& v) {
    v.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-24) break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (int64_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for (int64_t i = 0; i < n; ++i) {
                    const double vip = v[i * n + p], viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
    }
    eigvals.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) eigvals[static_cast<size_t>(i)] = a[i * n + i];
}

inline void mean_cov(const FeatureSet& f, std::vector<double>& mu, std::vector<double>& cov) {
    const int64_t M = f.rows, D = f.dim;
    mu.assign(static_cast<size_t>(D), 0.0);
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < D; ++j) mu[static_cast<size_t>(j)] += f.data[i * D + j];
    for (auto& v : mu) v /= static_cast<double>(M);
    cov.assign(static_cast<size_t>(D * D), 0.0);
    std::vector<double> centered(static_cast<size_t>(M * D));
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < D; ++j)
            centered[i * D + j] = f.data[i * D + j] - mu[static_cast<size_t>(j)];
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(D),
                static_cast<int>(D), static_cast<int>(M), 1.0 / static_cast<double>(M - 1),
                centered.data(), static_cast<int>(D), centered.data(), static_cast<int>(D), 0.0,
                cov.data(), static_cast<int>(D));
}

/// B = Q f(L) Q^T for symmetric A = Q L Q^T.
inline std::vector<double> sym_apply(const std::vector<double>& eigvals,
                                     const std::vector<double>& v, int64_t n,
                                     const std::function<double(double)>& fn) {
    std::vector<double> scaled(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            scaled[i * n + j] = v[i * n + j] * fn(eigvals[static_cast<size_t>(j)]);
    std::vector<double> out(static_cast<size_t>(n * n), 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(n),
                static_cast<int>(n), static_cast<int>(n), 1.0, scaled.data(),
                static_cast<int>(n), v.data(), static_cast<int>(n), 0.0, out.data(),
                static_cast<int>(n));
    return out;
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), covariances with
/// 1/(M-1) normalization. The matrix square root comes from the symmetric
/// eigendecomposition of S_a^{1/2} S_b S_a^{1/2}; eigenvalues below the
/// negative tolerance raise, small negatives clamp to zero.
inline double fid(const FeatureSet& a, const FeatureSet& b) {
    if (a.dim != b.dim) throw ParameterError("fid: feature dimension mismatch");
    const int64_t D = a.dim;
    if (a.rows < D + 1 || b.rows < D + 1)
        throw ParameterError("fid: need at least D+1 samples per set");

    std::vector<double> mu_a, mu_b, cov_a, cov_b;
    detail::mean_cov(a, mu_a, cov_a);
    detail::mean_cov(b, mu_b, cov_b);

    double mean_term = 0.0;
    for (int64_t j = 0; j < D; ++j) {
        const double d = mu_a[static_cast<size_t>(j)] - mu_b[static_cast<size_t>(j)];
        mean_term += d * d;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (int64_t j = 0; j < D; ++j) {
        tr_a += cov_a[j * D + j];
        tr_b += cov_b[j * D + j];
    }

    // sqrt(S_a) via eigendecomposition
    std::vector<double> work = cov_a, eig, vec;
    detail::jacobi_eigen(work, D, eig, vec);
    double max_eig = 0.0;
    for (double e : eig) max_eig = std::max(max_eig, std::abs(e));
    const double neg_tol = 1e-8 * std::max(1.0, max_eig);
    for (double& e : eig) {
        if (e < -neg_tol) throw NumericError("fid: covariance is indefinite beyond tolerance");
        e = std::max(e, 0.0);
    }
    std::vector<double> sqrt_a =
        detail::sym_apply(eig, vec, D, [](double l) { return std::sqrt(l); });

    // inner = sqrt(S_a) S_b sqrt(S_a)
    std::vector<double> tmp(static_cast<size_t>(D * D), 0.0);
    std::vector<double> inner(static_cast<size_t>(D * D), 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(D),
                static_cast<int>(D), static_cast<int>(D), 1.0, sqrt_a.data(),
                static_cast<int>(D), cov_b.data(), static_cast<int>(D), 0.0, tmp.data(),
                static_cast<int>(D));
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(D),
                static_cast<int>(D), static_cast<int>(D), 1.0, tmp.data(), static_cast<int>(D),
                sqrt_a.data(), static_cast<int>(D), 0.0, inner.data(), static_cast<int>(D));
    for (int64_t i = 0; i < D; ++i)
        for (int64_t j = i + 1; j < D; ++j) {
            const double s = 0.5 * (inner[i * D + j] + inner[j * D + i]);
            inner[i * D + j] = s;
            inner[j * D + i] = s;
        }

    detail::jacobi_eigen(inner, D, eig, vec);
    max_eig = 0.0;
    for (double e : eig) max_eig = std::max(max_eig, std::abs(e));
    const double neg_tol2 = 1e-8 * std::max(1.0, max_eig);
    double tr_sqrt = 0.0;
    for (double e : eig) {
        if (e < -neg_tol2) throw NumericError("fid: matrix square root is indefinite beyond tolerance");
        tr_sqrt += std::sqrt(std::max(e, 0.0));
    }

    return std::max(0.0, mean_term + tr_a + tr_b - 2.0 * tr_sqrt);
}

/// Per-class mean pairwise cosine distance (1 - cosine similarity), in [0,2].
inline std::map<int, double> diversity(const FeatureSet& features) {
    if (features.labels.size() != static_cast<size_t>(features.rows))
        throw ParameterError("diversity: features must carry labels");
    std::map<int, std::vector<int64_t>> by_class;
    for (int64_t i = 0; i < features.rows; ++i)
        by_class[features.labels[static_cast<size_t>(i)]].push_back(i);
    std::map<int, double> out;
    for (const auto& [cls, idx] : by_class) {
        if (idx.size() < 2)
            throw ParameterError("diversity: need at least 2 samples per class");
        double sum = 0.0;
        int64_t pairs = 0;
        for (size_t i = 0; i < idx.size(); ++i)
            for (size_t j = i + 1; j < idx.size(); ++j) {
                sum += 1.0 - cosine_sim(features.row(idx[i]), features.row(idx[j]));
                ++pairs;
            }
        out[cls] = sum / static_cast<double>(pairs);
    }
    return out;
}

}  // namespace mixview
