#pragma once

#include <span>
#include <vector>

#include "mixview/common.hpp"
#include "mixview/tensor.hpp"

namespace mixview {

/// Projector outputs of the two branches; row i of both matrices originates
/// from the same source image.
struct EmbeddingBatch {
    Tensor z;        // N x D, real branch
    Tensor z_tilde;  // N x D, counterpart branch

    EmbeddingBatch(Tensor z_, Tensor z_tilde_) : z(std::move(z_)), z_tilde(std::move(z_tilde_)) {
        if (z.rank() != 2 || z_tilde.rank() != 2)
            throw DimensionError("EmbeddingBatch: expected rank-2 embeddings");
        if (z.shape() != z_tilde.shape())
            throw DimensionError("EmbeddingBatch: branch shapes differ");
    }

    int64_t batch() const { return z.shape()[0]; }
    int64_t dim() const { return z.shape()[1]; }
};

inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw DimensionError("cosine_sim: length mismatch");
    double dot = 0, nu = 0, nv = 0;
    for (size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_sim: zero vector");
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

namespace detail {

inline void require_nonzero_rows(const Tensor& m, const char* op) {
    const int64_t N = m.shape()[0], D = m.shape()[1];
    for (int64_t i = 0; i < N; ++i) {
        double s = 0;
        for (int64_t j = 0; j < D; ++j) {
            const double v = m.data()[i * D + j];
            s += v * v;
        }
        if (s == 0.0) throw DegenerateInputError(std::string(op) + ": zero embedding row");
    }
}

/// Rows normalized to unit l2 norm, differentiable.
inline Tensor normalize_rows(const Tensor& m) {
    const int64_t N = m.shape()[0];
    Tensor norms = sqrt(sum_cols(square(m)));
    Tensor inv = divide(Tensor::full({N}, 1.0), norms);
    return mul_colvec(m, inv);
}

}  // namespace detail

/// Contrastive loss over the pooled 2N embeddings {z_i, z~_i}. The positive
/// for each anchor is its cross-branch partner. With the printed indicator
/// (default) the denominator excludes both the anchor and its partner; the
/// canonical NT-Xent form (denominator excludes only the anchor) is available
/// behind the flag for comparison. Averaged over all 2N anchors.
inline Tensor mixsr_loss(const EmbeddingBatch& batch, double tau,
                         bool canonical_denominator = false) {
    if (tau <= 0.0) throw ParameterError("mixsr_loss: temperature must be positive");
    const int64_t N = batch.batch();
    if (N < 2) throw ContractError("mixsr_loss: batch must have at least 2 pairs");
    detail::require_nonzero_rows(batch.z, "mixsr_loss");
    detail::require_nonzero_rows(batch.z_tilde, "mixsr_loss");

    const int64_t M = 2 * N;
    Tensor pooled = detail::normalize_rows(concat_rows(batch.z, batch.z_tilde));
    Tensor logits = mul_scalar(matmul(pooled, transpose(pooled)), 1.0 / tau);

    std::vector<double> pos_mask(static_cast<size_t>(M * M), 0.0);
    std::vector<double> den_mask(static_cast<size_t>(M * M), 1.0);
    for (int64_t a = 0; a < M; ++a) {
        const int64_t partner = (a + N) % M;
        pos_mask[a * M + partner] = 1.0;
        den_mask[a * M + a] = 0.0;
        if (!canonical_denominator) den_mask[a * M + partner] = 0.0;
    }
    Tensor positives = sum_cols(mul(logits, Tensor::from({M, M}, std::move(pos_mask))));
    Tensor denom = sum_cols(mul(exp(logits), Tensor::from({M, M}, std::move(den_mask))));
    return mean(sub(log(denom), positives));
}

/// C_ij = sum_b z_bi z~_bj / (||z_:i|| ||z~_:j||). Entries lie in [-1,1].
/// A zero column is rejected rather than patched with an epsilon.
inline Tensor cross_correlation(const EmbeddingBatch& batch) {
    const int64_t D = batch.dim();
    auto check_cols = [D](const Tensor& m) {
        const int64_t N = m.shape()[0];
        for (int64_t j = 0; j < D; ++j) {
            double s = 0;
            for (int64_t i = 0; i < N; ++i) {
                const double v = m.data()[i * D + j];
                s += v * v;
            }
            if (s == 0.0) throw DegenerateInputError("cross_correlation: zero column");
        }
    };
    check_cols(batch.z);
    check_cols(batch.z_tilde);

    Tensor raw = matmul(transpose(batch.z), batch.z_tilde);
    Tensor nz = sqrt(sum_rows(square(batch.z)));
    Tensor nzt = sqrt(sum_rows(square(batch.z_tilde)));
    Tensor outer = matmul(reshape(nz, {D, 1}), reshape(nzt, {1, D}));
    return divide(raw, outer);
}

/// Redundancy-reduction loss: sum_i (1 - C_ii)^2 + lambda sum_{i != j} C_ij^2.
/// With standardize on, both branches are per-column batch standardized first
/// (original Barlow Twins preprocessing).
inline Tensor barlow_loss(const EmbeddingBatch& batch, double lambda, bool standardize = false) {
    if (lambda < 0.0) throw ParameterError("barlow_loss: lambda must be non-negative");
    const int64_t N = batch.batch(), D = batch.dim();

    EmbeddingBatch prepped = batch;
    if (standardize) {
        if (N < 2) throw ContractError("barlow_loss: standardization needs N >= 2");
        auto standardize_one = [&](const Tensor& m) {
            Tensor mean_col = mul_scalar(sum_rows(m), 1.0 / static_cast<double>(N));
            Tensor centered = add_rowvec(m, mul_scalar(mean_col, -1.0));
            Tensor var = mul_scalar(sum_rows(square(centered)), 1.0 / static_cast<double>(N - 1));
            for (int64_t j = 0; j < D; ++j)
                if (var.data()[j] == 0.0)
                    throw DegenerateInputError("barlow_loss: zero-variance column");
            Tensor inv_std = divide(Tensor::full({D}, 1.0), sqrt(var));
            return mul_rowvec(centered, inv_std);
        };
        prepped = EmbeddingBatch(standardize_one(batch.z), standardize_one(batch.z_tilde));
    }

    Tensor C = cross_correlation(prepped);
    std::vector<double> diag(static_cast<size_t>(D * D), 0.0);
    std::vector<double> offdiag(static_cast<size_t>(D * D), 1.0);
    for (int64_t i = 0; i < D; ++i) {
        diag[i * D + i] = 1.0;
        offdiag[i * D + i] = 0.0;
    }
    Tensor diag_mask = Tensor::from({D, D}, std::move(diag));
    Tensor offdiag_mask = Tensor::from({D, D}, std::move(offdiag));
    Tensor invariance = sum(square(sub(diag_mask, mul(C, diag_mask))));
    Tensor redundancy = sum(square(mul(C, offdiag_mask)));
    return add(invariance, mul_scalar(redundancy, lambda));
}

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

/// Output head state for distillation: temperatures plus the running center
/// applied to teacher logits. An empty center disables centering.
struct DinoHead {
    int out_dim = 64;
    double tau_student = 0.1;
    double tau_teacher = 0.04;
    std::vector<double> center;  // empty = centering off
    double center_momentum = 0.9;

    static DinoHead make(int out_dim, double tau_s, double tau_t, bool centering,
                         double center_momentum = 0.9) {
        if (tau_s <= 0.0 || tau_t <= 0.0) throw ParameterError("DinoHead: temperatures must be positive");
        DinoHead h;
        h.out_dim = out_dim;
        h.tau_student = tau_s;
        h.tau_teacher = tau_t;
        h.center_momentum = center_momentum;
        if (centering) h.center.assign(static_cast<size_t>(out_dim), 0.0);
        return h;
    }
};

/// softmax((logits - center) / tau) with a probability floor of 1e-12.
/// center == nullptr means no centering (the student is never centered).
inline std::vector<double> dino_distribution(std::span<const double> logits, double tau,
                                             const std::vector<double>* center) {
    if (tau <= 0.0) throw ParameterError("dino_distribution: temperature must be positive");
    if (center && center->size() != logits.size())
        throw DimensionError("dino_distribution: center length mismatch");
    std::vector<double> out(logits.size());
    double mx = -1e300;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = (logits[i] - (center ? (*center)[i] : 0.0)) / tau;
        mx = std::max(mx, out[i]);
    }
    double denom = 0.0;
    for (auto& v : out) {
        v = std::exp(v - mx);
        denom += v;
    }
    for (auto& v : out) v = std::max(v / denom, 1e-12);
    return out;
}

inline int64_t dino_term_count(int64_t n_teacher_views, int64_t n_student_views) {
    return n_teacher_views * (n_student_views - 1);
}

/// Multi-view cross-entropy between the (detached, centered) teacher
/// distributions over global views and the student distributions over every
/// view, skipping the (t, t) self term. Mean over terms and batch items.
/// Gradients flow only into the student logits.
inline Tensor dino_loss(const std::vector<Tensor>& student_logits,
                        const std::vector<Tensor>& teacher_logits,
                        const std::vector<int>& teacher_slots, const DinoHead& head) {
    if (student_logits.size() < 2)
        throw ContractError("dino_loss: need at least two student views");
    if (teacher_logits.empty()) throw ContractError("dino_loss: empty teacher view set");
    if (teacher_logits.size() != teacher_slots.size())
        throw ContractError("dino_loss: teacher slot list length mismatch");
    const int64_t B = student_logits[0].shape()[0];
    const int64_t K = student_logits[0].shape()[1];
    for (const auto& s : student_logits)
        if (s.shape() != student_logits[0].shape())
            throw DimensionError("dino_loss: inconsistent student logit shapes");
    for (int slot : teacher_slots)
        if (slot < 0 || slot >= static_cast<int>(student_logits.size()))
            throw ContractError("dino_loss: teacher slot outside the student view set");

    const std::vector<double>* center = head.center.empty() ? nullptr : &head.center;

    Tensor total = Tensor::scalar(0.0);
    int64_t terms = 0;
    for (size_t t = 0; t < teacher_logits.size(); ++t) {
        if (teacher_logits[t].shape()[0] != B || teacher_logits[t].shape()[1] != K)
            throw DimensionError("dino_loss: teacher logit shape mismatch");
        // teacher distribution is computed on plain values: stop-gradient
        std::vector<double> pt(static_cast<size_t>(B * K));
        for (int64_t b = 0; b < B; ++b) {
            auto row = dino_distribution(
                teacher_logits[t].data().subspan(static_cast<size_t>(b * K),
                                                 static_cast<size_t>(K)),
                head.tau_teacher, center);
            std::copy(row.begin(), row.end(), pt.begin() + b * K);
        }
        Tensor pt_const = Tensor::from({B, K}, std::move(pt));
        for (size_t s = 0; s < student_logits.size(); ++s) {
            if (static_cast<int>(s) == teacher_slots[t]) continue;
            Tensor lp = log_softmax(student_logits[s], head.tau_student);
            total = add(total, sum(mul(pt_const, lp)));
            ++terms;
        }
    }
    if (terms == 0) throw ContractError("dino_loss: no (teacher, student) pairs");
    return mul_scalar(total, -1.0 / (static_cast<double>(terms) * static_cast<double>(B)));
}

/// center <- m * center + (1 - m) * batch-mean of all teacher logit rows.
/// Called after the loss for the step has been computed.
inline void dino_update_center(DinoHead& head, const std::vector<Tensor>& teacher_logits) {
    if (head.center.empty()) return;
    const auto K = static_cast<int64_t>(head.center.size());
    std::vector<double> mean_row(static_cast<size_t>(K), 0.0);
    int64_t rows = 0;
    for (const auto& t : teacher_logits) {
        const int64_t B = t.shape()[0];
        if (t.shape()[1] != K) throw DimensionError("dino_update_center: logit width mismatch");
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < K; ++j) mean_row[static_cast<size_t>(j)] += t.data()[b * K + j];
        rows += B;
    }
    for (int64_t j = 0; j < K; ++j) {
        mean_row[static_cast<size_t>(j)] /= static_cast<double>(rows);
        head.center[static_cast<size_t>(j)] = head.center_momentum * head.center[static_cast<size_t>(j)] +
                                              (1.0 - head.center_momentum) * mean_row[static_cast<size_t>(j)];
    }
}

/// Mean cross-entropy of logits against integer labels.
inline Tensor supervised_ce(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw DimensionError("supervised_ce: expected rank-2 logits");
    const int64_t N = logits.shape()[0], K = logits.shape()[1];
    if (static_cast<int64_t>(labels.size()) != N)
        throw DimensionError("supervised_ce: label count mismatch");
    std::vector<double> onehot(static_cast<size_t>(N * K), 0.0);
    for (int64_t i = 0; i < N; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= K)
            throw ParameterError("supervised_ce: label out of range");
        onehot[i * K + labels[static_cast<size_t>(i)]] = 1.0;
    }
    Tensor lsm = log_softmax(logits, 1.0);
    return mul_scalar(sum(mul(Tensor::from({N, K}, std::move(onehot)), lsm)),
                      -1.0 / static_cast<double>(N));
}

}  // namespace mixview
