#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mixview/objectives.hpp"
#include "mixview/rng.hpp"
#include "mixview/tensor.hpp"

namespace mixview {

/// Central finite differences against the analytic gradients of a scalar
/// function. Independent of the backward implementation: only forward
/// evaluations enter the reference.
///
/// Relative error uses a floored denominator so near-zero gradients are
/// compared on an absolute scale.
inline double gradcheck_max_rel_err(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                    std::vector<Tensor>& leaves, double h = 1e-5,
                                    double denom_floor = 1e-3) {
    Tensor loss = f(leaves);
    if (loss.numel() != 1) throw ContractError("gradcheck: function must return a scalar");
    for (auto& leaf : leaves) leaf.zero_grad();
    backward(loss);

    double max_rel = 0.0;
    for (auto& leaf : leaves) {
        if (!leaf.requires_grad()) continue;
        const auto analytic = leaf.grad();
        auto vals = leaf.mutable_data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = f(leaves).item();
            vals[i] = orig - h;
            const double fm = f(leaves).item();
            vals[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double denom =
                std::max({std::abs(analytic[i]), std::abs(fd), denom_floor});
            max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / denom);
        }
    }
    return max_rel;
}

struct GradCheckCase {
    std::string name;
    double max_rel_err = 0.0;
    int trials = 0;
    bool pass = false;
};

inline uint64_t fnv_name(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    std::vector<double> d(static_cast<size_t>(numel_of(shape)));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

/// Reduces an arbitrary op output to a scalar through a fixed random
/// projection so every output component is exercised.
inline Tensor project(const Tensor& out, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(out.numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    Tensor wt = Tensor::from(out.shape(), std::move(w), false);
    return sum(mul(out, wt));
}

}  // namespace detail

/// Exercises every differentiable primitive against finite differences on
/// random small tensors. Returns one result row per op.
inline std::vector<GradCheckCase> gradcheck_primitives(uint64_t seed, int trials,
                                                       double tol = 1e-4) {
    std::vector<GradCheckCase> results;
    auto run = [&](const std::string& name,
                   const std::function<double(Rng&)>& one_trial) {
        GradCheckCase c;
        c.name = name;
        c.trials = trials;
        for (int t = 0; t < trials; ++t) {
            Rng rng(derive_seed(seed, fnv_name(name), static_cast<uint64_t>(t)));
            c.max_rel_err = std::max(c.max_rel_err, one_trial(rng));
        }
        c.pass = c.max_rel_err < tol;
        results.push_back(c);
    };

    auto shape2 = [](Rng& rng) {
        return Shape{static_cast<int64_t>(2 + rng.next_below(3)),
                     static_cast<int64_t>(2 + rng.next_below(4))};
    };

    auto binary = [&](const std::string& name, auto op, double lo, double hi) {
        run(name, [&, op, lo, hi](Rng& rng) {
            Shape s = shape2(rng);
            std::vector<Tensor> leaves = {detail::random_tensor(rng, s, lo, hi),
                                          detail::random_tensor(rng, s, lo, hi)};
            Rng proj(rng.next_u64());
            return gradcheck_max_rel_err(
                [&, op](const std::vector<Tensor>& p) {
                    Rng pr(proj);
                    return detail::project(op(p[0], p[1]), pr);
                },
                leaves);
        });
    };
    binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, -1, 1);
    binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, -1, 1);
    binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, -1, 1);
    binary("divide", [](const Tensor& a, const Tensor& b) { return divide(a, b); }, 0.5, 2.0);

    auto unary = [&](const std::string& name, auto op, double lo, double hi) {
        run(name, [&, op, lo, hi](Rng& rng) {
            Shape s = shape2(rng);
            std::vector<Tensor> leaves = {detail::random_tensor(rng, s, lo, hi)};
            Rng proj(rng.next_u64());
            return gradcheck_max_rel_err(
                [&, op](const std::vector<Tensor>& p) {
                    Rng pr(proj);
                    return detail::project(op(p[0]), pr);
                },
                leaves);
        });
    };
    unary("exp", [](const Tensor& a) { return exp(a); }, -1, 1);
    unary("log", [](const Tensor& a) { return log(a); }, 0.2, 3.0);
    unary("sqrt", [](const Tensor& a) { return sqrt(a); }, 0.2, 3.0);
    unary("square", [](const Tensor& a) { return square(a); }, -1, 1);
    // keep inputs away from the kink where the derivative is undefined
    unary("relu", [](const Tensor& a) { return relu(a); }, 0.1, 1.0);
    unary("relu_neg", [](const Tensor& a) { return relu(a); }, -1.0, -0.1);
    unary("transpose", [](const Tensor& a) { return transpose(a); }, -1, 1);
    unary("sum", [](const Tensor& a) { return sum(a); }, -1, 1);
    unary("mean", [](const Tensor& a) { return mean(a); }, -1, 1);
    unary("sum_rows", [](const Tensor& a) { return sum_rows(a); }, -1, 1);
    unary("sum_cols", [](const Tensor& a) { return sum_cols(a); }, -1, 1);
    unary("add_scalar", [](const Tensor& a) { return add_scalar(a, 0.7); }, -1, 1);
    unary("mul_scalar", [](const Tensor& a) { return mul_scalar(a, -1.3); }, -1, 1);
    unary("softmax", [](const Tensor& a) { return softmax(a, 0.7); }, -2, 2);
    unary("log_softmax", [](const Tensor& a) { return log_softmax(a, 0.7); }, -2, 2);
    unary("reshape", [](const Tensor& a) {
        return reshape(a, {a.numel(), 1});
    }, -1, 1);
    unary("global_avg_pool", [](const Tensor& a) {
        return global_avg_pool(reshape(a, {1, 1, a.shape()[0], a.shape()[1]}));
    }, -1, 1);

    run("matmul", [&](Rng& rng) {
        const int64_t m = 2 + static_cast<int64_t>(rng.next_below(3));
        const int64_t k = 2 + static_cast<int64_t>(rng.next_below(3));
        const int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
        std::vector<Tensor> leaves = {detail::random_tensor(rng, {m, k}),
                                      detail::random_tensor(rng, {k, n})};
        Rng proj(rng.next_u64());
        return gradcheck_max_rel_err(
            [&](const std::vector<Tensor>& p) {
                Rng pr(proj);
                return detail::project(matmul(p[0], p[1]), pr);
            },
            leaves);
    });

    run("affine", [&](Rng& rng) {
        const int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
        const int64_t in = 2 + static_cast<int64_t>(rng.next_below(3));
        const int64_t out = 2 + static_cast<int64_t>(rng.next_below(3));
        std::vector<Tensor> leaves = {detail::random_tensor(rng, {n, in}),
                                      detail::random_tensor(rng, {in, out}),
                                      detail::random_tensor(rng, {out})};
        Rng proj(rng.next_u64());
        return gradcheck_max_rel_err(
            [&](const std::vector<Tensor>& p) {
                Rng pr(proj);
                return detail::project(affine(p[0], p[1], p[2]), pr);
            },
            leaves);
    });

    for (const bool fused : {false, true}) {
        run(fused ? "conv2d_relu" : "conv2d", [&, fused](Rng& rng) {
            const int64_t B = 1 + static_cast<int64_t>(rng.next_below(2));
            const int64_t C = 1 + static_cast<int64_t>(rng.next_below(2));
            const int64_t F = 1 + static_cast<int64_t>(rng.next_below(3));
            const int64_t H = 4 + static_cast<int64_t>(rng.next_below(2));
            const int64_t k = 2 + static_cast<int64_t>(rng.next_below(2));
            const int64_t stride = 1 + static_cast<int64_t>(rng.next_below(2));
            std::vector<Tensor> leaves = {detail::random_tensor(rng, {B, C, H, H}),
                                          detail::random_tensor(rng, {F, C, k, k}),
                                          detail::random_tensor(rng, {F})};
            Rng proj(rng.next_u64());
            return gradcheck_max_rel_err(
                [&, stride, fused](const std::vector<Tensor>& p) {
                    Rng pr(proj);
                    return detail::project(conv2d(p[0], p[1], stride, &p[2], fused), pr);
                },
                leaves);
        });
    }

    auto rowvec = [&](const std::string& name, auto op, bool along_rows) {
        run(name, [&, op, along_rows](Rng& rng) {
            Shape s = shape2(rng);
            const int64_t vlen = along_rows ? s[1] : s[0];
            std::vector<Tensor> leaves = {detail::random_tensor(rng, s),
                                          detail::random_tensor(rng, {vlen})};
            Rng proj(rng.next_u64());
            return gradcheck_max_rel_err(
                [&, op](const std::vector<Tensor>& p) {
                    Rng pr(proj);
                    return detail::project(op(p[0], p[1]), pr);
                },
                leaves);
        });
    };
    rowvec("add_rowvec", [](const Tensor& a, const Tensor& v) { return add_rowvec(a, v); }, true);
    rowvec("add_colvec", [](const Tensor& a, const Tensor& v) { return add_colvec(a, v); }, false);
    rowvec("mul_rowvec", [](const Tensor& a, const Tensor& v) { return mul_rowvec(a, v); }, true);
    rowvec("mul_colvec", [](const Tensor& a, const Tensor& v) { return mul_colvec(a, v); }, false);

    run("concat_rows", [&](Rng& rng) {
        const int64_t d = 2 + static_cast<int64_t>(rng.next_below(3));
        std::vector<Tensor> leaves = {
            detail::random_tensor(rng, {2 + static_cast<int64_t>(rng.next_below(2)), d}),
            detail::random_tensor(rng, {2 + static_cast<int64_t>(rng.next_below(2)), d})};
        Rng proj(rng.next_u64());
        return gradcheck_max_rel_err(
            [&](const std::vector<Tensor>& p) {
                Rng pr(proj);
                return detail::project(concat_rows(p[0], p[1]), pr);
            },
            leaves);
    });

    return results;
}

/// Finite-difference check of the four training objectives on random small
/// batches (N <= 4, D <= 6, K <= 5).
inline std::vector<GradCheckCase> gradcheck_objectives(uint64_t seed, int trials,
                                                       double tol = 1e-4) {
    std::vector<GradCheckCase> results;
    auto run = [&](const std::string& name,
                   const std::function<double(Rng&)>& one_trial) {
        GradCheckCase c;
        c.name = name;
        c.trials = trials;
        for (int t = 0; t < trials; ++t) {
            Rng rng(derive_seed(seed, fnv_name(name), static_cast<uint64_t>(t)));
            c.max_rel_err = std::max(c.max_rel_err, one_trial(rng));
        }
        c.pass = c.max_rel_err < tol;
        results.push_back(c);
    };

    run("mixsr_loss", [](Rng& rng) {
        const int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
        const int64_t d = 2 + static_cast<int64_t>(rng.next_below(5));
        std::vector<Tensor> leaves = {detail::random_tensor(rng, {n, d}),
                                      detail::random_tensor(rng, {n, d})};
        return gradcheck_max_rel_err(
            [](const std::vector<Tensor>& p) {
                return mixsr_loss(EmbeddingBatch(p[0], p[1]), 0.5);
            },
            leaves);
    });
    run("barlow_loss", [](Rng& rng) {
        const int64_t n = 3 + static_cast<int64_t>(rng.next_below(2));
        const int64_t d = 2 + static_cast<int64_t>(rng.next_below(5));
        std::vector<Tensor> leaves = {detail::random_tensor(rng, {n, d}),
                                      detail::random_tensor(rng, {n, d})};
        return gradcheck_max_rel_err(
            [](const std::vector<Tensor>& p) {
                return barlow_loss(EmbeddingBatch(p[0], p[1]), 0.005);
            },
            leaves);
    });
    run("dino_loss", [](Rng& rng) {
        const int64_t b = 1 + static_cast<int64_t>(rng.next_below(3));
        const int64_t k = 2 + static_cast<int64_t>(rng.next_below(4));
        std::vector<Tensor> leaves = {detail::random_tensor(rng, {b, k}),
                                      detail::random_tensor(rng, {b, k}),
                                      detail::random_tensor(rng, {b, k})};
        Tensor t1 = detail::random_tensor(rng, {b, k}, -1, 1, false);
        Tensor t2 = detail::random_tensor(rng, {b, k}, -1, 1, false);
        DinoHead head = DinoHead::make(static_cast<int>(k), 0.4, 0.1, true);
        for (auto& c : head.center) c = rng.uniform(-0.5, 0.5);
        return gradcheck_max_rel_err(
            [&](const std::vector<Tensor>& p) {
                return dino_loss(p, {t1, t2}, {0, 1}, head);
            },
            leaves);
    });
    run("supervised_ce", [](Rng& rng) {
        const int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
        const int64_t k = 2 + static_cast<int64_t>(rng.next_below(4));
        std::vector<int> labels;
        for (int64_t i = 0; i < n; ++i)
            labels.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(k))));
        std::vector<Tensor> leaves = {detail::random_tensor(rng, {n, k})};
        return gradcheck_max_rel_err(
            [&](const std::vector<Tensor>& p) { return supervised_ce(p[0], labels); }, leaves);
    });
    return results;
}

}  // namespace mixview
