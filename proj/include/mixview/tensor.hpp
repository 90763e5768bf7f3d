#pragma once

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mixview/common.hpp"

namespace mixview {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    std::shared_ptr<void> saved;  // op context kept alive until backward (e.g. im2col buffer)

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline void check_finite(const Node& n, const char* op) {
    if (!checked_mode()) return;
    for (double v : n.value) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite value produced");
    }
}

}  // namespace detail

/// Dense f64 tensor participating in a reverse-mode differentiation graph.
/// Handles share the underlying node; graphs are freed when the last handle
/// referencing them is dropped.
class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        validate(shape, data.size());
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        detail::check_finite(*n, "Tensor::from");
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                    requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), v),
                    requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const double> grad() const {
        if (!has_grad()) throw ContractError("Tensor::grad: gradient not populated");
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
    void drop_grad() { node_->grad.clear(); }

    double item() const {
        if (numel() != 1) throw ContractError("Tensor::item: tensor is not scalar");
        return node_->value[0];
    }

    double at(std::initializer_list<int64_t> idx) const {
        return node_->value[static_cast<size_t>(flat_index(idx))];
    }

    /// Grad-free copy of the values (fresh leaf).
    Tensor detached_copy() const {
        return Tensor::from(node_->shape, node_->value, false);
    }

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    friend void backward(const Tensor& loss);
    friend Tensor make_op(Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> bw, const char* op,
                          std::shared_ptr<void> saved);

  private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    static void validate(const Shape& shape, size_t len) {
        for (int64_t e : shape) {
            if (e <= 0) throw DimensionError("Tensor: non-positive extent in " + shape_str(shape));
        }
        if (numel_of(shape) != static_cast<int64_t>(len))
            throw DimensionError("Tensor: data length " + std::to_string(len) +
                                 " does not match shape " + shape_str(shape));
    }

    int64_t flat_index(std::initializer_list<int64_t> idx) const {
        if (static_cast<int64_t>(idx.size()) != rank())
            throw DimensionError("Tensor::at: wrong index rank");
        int64_t flat = 0;
        size_t d = 0;
        for (int64_t i : idx) {
            if (i < 0 || i >= node_->shape[d]) throw DimensionError("Tensor::at: index out of range");
            flat = flat * node_->shape[d] + i;
            ++d;
        }
        return flat;
    }

    std::shared_ptr<detail::Node> node_;
};

/// Creates the result node of an op. When no parent requires grad the graph
/// edges are pruned, so grad-free forwards (teacher, eval) retain nothing.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> bw, const char* op,
                      std::shared_ptr<void> saved = nullptr) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    n->requires_grad = any;
    if (any) {
        for (auto& p : parents) n->parents.push_back(p.node_ptr());
        n->backward_fn = std::move(bw);
        n->saved = std::move(saved);
    }
    detail::check_finite(*n, op);
    return Tensor(std::move(n));
}

/// Reverse-mode sweep from a scalar root. Populates grad buffers of every
/// reachable tensor whose subgraph requires grad; parameter grads accumulate
/// across calls until zero_grad.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: root must be a defined scalar tensor");
    detail::Node* root = loss.node();
    if (!root->requires_grad) return;

    // iterative DFS post-order; child order is the parents vector, so the
    // resulting topological order is deterministic
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            detail::Node* next = node->parents[child++].get();
            if (next->requires_grad && visited.insert(next).second)
                stack.emplace_back(next, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) n->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) {
            for (auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] += b.data()[i];
    return make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& n) {
            for (int pi = 0; pi < 2; ++pi) {
                auto& p = *n.parents[pi];
                if (!p.requires_grad) continue;
                for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
            }
        },
        "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] -= b.data()[i];
    return make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        },
        "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
        },
        "mul");
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "divide");
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] / b.data()[i];
    return make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] / pb.value[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i)
                    pb.grad[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
        },
        "divide");
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += c;
    return make_op(
        a.shape(), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        },
        "add_scalar");
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= c;
    return make_op(
        a.shape(), std::move(out), {a},
        [c](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
        },
        "mul_scalar");
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a.data()[i]);
    return make_op(
        a.shape(), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * n.value[i];
        },
        "exp");
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::log(a.data()[i]);
    return make_op(
        a.shape(), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] / p.value[i];
        },
        "log");
}

inline Tensor sqrt(const Tensor& a) {
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::sqrt(a.data()[i]);
    return make_op(
        a.shape(), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * 0.5 / n.value[i];
        },
        "sqrt");
}

inline Tensor square(const Tensor& a) {
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * a.data()[i];
    return make_op(
        a.shape(), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i)
                p.grad[i] += n.grad[i] * 2.0 * p.value[i];
        },
        "square");
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    return make_op(
        a.shape(), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i)
                if (p.value[i] > 0.0) p.grad[i] += n.grad[i];
        },
        "relu");
}

// ---------------------------------------------------------------------------
// reductions and broadcasts (2-D convention: N rows, D columns)
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op(
        {1}, {s}, {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            const double g = n.grad[0];
            for (double& gv : p.grad) gv += g;
        },
        "sum");
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return make_op(
        {1}, {s * inv}, {a},
        [inv](detail::Node& n) {
            auto& p = *n.parents[0];
            const double g = n.grad[0] * inv;
            for (double& gv : p.grad) gv += g;
        },
        "mean");
}

namespace detail {
inline void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor");
}
}  // namespace detail

/// Sum over rows: [N x D] -> [D].
inline Tensor sum_rows(const Tensor& a) {
    detail::require_matrix(a, "sum_rows");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    std::vector<double> out(static_cast<size_t>(D), 0.0);
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) out[j] += a.data()[i * D + j];
    return make_op(
        {D}, std::move(out), {a},
        [N, D](detail::Node& n) {
            auto& p = *n.parents[0];
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < D; ++j) p.grad[i * D + j] += n.grad[j];
        },
        "sum_rows");
}

/// Sum over columns: [N x D] -> [N].
inline Tensor sum_cols(const Tensor& a) {
    detail::require_matrix(a, "sum_cols");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    std::vector<double> out(static_cast<size_t>(N), 0.0);
    for (int64_t i = 0; i < N; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < D; ++j) s += a.data()[i * D + j];
        out[i] = s;
    }
    return make_op(
        {N}, std::move(out), {a},
        [N, D](detail::Node& n) {
            auto& p = *n.parents[0];
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < D; ++j) p.grad[i * D + j] += n.grad[i];
        },
        "sum_cols");
}

/// a[i][j] + v[j]
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    detail::require_matrix(a, "add_rowvec");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    if (v.numel() != D) throw DimensionError("add_rowvec: vector length mismatch");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) out[i * D + j] += v.data()[j];
    return make_op(
        a.shape(), std::move(out), {a, v},
        [N, D](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pv = *n.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
            if (pv.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < D; ++j) pv.grad[j] += n.grad[i * D + j];
        },
        "add_rowvec");
}

/// a[i][j] + v[i]
inline Tensor add_colvec(const Tensor& a, const Tensor& v) {
    detail::require_matrix(a, "add_colvec");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    if (v.numel() != N) throw DimensionError("add_colvec: vector length mismatch");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) out[i * D + j] += v.data()[i];
    return make_op(
        a.shape(), std::move(out), {a, v},
        [N, D](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pv = *n.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
            if (pv.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < D; ++j) pv.grad[i] += n.grad[i * D + j];
        },
        "add_colvec");
}

/// a[i][j] * v[j]
inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    detail::require_matrix(a, "mul_rowvec");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    if (v.numel() != D) throw DimensionError("mul_rowvec: vector length mismatch");
    std::vector<double> out(static_cast<size_t>(N * D));
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) out[i * D + j] = a.data()[i * D + j] * v.data()[j];
    return make_op(
        a.shape(), std::move(out), {a, v},
        [N, D](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pv = *n.parents[1];
            if (pa.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < D; ++j)
                        pa.grad[i * D + j] += n.grad[i * D + j] * pv.value[j];
            if (pv.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < D; ++j)
                        pv.grad[j] += n.grad[i * D + j] * pa.value[i * D + j];
        },
        "mul_rowvec");
}

/// a[i][j] * v[i]
inline Tensor mul_colvec(const Tensor& a, const Tensor& v) {
    detail::require_matrix(a, "mul_colvec");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    if (v.numel() != N) throw DimensionError("mul_colvec: vector length mismatch");
    std::vector<double> out(static_cast<size_t>(N * D));
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) out[i * D + j] = a.data()[i * D + j] * v.data()[i];
    return make_op(
        a.shape(), std::move(out), {a, v},
        [N, D](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pv = *n.parents[1];
            if (pa.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < D; ++j)
                        pa.grad[i * D + j] += n.grad[i * D + j] * pv.value[i];
            if (pv.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < D; ++j)
                        pv.grad[i] += n.grad[i * D + j] * pa.value[i * D + j];
        },
        "mul_colvec");
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw DimensionError("reshape: element count mismatch");
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op(
        std::move(new_shape), std::move(out), {a},
        [](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        },
        "reshape");
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "concat_rows");
    detail::require_matrix(b, "concat_rows");
    if (a.shape()[1] != b.shape()[1])
        throw DimensionError("concat_rows: column count mismatch");
    const int64_t Na = a.shape()[0], Nb = b.shape()[0], D = a.shape()[1];
    std::vector<double> out;
    out.reserve(static_cast<size_t>((Na + Nb) * D));
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return make_op(
        {Na + Nb, D}, std::move(out), {a, b},
        [Na, D](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            const size_t split = static_cast<size_t>(Na * D);
            if (pa.requires_grad)
                for (size_t i = 0; i < split; ++i) pa.grad[i] += n.grad[i];
            if (pb.requires_grad)
                for (size_t i = split; i < n.grad.size(); ++i) pb.grad[i - split] += n.grad[i];
        },
        "concat_rows");
}

// ---------------------------------------------------------------------------
// linear algebra (BLAS-backed)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const int64_t M = a.shape()[0], K = a.shape()[1];
    if (b.shape()[0] != K)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int64_t N = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(M * N), 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(M),
                static_cast<int>(N), static_cast<int>(K), 1.0, a.data().data(),
                static_cast<int>(K), b.data().data(), static_cast<int>(N), 0.0, out.data(),
                static_cast<int>(N));
    return make_op(
        {M, N}, std::move(out), {a, b},
        [M, N, K](detail::Node& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad)  // gA += g * B^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(M),
                            static_cast<int>(K), static_cast<int>(N), 1.0, n.grad.data(),
                            static_cast<int>(N), pb.value.data(), static_cast<int>(N), 1.0,
                            pa.grad.data(), static_cast<int>(K));
            if (pb.requires_grad)  // gB += A^T * g
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K),
                            static_cast<int>(N), static_cast<int>(M), 1.0, pa.value.data(),
                            static_cast<int>(K), n.grad.data(), static_cast<int>(N), 1.0,
                            pb.grad.data(), static_cast<int>(N));
        },
        "matmul");
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix(a, "transpose");
    const int64_t M = a.shape()[0], N = a.shape()[1];
    std::vector<double> out(static_cast<size_t>(M * N));
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) out[j * M + i] = a.data()[i * N + j];
    return make_op(
        {N, M}, std::move(out), {a},
        [M, N](detail::Node& n) {
            auto& p = *n.parents[0];
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < N; ++j) p.grad[i * N + j] += n.grad[j * M + i];
        },
        "transpose");
}

/// x[N x In] * w[In x Out] + b[Out], fused.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_matrix(x, "affine");
    detail::require_matrix(w, "affine");
    const int64_t N = x.shape()[0], In = x.shape()[1];
    if (w.shape()[0] != In) throw DimensionError("affine: weight rows != input columns");
    const int64_t Out = w.shape()[1];
    if (b.numel() != Out) throw DimensionError("affine: bias length mismatch");
    std::vector<double> out(static_cast<size_t>(N * Out));
    for (int64_t i = 0; i < N; ++i)
        std::memcpy(out.data() + i * Out, b.data().data(), sizeof(double) * Out);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(N),
                static_cast<int>(Out), static_cast<int>(In), 1.0, x.data().data(),
                static_cast<int>(In), w.data().data(), static_cast<int>(Out), 1.0, out.data(),
                static_cast<int>(Out));
    return make_op(
        {N, Out}, std::move(out), {x, w, b},
        [N, In, Out](detail::Node& n) {
            auto& px = *n.parents[0];
            auto& pw = *n.parents[1];
            auto& pb = *n.parents[2];
            if (px.requires_grad)
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(N),
                            static_cast<int>(In), static_cast<int>(Out), 1.0, n.grad.data(),
                            static_cast<int>(Out), pw.value.data(), static_cast<int>(Out), 1.0,
                            px.grad.data(), static_cast<int>(In));
            if (pw.requires_grad)
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(In),
                            static_cast<int>(Out), static_cast<int>(N), 1.0, px.value.data(),
                            static_cast<int>(In), n.grad.data(), static_cast<int>(Out), 1.0,
                            pw.grad.data(), static_cast<int>(Out));
            if (pb.requires_grad)
                for (int64_t i = 0; i < N; ++i)
                    for (int64_t j = 0; j < Out; ++j) pb.grad[j] += n.grad[i * Out + j];
        },
        "affine");
}

// ---------------------------------------------------------------------------
// convolution (im2col + GEMM; the column buffer is cached for backward)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvContext {
    std::vector<double> col;  // [C*k*k x B*OH*OW]
};

// col[(c*k+i)*k+j][b*OH*OW + oh*OW + ow] = x[b][c][oh*s+i][ow*s+j]
inline void im2col(const double* x, int64_t B, int64_t C, int64_t H, int64_t W, int64_t k,
                   int64_t stride, int64_t OH, int64_t OW, std::vector<double>& col) {
    const int64_t cols = B * OH * OW;
    col.resize(static_cast<size_t>(C * k * k * cols));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < k; ++i)
            for (int64_t j = 0; j < k; ++j) {
                double* dst = col.data() + ((c * k + i) * k + j) * cols;
                for (int64_t b = 0; b < B; ++b) {
                    const double* src = x + (b * C + c) * H * W;
                    for (int64_t oh = 0; oh < OH; ++oh) {
                        const double* row = src + (oh * stride + i) * W + j;
                        double* d = dst + (b * OH + oh) * OW;
                        for (int64_t ow = 0; ow < OW; ++ow) d[ow] = row[ow * stride];
                    }
                }
            }
}

inline void col2im_add(const std::vector<double>& col, int64_t B, int64_t C, int64_t H,
                       int64_t W, int64_t k, int64_t stride, int64_t OH, int64_t OW,
                       double* gx) {
    const int64_t cols = B * OH * OW;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < k; ++i)
            for (int64_t j = 0; j < k; ++j) {
                const double* src = col.data() + ((c * k + i) * k + j) * cols;
                for (int64_t b = 0; b < B; ++b) {
                    double* dst = gx + (b * C + c) * H * W;
                    for (int64_t oh = 0; oh < OH; ++oh) {
                        double* row = dst + (oh * stride + i) * W + j;
                        const double* s = src + (b * OH + oh) * OW;
                        for (int64_t ow = 0; ow < OW; ++ow) row[ow * stride] += s[ow];
                    }
                }
            }
}

}  // namespace detail

/// Valid cross-correlation, x[B x C x H x W] * w[F x C x k x k], stride >= 1.
/// Optional bias[F]. OH = (H-k)/stride + 1. fuse_relu applies max(0, .) to the
/// output inside the op (backward masks by the output sign).
inline Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride,
                     const Tensor* bias = nullptr, bool fuse_relu = false) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d: expected rank-4 input and weight");
    if (stride < 1) throw ParameterError("conv2d: stride must be positive");
    const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t F = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != C) throw DimensionError("conv2d: channel mismatch");
    if (w.shape()[2] != w.shape()[3]) throw DimensionError("conv2d: kernel must be square");
    if (k > H || k > W)
        throw DimensionError("conv2d: kernel larger than input (" + std::to_string(k) + " vs " +
                             std::to_string(H) + "x" + std::to_string(W) + ")");
    if (bias && bias->numel() != F) throw DimensionError("conv2d: bias length mismatch");
    const int64_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
    const int64_t cols = B * OH * OW, CKK = C * k * k;

    auto ctx = std::make_shared<detail::ConvContext>();
    detail::im2col(x.data().data(), B, C, H, W, k, stride, OH, OW, ctx->col);

    // out_mat[F x cols] = w_mat[F x CKK] * col
    std::vector<double> out_mat(static_cast<size_t>(F * cols), 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(F),
                static_cast<int>(cols), static_cast<int>(CKK), 1.0, w.data().data(),
                static_cast<int>(CKK), ctx->col.data(), static_cast<int>(cols), 0.0,
                out_mat.data(), static_cast<int>(cols));

    // permute [F][B*OH*OW] -> [B][F][OH][OW], adding bias on the way
    std::vector<double> out(static_cast<size_t>(B * F * OH * OW));
    const int64_t ohow = OH * OW;
    for (int64_t f = 0; f < F; ++f) {
        const double bval = bias ? bias->data()[f] : 0.0;
        for (int64_t b = 0; b < B; ++b) {
            const double* src = out_mat.data() + f * cols + b * ohow;
            double* dst = out.data() + (b * F + f) * ohow;
            if (fuse_relu)
                for (int64_t p = 0; p < ohow; ++p) dst[p] = std::max(0.0, src[p] + bval);
            else
                for (int64_t p = 0; p < ohow; ++p) dst[p] = src[p] + bval;
        }
    }

    std::vector<Tensor> parents = {x, w};
    if (bias) parents.push_back(*bias);
    const bool has_bias = bias != nullptr;
    return make_op(
        {B, F, OH, OW}, std::move(out), std::move(parents),
        [B, C, H, W, F, k, stride, OH, OW, cols, CKK, ohow, has_bias,
         fuse_relu](detail::Node& n) {
            auto* ctx = static_cast<detail::ConvContext*>(n.saved.get());
            auto& px = *n.parents[0];
            auto& pw = *n.parents[1];
            // g_mat[F x cols] from n.grad [B][F][OH][OW], relu-masked if fused
            std::vector<double> g_mat(static_cast<size_t>(F * cols));
            for (int64_t f = 0; f < F; ++f)
                for (int64_t b = 0; b < B; ++b) {
                    const double* gsrc = n.grad.data() + (b * F + f) * ohow;
                    double* gdst = g_mat.data() + f * cols + b * ohow;
                    if (fuse_relu) {
                        const double* val = n.value.data() + (b * F + f) * ohow;
                        for (int64_t p = 0; p < ohow; ++p)
                            gdst[p] = val[p] > 0.0 ? gsrc[p] : 0.0;
                    } else {
                        std::memcpy(gdst, gsrc, sizeof(double) * static_cast<size_t>(ohow));
                    }
                }
            if (pw.requires_grad)  // gW[F x CKK] += g_mat * col^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(F),
                            static_cast<int>(CKK), static_cast<int>(cols), 1.0, g_mat.data(),
                            static_cast<int>(cols), ctx->col.data(), static_cast<int>(cols),
                            1.0, pw.grad.data(), static_cast<int>(CKK));
            if (px.requires_grad) {  // g_col = w^T * g_mat, then scatter
                std::vector<double> g_col(static_cast<size_t>(CKK * cols), 0.0);
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(CKK),
                            static_cast<int>(cols), static_cast<int>(F), 1.0, pw.value.data(),
                            static_cast<int>(CKK), g_mat.data(), static_cast<int>(cols), 0.0,
                            g_col.data(), static_cast<int>(cols));
                detail::col2im_add(g_col, B, C, H, W, k, stride, OH, OW, px.grad.data());
            }
            if (has_bias) {
                auto& pb = *n.parents[2];
                if (pb.requires_grad)
                    for (int64_t f = 0; f < F; ++f) {
                        double s = 0.0;
                        const double* src = g_mat.data() + f * cols;
                        for (int64_t p = 0; p < cols; ++p) s += src[p];
                        pb.grad[f] += s;
                    }
            }
        },
        "conv2d", ctx);
}

/// [B x C x H x W] -> [B x C]
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw DimensionError("global_avg_pool: expected rank-4 input");
    const int64_t B = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    const double inv = 1.0 / static_cast<double>(HW);
    std::vector<double> out(static_cast<size_t>(B * C));
    for (int64_t bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        const double* src = x.data().data() + bc * HW;
        for (int64_t p = 0; p < HW; ++p) s += src[p];
        out[bc] = s * inv;
    }
    return make_op(
        {B, C}, std::move(out), {x},
        [HW, inv](detail::Node& n) {
            auto& p = *n.parents[0];
            for (size_t bc = 0; bc < n.grad.size(); ++bc) {
                const double g = n.grad[bc] * inv;
                double* dst = p.grad.data() + bc * HW;
                for (int64_t q = 0; q < HW; ++q) dst[q] += g;
            }
        },
        "global_avg_pool");
}

// ---------------------------------------------------------------------------
// softmax family (fused, stabilized by row-max subtraction)
// ---------------------------------------------------------------------------

/// Softmax over the last axis with temperature: exp(x/t) / sum exp(x/t).
inline Tensor softmax(const Tensor& logits, double temperature) {
    if (temperature <= 0.0) throw ParameterError("softmax: temperature must be positive");
    const Shape& s = logits.shape();
    const int64_t K = s.back();
    const int64_t rows = logits.numel() / K;
    std::vector<double> out(static_cast<size_t>(logits.numel()));
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = logits.data().data() + r * K;
        double* o = out.data() + r * K;
        double mx = in[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < K; ++j) {
            o[j] = std::exp((in[j] - mx) / temperature);
            denom += o[j];
        }
        const double inv = 1.0 / denom;
        for (int64_t j = 0; j < K; ++j) o[j] *= inv;
    }
    return make_op(
        s, std::move(out), {logits},
        [K, rows, temperature](detail::Node& n) {
            auto& p = *n.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = n.value.data() + r * K;
                const double* g = n.grad.data() + r * K;
                double dot = 0.0;
                for (int64_t j = 0; j < K; ++j) dot += g[j] * y[j];
                double* pg = p.grad.data() + r * K;
                for (int64_t j = 0; j < K; ++j)
                    pg[j] += y[j] * (g[j] - dot) / temperature;
            }
        },
        "softmax");
}

/// log(softmax(x/t)) over the last axis.
inline Tensor log_softmax(const Tensor& logits, double temperature) {
    if (temperature <= 0.0) throw ParameterError("log_softmax: temperature must be positive");
    const Shape& s = logits.shape();
    const int64_t K = s.back();
    const int64_t rows = logits.numel() / K;
    std::vector<double> out(static_cast<size_t>(logits.numel()));
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = logits.data().data() + r * K;
        double* o = out.data() + r * K;
        double mx = in[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < K; ++j) {
            o[j] = (in[j] - mx) / temperature;
            denom += std::exp(o[j]);
        }
        const double lse = std::log(denom);
        for (int64_t j = 0; j < K; ++j) o[j] -= lse;
    }
    return make_op(
        s, std::move(out), {logits},
        [K, rows, temperature](detail::Node& n) {
            auto& p = *n.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                const double* lsm = n.value.data() + r * K;
                const double* g = n.grad.data() + r * K;
                double gsum = 0.0;
                for (int64_t j = 0; j < K; ++j) gsum += g[j];
                double* pg = p.grad.data() + r * K;
                for (int64_t j = 0; j < K; ++j)
                    pg[j] += (g[j] - std::exp(lsm[j]) * gsum) / temperature;
            }
        },
        "log_softmax");
}

}  // namespace mixview
