#pragma once

// Dense row-major tensor engine with reverse-mode differentiation.
//
// The engine is templated on the scalar type: the shipped configuration is
// float (Tensor), and the test suites instantiate the identical code with
// double (Tensor64) to run finite-difference oracles at 64-bit precision.
// Reductions and transcendental kernels accumulate in double regardless of
// the storage type.
//
// Recording model: ops record a backward closure on the thread's active tape
// whenever one is installed (TapeScope) and at least one input requires
// gradients. Gradients accumulate with += so a tensor feeding several
// consumers receives the sum of its contributions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "clmk/error.hpp"
#include "clmk/parallel.hpp"
#include "clmk/rng.hpp"

namespace clmk {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

template <typename S>
struct NodeT {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad; // empty until first accumulation
    bool requires_grad = false;
};

} // namespace detail

template <typename S>
class TensorT {
public:
    TensorT() : node_(std::make_shared<detail::NodeT<S>>()) { node_->shape = {}; node_->value.assign(1, S(0)); }

    static TensorT zeros(Shape shape) { return filled(std::move(shape), S(0)); }

    static TensorT filled(Shape shape, S v) {
        TensorT t;
        validate_shape(shape);
        t.node_->shape = std::move(shape);
        t.node_->value.assign(static_cast<size_t>(shape_numel(t.node_->shape)), v);
        return t;
    }

    static TensorT from_data(Shape shape, std::vector<S> data) {
        validate_shape(shape);
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeMismatch("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        TensorT t;
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static TensorT scalar(S v) { return from_data({}, {v}); }

    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    std::span<S> data() { return node_->value; }
    std::span<const S> data() const { return node_->value; }

    S item() const {
        if (numel() != 1) throw ShapeMismatch("item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<S> grad() {
        ensure_grad();
        return node_->grad;
    }
    std::span<const S> grad() const {
        if (node_->grad.empty()) throw Error("gradient not populated");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }
    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), S(0));
    }

    // Deep copy of the values; gradient state is not carried over.
    TensorT clone() const {
        TensorT t = from_data(shape(), std::vector<S>(node_->value));
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    template <typename T2>
    TensorT<T2> cast() const {
        std::vector<T2> out(node_->value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T2>(node_->value[i]);
        TensorT<T2> t = TensorT<T2>::from_data(shape(), std::move(out));
        t.set_requires_grad(node_->requires_grad);
        return t;
    }

    std::shared_ptr<detail::NodeT<S>> node() const { return node_; }

private:
    static void validate_shape(const Shape& s) {
        for (int64_t d : s)
            if (d <= 0) throw ShapeMismatch("non-positive extent in shape " + shape_str(s));
    }

    std::shared_ptr<detail::NodeT<S>> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename S>
class TapeT {
public:
    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
    void backward(const TensorT<S>& loss) {
        if (loss.numel() != 1) throw NotScalarLoss("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
        if (entries_.empty()) throw EmptyTape("backward() on an empty tape");
        auto node = loss.node();
        if (node->grad.empty()) node->grad.assign(1, S(0));
        node->grad[0] += S(1);
        for (size_t i = entries_.size(); i-- > 0;) entries_[i]();
    }

private:
    std::vector<std::function<void()>> entries_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

namespace detail {
template <typename S>
inline TapeT<S>*& active_tape_slot() {
    thread_local TapeT<S>* tape = nullptr;
    return tape;
}
} // namespace detail

template <typename S>
inline TapeT<S>* active_tape() {
    return detail::active_tape_slot<S>();
}

// Installs a tape as the thread's recording target for its lifetime.
template <typename S>
class TapeScopeT {
public:
    explicit TapeScopeT(TapeT<S>& tape) : prev_(detail::active_tape_slot<S>()) { detail::active_tape_slot<S>() = &tape; }
    ~TapeScopeT() { detail::active_tape_slot<S>() = prev_; }
    TapeScopeT(const TapeScopeT&) = delete;
    TapeScopeT& operator=(const TapeScopeT&) = delete;

private:
    TapeT<S>* prev_;
};

using TapeScope = TapeScopeT<float>;
using TapeScope64 = TapeScopeT<double>;

namespace detail {

template <typename S>
inline bool should_record(std::initializer_list<bool> input_grads) {
    if (active_tape_slot<S>() == nullptr) return false;
    for (bool g : input_grads)
        if (g) return true;
    return false;
}

template <typename S>
inline void mark_output(TensorT<S>& out, bool recorded) {
    if (recorded) out.set_requires_grad(true);
}

// Suffix broadcast: after left-padding `small` with 1s, every dimension must
// either match `big` or be a leading 1. The small tensor then tiles the big
// one with period small.numel(). Returns false when the pair is incompatible.
inline bool suffix_broadcastable(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    const size_t pad = big.size() - small.size();
    bool suffix_started = false;
    for (size_t i = 0; i < small.size(); ++i) {
        if (small[i] == big[pad + i]) {
            if (small[i] != 1) suffix_started = true;
            continue;
        }
        if (small[i] == 1 && !suffix_started) continue;
        return false;
    }
    return true;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (add / sub / mul) with leading-axis broadcast
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul };

template <typename S>
TensorT<S> binary_op(const TensorT<S>& a, const TensorT<S>& b, BinOp op) {
    const bool a_big = suffix_broadcastable(a.shape(), b.shape());
    const bool b_big = !a_big && suffix_broadcastable(b.shape(), a.shape());
    if (!a_big && !b_big)
        throw ShapeMismatch("incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

    const TensorT<S>& big = a_big ? a : b;
    const TensorT<S>& small = a_big ? b : a;
    const int64_t n = big.numel();
    const int64_t period = small.numel();

    TensorT<S> out = TensorT<S>::zeros(big.shape());
    auto ov = out.data();
    auto bv = big.data();
    auto sv = small.data();
    const bool small_is_rhs = a_big;

    switch (op) {
        case BinOp::Add:
            for (int64_t i = 0; i < n; ++i) ov[i] = bv[i] + sv[i % period];
            break;
        case BinOp::Sub:
            if (small_is_rhs)
                for (int64_t i = 0; i < n; ++i) ov[i] = bv[i] - sv[i % period];
            else
                for (int64_t i = 0; i < n; ++i) ov[i] = sv[i % period] - bv[i];
            break;
        case BinOp::Mul:
            for (int64_t i = 0; i < n; ++i) ov[i] = bv[i] * sv[i % period];
            break;
    }

    if (should_record<S>({a.requires_grad(), b.requires_grad()})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        const bool ag = a.requires_grad(), bg = b.requires_grad();
        active_tape<S>()->record([an, bn, on, op, a_big, ag, bg, n, period] {
            auto& og = on->grad;
            if (og.empty()) return;
            auto big_n = a_big ? an : bn;
            auto small_n = a_big ? bn : an;
            const bool big_g = a_big ? ag : bg;
            const bool small_g = a_big ? bg : ag;
            const S big_sign = (op == BinOp::Sub && !a_big) ? S(-1) : S(1);
            const S small_sign = (op == BinOp::Sub && a_big) ? S(-1) : S(1);
            if (big_g) {
                if (big_n->grad.empty()) big_n->grad.assign(big_n->value.size(), S(0));
                if (op == BinOp::Mul) {
                    for (int64_t i = 0; i < n; ++i) big_n->grad[i] += og[i] * small_n->value[i % period];
                } else {
                    for (int64_t i = 0; i < n; ++i) big_n->grad[i] += big_sign * og[i];
                }
            }
            if (small_g) {
                if (small_n->grad.empty()) small_n->grad.assign(small_n->value.size(), S(0));
                if (op == BinOp::Mul) {
                    for (int64_t i = 0; i < n; ++i) small_n->grad[i % period] += og[i] * big_n->value[i];
                } else {
                    for (int64_t i = 0; i < n; ++i) small_n->grad[i % period] += small_sign * og[i];
                }
            }
        });
        mark_output(out, true);
    }
    return out;
}

} // namespace detail

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(a, b, detail::BinOp::Add);
}
template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(a, b, detail::BinOp::Sub);
}
template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op(a, b, detail::BinOp::Mul);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void gemm_serial(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        std::fill(crow, crow + n, S(0));
        const S* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            const S* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] = A[M,K] * B[K,N]. ikj order, vectorizable; rows are independent so
// the parallel split cannot change results.
template <typename S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    const bool par = m > 1 && m * k * n >= (1 << 15);
    auto rows = [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            S* crow = c + i * n;
            std::fill(crow, crow + n, S(0));
            const S* arow = a + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
                const S av = arow[kk];
                const S* brow = b + kk * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    };
    if (par)
        parallel_for(m, rows);
    else
        rows(0, m);
}

// Batched gemm over equal leading dims; parallel over batches.
template <typename S>
void gemm_batched(const S* a, const S* b, S* c, int64_t batches, int64_t m, int64_t k, int64_t n) {
    const bool par = batches > 1 && batches * m * k * n >= (1 << 15);
    auto run = [&](int64_t b0, int64_t b1) {
        for (int64_t bi = b0; bi < b1; ++bi)
            gemm_serial(a + bi * m * k, b + bi * k * n, c + bi * m * n, m, k, n);
    };
    if (par)
        parallel_for(batches, run);
    else
        run(0, batches);
}

template <typename S>
std::vector<S> transpose2d(const S* a, int64_t rows, int64_t cols) {
    std::vector<S> t(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
    return t;
}

} // namespace detail

// Supported shapes: [M,K]x[K,N]; [..,M,K]x[K,N] (shared rhs); and
// [..,M,K]x[..,K,N] with identical leading dims.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        throw ShapeMismatch("matmul needs rank >= 2 operands, got " + shape_str(as) + " vs " + shape_str(bs));

    const int64_t m = as[as.size() - 2];
    const int64_t k = as[as.size() - 1];
    const int64_t kb = bs[bs.size() - 2];
    const int64_t n = bs[bs.size() - 1];
    if (k != kb) throw ShapeMismatch("matmul inner dims differ: " + shape_str(as) + " vs " + shape_str(bs));

    const bool shared_rhs = bs.size() == 2;
    if (!shared_rhs) {
        if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))
            throw ShapeMismatch("matmul batch dims differ: " + shape_str(as) + " vs " + shape_str(bs));
    }

    int64_t batches = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batches *= as[i];

    Shape out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    TensorT<S> out = TensorT<S>::zeros(out_shape);

    if (shared_rhs) {
        // [..,M,K] is contiguous as [batches*M, K]; one flat gemm.
        detail::gemm(a.data().data(), b.data().data(), out.data().data(), batches * m, k, n);
    } else {
        detail::gemm_batched(a.data().data(), b.data().data(), out.data().data(), batches, m, k, n);
    }

    if (detail::should_record<S>({a.requires_grad(), b.requires_grad()})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        const bool ag = a.requires_grad(), bg = b.requires_grad();
        active_tape<S>()->record([an, bn, on, ag, bg, shared_rhs, batches, m, k, n] {
            auto& og = on->grad;
            if (og.empty()) return;
            if (ag) {
                if (an->grad.empty()) an->grad.assign(an->value.size(), S(0));
                // dA = dC * B^T
                std::vector<S> da(an->value.size());
                if (shared_rhs) {
                    auto bt = detail::transpose2d(bn->value.data(), k, n);
                    detail::gemm(og.data(), bt.data(), da.data(), batches * m, n, k);
                } else {
                    std::vector<S> bt(static_cast<size_t>(k * n));
                    for (int64_t bi = 0; bi < batches; ++bi) {
                        const S* bslice = bn->value.data() + bi * k * n;
                        for (int64_t i = 0; i < k; ++i)
                            for (int64_t j = 0; j < n; ++j) bt[static_cast<size_t>(j * k + i)] = bslice[i * n + j];
                        detail::gemm_serial(og.data() + bi * m * n, bt.data(), da.data() + bi * m * k, m, n, k);
                    }
                }
                for (size_t i = 0; i < da.size(); ++i) an->grad[i] += da[i];
            }
            if (bg) {
                if (bn->grad.empty()) bn->grad.assign(bn->value.size(), S(0));
                // dB = A^T * dC, accumulated over batches when rhs is shared
                if (shared_rhs) {
                    auto at = detail::transpose2d(an->value.data(), batches * m, k);
                    std::vector<S> db(bn->value.size());
                    detail::gemm(at.data(), og.data(), db.data(), k, batches * m, n);
                    for (size_t i = 0; i < db.size(); ++i) bn->grad[i] += db[i];
                } else {
                    std::vector<S> at(static_cast<size_t>(m * k));
                    std::vector<S> db(static_cast<size_t>(k * n));
                    for (int64_t bi = 0; bi < batches; ++bi) {
                        const S* aslice = an->value.data() + bi * m * k;
                        for (int64_t i = 0; i < m; ++i)
                            for (int64_t j = 0; j < k; ++j) at[static_cast<size_t>(j * m + i)] = aslice[i * k + j];
                        detail::gemm_serial(at.data(), og.data() + bi * m * n, db.data(), k, m, n);
                        S* bgd = bn->grad.data() + bi * k * n;
                        for (int64_t i = 0; i < k * n; ++i) bgd[i] += db[static_cast<size_t>(i)];
                    }
                }
            }
        });
        detail::mark_output(out, true);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeMismatch("reshape from " + shape_str(x.shape()) + " to " + shape_str(new_shape) + " changes element count");
    TensorT<S> out = TensorT<S>::from_data(new_shape, std::vector<S>(x.data().begin(), x.data().end()));
    if (detail::should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        active_tape<S>()->record([xn, on] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
        detail::mark_output(out, true);
    }
    return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// out[idx with axes a,b swapped] = in[idx]; returns the permuted copy.
template <typename S>
std::vector<S> swap_axes_copy(const S* in, const Shape& shape, int a, int b, Shape& out_shape) {
    out_shape = shape;
    std::swap(out_shape[static_cast<size_t>(a)], out_shape[static_cast<size_t>(b)]);
    const auto in_strides = row_major_strides(shape);
    const auto out_strides = row_major_strides(out_shape);
    const int64_t n = shape_numel(shape);
    const int rank = static_cast<int>(shape.size());
    std::vector<S> out(static_cast<size_t>(n));
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t o = 0;
        for (int d = 0; d < rank; ++d) {
            int src = d;
            if (d == a) src = b;
            else if (d == b) src = a;
            o += idx[static_cast<size_t>(src)] * out_strides[static_cast<size_t>(d)];
        }
        out[static_cast<size_t>(o)] = in[flat];
        for (int d = rank - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

} // namespace detail

template <typename S>
TensorT<S> transpose(const TensorT<S>& x, int axis_a, int axis_b) {
    const int r = x.rank();
    if (axis_a < 0 || axis_b < 0 || axis_a >= r || axis_b >= r)
        throw ShapeMismatch("transpose axes out of range for shape " + shape_str(x.shape()));
    Shape out_shape;
    auto data = detail::swap_axes_copy(x.data().data(), x.shape(), axis_a, axis_b, out_shape);
    TensorT<S> out = TensorT<S>::from_data(out_shape, std::move(data));
    if (detail::should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        const Shape oshape = out_shape;
        active_tape<S>()->record([xn, on, oshape, axis_a, axis_b] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            Shape back;
            auto g = detail::swap_axes_copy(on->grad.data(), oshape, axis_a, axis_b, back);
            for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
        });
        detail::mark_output(out, true);
    }
    return out;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ShapeMismatch("concat axis out of range for shape " + shape_str(parts[0].shape()));
    Shape out_shape = parts[0].shape();
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeMismatch("concat rank mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        for (int d = 0; d < r; ++d)
            if (d != axis && p.dim(d) != out_shape[static_cast<size_t>(d)])
                throw ShapeMismatch("concat dim mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total_axis;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    auto ov = out.data();
    int64_t axis_off = 0;
    for (const auto& p : parts) {
        const int64_t pa = p.dim(axis);
        auto pv = p.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < pa * inner; ++j)
                ov[(o * total_axis + axis_off) * inner + j] = pv[o * pa * inner + j];
        axis_off += pa;
    }

    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (active_tape<S>() != nullptr && any_grad) {
        std::vector<std::shared_ptr<detail::NodeT<S>>> nodes;
        std::vector<bool> grads;
        std::vector<int64_t> axis_dims;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            grads.push_back(p.requires_grad());
            axis_dims.push_back(p.dim(axis));
        }
        auto on = out.node();
        active_tape<S>()->record([nodes, grads, axis_dims, on, outer, inner, total_axis] {
            if (on->grad.empty()) return;
            int64_t off = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                const int64_t pa = axis_dims[pi];
                if (grads[pi]) {
                    auto& xn = nodes[pi];
                    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t j = 0; j < pa * inner; ++j)
                            xn->grad[static_cast<size_t>(o * pa * inner + j)] += on->grad[static_cast<size_t>((o * total_axis + off) * inner + j)];
                }
                off += pa;
            }
        });
        detail::mark_output(out, true);
    }
    return out;
}

template <typename S>
TensorT<S> slice(const TensorT<S>& x, int axis, int64_t start, int64_t len) {
    const int r = x.rank();
    if (axis < 0 || axis >= r) throw ShapeMismatch("slice axis out of range for shape " + shape_str(x.shape()));
    const int64_t a = x.dim(axis);
    if (start < 0 || len < 1 || start + len > a)
        throw ShapeMismatch("slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for axis of extent " + std::to_string(a));

    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    auto ov = out.data();
    auto xv = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len * inner; ++j) ov[o * len * inner + j] = xv[(o * a + start) * inner + j];

    if (detail::should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        active_tape<S>()->record([xn, on, outer, inner, len, a, start] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < len * inner; ++j)
                    xn->grad[static_cast<size_t>((o * a + start) * inner + j)] += on->grad[static_cast<size_t>(o * len * inner + j)];
        });
        detail::mark_output(out, true);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void reduce_axis_dims(const TensorT<S>& x, int axis, int64_t& outer, int64_t& n, int64_t& inner, Shape& out_shape) {
    const int r = x.rank();
    if (axis < 0 || axis >= r) throw ShapeMismatch("reduction axis out of range for shape " + shape_str(x.shape()));
    outer = 1;
    inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    n = x.dim(axis);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    out_shape.clear();
    for (int d = 0; d < r; ++d)
        if (d != axis) out_shape.push_back(x.dim(d));
}

template <typename S>
TensorT<S> reduce_op(const TensorT<S>& x, int axis, bool is_mean) {
    int64_t outer, n, inner;
    Shape out_shape;
    reduce_axis_dims(x, axis, outer, n, inner, out_shape);

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    auto ov = out.data();
    auto xv = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (int64_t k = 0; k < n; ++k) acc += static_cast<double>(xv[(o * n + k) * inner + in]);
            ov[o * inner + in] = static_cast<S>(is_mean ? acc / static_cast<double>(n) : acc);
        }

    if (should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        active_tape<S>()->record([xn, on, outer, n, inner, is_mean] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            const S scale = is_mean ? S(1) / static_cast<S>(n) : S(1);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const S g = on->grad[static_cast<size_t>(o * inner + in)] * scale;
                    for (int64_t k = 0; k < n; ++k) xn->grad[static_cast<size_t>((o * n + k) * inner + in)] += g;
                }
        });
        mark_output(out, true);
    }
    return out;
}

} // namespace detail

template <typename S>
TensorT<S> sum(const TensorT<S>& x, int axis) {
    return detail::reduce_op(x, axis, false);
}
template <typename S>
TensorT<S> mean(const TensorT<S>& x, int axis) {
    return detail::reduce_op(x, axis, true);
}

// ---------------------------------------------------------------------------
// softmax / log_softmax
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
TensorT<S> softmax_impl(const TensorT<S>& x, int axis, bool log_form) {
    int64_t outer, n, inner;
    Shape dummy;
    reduce_axis_dims(x, axis, outer, n, inner, dummy);

    TensorT<S> out = TensorT<S>::zeros(x.shape());
    auto ov = out.data();
    auto xv = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < n; ++k) mx = std::max(mx, static_cast<double>(xv[(o * n + k) * inner + in]));
            double denom = 0.0;
            for (int64_t k = 0; k < n; ++k) denom += std::exp(static_cast<double>(xv[(o * n + k) * inner + in]) - mx);
            if (log_form) {
                const double lse = mx + std::log(denom);
                for (int64_t k = 0; k < n; ++k)
                    ov[(o * n + k) * inner + in] = static_cast<S>(static_cast<double>(xv[(o * n + k) * inner + in]) - lse);
            } else {
                for (int64_t k = 0; k < n; ++k)
                    ov[(o * n + k) * inner + in] = static_cast<S>(std::exp(static_cast<double>(xv[(o * n + k) * inner + in]) - mx) / denom);
            }
        }

    if (should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        active_tape<S>()->record([xn, on, outer, n, inner, log_form] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    double dot = 0.0;
                    for (int64_t k = 0; k < n; ++k) {
                        const size_t i = static_cast<size_t>((o * n + k) * inner + in);
                        if (log_form)
                            dot += static_cast<double>(on->grad[i]);
                        else
                            dot += static_cast<double>(on->grad[i]) * static_cast<double>(on->value[i]);
                    }
                    for (int64_t k = 0; k < n; ++k) {
                        const size_t i = static_cast<size_t>((o * n + k) * inner + in);
                        if (log_form) {
                            const double y = std::exp(static_cast<double>(on->value[i]));
                            xn->grad[i] += static_cast<S>(static_cast<double>(on->grad[i]) - y * dot);
                        } else {
                            const double y = static_cast<double>(on->value[i]);
                            xn->grad[i] += static_cast<S>(y * (static_cast<double>(on->grad[i]) - dot));
                        }
                    }
                }
        });
        mark_output(out, true);
    }
    return out;
}

} // namespace detail

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
    return detail::softmax_impl(x, axis, false);
}
template <typename S>
TensorT<S> log_softmax(const TensorT<S>& x, int axis) {
    return detail::softmax_impl(x, axis, true);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x) -> value; bwd(x, y) -> dy/dx. Both evaluated in double.
template <typename S, typename F, typename G>
TensorT<S> unary_op(const TensorT<S>& x, F&& fwd, G&& bwd) {
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    auto ov = out.data();
    auto xv = x.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = static_cast<S>(fwd(static_cast<double>(xv[i])));

    if (should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        auto b = std::forward<G>(bwd);
        active_tape<S>()->record([xn, on, b, n] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            for (int64_t i = 0; i < n; ++i) {
                const double d = b(static_cast<double>(xn->value[static_cast<size_t>(i)]),
                                   static_cast<double>(on->value[static_cast<size_t>(i)]));
                xn->grad[static_cast<size_t>(i)] += static_cast<S>(d * static_cast<double>(on->grad[static_cast<size_t>(i)]));
            }
        });
        mark_output(out, true);
    }
    return out;
}

} // namespace detail

template <typename S>
TensorT<S> exp(const TensorT<S>& x) {
    return detail::unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

template <typename S>
TensorT<S> log(const TensorT<S>& x) {
    return detail::unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// tanh approximation of gelu, the documented variant.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    static constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    static constexpr double a = 0.044715;
    return detail::unary_op(
        x,
        [](double v) {
            const double u = c * (v + a * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](double v, double) {
            const double u = c * (v + a * v * v * v);
            const double t = std::tanh(u);
            const double sech2 = 1.0 - t * t;
            return 0.5 * (1.0 + t) + 0.5 * v * sech2 * c * (1.0 + 3.0 * a * v * v);
        });
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, double c) {
    return detail::unary_op(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, int axis, double eps) {
    int64_t outer, n, inner;
    Shape dummy;
    detail::reduce_axis_dims(x, axis, outer, n, inner, dummy);
    if (gain.numel() != n || bias.numel() != n)
        throw ShapeMismatch("layer_norm gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                            " do not match axis extent " + std::to_string(n));

    TensorT<S> out = TensorT<S>::zeros(x.shape());
    auto ov = out.data();
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    // Per-lane inverse stddev, saved for the backward pass.
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(outer * inner));
    auto mu_all = std::make_shared<std::vector<double>>(static_cast<size_t>(outer * inner));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            double mu = 0.0;
            for (int64_t k = 0; k < n; ++k) mu += static_cast<double>(xv[(o * n + k) * inner + in]);
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (int64_t k = 0; k < n; ++k) {
                const double d = static_cast<double>(xv[(o * n + k) * inner + in]) - mu;
                var += d * d;
            }
            var /= static_cast<double>(n);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*inv_std)[static_cast<size_t>(o * inner + in)] = inv;
            (*mu_all)[static_cast<size_t>(o * inner + in)] = mu;
            for (int64_t k = 0; k < n; ++k) {
                const double xh = (static_cast<double>(xv[(o * n + k) * inner + in]) - mu) * inv;
                ov[(o * n + k) * inner + in] = static_cast<S>(xh * static_cast<double>(gv[k]) + static_cast<double>(bv[k]));
            }
        }

    if (detail::should_record<S>({x.requires_grad(), gain.requires_grad(), bias.requires_grad()})) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        const bool xg = x.requires_grad(), gg = gain.requires_grad(), bg = bias.requires_grad();
        active_tape<S>()->record([xn, gn, bn, on, inv_std, mu_all, outer, n, inner, xg, gg, bg] {
            if (on->grad.empty()) return;
            if (xg && xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            if (gg && gn->grad.empty()) gn->grad.assign(gn->value.size(), S(0));
            if (bg && bn->grad.empty()) bn->grad.assign(bn->value.size(), S(0));
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const double inv = (*inv_std)[static_cast<size_t>(o * inner + in)];
                    const double mu = (*mu_all)[static_cast<size_t>(o * inner + in)];
                    double sum_dyg = 0.0, sum_dyg_xh = 0.0;
                    for (int64_t k = 0; k < n; ++k) {
                        const size_t i = static_cast<size_t>((o * n + k) * inner + in);
                        const double xh = (static_cast<double>(xn->value[i]) - mu) * inv;
                        const double dyg = static_cast<double>(on->grad[i]) * static_cast<double>(gn->value[static_cast<size_t>(k)]);
                        sum_dyg += dyg;
                        sum_dyg_xh += dyg * xh;
                        if (gg) gn->grad[static_cast<size_t>(k)] += static_cast<S>(static_cast<double>(on->grad[i]) * xh);
                        if (bg) bn->grad[static_cast<size_t>(k)] += static_cast<S>(static_cast<double>(on->grad[i]));
                    }
                    if (xg) {
                        const double nn = static_cast<double>(n);
                        for (int64_t k = 0; k < n; ++k) {
                            const size_t i = static_cast<size_t>((o * n + k) * inner + in);
                            const double xh = (static_cast<double>(xn->value[i]) - mu) * inv;
                            const double dyg = static_cast<double>(on->grad[i]) * static_cast<double>(gn->value[static_cast<size_t>(k)]);
                            xn->grad[i] += static_cast<S>(inv * (dyg - sum_dyg / nn - xh * sum_dyg_xh / nn));
                        }
                    }
                }
        });
        detail::mark_output(out, true);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch extraction: [B,H,W,3] -> [B, (H/p)*(W/p), p*p*3]
// ---------------------------------------------------------------------------

// Patch p = py*(W/ps) + px; inside a patch, elements run row-major with the
// channel innermost, matching the input layout.
template <typename S>
TensorT<S> extract_patches(const TensorT<S>& x, int patch) {
    if (x.rank() != 4 || x.dim(3) != 3)
        throw ShapeMismatch("extract_patches expects [B,H,W,3], got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t ps = patch;
    if (ps < 1 || h % ps != 0 || w % ps != 0)
        throw ShapeMismatch("image dims " + shape_str(x.shape()) + " not divisible by patch size " + std::to_string(patch));
    const int64_t gy = h / ps, gx = w / ps;
    const int64_t pd = ps * ps * 3;

    TensorT<S> out = TensorT<S>::zeros({b, gy * gx, pd});
    auto ov = out.data();
    auto xv = x.data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t py = 0; py < gy; ++py)
            for (int64_t px = 0; px < gx; ++px) {
                const int64_t p = py * gx + px;
                for (int64_t dy = 0; dy < ps; ++dy)
                    for (int64_t dx = 0; dx < ps; ++dx)
                        for (int64_t c = 0; c < 3; ++c)
                            ov[(bi * gy * gx + p) * pd + (dy * ps + dx) * 3 + c] =
                                xv[((bi * h + py * ps + dy) * w + px * ps + dx) * 3 + c];
            }

    if (detail::should_record<S>({x.requires_grad()})) {
        auto xn = x.node(), on = out.node();
        active_tape<S>()->record([xn, on, b, h, w, ps, gy, gx, pd] {
            if (on->grad.empty()) return;
            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), S(0));
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t py = 0; py < gy; ++py)
                    for (int64_t px = 0; px < gx; ++px) {
                        const int64_t p = py * gx + px;
                        for (int64_t dy = 0; dy < ps; ++dy)
                            for (int64_t dx = 0; dx < ps; ++dx)
                                for (int64_t c = 0; c < 3; ++c)
                                    xn->grad[static_cast<size_t>(((bi * h + py * ps + dy) * w + px * ps + dx) * 3 + c)] +=
                                        on->grad[static_cast<size_t>((bi * gy * gx + p) * pd + (dy * ps + dx) * 3 + c)];
                    }
        });
        detail::mark_output(out, true);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Seeded tensor fills (counter RNG; see rng.hpp for the stream definition)
// ---------------------------------------------------------------------------

// Element i uses draws 2i and 2i+1 of the stream keyed by `seed`.
template <typename S>
TensorT<S> normal(Shape shape, double mean, double stddev, uint64_t seed) {
    if (stddev < 0) throw InvalidConfig("normal() needs stddev >= 0");
    TensorT<S> t = TensorT<S>::zeros(shape);
    auto v = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double u1 = to_unit_open(counter_hash(seed, static_cast<uint64_t>(2 * i)));
        const double u2 = to_unit(counter_hash(seed, static_cast<uint64_t>(2 * i + 1)));
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        v[i] = static_cast<S>(mean + stddev * z);
    }
    return t;
}

// Element i uses draw i of the stream keyed by `seed`.
template <typename S>
TensorT<S> uniform(Shape shape, double lo, double hi, uint64_t seed) {
    if (lo > hi) throw InvalidConfig("uniform() needs lo <= hi");
    TensorT<S> t = TensorT<S>::zeros(shape);
    auto v = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        v[i] = static_cast<S>(lo + (hi - lo) * to_unit(counter_hash(seed, static_cast<uint64_t>(i))));
    return t;
}

} // namespace clmk
