#include "mvrag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mvrag {

// ---------------------------------------------------------------------------
// GradMode
// ---------------------------------------------------------------------------

namespace {

#if defined(__GLIBC__)
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
}();
#endif

bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::vector<int>& a,
                              const std::vector<int>& b) {
    throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                                shape_str(b));
}

void check_positive_shape(const std::vector<int>& s) {
    for (int d : s)
        if (d <= 0) throw std::invalid_argument("tensor shape must be positive, got " + shape_str(s));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape) : node_(std::make_shared<TensorNode>()) {
    check_positive_shape(shape);
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : node_(std::make_shared<TensorNode>()) {
    check_positive_shape(shape);
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("tensor data size " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal() * stddev;
    return t;
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

int Tensor::dim(int i) const {
    if (i < 0) i += rank();
    return node_->shape.at(static_cast<size_t>(i));
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const auto& s = node_->shape;
    if (idx.size() != s.size()) throw std::invalid_argument("at(): wrong index rank");
    size_t off = 0;
    size_t stride = numel();
    auto it = idx.begin();
    for (size_t i = 0; i < s.size(); ++i, ++it) {
        stride /= static_cast<size_t>(s[i]);
        off += stride * static_cast<size_t>(*it);
    }
    return node_->data[off];
}

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

void Tensor::zero_grad() { node_->clear_grad(); }

Tensor Tensor::detach() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
}

// ---------------------------------------------------------------------------
// autograd graph construction + backward
// ---------------------------------------------------------------------------

Tensor make_op_result(std::vector<int> shape, std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data.resize(shape_numel(node->shape));
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs)
            if (in.defined() && in.node()->requires_grad) needs = true;
    }
    if (needs) {
        node->requires_grad = true;
        for (auto& in : inputs) node->parents.push_back(in.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void Tensor::backward() {
    if (numel() != 1)
        throw std::invalid_argument("backward() without seed requires a scalar tensor, got " +
                                    shape_str(shape()));
    backward(std::vector<double>{1.0});
}

void Tensor::backward(const std::vector<double>& seed) {
    if (!node_->requires_grad)
        throw std::invalid_argument("backward() on a tensor that does not require grad");
    if (seed.size() != numel())
        throw std::invalid_argument("backward() seed size mismatch");

    // Post-order DFS over the recorded graph; deterministic order.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode* p = n->parents[i++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }

    for (TensorNode* n : topo) n->ensure_grad();
    {
        auto& g = node_->grad;
        for (size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    }
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

namespace {

// Accumulate src into dst grad buffer.
inline void axpy(DataVec& dst, const double* src, size_t n, double a = 1.0) {
    for (size_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// GEMM kernels
// ---------------------------------------------------------------------------

namespace {

#if defined(__AVX512F__)

void gemm_nn_kernel(int M, int N, int K, const double* A, const double* B, double* C,
                    double alpha) {
    constexpr int MR = 4, NR = 32;
    int jb = 0;
    for (; jb + NR <= N; jb += NR) {
        int ib = 0;
        for (; ib + MR <= M; ib += MR) {
            __m512d acc[MR][4];
            for (int i = 0; i < MR; ++i)
                for (int j = 0; j < 4; ++j)
                    acc[i][j] = _mm512_loadu_pd(C + (size_t)(ib + i) * N + jb + 8 * j);
            for (int k = 0; k < K; ++k) {
                const double* brow = B + (size_t)k * N + jb;
                __m512d b0 = _mm512_loadu_pd(brow);
                __m512d b1 = _mm512_loadu_pd(brow + 8);
                __m512d b2 = _mm512_loadu_pd(brow + 16);
                __m512d b3 = _mm512_loadu_pd(brow + 24);
                for (int i = 0; i < MR; ++i) {
                    __m512d a = _mm512_set1_pd(alpha * A[(size_t)(ib + i) * K + k]);
                    acc[i][0] = _mm512_fmadd_pd(a, b0, acc[i][0]);
                    acc[i][1] = _mm512_fmadd_pd(a, b1, acc[i][1]);
                    acc[i][2] = _mm512_fmadd_pd(a, b2, acc[i][2]);
                    acc[i][3] = _mm512_fmadd_pd(a, b3, acc[i][3]);
                }
            }
            for (int i = 0; i < MR; ++i)
                for (int j = 0; j < 4; ++j)
                    _mm512_storeu_pd(C + (size_t)(ib + i) * N + jb + 8 * j, acc[i][j]);
        }
        for (; ib < M; ++ib) {
            for (int k = 0; k < K; ++k) {
                double a = alpha * A[(size_t)ib * K + k];
                const double* brow = B + (size_t)k * N + jb;
                double* crow = C + (size_t)ib * N + jb;
                for (int j = 0; j < NR; ++j) crow[j] += a * brow[j];
            }
        }
    }
    // 8-wide tail
    for (; jb + 8 <= N; jb += 8) {
        int ib = 0;
        for (; ib + MR <= M; ib += MR) {
            __m512d acc[MR];
            for (int i = 0; i < MR; ++i) acc[i] = _mm512_loadu_pd(C + (size_t)(ib + i) * N + jb);
            for (int k = 0; k < K; ++k) {
                __m512d b0 = _mm512_loadu_pd(B + (size_t)k * N + jb);
                for (int i = 0; i < MR; ++i)
                    acc[i] = _mm512_fmadd_pd(_mm512_set1_pd(alpha * A[(size_t)(ib + i) * K + k]),
                                             b0, acc[i]);
            }
            for (int i = 0; i < MR; ++i) _mm512_storeu_pd(C + (size_t)(ib + i) * N + jb, acc[i]);
        }
        for (; ib < M; ++ib)
            for (int k = 0; k < K; ++k) {
                double a = alpha * A[(size_t)ib * K + k];
                for (int j = 0; j < 8; ++j) C[(size_t)ib * N + jb + j] += a * B[(size_t)k * N + jb + j];
            }
    }
    // scalar tail
    for (; jb < N; ++jb)
        for (int ib = 0; ib < M; ++ib) {
            double s = 0;
            for (int k = 0; k < K; ++k) s += A[(size_t)ib * K + k] * B[(size_t)k * N + jb];
            C[(size_t)ib * N + jb] += alpha * s;
        }
}

#else

void gemm_nn_kernel(int M, int N, int K, const double* A, const double* B, double* C,
                    double alpha) {
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            double a = alpha * A[(size_t)i * K + k];
            const double* brow = B + (size_t)k * N;
            double* crow = C + (size_t)i * N;
            for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
}

#endif

thread_local std::vector<double> g_pack_buf;

}  // namespace

void gemm_nn(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate,
             double alpha) {
    if (!accumulate) std::memset(C, 0, sizeof(double) * (size_t)M * N);
    gemm_nn_kernel(M, N, K, A, B, C, alpha);
}

namespace {

// dst[c, r] = src[r, c]; cache-blocked.
void transpose_block(const double* src, int R, int C, double* dst) {
    constexpr int TB = 32;
    for (int r0 = 0; r0 < R; r0 += TB)
        for (int c0 = 0; c0 < C; c0 += TB) {
            const int r1 = std::min(R, r0 + TB), c1 = std::min(C, c0 + TB);
            for (int r = r0; r < r1; ++r) {
                const double* s = src + (size_t)r * C;
                for (int c = c0; c < c1; ++c) dst[(size_t)c * R + r] = s[c];
            }
        }
}

thread_local std::vector<double> g_pack_buf2;

}  // namespace

void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate,
             double alpha) {
    // A stored [K, M]; pack K-chunks of A^T and run the nn kernel.
    if (!accumulate) std::memset(C, 0, sizeof(double) * (size_t)M * N);
    constexpr int KB = 256;
    std::vector<double>& at = g_pack_buf;
    at.resize((size_t)M * std::min(K, KB));
    for (int k0 = 0; k0 < K; k0 += KB) {
        const int kb = std::min(KB, K - k0);
        transpose_block(A + (size_t)k0 * M, kb, M, at.data());
        gemm_nn_kernel(M, N, kb, at.data(), B + (size_t)k0 * N, C, alpha);
    }
}

void gemm_nt(int M, int N, int K, const double* A, const double* B, double* C, bool accumulate,
             double alpha) {
    // B stored [N, K]; pack B^T [K, N] once.
    if (!accumulate) std::memset(C, 0, sizeof(double) * (size_t)M * N);
    std::vector<double>& bt = g_pack_buf2;
    bt.resize((size_t)K * N);
    transpose_block(B, N, K, bt.data());
    gemm_nn_kernel(M, N, K, A, bt.data(), C, alpha);
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace {

// Vectorized exp: Cody-Waite range reduction + degree-10 polynomial,
// relative error ~1e-13. Large negative inputs flush to zero, large positive
// saturate to inf, matching how the callers use it.
#if defined(__AVX512F__)

inline __m512d exp8(__m512d x) {
    const __m512d ln2_hi = _mm512_set1_pd(6.93147180369123816490e-01);
    const __m512d ln2_lo = _mm512_set1_pd(1.90821492927058770002e-10);
    const __m512d inv_ln2 = _mm512_set1_pd(1.44269504088896340736);
    const __m512d hi_clip = _mm512_set1_pd(709.0);
    const __m512d lo_clip = _mm512_set1_pd(-745.0);
    __mmask8 lo_mask = _mm512_cmp_pd_mask(x, lo_clip, _CMP_LT_OQ);
    __mmask8 hi_mask = _mm512_cmp_pd_mask(x, hi_clip, _CMP_GT_OQ);
    x = _mm512_min_pd(_mm512_max_pd(x, lo_clip), hi_clip);

    __m512d n = _mm512_roundscale_pd(_mm512_mul_pd(x, inv_ln2), _MM_FROUND_TO_NEAREST_INT);
    __m512d r = _mm512_fnmadd_pd(n, ln2_hi, x);
    r = _mm512_fnmadd_pd(n, ln2_lo, r);

    // exp(r) for |r| <= ln2/2, Horner degree 10
    const double c10 = 1.0 / 3628800.0, c9 = 1.0 / 362880.0, c8 = 1.0 / 40320.0,
                 c7 = 1.0 / 5040.0, c6 = 1.0 / 720.0, c5 = 1.0 / 120.0, c4 = 1.0 / 24.0,
                 c3 = 1.0 / 6.0, c2 = 0.5;
    __m512d p = _mm512_set1_pd(c10);
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c9));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c8));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c7));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c6));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c5));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c4));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c3));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c2));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0));
    p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0));

    // scale by 2^n via exponent arithmetic
    __m512i ni = _mm512_cvtpd_epi64(n);
    __m512i bias = _mm512_add_epi64(ni, _mm512_set1_epi64(1023));
    __m512d scale_f = _mm512_castsi512_pd(_mm512_slli_epi64(bias, 52));
    __m512d y = _mm512_mul_pd(p, scale_f);
    y = _mm512_mask_mov_pd(y, lo_mask, _mm512_setzero_pd());
    y = _mm512_mask_mov_pd(y, hi_mask, _mm512_set1_pd(std::numeric_limits<double>::infinity()));
    return y;
}

inline void exp_vec(const double* x, double* y, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm512_storeu_pd(y + i, exp8(_mm512_loadu_pd(x + i)));
    for (; i < n; ++i) y[i] = std::exp(x[i]);
}

#else

inline void exp_vec(const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

#endif

// sigmoid(x) = 1 / (1 + exp(-x)) into y
inline void sigmoid_vec(const double* x, double* y, size_t n) {
    std::vector<double> neg(n);
    for (size_t i = 0; i < n; ++i) neg[i] = -x[i];
    exp_vec(neg.data(), y, n);
    for (size_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + y[i]);
}

// Broadcast rule: the smaller operand's shape must equal a suffix of the
// larger operand's shape. Returns (big_is_a, repeat_count).
std::pair<bool, size_t> suffix_broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa == sb) return {true, 1};
    const bool a_big = sa.size() >= sb.size();
    const auto& big = a_big ? sa : sb;
    const auto& small = a_big ? sb : sa;
    if (small.size() >= big.size()) shape_error(op, sa, sb);
    if (!std::equal(small.begin(), small.end(), big.end() - small.size())) shape_error(op, sa, sb);
    return {a_big, shape_numel(big) / shape_numel(small)};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    auto [a_big, rep] = suffix_broadcast("add", a, b);
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    const size_t sn = small.numel();
    Tensor out = make_op_result(big.shape(), {a, b}, [an = a.node(), bn = b.node(), a_big,
                                                      sn](TensorNode& n) {
        TensorNode* bign = a_big ? an.get() : bn.get();
        TensorNode* smalln = a_big ? bn.get() : an.get();
        if (bign->requires_grad) {
            bign->ensure_grad();
            axpy(bign->grad, n.grad.data(), n.grad.size());
        }
        if (smalln->requires_grad) {
            smalln->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) smalln->grad[i % sn] += n.grad[i];
        }
    });
    auto& o = out.data();
    const auto& xb = big.data();
    const auto& xs = small.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] = xb[i] + xs[i % sn];
    (void)rep;
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    auto [a_big, rep] = suffix_broadcast("mul", a, b);
    (void)rep;
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    const size_t sn = small.numel();
    Tensor out = make_op_result(
        big.shape(), {a, b}, [an = a.node(), bn = b.node(), a_big, sn](TensorNode& n) {
            TensorNode* bign = a_big ? an.get() : bn.get();
            TensorNode* smalln = a_big ? bn.get() : an.get();
            if (bign->requires_grad) {
                bign->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i)
                    bign->grad[i] += n.grad[i] * smalln->data[i % sn];
            }
            if (smalln->requires_grad) {
                smalln->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i)
                    smalln->grad[i % sn] += n.grad[i] * bign->data[i];
            }
        });
    auto& o = out.data();
    const auto& xb = big.data();
    const auto& xs = small.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] = xb[i] * xs[i % sn];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = make_op_result(a.shape(), {a}, [an = a.node(), s](TensorNode& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        axpy(an->grad, n.grad.data(), n.grad.size(), s);
    });
    const auto& x = a.data();
    auto& o = out.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] = s * x[i];
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = make_op_result(a.shape(), {a}, [an = a.node()](TensorNode& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        axpy(an->grad, n.grad.data(), n.grad.size());
    });
    const auto& x = a.data();
    auto& o = out.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] = x[i] + s;
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = make_op_result(x.shape(), {x}, [xn = x.node()](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::vector<double> sg(n.grad.size());
        sigmoid_vec(xn->data.data(), sg.data(), sg.size());
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double v = xn->data[i];
            xn->grad[i] += n.grad[i] * sg[i] * (1.0 + v * (1.0 - sg[i]));
        }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    sigmoid_vec(xd.data(), o.data(), o.size());
    for (size_t i = 0; i < o.size(); ++i) o[i] *= xd[i];
    return out;
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out = make_op_result(x.shape(), {x}, [xn = x.node()](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double v = xn->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += n.grad[i] * (cdf + v * pdf);
        }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * 0.5 * (1.0 + std::erf(xd[i] * inv_sqrt2));
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    // One dimension may be -1 (inferred).
    size_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw std::invalid_argument("reshape: multiple -1 dims");
            infer = static_cast<int>(i);
        } else {
            known *= static_cast<size_t>(shape[i]);
        }
    }
    if (infer >= 0) shape[infer] = static_cast<int>(x.numel() / known);
    if (shape_numel(shape) != x.numel())
        shape_error("reshape", x.shape(), shape);
    Tensor out = make_op_result(shape, {x}, [xn = x.node()](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        axpy(xn->grad, n.grad.data(), n.grad.size());
    });
    out.data() = x.data();
    return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const auto& s0 = xs[0].shape();
    const int rank = static_cast<int>(s0.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
    std::vector<int> out_shape = s0;
    int axis_total = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        if (static_cast<int>(s.size()) != rank) shape_error("concat", s0, s);
        for (int i = 0; i < rank; ++i)
            if (i != axis && s[i] != s0[i]) shape_error("concat", s0, s);
        axis_total += s[axis];
    }
    out_shape[axis] = axis_total;

    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s0[i]);
    for (int i = axis + 1; i < rank; ++i) inner *= static_cast<size_t>(s0[i]);

    std::vector<Tensor> inputs = xs;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> axis_sizes;
    for (const auto& x : xs) {
        nodes.push_back(x.node());
        axis_sizes.push_back(x.shape()[axis]);
    }
    Tensor out = make_op_result(
        out_shape, inputs, [nodes, axis_sizes, outer, inner, axis_total](TensorNode& n) {
            size_t off = 0;
            for (size_t p = 0; p < nodes.size(); ++p) {
                auto& pn = *nodes[p];
                const size_t piece = static_cast<size_t>(axis_sizes[p]) * inner;
                if (pn.requires_grad) {
                    pn.ensure_grad();
                    for (size_t o = 0; o < outer; ++o) {
                        const double* src = n.grad.data() + (o * axis_total) * inner + off;
                        double* dst = pn.grad.data() + o * piece;
                        for (size_t i = 0; i < piece; ++i) dst[i] += src[i];
                    }
                }
                off += piece;
            }
        });
    auto& o = out.data();
    size_t off = 0;
    for (const auto& x : xs) {
        const size_t piece = static_cast<size_t>(x.shape()[axis]) * inner;
        for (size_t ou = 0; ou < outer; ++ou)
            std::memcpy(o.data() + (ou * static_cast<size_t>(axis_total)) * inner + off,
                        x.data().data() + ou * piece, piece * sizeof(double));
        off += piece;
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    const auto& s = x.shape();
    const int rank = static_cast<int>(s.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank || start < 0 || len <= 0 || start + len > s[axis])
        throw std::invalid_argument("slice: bad range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") on axis " +
                                    std::to_string(axis) + " of " + shape_str(s));
    std::vector<int> out_shape = s;
    out_shape[axis] = len;
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[i]);
    for (int i = axis + 1; i < rank; ++i) inner *= static_cast<size_t>(s[i]);
    const size_t axis_n = static_cast<size_t>(s[axis]);

    Tensor out = make_op_result(out_shape, {x},
                                [xn = x.node(), outer, inner, axis_n, start, len](TensorNode& n) {
                                    if (!xn->requires_grad) return;
                                    xn->ensure_grad();
                                    for (size_t o = 0; o < outer; ++o) {
                                        const double* src = n.grad.data() + o * len * inner;
                                        double* dst = xn->grad.data() + (o * axis_n + start) * inner;
                                        for (size_t i = 0; i < static_cast<size_t>(len) * inner; ++i)
                                            dst[i] += src[i];
                                    }
                                });
    auto& o = out.data();
    for (size_t ou = 0; ou < outer; ++ou)
        std::memcpy(o.data() + ou * static_cast<size_t>(len) * inner,
                    x.data().data() + (ou * axis_n + static_cast<size_t>(start)) * inner,
                    static_cast<size_t>(len) * inner * sizeof(double));
    return out;
}

Tensor swap_axes_12(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("swap_axes_12 expects rank-4, got " + shape_str(s));
    const int A = s[0], B = s[1], C = s[2], D = s[3];
    auto fwd_copy = [=](const double* src, double* dst) {
        for (int a = 0; a < A; ++a)
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    std::memcpy(dst + (((size_t)a * C + c) * B + b) * D,
                                src + (((size_t)a * B + b) * C + c) * D, sizeof(double) * D);
    };
    Tensor out = make_op_result({A, C, B, D}, {x}, [xn = x.node(), A, B, C, D](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int a = 0; a < A; ++a)
            for (int c = 0; c < C; ++c)
                for (int b = 0; b < B; ++b) {
                    const double* src = n.grad.data() + (((size_t)a * C + c) * B + b) * D;
                    double* dst = xn->grad.data() + (((size_t)a * B + b) * C + c) * D;
                    for (int d = 0; d < D; ++d) dst[d] += src[d];
                }
    });
    fwd_copy(x.data().data(), out.data().data());
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
    Tensor out = make_op_result({1}, {x}, [xn = x.node()](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double g = n.grad[0];
        for (auto& v : xn->grad) v += g;
    });
    double s = 0;
    for (double v : x.data()) s += v;
    out.data()[0] = s;
    return out;
}

Tensor mean_all(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = make_op_result({1}, {x}, [xn = x.node(), inv](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double g = n.grad[0] * inv;
        for (auto& v : xn->grad) v += g;
    });
    double s = 0;
    for (double v : x.data()) s += v;
    out.data()[0] = s * inv;
    return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
    const auto& s = x.shape();
    const int rank = static_cast<int>(s.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw std::invalid_argument("mean_axis: bad axis");
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[i]);
    for (int i = axis + 1; i < rank; ++i) inner *= static_cast<size_t>(s[i]);
    const size_t n_axis = static_cast<size_t>(s[axis]);
    std::vector<int> out_shape;
    for (int i = 0; i < rank; ++i)
        if (i != axis) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape = {1};
    const double inv = 1.0 / static_cast<double>(n_axis);

    Tensor out = make_op_result(out_shape, {x},
                                [xn = x.node(), outer, inner, n_axis, inv](TensorNode& n) {
                                    if (!xn->requires_grad) return;
                                    xn->ensure_grad();
                                    for (size_t o = 0; o < outer; ++o)
                                        for (size_t j = 0; j < n_axis; ++j) {
                                            const double* g = n.grad.data() + o * inner;
                                            double* dst = xn->grad.data() + (o * n_axis + j) * inner;
                                            for (size_t i = 0; i < inner; ++i) dst[i] += g[i] * inv;
                                        }
                                });
    auto& o = out.data();
    const auto& xd = x.data();
    for (size_t ou = 0; ou < outer; ++ou)
        for (size_t i = 0; i < inner; ++i) {
            double acc = 0;
            for (size_t j = 0; j < n_axis; ++j) acc += xd[(ou * n_axis + j) * inner + i];
            o[ou * inner + i] = acc * inv;
        }
    return out;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace {

struct MatDims {
    size_t batch;  // broadcast-resolved batch count
    int M, N, K;
    bool a_batched, b_batched;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2 || sa.size() > 4 || sb.size() > 4)
        shape_error("matmul", sa, sb);
    const int ar = sa[sa.size() - 2], ac = sa[sa.size() - 1];
    const int br = sb[sb.size() - 2], bc = sb[sb.size() - 1];
    const int M = ta ? ac : ar;
    const int Ka = ta ? ar : ac;
    const int Kb = tb ? bc : br;
    const int N = tb ? br : bc;
    if (Ka != Kb) shape_error("matmul inner dims", sa, sb);
    std::vector<int> lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
    size_t batch = 1;
    bool a_batched = !lead_a.empty(), b_batched = !lead_b.empty();
    if (a_batched && b_batched) {
        if (lead_a != lead_b) shape_error("matmul leading dims", sa, sb);
        batch = shape_numel(lead_a);
    } else if (a_batched) {
        batch = shape_numel(lead_a);
    } else if (b_batched) {
        batch = shape_numel(lead_b);
    }
    return {batch, M, N, Ka, a_batched, b_batched};
}

void run_gemm(bool ta, bool tb, int M, int N, int K, const double* A, const double* B, double* C,
              bool acc, double alpha = 1.0) {
    if (!ta && !tb) gemm_nn(M, N, K, A, B, C, acc, alpha);
    else if (ta && !tb) gemm_tn(M, N, K, A, B, C, acc, alpha);
    else if (!ta && tb) gemm_nt(M, N, K, A, B, C, acc, alpha);
    else {
        // A^T B^T: rare; materialize B^T then tn path.
        std::vector<double> bt((size_t)K * N);
        for (int j = 0; j < N; ++j)
            for (int k = 0; k < K; ++k) bt[(size_t)k * N + j] = B[(size_t)j * K + k];
        gemm_tn(M, N, K, A, bt.data(), C, acc, alpha);
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const MatDims d = matmul_dims(a, b, trans_a, trans_b);
    std::vector<int> out_shape;
    const auto& lead_src = d.a_batched ? a.shape() : b.shape();
    if (d.a_batched || d.b_batched)
        out_shape.assign(lead_src.begin(), lead_src.end() - 2);
    out_shape.push_back(d.M);
    out_shape.push_back(d.N);

    Tensor out = make_op_result(out_shape, {a, b}, [an = a.node(), bn = b.node(), d, trans_a,
                                                    trans_b](TensorNode& n) {
        const size_t a_step = d.a_batched ? (size_t)d.M * d.K : 0;
        const size_t b_step = d.b_batched ? (size_t)d.K * d.N : 0;
        const size_t c_step = (size_t)d.M * d.N;
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (size_t i = 0; i < d.batch; ++i) {
            const double* G = n.grad.data() + i * c_step;
            const double* A = an->data.data() + i * a_step;
            const double* B = bn->data.data() + i * b_step;
            if (an->requires_grad) {
                double* dA = an->grad.data() + i * a_step;
                if (!trans_a) {
                    if (!trans_b) gemm_nt(d.M, d.K, d.N, G, B, dA, true);  // G * B^T
                    else gemm_nn(d.M, d.K, d.N, G, B, dA, true);           // G * B_store
                } else {
                    if (!trans_b) gemm_nt(d.K, d.M, d.N, B, G, dA, true);  // B * G^T
                    else {
                        // dA_store[K,M] += B_store^T * G^T; materialize transposes.
                        std::vector<double> bt((size_t)d.K * d.N), gt((size_t)d.N * d.M);
                        for (int r = 0; r < d.N; ++r)
                            for (int c = 0; c < d.K; ++c) bt[(size_t)c * d.N + r] = B[(size_t)r * d.K + c];
                        for (int r = 0; r < d.M; ++r)
                            for (int c = 0; c < d.N; ++c) gt[(size_t)c * d.M + r] = G[(size_t)r * d.N + c];
                        gemm_nn(d.K, d.M, d.N, bt.data(), gt.data(), dA, true);
                    }
                }
            }
            if (bn->requires_grad) {
                double* dB = bn->grad.data() + i * b_step;
                if (!trans_b) {
                    if (!trans_a) gemm_tn(d.K, d.N, d.M, A, G, dB, true);  // A^T * G
                    else gemm_nn(d.K, d.N, d.M, A, G, dB, true);           // A_store * G
                } else {
                    if (!trans_a) gemm_tn(d.N, d.K, d.M, G, A, dB, true);  // G^T * A
                    else {
                        // dB_store[N,K] += (A_store * G)^T
                        std::vector<double> tmp((size_t)d.K * d.N, 0.0);
                        gemm_nn(d.K, d.N, d.M, A, G, tmp.data(), false);
                        for (int r = 0; r < d.N; ++r)
                            for (int c = 0; c < d.K; ++c) dB[(size_t)r * d.K + c] += tmp[(size_t)c * d.N + r];
                    }
                }
            }
        }
    });

    const size_t a_step = d.a_batched ? (size_t)d.M * d.K : 0;
    const size_t b_step = d.b_batched ? (size_t)d.K * d.N : 0;
    const size_t c_step = (size_t)d.M * d.N;
    for (size_t i = 0; i < d.batch; ++i)
        run_gemm(trans_a, trans_b, d.M, d.N, d.K, a.data().data() + i * a_step,
                 b.data().data() + i * b_step, out.data().data() + i * c_step, false);
    return out;
}

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sw.size() != 2 || sx.empty() || sx.back() != sw[0])
        shape_error("linear", sx, sw);
    const int din = sw[0], dout = sw[1];
    const int M = static_cast<int>(x.numel() / static_cast<size_t>(din));
    std::vector<int> out_shape(sx.begin(), sx.end() - 1);
    out_shape.push_back(dout);

    std::vector<Tensor> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    std::shared_ptr<TensorNode> bn = bias ? bias->node() : nullptr;

    Tensor out = make_op_result(out_shape, inputs,
                                [xn = x.node(), wn = w.node(), bn, M, din, dout](TensorNode& n) {
                                    const double* G = n.grad.data();
                                    if (xn->requires_grad) {
                                        xn->ensure_grad();
                                        gemm_nt(M, din, dout, G, wn->data.data(), xn->grad.data(), true);
                                    }
                                    if (wn->requires_grad) {
                                        wn->ensure_grad();
                                        gemm_tn(din, dout, M, xn->data.data(), G, wn->grad.data(), true);
                                    }
                                    if (bn && bn->requires_grad) {
                                        bn->ensure_grad();
                                        for (int i = 0; i < M; ++i) {
                                            const double* g = G + (size_t)i * dout;
                                            for (int j = 0; j < dout; ++j) bn->grad[j] += g[j];
                                        }
                                    }
                                });
    auto& o = out.data();
    if (bias) {
        const auto& bd = bias->data();
        for (int i = 0; i < M; ++i) std::memcpy(o.data() + (size_t)i * dout, bd.data(), sizeof(double) * dout);
        gemm_nn(M, dout, din, x.data().data(), w.data().data(), o.data(), true);
    } else {
        gemm_nn(M, dout, din, x.data().data(), w.data().data(), o.data(), false);
    }
    return out;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (b.shape() != std::vector<int>{w.shape()[1]}) shape_error("linear bias", b.shape(), w.shape());
    return linear_impl(x, w, &b);
}

Tensor linear_nobias(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace {

void softmax_rows(const double* x, double* y, size_t rows, size_t cols) {
    std::vector<double> shifted(cols);
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double mx = xr[0];
        for (size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        for (size_t c = 0; c < cols; ++c) shifted[c] = xr[c] - mx;
        exp_vec(shifted.data(), yr, cols);
        double sum = 0;
        for (size_t c = 0; c < cols; ++c) sum += yr[c];
        const double inv = 1.0 / sum;
        for (size_t c = 0; c < cols; ++c) yr[c] *= inv;
    }
}

// dz = y .* (dy - rowsum(dy .* y))
void softmax_backward_rows(const double* y, const double* dy, double* dz, size_t rows, size_t cols) {
    for (size_t r = 0; r < rows; ++r) {
        const double* yr = y + r * cols;
        const double* gr = dy + r * cols;
        double* zr = dz + r * cols;
        double dot = 0;
        for (size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
        for (size_t c = 0; c < cols; ++c) zr[c] = yr[c] * (gr[c] - dot);
    }
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) {
    const auto& s = x.shape();
    if (s.empty() || s.back() <= 0) throw std::invalid_argument("softmax_lastdim: empty last dim");
    const size_t cols = static_cast<size_t>(s.back());
    const size_t rows = x.numel() / cols;
    Tensor out = make_op_result(s, {x}, [xn = x.node(), rows, cols](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::vector<double> dz(n.data.size());
        softmax_backward_rows(n.data.data(), n.grad.data(), dz.data(), rows, cols);
        axpy(xn->grad, dz.data(), dz.size());
    });
    softmax_rows(x.data().data(), out.data().data(), rows, cols);
    return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
    const auto& s = x.shape();
    if (s.empty() || s.back() <= 0) throw std::invalid_argument("log_softmax_lastdim: empty last dim");
    const size_t cols = static_cast<size_t>(s.back());
    const size_t rows = x.numel() / cols;
    Tensor out = make_op_result(s, {x}, [xn = x.node(), rows, cols](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::vector<double> ey(cols);
        for (size_t r = 0; r < rows; ++r) {
            const double* yr = n.data.data() + r * cols;
            const double* gr = n.grad.data() + r * cols;
            double* dst = xn->grad.data() + r * cols;
            double gsum = 0;
            for (size_t c = 0; c < cols; ++c) gsum += gr[c];
            exp_vec(yr, ey.data(), cols);
            for (size_t c = 0; c < cols; ++c) dst[c] += gr[c] - ey[c] * gsum;
        }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    std::vector<double> shifted(cols), ex(cols);
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * cols;
        double* yr = o.data() + r * cols;
        double mx = xr[0];
        for (size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        for (size_t c = 0; c < cols; ++c) shifted[c] = xr[c] - mx;
        exp_vec(shifted.data(), ex.data(), cols);
        double sum = 0;
        for (size_t c = 0; c < cols; ++c) sum += ex[c];
        const double lse = mx + std::log(sum);
        for (size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
    }
    return out;
}

// ---------------------------------------------------------------------------
// fused attention
// ---------------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    const auto& sq = q.shape();
    const auto& sk = k.shape();
    const auto& sv = v.shape();
    if (sq.size() != 3 || sk.size() != 3 || sv.size() != 3 || sq[0] != sk[0] || sq[0] != sv[0] ||
        sq[2] != sk[2] || sk[1] != sv[1])
        throw std::invalid_argument("attention: expected q [B,Lq,d], k [B,Lk,d], v [B,Lk,dv], got " +
                                    shape_str(sq) + " " + shape_str(sk) + " " + shape_str(sv));
    const int B = sq[0], Lq = sq[1], d = sq[2], Lk = sk[1], dv = sv[2];
    if (d <= 0) throw std::invalid_argument("attention: d must be positive");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor out = make_op_result(
        {B, Lq, dv}, {q, k, v},
        [qn = q.node(), kn = k.node(), vn = v.node(), B, Lq, Lk, d, dv,
         inv_sqrt_d](TensorNode& n) {
            // Recompute attention weights per slice; only q, k, v were kept.
            std::vector<double> S((size_t)Lq * Lk), dS((size_t)Lq * Lk), dY((size_t)Lq * Lk);
            const bool need_q = qn->requires_grad, need_k = kn->requires_grad,
                       need_v = vn->requires_grad;
            if (need_q) qn->ensure_grad();
            if (need_k) kn->ensure_grad();
            if (need_v) vn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const double* Q = qn->data.data() + (size_t)b * Lq * d;
                const double* K = kn->data.data() + (size_t)b * Lk * d;
                const double* V = vn->data.data() + (size_t)b * Lk * dv;
                const double* G = n.grad.data() + (size_t)b * Lq * dv;
                gemm_nt(Lq, Lk, d, Q, K, S.data(), false, inv_sqrt_d);
                softmax_rows(S.data(), S.data(), Lq, Lk);
                if (need_v)
                    gemm_tn(Lk, dv, Lq, S.data(), G, vn->grad.data() + (size_t)b * Lk * dv, true);
                if (need_q || need_k) {
                    gemm_nt(Lq, Lk, dv, G, V, dY.data(), false);
                    softmax_backward_rows(S.data(), dY.data(), dS.data(), Lq, Lk);
                    if (need_q)
                        gemm_nn(Lq, d, Lk, dS.data(), K, qn->grad.data() + (size_t)b * Lq * d, true,
                                inv_sqrt_d);
                    if (need_k)
                        gemm_tn(Lk, d, Lq, dS.data(), Q, kn->grad.data() + (size_t)b * Lk * d, true,
                                inv_sqrt_d);
                }
            }
        });

    std::vector<double> S((size_t)Lq * Lk);
    for (int b = 0; b < B; ++b) {
        const double* Q = q.data().data() + (size_t)b * Lq * d;
        const double* K = k.data().data() + (size_t)b * Lk * d;
        const double* V = v.data().data() + (size_t)b * Lk * dv;
        double* O = out.data().data() + (size_t)b * Lq * dv;
        gemm_nt(Lq, Lk, d, Q, K, S.data(), false, inv_sqrt_d);
        softmax_rows(S.data(), S.data(), Lq, Lk);
        gemm_nn(Lq, dv, Lk, S.data(), V, O, false);
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace {

// Shared norm core: groups of `gsize` contiguous stats-elements; x viewed as
// [rows, gsize] where each row is one normalization group. gamma/beta indexed
// by a per-element channel map.
struct NormSaved {
    std::vector<double> mean, inv_std;
};

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto& s = x.shape();
    const int C = s.back();
    if (gamma.shape() != std::vector<int>{C} || beta.shape() != std::vector<int>{C})
        shape_error("layer_norm affine", gamma.shape(), {C});
    const size_t rows = x.numel() / static_cast<size_t>(C);
    auto saved = std::make_shared<NormSaved>();
    saved->mean.resize(rows);
    saved->inv_std.resize(rows);

    Tensor out = make_op_result(
        s, {x, gamma, beta},
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), saved, rows, C](TensorNode& n) {
            const bool need_x = xn->requires_grad;
            if (need_x) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = xn->data.data() + r * C;
                const double* g = n.grad.data() + r * C;
                const double mu = saved->mean[r], is = saved->inv_std[r];
                double sum_gg = 0, sum_ggx = 0;
                for (int c = 0; c < C; ++c) {
                    const double xhat = (xr[c] - mu) * is;
                    const double gg = g[c] * gn->data[c];
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                    if (gn->requires_grad) gn->grad[c] += g[c] * xhat;
                    if (bn->requires_grad) bn->grad[c] += g[c];
                }
                if (need_x) {
                    const double inv_n = 1.0 / C;
                    double* dx = xn->grad.data() + r * C;
                    for (int c = 0; c < C; ++c) {
                        const double xhat = (xr[c] - mu) * is;
                        const double gg = g[c] * gn->data[c];
                        dx[c] += is * (gg - inv_n * sum_gg - xhat * inv_n * sum_ggx);
                    }
                }
            }
        });

    const auto& xd = x.data();
    auto& o = out.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * C;
        double* yr = o.data() + r * C;
        double mu = 0;
        for (int c = 0; c < C; ++c) mu += xr[c];
        mu /= C;
        double var = 0;
        for (int c = 0; c < C; ++c) {
            const double dx = xr[c] - mu;
            var += dx * dx;
        }
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        saved->mean[r] = mu;
        saved->inv_std[r] = is;
        for (int c = 0; c < C; ++c) yr[c] = (xr[c] - mu) * is * gd[c] + bd[c];
    }
    return out;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    const auto& s = x.shape();
    const int C = s.back();
    if (C % groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(C) +
                                    " not divisible by groups " + std::to_string(groups));
    if (gamma.shape() != std::vector<int>{C} || beta.shape() != std::vector<int>{C})
        shape_error("group_norm affine", gamma.shape(), {C});
    const int B = s[0];
    const size_t hw = x.numel() / (static_cast<size_t>(B) * C);
    const int gc = C / groups;  // channels per group
    const size_t rows = static_cast<size_t>(B) * groups;
    auto saved = std::make_shared<NormSaved>();
    saved->mean.resize(rows);
    saved->inv_std.resize(rows);

    Tensor out = make_op_result(
        s, {x, gamma, beta},
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), saved, B, hw, C, groups,
         gc](TensorNode& n) {
            const bool need_x = xn->requires_grad;
            if (need_x) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            const double inv_m = 1.0 / (static_cast<double>(hw) * gc);
            for (int b = 0; b < B; ++b)
                for (int g = 0; g < groups; ++g) {
                    const size_t row = static_cast<size_t>(b) * groups + g;
                    const double mu = saved->mean[row], is = saved->inv_std[row];
                    double sum_gg = 0, sum_ggx = 0;
                    for (size_t p = 0; p < hw; ++p) {
                        const size_t base = (static_cast<size_t>(b) * hw + p) * C + g * gc;
                        const double* xr = xn->data.data() + base;
                        const double* gr = n.grad.data() + base;
                        for (int c = 0; c < gc; ++c) {
                            const double xhat = (xr[c] - mu) * is;
                            const double gg = gr[c] * gn->data[g * gc + c];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                            if (gn->requires_grad) gn->grad[g * gc + c] += gr[c] * xhat;
                            if (bn->requires_grad) bn->grad[g * gc + c] += gr[c];
                        }
                    }
                    if (need_x) {
                        for (size_t p = 0; p < hw; ++p) {
                            const size_t base = (static_cast<size_t>(b) * hw + p) * C + g * gc;
                            const double* xr = xn->data.data() + base;
                            const double* gr = n.grad.data() + base;
                            double* dx = xn->grad.data() + base;
                            for (int c = 0; c < gc; ++c) {
                                const double xhat = (xr[c] - mu) * is;
                                const double gg = gr[c] * gn->data[g * gc + c];
                                dx[c] += is * (gg - inv_m * sum_gg - xhat * inv_m * sum_ggx);
                            }
                        }
                    }
                }
        });

    const auto& xd = x.data();
    auto& o = out.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
            double mu = 0;
            for (size_t p = 0; p < hw; ++p) {
                const double* xr = xd.data() + (static_cast<size_t>(b) * hw + p) * C + g * gc;
                for (int c = 0; c < gc; ++c) mu += xr[c];
            }
            const double m = static_cast<double>(hw) * gc;
            mu /= m;
            double var = 0;
            for (size_t p = 0; p < hw; ++p) {
                const double* xr = xd.data() + (static_cast<size_t>(b) * hw + p) * C + g * gc;
                for (int c = 0; c < gc; ++c) {
                    const double dx = xr[c] - mu;
                    var += dx * dx;
                }
            }
            var /= m;
            const double is = 1.0 / std::sqrt(var + eps);
            const size_t row = static_cast<size_t>(b) * groups + g;
            saved->mean[row] = mu;
            saved->inv_std[row] = is;
            for (size_t p = 0; p < hw; ++p) {
                const size_t base = (static_cast<size_t>(b) * hw + p) * C + g * gc;
                const double* xr = xd.data() + base;
                double* yr = o.data() + base;
                for (int c = 0; c < gc; ++c)
                    yr[c] = (xr[c] - mu) * is * gd[g * gc + c] + bd[g * gc + c];
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// embedding
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::vector<int> id_shape) {
    const auto& st = table.shape();
    if (st.size() != 2) throw std::invalid_argument("embedding: table must be [V, d]");
    if (shape_numel(id_shape) != ids.size())
        throw std::invalid_argument("embedding: id_shape mismatch");
    const int V = st[0], d = st[1];
    for (int id : ids)
        if (id < 0 || id >= V)
            throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range [0," +
                                        std::to_string(V) + ")");
    std::vector<int> out_shape = id_shape;
    out_shape.push_back(d);
    Tensor out = make_op_result(out_shape, {table}, [tn = table.node(), ids, d](TensorNode& n) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const double* g = n.grad.data() + i * d;
            double* dst = tn->grad.data() + static_cast<size_t>(ids[i]) * d;
            for (int c = 0; c < d; ++c) dst[c] += g[c];
        }
    });
    auto& o = out.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(o.data() + i * d, table.data().data() + static_cast<size_t>(ids[i]) * d,
                    sizeof(double) * d);
    return out;
}

// ---------------------------------------------------------------------------
// conv / pooling / resizing (channels-last)
// ---------------------------------------------------------------------------

namespace {

// im2col for one image, channels-last, k=3, pad=1. col row y*W+x holds the
// 3x3xC neighborhood ordered (dy, dx, c).
void im2col3(const double* x, int H, int W, int C, double* col) {
    const int KC = 3 * C;
    for (int y = 0; y < H; ++y)
        for (int dy = 0; dy < 3; ++dy) {
            const int yy = y + dy - 1;
            double* crow = col + ((size_t)y * W) * (3 * KC) + dy * KC;
            if (yy < 0 || yy >= H) {
                for (int xx = 0; xx < W; ++xx)
                    std::memset(crow + (size_t)xx * 3 * KC, 0, sizeof(double) * KC);
                continue;
            }
            const double* xrow = x + (size_t)yy * W * C;
            for (int xx = 0; xx < W; ++xx) {
                double* dst = crow + (size_t)xx * 3 * KC;
                const int x0 = xx - 1;
                if (x0 >= 0 && x0 + 2 < W) {
                    std::memcpy(dst, xrow + (size_t)x0 * C, sizeof(double) * KC);
                } else {
                    for (int dx = 0; dx < 3; ++dx) {
                        const int xs = x0 + dx;
                        if (xs < 0 || xs >= W) std::memset(dst + dx * C, 0, sizeof(double) * C);
                        else std::memcpy(dst + dx * C, xrow + (size_t)xs * C, sizeof(double) * C);
                    }
                }
            }
        }
}

// Scatter-add of a column gradient back to image layout.
void col2im3_add(const double* col, int H, int W, int C, double* dx) {
    const int KC = 3 * C;
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
            const double* crow = col + ((size_t)y * W + xx) * 3 * KC;
            for (int dy = 0; dy < 3; ++dy) {
                const int yy = y + dy - 1;
                if (yy < 0 || yy >= H) continue;
                for (int dx_ = 0; dx_ < 3; ++dx_) {
                    const int xs = xx + dx_ - 1;
                    if (xs < 0 || xs >= W) continue;
                    const double* src = crow + dy * KC + dx_ * C;
                    double* dst = dx + ((size_t)yy * W + xs) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
            }
        }
}

}  // namespace

Tensor add_bias_hw(const Tensor& x, const Tensor& e) {
    const auto& sx = x.shape();
    const auto& se = e.shape();
    if (sx.size() != 4 || se.size() != 2 || sx[0] != se[0] || sx[3] != se[1])
        shape_error("add_bias_hw", sx, se);
    const int B = sx[0], HW = sx[1] * sx[2], C = sx[3];
    Tensor out = make_op_result(sx, {x, e}, [xn = x.node(), en = e.node(), B, HW, C](TensorNode& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            axpy(xn->grad, n.grad.data(), n.grad.size());
        }
        if (en->requires_grad) {
            en->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int p = 0; p < HW; ++p) {
                    const double* g = n.grad.data() + ((size_t)b * HW + p) * C;
                    double* dst = en->grad.data() + (size_t)b * C;
                    for (int c = 0; c < C; ++c) dst[c] += g[c];
                }
        }
    });
    const auto& xd = x.data();
    const auto& ed = e.data();
    auto& o = out.data();
    for (int b = 0; b < B; ++b)
        for (int p = 0; p < HW; ++p) {
            const double* xr = xd.data() + ((size_t)b * HW + p) * C;
            const double* er = ed.data() + (size_t)b * C;
            double* orow = o.data() + ((size_t)b * HW + p) * C;
            for (int c = 0; c < C; ++c) orow[c] = xr[c] + er[c];
        }
    return out;
}

Tensor repeat_interleave0(const Tensor& x, int times) {
    const auto& s = x.shape();
    if (s.size() < 2 || times < 1)
        throw std::invalid_argument("repeat_interleave0: bad arguments for " + shape_str(s));
    const int B = s[0];
    const size_t row = x.numel() / static_cast<size_t>(B);
    std::vector<int> out_shape = s;
    out_shape[0] = B * times;
    Tensor out = make_op_result(out_shape, {x}, [xn = x.node(), B, times, row](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < times; ++t) {
                const double* g = n.grad.data() + ((size_t)b * times + t) * row;
                double* dst = xn->grad.data() + (size_t)b * row;
                for (size_t i = 0; i < row; ++i) dst[i] += g[i];
            }
    });
    auto& o = out.data();
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < times; ++t)
            std::memcpy(o.data() + ((size_t)b * times + t) * row, x.data().data() + (size_t)b * row,
                        row * sizeof(double));
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int k) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 4) throw std::invalid_argument("conv2d: x must be [B,H,W,C], got " + shape_str(sx));
    if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
    const int B = sx[0], H = sx[1], W = sx[2], Cin = sx[3];
    if (sw.size() != 2 || sw[0] != k * k * Cin)
        shape_error("conv2d weight", sw, {k * k * Cin, -1});
    const int Cout = sw[1];
    if (b.shape() != std::vector<int>{Cout}) shape_error("conv2d bias", b.shape(), {Cout});

    if (k == 1) {
        Tensor flat = reshape(x, {B * H * W, Cin});
        Tensor y = linear(flat, w, b);
        return reshape(y, {B, H, W, Cout});
    }

    const int HW = H * W;
    const int K = 9 * Cin;
    Tensor out = make_op_result(
        {B, H, W, Cout}, {x, w, b},
        [xn = x.node(), wn = w.node(), bn = b.node(), B, H, W, Cin, Cout, HW, K](TensorNode& n) {
            std::vector<double> col((size_t)HW * K);
            std::vector<double> dcol;
            const bool need_x = xn->requires_grad, need_w = wn->requires_grad,
                       need_b = bn->requires_grad;
            if (need_x) {
                xn->ensure_grad();
                dcol.resize((size_t)HW * K);
            }
            if (need_w) wn->ensure_grad();
            if (need_b) bn->ensure_grad();
            for (int img = 0; img < B; ++img) {
                const double* G = n.grad.data() + (size_t)img * HW * Cout;
                if (need_w || need_x) im2col3(xn->data.data() + (size_t)img * HW * Cin, H, W, Cin, col.data());
                if (need_w) gemm_tn(K, Cout, HW, col.data(), G, wn->grad.data(), true);
                if (need_x) {
                    gemm_nt(HW, K, Cout, G, wn->data.data(), dcol.data(), false);
                    col2im3_add(dcol.data(), H, W, Cin, xn->grad.data() + (size_t)img * HW * Cin);
                }
                if (need_b)
                    for (int i = 0; i < HW; ++i) {
                        const double* g = G + (size_t)i * Cout;
                        for (int c = 0; c < Cout; ++c) bn->grad[c] += g[c];
                    }
            }
        });

    std::vector<double> col((size_t)HW * K);
    auto& o = out.data();
    const auto& bd = b.data();
    for (int img = 0; img < B; ++img) {
        im2col3(x.data().data() + (size_t)img * HW * Cin, H, W, Cin, col.data());
        double* O = o.data() + (size_t)img * HW * Cout;
        for (int i = 0; i < HW; ++i) std::memcpy(O + (size_t)i * Cout, bd.data(), sizeof(double) * Cout);
        gemm_nn(HW, Cout, K, col.data(), w.data().data(), O, true);
    }
    return out;
}

Tensor avg_pool2(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] % 2 || s[2] % 2)
        throw std::invalid_argument("avg_pool2: need [B,H,W,C] with even H,W, got " + shape_str(s));
    const int B = s[0], H = s[1], W = s[2], C = s[3];
    const int Ho = H / 2, Wo = W / 2;
    Tensor out = make_op_result({B, Ho, Wo, C}, {x}, [xn = x.node(), B, H, W, C, Ho, Wo](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) {
                    const double* g = n.grad.data() + (((size_t)b * Ho + y) * Wo + xx) * C;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            double* dst = xn->grad.data() +
                                          (((size_t)b * H + 2 * y + dy) * W + 2 * xx + dx) * C;
                            for (int c = 0; c < C; ++c) dst[c] += 0.25 * g[c];
                        }
                }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx) {
                double* dst = o.data() + (((size_t)b * Ho + y) * Wo + xx) * C;
                for (int c = 0; c < C; ++c) dst[c] = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const double* src =
                            xd.data() + (((size_t)b * H + 2 * y + dy) * W + 2 * xx + dx) * C;
                        for (int c = 0; c < C; ++c) dst[c] += 0.25 * src[c];
                    }
            }
    return out;
}

Tensor upsample_nearest2(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("upsample_nearest2: need [B,H,W,C]");
    const int B = s[0], H = s[1], W = s[2], C = s[3];
    const int Ho = H * 2, Wo = W * 2;
    Tensor out = make_op_result({B, Ho, Wo, C}, {x}, [xn = x.node(), B, H, W, C, Ho, Wo](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) {
                    const double* g = n.grad.data() + (((size_t)b * Ho + y) * Wo + xx) * C;
                    double* dst = xn->grad.data() + (((size_t)b * H + y / 2) * W + xx / 2) * C;
                    for (int c = 0; c < C; ++c) dst[c] += g[c];
                }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx)
                std::memcpy(o.data() + (((size_t)b * Ho + y) * Wo + xx) * C,
                            xd.data() + (((size_t)b * H + y / 2) * W + xx / 2) * C,
                            sizeof(double) * C);
    return out;
}

Tensor patchify(const Tensor& x, int p) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] % p || s[2] % p)
        throw std::invalid_argument("patchify: need [B,H,W,C] divisible by p, got " + shape_str(s));
    const int B = s[0], H = s[1], W = s[2], C = s[3];
    const int Ho = H / p, Wo = W / p, Co = p * p * C;
    Tensor out = make_op_result({B, Ho, Wo, Co}, {x}, [xn = x.node(), B, H, W, C, Ho, Wo, p](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx) {
                            const double* g = n.grad.data() +
                                              ((((size_t)b * Ho + y) * Wo + xx) * p * p + dy * p + dx) * C;
                            double* dst = xn->grad.data() +
                                          (((size_t)b * H + y * p + dy) * W + xx * p + dx) * C;
                            for (int c = 0; c < C; ++c) dst[c] += g[c];
                        }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        std::memcpy(o.data() + ((((size_t)b * Ho + y) * Wo + xx) * p * p + dy * p + dx) * C,
                                    xd.data() + (((size_t)b * H + y * p + dy) * W + xx * p + dx) * C,
                                    sizeof(double) * C);
    return out;
}

Tensor unpatchify(const Tensor& x, int p) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[3] % (p * p))
        throw std::invalid_argument("unpatchify: need [B,h,w,p*p*C], got " + shape_str(s));
    const int B = s[0], h = s[1], w = s[2], C = s[3] / (p * p);
    const int H = h * p, W = w * p;
    Tensor out = make_op_result({B, H, W, C}, {x}, [xn = x.node(), B, h, w, C, p, H, W](TensorNode& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx) {
                            const double* g = n.grad.data() +
                                              (((size_t)b * H + y * p + dy) * W + xx * p + dx) * C;
                            double* dst = xn->grad.data() +
                                          ((((size_t)b * h + y) * w + xx) * p * p + dy * p + dx) * C;
                            for (int c = 0; c < C; ++c) dst[c] += g[c];
                        }
    });
    const auto& xd = x.data();
    auto& o = out.data();
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        std::memcpy(o.data() + (((size_t)b * H + y * p + dy) * W + xx * p + dx) * C,
                                    xd.data() + ((((size_t)b * h + y) * w + xx) * p * p + dy * p + dx) * C,
                                    sizeof(double) * C);
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace mvrag
