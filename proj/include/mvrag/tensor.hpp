#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvrag/rng.hpp"

namespace mvrag {

// Allocator that skips value-initialization; tensor buffers are fully
// overwritten by the op that creates them.
template <typename T>
struct UninitAlloc : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = UninitAlloc<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using DataVec = std::vector<double, UninitAlloc<double>>;

// Dense 64-bit tensor with reverse-mode gradients. Row-major; activations use
// channels-last layout [B, H, W, C]. Value-semantic handle over a shared node.
class Tensor;

struct TensorNode {
    std::vector<int> shape;
    DataVec data;
    DataVec grad;  // allocated on demand, same size as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // accumulates into parents' grad

    size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.resize(data.size());
            std::memset(grad.data(), 0, grad.size() * sizeof(double));
        }
    }
    void clear_grad() {
        // keep capacity; parameters reuse their grad buffer across steps
        if (!grad.empty()) std::memset(grad.data(), 0, grad.size() * sizeof(double));
    }
};

// Gradient recording can be disabled (sampling, evaluation).
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    size_t numel() const { return node_->data.size(); }

    DataVec& data() { return node_->data; }
    const DataVec& data() const { return node_->data; }
    double item() const;
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    const DataVec& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad();

    // Reverse-mode pass from this (scalar) tensor, or with an explicit seed
    // gradient matching this tensor's shape.
    void backward();
    void backward(const std::vector<double>& seed);

    Tensor detach() const;  // same data, no history, no grad requirement

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
    friend Tensor make_op_result(std::vector<int> shape, std::vector<Tensor> inputs,
                                 std::function<void(TensorNode&)> backward_fn);
};

// --- shape helpers ---
size_t shape_numel(const std::vector<int>& s);
std::string shape_str(const std::vector<int>& s);

// --- raw GEMM (row-major, deterministic, AVX-512 friendly) ---
// C[M,N] = alpha * A[M,K] * B[K,N] + (accumulate ? C : 0)
void gemm_nn(int M, int N, int K, const double* A, const double* B, double* C,
             bool accumulate = false, double alpha = 1.0);
// C[M,N] (+)= alpha * A^T[M,K] * B[K,N]   (A stored [K, M])
void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C,
             bool accumulate = false, double alpha = 1.0);
// C[M,N] (+)= alpha * A[M,K] * B^T[K,N]   (B stored [N, K])
void gemm_nt(int M, int N, int K, const double* A, const double* B, double* C,
             bool accumulate = false, double alpha = 1.0);

// --- ops ---
// Elementwise add with broadcasting limited to leading dims: the smaller
// operand's shape must equal a suffix of the larger one's.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same broadcast rule
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
// [A, B, C, D] -> [A, C, B, D]
Tensor swap_axes_12(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis);

// Batched matrix product over the last two axes; leading axes broadcast when
// equal or absent. Ranks <= 4. trans_a / trans_b transpose the last two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// x [.., din] * w [din, dout] + b; fused GEMM with chunked weight-gradient.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear_nobias(const Tensor& x, const Tensor& w);

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);

// softmax(q k^T / sqrt(d)) v with q [B, Lq, d], k [B, Lk, d], v [B, Lk, dv].
// Attention weights are recomputed in backward; only q, k, v are retained.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// x [B, H, W, C] (or [B, L, C] treated as W=1), channels split into groups.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// table [V, d], ids flattened index list with logical shape id_shape.
Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::vector<int> id_shape);

// x [B, H, W, C] + e [B, C], broadcast over the spatial dims.
Tensor add_bias_hw(const Tensor& x, const Tensor& e);
// out[b*times + t] = x[b] for rank >= 2 input (repeat along axis 0).
Tensor repeat_interleave0(const Tensor& x, int times);

// x [B, H, W, Cin], w [k*k*Cin, Cout], b [Cout]; stride 1; pad = k/2 (same).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int k);
Tensor avg_pool2(const Tensor& x);
Tensor upsample_nearest2(const Tensor& x);
// [B, H, W, C] -> [B, H/p, W/p, p*p*C] and back.
Tensor patchify(const Tensor& x, int p);
Tensor unpatchify(const Tensor& x, int p);

Tensor mse(const Tensor& a, const Tensor& b);

// --- Parameter: named tensor with a freeze flag ---
struct Parameter {
    Tensor tensor;
    std::string name;
    bool frozen = false;

    Parameter() = default;
    Parameter(Tensor t, std::string n) : tensor(std::move(t)), name(std::move(n)) {
        tensor.set_requires_grad(true);
    }
    void set_frozen(bool f) {
        frozen = f;
        tensor.set_requires_grad(!f);
    }
    uint64_t checksum() const {
        return fnv1a64(tensor.data().data(), tensor.data().size() * sizeof(double));
    }
};

}  // namespace mvrag
