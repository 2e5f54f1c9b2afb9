#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mvrag/tensor.hpp"

namespace mvrag::testing {

// Central finite-difference gradient check. f must map the given inputs to a
// scalar tensor. Every element of every input marked requires_grad is probed.
struct GradCheckResult {
    bool ok = true;
    double max_rel = 0.0;
    std::string detail;
};

inline GradCheckResult gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double h = 1e-5,
                                 double rtol = 1e-4, double atol = 1e-7) {
    for (auto& in : inputs) in.set_requires_grad(true);
    Tensor loss = f(inputs);
    loss.backward();

    GradCheckResult res;
    for (size_t t = 0; t < inputs.size(); ++t) {
        auto& x = inputs[t];
        if (!x.has_grad()) {
            res.ok = false;
            res.detail = "input " + std::to_string(t) + " has no grad after backward";
            return res;
        }
        for (size_t i = 0; i < x.numel(); ++i) {
            const double orig = x.data()[i];
            double fp, fm;
            {
                NoGradGuard ng;
                x.data()[i] = orig + h;
                fp = f(inputs).item();
                x.data()[i] = orig - h;
                fm = f(inputs).item();
                x.data()[i] = orig;
            }
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = x.grad()[i];
            const double err = std::abs(ad - fd);
            const double rel = err / std::max({std::abs(ad), std::abs(fd), 1e-12});
            if (err > atol + rtol * std::max(std::abs(ad), std::abs(fd))) {
                res.ok = false;
                res.detail = "input " + std::to_string(t) + " elem " + std::to_string(i) +
                             ": ad=" + std::to_string(ad) + " fd=" + std::to_string(fd);
                res.max_rel = std::max(res.max_rel, rel);
                return res;
            }
            res.max_rel = std::max(res.max_rel, rel);
        }
    }
    return res;
}

// Plain three-loop matrix product oracle (no batching).
template <typename V1, typename V2>
std::vector<double> naive_matmul(const V1& a, const V2& b,
                                 int M, int K, int N) {
    std::vector<double> c(static_cast<size_t>(M) * N, 0.0);
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double s = 0;
            for (int k = 0; k < K; ++k) s += a[(size_t)i * K + k] * b[(size_t)k * N + j];
            c[(size_t)i * N + j] = s;
        }
    return c;
}

// Two-loop attention oracle: per query row, explicit softmax over keys.
template <typename V1, typename V2, typename V3>
std::vector<double> naive_attention(const V1& q, const V2& k, const V3& v,
                                    int B, int Lq, int Lk, int d, int dv) {
    std::vector<double> out(static_cast<size_t>(B) * Lq * dv, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < Lq; ++i) {
            std::vector<double> logits(Lk);
            for (int j = 0; j < Lk; ++j) {
                double s = 0;
                for (int c = 0; c < d; ++c)
                    s += q[((size_t)b * Lq + i) * d + c] * k[((size_t)b * Lk + j) * d + c];
                logits[j] = s * scale;
            }
            double mx = logits[0];
            for (double l : logits) mx = std::max(mx, l);
            double denom = 0;
            for (int j = 0; j < Lk; ++j) {
                logits[j] = std::exp(logits[j] - mx);
                denom += logits[j];
            }
            for (int j = 0; j < Lk; ++j) {
                const double w = logits[j] / denom;
                for (int c = 0; c < dv; ++c)
                    out[((size_t)b * Lq + i) * dv + c] += w * v[((size_t)b * Lk + j) * dv + c];
            }
        }
    return out;
}

template <typename V1, typename V2>
double max_abs_diff(const V1& a, const V2& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename V1, typename V2>
bool bitwise_equal(const V1& a, const V2& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
    return true;
}

}  // namespace mvrag::testing
