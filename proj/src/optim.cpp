#include "mvrag/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mvrag {

void AdamW::step(const std::vector<Parameter*>& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (Parameter* p : params) {
        if (p->frozen) continue;
        auto& t = p->tensor;
        auto& st = state_[t.node().get()];
        const size_t n = t.numel();
        if (st.m.empty()) {
            st.m.assign(n, 0.0);
            st.v.assign(n, 0.0);
        } else if (st.m.size() != n) {
            throw std::invalid_argument("AdamW: state/param shape mismatch for " + p->name);
        }
        const bool has_g = t.has_grad();
        if (has_g && t.grad().size() != n)
            throw std::invalid_argument("AdamW: grad/param shape mismatch for " + p->name);
        auto& x = t.data();
        const double* g = has_g ? t.grad().data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
            const double gi = g ? g[i] : 0.0;
            st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * gi;
            st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            x[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * x[i]);
        }
    }
}

void AdamW::zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->tensor.zero_grad();
}

}  // namespace mvrag
