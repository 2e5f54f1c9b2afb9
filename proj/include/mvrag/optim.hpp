#pragma once

#include <unordered_map>
#include <vector>

#include "mvrag/tensor.hpp"

namespace mvrag {

// Decoupled-weight-decay Adam. Frozen parameters are skipped entirely; a
// parameter with no gradient buffer is treated as zero-gradient.
class AdamW {
public:
    AdamW(double lr = 5e-5, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
          double weight_decay = 0.01)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return step_; }

    void step(const std::vector<Parameter*>& params);
    void zero_grad(const std::vector<Parameter*>& params);

private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int64_t step_ = 0;
    std::unordered_map<TensorNode*, State> state_;
};

}  // namespace mvrag
