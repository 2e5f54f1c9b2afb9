#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mvrag/tensor.hpp"

namespace mvrag {

using ParamVisitor = std::function<void(Parameter&)>;

// Dense layer; weights [din, dout], optional bias.
struct Linear {
    Parameter w, b;
    bool has_bias = true;

    Linear() = default;
    Linear(const std::string& prefix, int din, int dout, Rng& rng, bool bias = true,
           double init_scale = -1.0);
    Tensor forward(const Tensor& x) const;
    void visit(const ParamVisitor& v);
};

struct LayerNorm {
    Parameter gamma, beta;
    LayerNorm() = default;
    LayerNorm(const std::string& prefix, int dim);
    Tensor forward(const Tensor& x) const;
    void visit(const ParamVisitor& v);
};

// Multi-head attention over channels-last token tensors. Queries from x_q
// [B, Lq, C]; keys/values from x_kv [B, Lk, Ckv]. All projections bias-free.
struct MultiheadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    int channels = 0;

    MultiheadAttention() = default;
    MultiheadAttention(const std::string& prefix, int channels, int kv_channels, int heads,
                       Rng& rng);
    Tensor forward(const Tensor& x_q, const Tensor& x_kv) const;
    void visit(const ParamVisitor& v);
};

// Split [B, L, C] into heads -> [B*H, L, C/H] and back.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x, int heads);

struct FeedForward {
    Linear fc1, fc2;
    FeedForward() = default;
    FeedForward(const std::string& prefix, int dim, int mult, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void visit(const ParamVisitor& v);
};

// Pre-LN self-attention block: x + attn(LN(x)), x + ff(LN(x)).
struct TransformerBlock {
    LayerNorm norm1, norm2;
    MultiheadAttention attn;
    FeedForward ff;
    TransformerBlock() = default;
    TransformerBlock(const std::string& prefix, int dim, int heads, int ff_mult, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void visit(const ParamVisitor& v);
};

// Fixed sinusoidal table [len, dim] (not a parameter).
Tensor sinusoidal_table(int len, int dim);
// DDPM-style timestep embedding for a batch of integer timesteps, [B, dim].
Tensor timestep_embedding(const std::vector<int>& ts, int dim);

// Collect parameters of a module tree into a stable-ordered list.
template <typename Module>
std::vector<Parameter*> collect_params(Module& m) {
    std::vector<Parameter*> out;
    ParamVisitor v = [&out](Parameter& p) { out.push_back(&p); };
    m.visit(v);
    return out;
}

uint64_t params_checksum(const std::vector<Parameter*>& params);

}  // namespace mvrag
