#include "mvrag/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mvrag {

Linear::Linear(const std::string& prefix, int din, int dout, Rng& rng, bool bias,
               double init_scale)
    : has_bias(bias) {
    const double scale = init_scale > 0 ? init_scale : 1.0 / std::sqrt(static_cast<double>(din));
    w = Parameter(Tensor::randn({din, dout}, rng, scale), prefix + ".w");
    if (bias) b = Parameter(Tensor::zeros({dout}), prefix + ".b");
}

Tensor Linear::forward(const Tensor& x) const {
    return has_bias ? linear(x, w.tensor, b.tensor) : linear_nobias(x, w.tensor);
}

void Linear::visit(const ParamVisitor& v) {
    v(w);
    if (has_bias) v(b);
}

LayerNorm::LayerNorm(const std::string& prefix, int dim) {
    gamma = Parameter(Tensor::full({dim}, 1.0), prefix + ".norm.gamma");
    beta = Parameter(Tensor::zeros({dim}), prefix + ".norm.beta");
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma.tensor, beta.tensor); }

void LayerNorm::visit(const ParamVisitor& v) {
    v(gamma);
    v(beta);
}

Tensor split_heads(const Tensor& x, int heads) {
    const auto& s = x.shape();
    if (s.size() != 3 || s[2] % heads != 0)
        throw std::invalid_argument("split_heads: bad shape " + shape_str(s));
    const int B = s[0], L = s[1], C = s[2];
    const int dh = C / heads;
    return reshape(swap_axes_12(reshape(x, {B, L, heads, dh})), {B * heads, L, dh});
}

Tensor merge_heads(const Tensor& x, int heads) {
    const auto& s = x.shape();
    const int BH = s[0], L = s[1], dh = s[2];
    const int B = BH / heads;
    return reshape(swap_axes_12(reshape(x, {B, heads, L, dh})), {B, L, heads * dh});
}

MultiheadAttention::MultiheadAttention(const std::string& prefix, int channels, int kv_channels,
                                       int heads_, Rng& rng)
    : heads(heads_), channels(channels) {
    if (channels % heads_ != 0)
        throw std::invalid_argument("MultiheadAttention: channels not divisible by heads");
    wq = Linear(prefix + ".q", channels, channels, rng, false);
    wk = Linear(prefix + ".k", kv_channels, channels, rng, false);
    wv = Linear(prefix + ".v", kv_channels, channels, rng, false);
    wo = Linear(prefix + ".out", channels, channels, rng, false);
}

Tensor MultiheadAttention::forward(const Tensor& x_q, const Tensor& x_kv) const {
    Tensor q = split_heads(wq.forward(x_q), heads);
    Tensor k = split_heads(wk.forward(x_kv), heads);
    Tensor v = split_heads(wv.forward(x_kv), heads);
    Tensor o = merge_heads(attention(q, k, v), heads);
    return wo.forward(o);
}

void MultiheadAttention::visit(const ParamVisitor& v) {
    wq.visit(v);
    wk.visit(v);
    wv.visit(v);
    wo.visit(v);
}

FeedForward::FeedForward(const std::string& prefix, int dim, int mult, Rng& rng) {
    fc1 = Linear(prefix + ".ff1", dim, dim * mult, rng);
    fc2 = Linear(prefix + ".ff2", dim * mult, dim, rng);
}

Tensor FeedForward::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

void FeedForward::visit(const ParamVisitor& v) {
    fc1.visit(v);
    fc2.visit(v);
}

TransformerBlock::TransformerBlock(const std::string& prefix, int dim, int heads, int ff_mult,
                                   Rng& rng) {
    norm1 = LayerNorm(prefix + ".ln1", dim);
    norm2 = LayerNorm(prefix + ".ln2", dim);
    attn = MultiheadAttention(prefix + ".attn", dim, dim, heads, rng);
    ff = FeedForward(prefix + ".mlp", dim, ff_mult, rng);
}

Tensor TransformerBlock::forward(const Tensor& x) const {
    Tensor n1 = norm1.forward(x);
    Tensor h = add(x, attn.forward(n1, n1));
    return add(h, ff.forward(norm2.forward(h)));
}

void TransformerBlock::visit(const ParamVisitor& v) {
    norm1.visit(v);
    norm2.visit(v);
    attn.visit(v);
    ff.visit(v);
}

Tensor sinusoidal_table(int len, int dim) {
    Tensor t({len, dim});
    auto& d = t.data();
    for (int pos = 0; pos < len; ++pos)
        for (int i = 0; i < dim / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
            d[(size_t)pos * dim + 2 * i] = std::sin(pos * freq);
            d[(size_t)pos * dim + 2 * i + 1] = std::cos(pos * freq);
        }
    return t;
}

Tensor timestep_embedding(const std::vector<int>& ts, int dim) {
    Tensor t({static_cast<int>(ts.size()), dim});
    auto& d = t.data();
    const int half = dim / 2;
    for (size_t b = 0; b < ts.size(); ++b)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / static_cast<double>(half));
            d[b * dim + i] = std::cos(ts[b] * freq);
            d[b * dim + half + i] = std::sin(ts[b] * freq);
        }
    return t;
}

uint64_t params_checksum(const std::vector<Parameter*>& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const Parameter* p : params) {
        const uint64_t hp = p->checksum();
        const uint64_t hn = fnv1a64(p->name);
        h ^= hp + hn + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return h;
}

}  // namespace mvrag
