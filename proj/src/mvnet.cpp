#include "mvrag/mvnet.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mvrag {

// ---------------------------------------------------------------------------
// DecoupledCrossAttention
// ---------------------------------------------------------------------------

DecoupledCrossAttention::DecoupledCrossAttention(const std::string& prefix_, int channels_,
                                                 int d_cond, int heads_, Rng& rng,
                                                 bool with_retrieval)
    : heads(heads_), channels(channels_), prefix(prefix_) {
    norm = LayerNorm(prefix_ + ".ln", channels_);
    q = Linear(prefix_ + ".q", channels_, channels_, rng, false);
    k_txt = Linear(prefix_ + ".k_txt", d_cond, channels_, rng, false);
    v_txt = Linear(prefix_ + ".v_txt", d_cond, channels_, rng, false);
    out = Linear(prefix_ + ".out", channels_, channels_, rng, false);
    if (with_retrieval) {
        k_ret = Linear(prefix_ + ".k_ret", d_cond, channels_, rng, false);
        v_ret = Linear(prefix_ + ".v_ret", d_cond, channels_, rng, false);
        has_retrieval = true;
        init_retrieval_from_text();
    }
}

void DecoupledCrossAttention::init_retrieval_from_text() {
    if (!has_retrieval) {
        Rng dummy(0);
        const int d_cond = k_txt.w.tensor.dim(0);
        k_ret = Linear(prefix + ".k_ret", d_cond, channels, dummy, false);
        v_ret = Linear(prefix + ".v_ret", d_cond, channels, dummy, false);
        has_retrieval = true;
    }
    k_ret.w.tensor.data() = k_txt.w.tensor.data();
    std::fill(v_ret.w.tensor.data().begin(), v_ret.w.tensor.data().end(), 0.0);
}

Tensor DecoupledCrossAttention::fused_features(const Tensor& x_tokens, const Tensor& text_tokens,
                                               const Tensor& ret_tokens,
                                               const Fusion& fusion) const {
    Tensor h = norm.forward(x_tokens);
    Tensor qh = split_heads(q.forward(h), heads);
    Tensor f_txt = merge_heads(
        attention(qh, split_heads(k_txt.forward(text_tokens), heads),
                  split_heads(v_txt.forward(text_tokens), heads)),
        heads);
    const bool use_ret =
        fusion.mode != Fusion::Mode::TextOnly && ret_tokens.defined() && has_retrieval;
    if (!use_ret) return f_txt;
    Tensor f_ret = merge_heads(
        attention(qh, split_heads(k_ret.forward(ret_tokens), heads),
                  split_heads(v_ret.forward(ret_tokens), heads)),
        heads);
    if (fusion.mode == Fusion::Mode::Train)
        return add(scale(f_txt, fusion.lambda), f_ret);
    return add(scale(f_txt, fusion.alpha), scale(f_ret, fusion.lambda_prime - fusion.alpha));
}

Tensor DecoupledCrossAttention::forward(const Tensor& x_tokens, const Tensor& text_tokens,
                                        const Tensor& ret_tokens, const Fusion& fusion) const {
    return add(x_tokens, out.forward(fused_features(x_tokens, text_tokens, ret_tokens, fusion)));
}

void DecoupledCrossAttention::visit(const ParamVisitor& v) {
    norm.visit(v);
    q.visit(v);
    k_txt.visit(v);
    v_txt.visit(v);
    if (has_retrieval) {
        k_ret.visit(v);
        v_ret.visit(v);
    }
    out.visit(v);
}

// ---------------------------------------------------------------------------
// InflatedSelfAttention
// ---------------------------------------------------------------------------

InflatedSelfAttention::InflatedSelfAttention(const std::string& prefix, int channels, int heads,
                                             Rng& rng) {
    norm = LayerNorm(prefix + ".ln", channels);
    attn = MultiheadAttention(prefix, channels, channels, heads, rng);
}

Tensor InflatedSelfAttention::forward(const Tensor& x_tokens, int n_views) const {
    const auto& s = x_tokens.shape();
    if (s.size() != 3) throw std::invalid_argument("InflatedSelfAttention: expected [B*V, L, C]");
    if (s[0] % n_views != 0)
        throw std::invalid_argument("InflatedSelfAttention: batch " + std::to_string(s[0]) +
                                    " not divisible by n_views " + std::to_string(n_views));
    const int B = s[0] / n_views, L = s[1], C = s[2];
    Tensor h = norm.forward(x_tokens);
    Tensor joined = reshape(h, {B, n_views * L, C});
    Tensor a = attn.forward(joined, joined);
    return add(x_tokens, reshape(a, {B * n_views, L, C}));
}

void InflatedSelfAttention::visit(const ParamVisitor& v) {
    norm.visit(v);
    attn.visit(v);
}

// ---------------------------------------------------------------------------
// ResBlock / ChannelChange
// ---------------------------------------------------------------------------

ResBlock::ResBlock(const std::string& prefix, int channels_, int emb_dim, int groups_, Rng& rng,
                   int k1_)
    : channels(channels_), groups(groups_), k1(k1_) {
    gn1_g = Parameter(Tensor::full({channels_}, 1.0), prefix + ".norm1.gamma");
    gn1_b = Parameter(Tensor::zeros({channels_}), prefix + ".norm1.beta");
    gn2_g = Parameter(Tensor::full({channels_}, 1.0), prefix + ".norm2.gamma");
    gn2_b = Parameter(Tensor::zeros({channels_}), prefix + ".norm2.beta");
    const double s1 = std::sqrt(2.0 / (k1_ * k1_ * channels_));
    conv1_w = Parameter(Tensor::randn({k1_ * k1_ * channels_, channels_}, rng, s1),
                        prefix + ".conv1.w");
    conv1_b = Parameter(Tensor::zeros({channels_}), prefix + ".conv1.b");
    const double s2 = std::sqrt(2.0 / channels_);
    conv2_w = Parameter(Tensor::randn({channels_, channels_}, rng, s2 * 0.2), prefix + ".conv2.w");
    conv2_b = Parameter(Tensor::zeros({channels_}), prefix + ".conv2.b");
    emb_proj = Linear(prefix + ".emb_proj", emb_dim, channels_, rng);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& emb) const {
    Tensor h = conv2d(silu(group_norm(x, groups, gn1_g.tensor, gn1_b.tensor)), conv1_w.tensor,
                      conv1_b.tensor, k1);
    h = add_bias_hw(h, emb_proj.forward(silu(emb)));
    h = conv2d(silu(group_norm(h, groups, gn2_g.tensor, gn2_b.tensor)), conv2_w.tensor,
               conv2_b.tensor, 1);
    return add(x, h);
}

void ResBlock::visit(const ParamVisitor& v) {
    v(gn1_g);
    v(gn1_b);
    v(gn2_g);
    v(gn2_b);
    v(conv1_w);
    v(conv1_b);
    v(conv2_w);
    v(conv2_b);
    emb_proj.visit(v);
}

ChannelChange::ChannelChange(const std::string& prefix, int cin, int cout, Rng& rng) {
    proj = Linear(prefix + ".conv", cin, cout, rng);
}

Tensor ChannelChange::down(const Tensor& x) const {
    Tensor pooled = avg_pool2(x);
    const auto& s = pooled.shape();
    Tensor flat = reshape(pooled, {s[0] * s[1] * s[2], s[3]});
    return reshape(proj.forward(flat), {s[0], s[1], s[2], proj.w.tensor.dim(1)});
}

Tensor ChannelChange::up(const Tensor& x) const {
    Tensor upd = upsample_nearest2(x);
    const auto& s = upd.shape();
    Tensor flat = reshape(upd, {s[0] * s[1] * s[2], s[3]});
    return reshape(proj.forward(flat), {s[0], s[1], s[2], proj.w.tensor.dim(1)});
}

void ChannelChange::visit(const ParamVisitor& v) { proj.visit(v); }

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

namespace {

Tensor tokens_from_map(const Tensor& x) {  // [B,h,w,C] -> [B, h*w, C]
    const auto& s = x.shape();
    return reshape(x, {s[0], s[1] * s[2], s[3]});
}

Tensor map_from_tokens(const Tensor& x, int h, int w) {  // [B, h*w, C] -> [B,h,w,C]
    const auto& s = x.shape();
    return reshape(x, {s[0], h, w, s[2]});
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t seed, bool with_retrieval)
    : cfg_(cfg), with_retrieval_(with_retrieval) {
    Rng rng = Rng(seed).derive("denoiser");
    const int c0 = cfg.base_channels * cfg.channel_multipliers[0];
    const int c1 = cfg.base_channels * cfg.channel_multipliers[1];
    const int c2 = cfg.base_channels * cfg.channel_multipliers[2];
    const int p = cfg.patch_size;
    const int te = cfg.time_embed_dim;
    const int g = cfg.norm_groups;

    stem_ = Linear("denoiser.stem", p * p * 3, c0, rng);
    time_fc1_ = Linear("denoiser.time.fc1", te, te, rng);
    time_fc2_ = Linear("denoiser.time.fc2", te, te, rng);
    cam_fc1_ = Linear("denoiser.camera.fc1", 12, te, rng);
    cam_fc2_ = Linear("denoiser.camera.fc2", te, te, rng);

    rb_d0_ = ResBlock("denoiser.down0.res", c0, te, g, rng);
    ca_d0_ = DecoupledCrossAttention("denoiser.down0.cross", c0, cfg.d_cond, cfg.heads, rng,
                                     with_retrieval);
    down0_ = ChannelChange("denoiser.down0.pool", c0, c1, rng);
    rb_d1_ = ResBlock("denoiser.down1.res", c1, te, g, rng);
    sa_d1_ = InflatedSelfAttention("denoiser.down1.self", c1, cfg.heads, rng);
    ca_d1_ = DecoupledCrossAttention("denoiser.down1.cross", c1, cfg.d_cond, cfg.heads, rng,
                                     with_retrieval);
    down1_ = ChannelChange("denoiser.down1.pool", c1, c2, rng);
    rb_d2_ = ResBlock("denoiser.down2.res", c2, te, g, rng, 1);
    rb_mid_ = ResBlock("denoiser.mid.res", c2, te, g, rng, 1);
    rb_u2_ = ResBlock("denoiser.up2.res", c2, te, g, rng, 1);
    up1_ = ChannelChange("denoiser.up1.unpool", c2, c1, rng);
    rb_u1_ = ResBlock("denoiser.up1.res", c1, te, g, rng);
    sa_u1_ = InflatedSelfAttention("denoiser.up1.self", c1, cfg.heads, rng);
    ca_u1_ = DecoupledCrossAttention("denoiser.up1.cross", c1, cfg.d_cond, cfg.heads, rng,
                                     with_retrieval);
    up0_ = ChannelChange("denoiser.up0.unpool", c1, c0, rng);
    rb_u0_ = ResBlock("denoiser.up0.res", c0, te, g, rng);
    ca_u0_ = DecoupledCrossAttention("denoiser.up0.cross", c0, cfg.d_cond, cfg.heads, rng,
                                     with_retrieval);
    head_gn_g_ = Parameter(Tensor::full({c0}, 1.0), "denoiser.head.norm.gamma");
    head_gn_b_ = Parameter(Tensor::zeros({c0}), "denoiser.head.norm.beta");
    // zero-init head so the initial prediction is exactly zero noise
    head_ = Linear("denoiser.head.proj", c0, p * p * 3, rng);
    std::fill(head_.w.tensor.data().begin(), head_.w.tensor.data().end(), 0.0);
}

void Denoiser::init_retrieval_from_text() {
    for (DecoupledCrossAttention* ca : {&ca_d0_, &ca_d1_, &ca_u1_, &ca_u0_})
        ca->init_retrieval_from_text();
    with_retrieval_ = true;
}

DecoupledCrossAttention& Denoiser::cross_at(int i) {
    DecoupledCrossAttention* arr[] = {&ca_d0_, &ca_d1_, &ca_u1_, &ca_u0_};
    return *arr[i];
}

InflatedSelfAttention& Denoiser::self_at(int i) {
    InflatedSelfAttention* arr[] = {&sa_d1_, &sa_u1_};
    return *arr[i];
}

Tensor Denoiser::forward(const Tensor& x_t, const std::vector<int>& t, const Tensor& text_tokens,
                         const Tensor& ret_tokens, const std::vector<CameraPose>* poses,
                         int n_views, const Fusion& fusion) const {
    const auto& s = x_t.shape();
    if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != 3)
        throw std::invalid_argument("Denoiser: expected [B*V," + std::to_string(cfg_.image_size) +
                                    "," + std::to_string(cfg_.image_size) + ",3], got " +
                                    shape_str(s));
    const int BV = s[0];
    if (BV % n_views != 0)
        throw std::invalid_argument("Denoiser: batch not divisible by n_views");
    if (t.size() != static_cast<size_t>(BV))
        throw std::invalid_argument("Denoiser: timestep count mismatch");
    if (n_views == 1) {
        if (poses != nullptr)
            throw std::invalid_argument("Denoiser: poses supplied for the 2D path");
    } else {
        if (poses == nullptr || static_cast<int>(poses->size()) != BV)
            throw std::invalid_argument("Denoiser: pose/view-count mismatch");
    }

    // time + camera embedding
    Tensor t_emb = timestep_embedding(t, cfg_.time_embed_dim);
    Tensor emb = time_fc2_.forward(silu(time_fc1_.forward(t_emb)));
    Tensor cam_in = Tensor::zeros({BV, 12});
    if (poses) {
        auto& d = cam_in.data();
        for (int i = 0; i < BV; ++i) {
            const auto ext = (*poses)[static_cast<size_t>(i)].extrinsic();
            std::copy(ext.begin(), ext.end(), d.begin() + static_cast<size_t>(i) * 12);
        }
    }
    emb = add(emb, cam_fc2_.forward(silu(cam_fc1_.forward(cam_in))));

    const int p = cfg_.patch_size;
    const int grid0 = cfg_.image_size / p;        // 16
    const int grid1 = grid0 / 2, grid2 = grid1 / 2;

    Tensor h = patchify(x_t, p);
    {
        const auto& hs = h.shape();
        h = reshape(stem_.forward(reshape(h, {hs[0] * hs[1] * hs[2], hs[3]})),
                    {hs[0], hs[1], hs[2], cfg_.base_channels * cfg_.channel_multipliers[0]});
    }

    // down path
    Tensor d0 = rb_d0_.forward(h, emb);
    Tensor a0 = map_from_tokens(
        ca_d0_.forward(tokens_from_map(d0), text_tokens, ret_tokens, fusion), grid0, grid0);
    Tensor h1 = down0_.down(a0);
    Tensor d1 = rb_d1_.forward(h1, emb);
    Tensor t1 = sa_d1_.forward(tokens_from_map(d1), n_views);
    t1 = ca_d1_.forward(t1, text_tokens, ret_tokens, fusion);
    Tensor a1 = map_from_tokens(t1, grid1, grid1);
    Tensor h2 = down1_.down(a1);
    Tensor d2 = rb_d2_.forward(h2, emb);

    // bottom
    Tensor m = rb_mid_.forward(d2, emb);

    // up path with additive skips
    Tensor u2 = rb_u2_.forward(add(m, d2), emb);
    Tensor hu1 = up1_.up(u2);
    Tensor u1 = rb_u1_.forward(add(hu1, a1), emb);
    Tensor tu1 = sa_u1_.forward(tokens_from_map(u1), n_views);
    tu1 = ca_u1_.forward(tu1, text_tokens, ret_tokens, fusion);
    Tensor hu0 = up0_.up(map_from_tokens(tu1, grid1, grid1));
    Tensor u0 = rb_u0_.forward(add(hu0, a0), emb);
    Tensor tu0 = ca_u0_.forward(tokens_from_map(u0), text_tokens, ret_tokens, fusion);
    Tensor b0 = map_from_tokens(tu0, grid0, grid0);

    Tensor hn = silu(group_norm(b0, cfg_.norm_groups, head_gn_g_.tensor, head_gn_b_.tensor));
    const auto& ns = hn.shape();
    Tensor out = reshape(head_.forward(reshape(hn, {ns[0] * ns[1] * ns[2], ns[3]})),
                         {ns[0], ns[1], ns[2], p * p * 3});
    return unpatchify(out, p);
}

void Denoiser::visit(const ParamVisitor& v) {
    stem_.visit(v);
    time_fc1_.visit(v);
    time_fc2_.visit(v);
    cam_fc1_.visit(v);
    cam_fc2_.visit(v);
    rb_d0_.visit(v);
    ca_d0_.visit(v);
    down0_.visit(v);
    rb_d1_.visit(v);
    sa_d1_.visit(v);
    ca_d1_.visit(v);
    down1_.visit(v);
    rb_d2_.visit(v);
    rb_mid_.visit(v);
    rb_u2_.visit(v);
    up1_.visit(v);
    rb_u1_.visit(v);
    sa_u1_.visit(v);
    ca_u1_.visit(v);
    up0_.visit(v);
    rb_u0_.visit(v);
    ca_u0_.visit(v);
    v(head_gn_g_);
    v(head_gn_b_);
    head_.visit(v);
}

// ---------------------------------------------------------------------------
// freeze policy
// ---------------------------------------------------------------------------

namespace {

bool is_retrieval_param(const std::string& name) {
    return name.find(".k_ret") != std::string::npos || name.find(".v_ret") != std::string::npos;
}

bool is_resampler_param(const std::string& name) { return name.rfind("resampler.", 0) == 0; }

bool is_image_encoder_param(const std::string& name) { return name.rfind("E.", 0) == 0; }

bool is_text_encoder_param(const std::string& name) { return name.rfind("text.", 0) == 0; }

}  // namespace

void set_freeze_policy(MvRagModel& model, TrainPhase phase) {
    ParamVisitor v = [phase](Parameter& p) {
        bool frozen = true;
        switch (phase) {
            case TrainPhase::BasePretrain:
                // Denoiser and text encoder learn; E, resampler, and any
                // retrieval projections stay fixed.
                frozen = is_image_encoder_param(p.name) || is_resampler_param(p.name) ||
                         is_retrieval_param(p.name);
                break;
            case TrainPhase::AdapterTrain:
                frozen = !(is_retrieval_param(p.name) || is_resampler_param(p.name));
                break;
        }
        p.set_frozen(frozen);
    };
    model.visit(v);
}

std::vector<Parameter*> trainable_params(MvRagModel& model) {
    std::vector<Parameter*> out;
    ParamVisitor v = [&out](Parameter& p) {
        if (!p.frozen) out.push_back(&p);
    };
    model.visit(v);
    return out;
}

std::vector<Parameter*> frozen_params(MvRagModel& model) {
    std::vector<Parameter*> out;
    ParamVisitor v = [&out](Parameter& p) {
        if (p.frozen) out.push_back(&p);
    };
    model.visit(v);
    return out;
}

}  // namespace mvrag
