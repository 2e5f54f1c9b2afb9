#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mvrag/datagen.hpp"
#include "mvrag/encoder.hpp"
#include "mvrag/nn.hpp"

namespace mvrag {

struct DenoiserConfig {
    int image_size = 32;
    int base_channels = 64;
    std::array<int, 3> channel_multipliers{1, 2, 4};
    std::array<int, 2> attention_resolutions{16, 8};
    int heads = 4;
    int d_cond = kDCond;
    int n_views = kNumViews;
    int patch_size = 2;       // stem patchify; feature levels at 16/8/4
    int time_embed_dim = 128;
    int norm_groups = 8;

    bool operator==(const DenoiserConfig& o) const = default;
};

// How f_txt and f_ret combine inside decoupled cross-attention.
struct Fusion {
    enum class Mode { TextOnly, Train, Infer };
    Mode mode = Mode::TextOnly;
    double lambda = 0.1;        // training text weight
    double alpha = 1.0;         // inference prior weight
    double lambda_prime = 1.0;  // inference budget

    static Fusion text_only() { return {Mode::TextOnly, 0, 0, 0}; }
    static Fusion train(double lambda) { return {Mode::Train, lambda, 0, 0}; }
    static Fusion infer(double alpha, double lambda_prime) {
        return {Mode::Infer, 0, alpha, lambda_prime};
    }
};

// Decoupled cross-attention: shared frozen query projection, frozen text K/V,
// learnable retrieval K/V, shared frozen out projection.
struct DecoupledCrossAttention {
    LayerNorm norm;
    Linear q, k_txt, v_txt, out;
    Linear k_ret, v_ret;  // present only when has_retrieval
    bool has_retrieval = false;
    int heads = 4;
    int channels = 0;
    std::string prefix;

    DecoupledCrossAttention() = default;
    DecoupledCrossAttention(const std::string& prefix, int channels, int d_cond, int heads,
                            Rng& rng, bool with_retrieval);

    // Creates zero-init value and text-copied key retrieval projections.
    void init_retrieval_from_text();

    // Fused feature f per the active rule, before the out projection.
    // ret_tokens may be undefined; TextOnly or missing tokens -> pure f_txt.
    Tensor fused_features(const Tensor& x_tokens, const Tensor& text_tokens,
                          const Tensor& ret_tokens, const Fusion& fusion) const;
    // x + out(f): the full residual block update.
    Tensor forward(const Tensor& x_tokens, const Tensor& text_tokens, const Tensor& ret_tokens,
                   const Fusion& fusion) const;
    void visit(const ParamVisitor& v);
};

// Self-attention joined across the views of each sample. With n_views = 1
// this is exactly standard 2D self-attention.
struct InflatedSelfAttention {
    LayerNorm norm;
    MultiheadAttention attn;

    InflatedSelfAttention() = default;
    InflatedSelfAttention(const std::string& prefix, int channels, int heads, Rng& rng);
    Tensor forward(const Tensor& x_tokens, int n_views) const;  // [B*V, L, C]
    void visit(const ParamVisitor& v);
};

// GroupNorm -> SiLU -> conv3x3 -> +emb -> GroupNorm -> SiLU -> conv1x1, with
// a residual connection. Channel count is preserved.
struct ResBlock {
    Parameter gn1_g, gn1_b, gn2_g, gn2_b;
    Parameter conv1_w, conv1_b, conv2_w, conv2_b;
    Linear emb_proj;
    int channels = 0, groups = 8, k1 = 3;

    ResBlock() = default;
    // k1: first conv kernel (3 at spatial levels, 1 at the 4x4 bottleneck).
    ResBlock(const std::string& prefix, int channels, int emb_dim, int groups, Rng& rng,
             int k1 = 3);
    Tensor forward(const Tensor& x, const Tensor& emb) const;  // x [B,H,W,C], emb [B,emb_dim]
    void visit(const ParamVisitor& v);
};

struct ChannelChange {  // pool/upsample followed by a 1x1 projection
    Linear proj;
    ChannelChange() = default;
    ChannelChange(const std::string& prefix, int cin, int cout, Rng& rng);
    Tensor down(const Tensor& x) const;
    Tensor up(const Tensor& x) const;
    void visit(const ParamVisitor& v);
};

// The multiview denoiser U-Net.
class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, uint64_t seed, bool with_retrieval);

    // x_t [B*V, S, S, 3]; t one timestep per view row; text/ret tokens are
    // per-view (repeat_interleave0 over samples upstream); poses per view in
    // 3D mode, nullptr in 2D mode.
    Tensor forward(const Tensor& x_t, const std::vector<int>& t, const Tensor& text_tokens,
                   const Tensor& ret_tokens, const std::vector<CameraPose>* poses, int n_views,
                   const Fusion& fusion) const;

    void init_retrieval_from_text();
    bool has_retrieval() const { return with_retrieval_; }
    const DenoiserConfig& config() const { return cfg_; }
    void visit(const ParamVisitor& v);

    // Exposed for reduction/fusion tests.
    DecoupledCrossAttention& cross_at(int i);
    InflatedSelfAttention& self_at(int i);

private:
    DenoiserConfig cfg_;
    bool with_retrieval_;
    Linear stem_;
    Linear time_fc1_, time_fc2_;
    Linear cam_fc1_, cam_fc2_;
    ResBlock rb_d0_, rb_d1_, rb_d2_, rb_mid_, rb_u2_, rb_u1_, rb_u0_;
    ChannelChange down0_, down1_, up1_, up0_;
    DecoupledCrossAttention ca_d0_, ca_d1_, ca_u1_, ca_u0_;
    InflatedSelfAttention sa_d1_, sa_u1_;
    Parameter head_gn_g_, head_gn_b_;
    Linear head_;
};

// All model state in one place, matching the single-file checkpoint.
struct MvRagModel {
    DenoiserConfig config;
    Denoiser denoiser;
    PatchEncoder image_encoder;
    TextEncoder text_encoder;
    Resampler resampler;

    MvRagModel(const DenoiserConfig& cfg, uint64_t seed, bool with_retrieval)
        : config(cfg),
          denoiser(cfg, seed, with_retrieval),
          image_encoder(seed + 1),
          text_encoder(seed + 2),
          resampler(seed + 3) {}

    void visit(const ParamVisitor& v) {
        denoiser.visit(v);
        image_encoder.visit(v);
        text_encoder.visit(v);
        resampler.visit(v);
    }
    std::vector<Parameter*> params() { return collect_params(*this); }
};

enum class TrainPhase { BasePretrain, AdapterTrain };

// BasePretrain: everything trainable except E, the resampler, and any
// retrieval projections. AdapterTrain: only k_ret/v_ret and the resampler
// are trainable.
void set_freeze_policy(MvRagModel& model, TrainPhase phase);

std::vector<Parameter*> trainable_params(MvRagModel& model);
std::vector<Parameter*> frozen_params(MvRagModel& model);

}  // namespace mvrag
