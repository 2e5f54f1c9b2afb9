#pragma once

#include <vector>

#include "mvrag/datagen.hpp"
#include "mvrag/mvnet.hpp"

namespace mvrag {

struct NoiseSchedule {
    int T = 1000;
    std::vector<double> betas, alphas, alpha_bars;

    explicit NoiseSchedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
};

// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; x0 expected in [-1, 1].
Tensor add_noise(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& noise);

// Per-sample condition dropout decisions for one training batch.
struct DropFlags {
    bool null_text = false;
    bool drop_retrieval = false;
};
std::vector<DropFlags> condition_dropout(size_t batch_size, double p_text, double p_ret, Rng& rng);

// Multiview reconstruction loss (3D mode): one shared timestep per sample
// across its 4 views, shared conditioning tokens, MSE over all views.
// use_retrieval=false runs the text-only base path (no image encoding at all).
// k_cond limits how many conditioning images are encoded into tokens.
Tensor loss_mode3d(MvRagModel& model, const NoiseSchedule& sched,
                   const std::vector<TrainingSample>& batch, const Fusion& fusion,
                   const std::vector<DropFlags>& drops, Rng& rng, bool use_retrieval,
                   int k_cond = 4);

// Held-out view prediction loss (2D mode): single target, no poses.
Tensor loss_mode2d(MvRagModel& model, const NoiseSchedule& sched,
                   const std::vector<TrainingSample>& batch, const Fusion& fusion,
                   const std::vector<DropFlags>& drops, Rng& rng, int k_cond = 4);

// The strictly decreasing timestep subsequence visited by DDIM.
std::vector<int> ddim_timesteps(int T, int steps);

struct SamplerConditioning {
    Tensor text_tokens;  // [1, L_txt, d_cond]
    Tensor ret_tokens;   // [1, K'*N_t, d_cond] or undefined for text-only
    Fusion fusion = Fusion::text_only();
};

struct SamplerOptions {
    int steps = 50;
    double guidance_scale = 5.0;
    double eta = 0.0;  // deterministic DDIM only
};

// Deterministic DDIM sampling with classifier-free guidance. The
// unconditional branch uses null text tokens and no retrieval; with
// guidance_scale == 1 the unconditional branch is skipped entirely so the
// result equals the conditional-only chain. Returns [n_views, S, S, 3] in
// [0, 1].
Tensor ddim_sample(MvRagModel& model, const NoiseSchedule& sched,
                   const SamplerConditioning& cond, const SamplerOptions& opts, uint64_t seed,
                   int n_views, const std::vector<CameraPose>* poses);

std::vector<Image> tensor_to_images(const Tensor& views);

}  // namespace mvrag
