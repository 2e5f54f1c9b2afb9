#include "mvrag/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvrag {

NoiseSchedule::NoiseSchedule(int T_, double beta_start, double beta_end) : T(T_) {
    if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    betas.resize(T);
    alphas.resize(T);
    alpha_bars.resize(T);
    double bar = 1.0;
    for (int t = 0; t < T; ++t) {
        betas[t] = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
        alphas[t] = 1.0 - betas[t];
        bar *= alphas[t];
        alpha_bars[t] = bar;
    }
}

Tensor add_noise(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& noise) {
    if (t < 0 || t >= sched.T)
        throw std::invalid_argument("add_noise: t " + std::to_string(t) + " outside [0," +
                                    std::to_string(sched.T) + ")");
    if (x0.shape() != noise.shape()) throw std::invalid_argument("add_noise: noise shape mismatch");
    const double a = std::sqrt(sched.alpha_bars[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
    return add(scale(x0, a), scale(noise, b));
}

std::vector<DropFlags> condition_dropout(size_t batch_size, double p_text, double p_ret, Rng& rng) {
    if (p_text < 0 || p_text > 1 || p_ret < 0 || p_ret > 1)
        throw std::invalid_argument("condition_dropout: probabilities must be in [0,1]");
    std::vector<DropFlags> flags(batch_size);
    for (auto& f : flags) {
        f.null_text = rng.bernoulli(p_text);
        f.drop_retrieval = rng.bernoulli(p_ret);
    }
    return flags;
}

// ---------------------------------------------------------------------------
// loss assembly
// ---------------------------------------------------------------------------

namespace {

Tensor remap_to_signed(const Tensor& x01) { return add_scalar(scale(x01, 2.0), -1.0); }

// Encode prompts with per-sample null substitution.
Tensor encode_prompts(const TextEncoder& te, const std::vector<TrainingSample>& batch,
                      const std::vector<DropFlags>& drops) {
    std::vector<Tensor> rows;
    for (size_t i = 0; i < batch.size(); ++i) {
        const bool null_text = i < drops.size() && drops[i].null_text;
        Tensor row = null_text ? te.encode_null(1)
                               : reshape(te.encode(batch[i].prompt), {1, kTextLen, kDCond});
        rows.push_back(row);
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

// Encode the first k_cond conditioning images of each sample into retrieval
// tokens [B, k_cond*N_t, d]. Dropped samples get their token block zeroed,
// which makes f_ret vanish exactly (zero keys give uniform attention over
// zero values).
Tensor encode_retrieval(MvRagModel& model, const std::vector<TrainingSample>& batch,
                        const std::vector<DropFlags>& drops, int k_cond) {
    std::vector<Tensor> rows;
    for (size_t i = 0; i < batch.size(); ++i) {
        const auto& cond = batch[i].conditioning;
        if (static_cast<int>(cond.size()) < k_cond)
            throw std::invalid_argument("loss: sample has fewer than K conditioning images");
        std::vector<Image> used(cond.begin(), cond.begin() + k_cond);
        Tensor feats = model.image_encoder.encode_batch(used);     // [K, P, d_enc]
        Tensor tokens = model.resampler.forward(feats);            // [K, N_t, d]
        rows.push_back(reshape(tokens, {1, k_cond * kNumTokens, kDCond}));
    }
    Tensor stacked = rows.size() == 1 ? rows[0] : concat(rows, 0);
    bool any_drop = false;
    for (const auto& f : drops) any_drop |= f.drop_retrieval;
    if (!any_drop) return stacked;
    Tensor mask = Tensor::full(stacked.shape(), 1.0);
    const size_t per = stacked.numel() / batch.size();
    for (size_t i = 0; i < drops.size(); ++i)
        if (drops[i].drop_retrieval)
            std::fill(mask.data().begin() + i * per, mask.data().begin() + (i + 1) * per, 0.0);
    return mul(stacked, mask);
}

struct AssembledBatch {
    Tensor x0;      // [B*V, S, S, 3] in [-1, 1]
    Tensor noise;   // same shape
    Tensor x_t;
    std::vector<int> ts;  // per view
    Tensor text_tokens;   // [B*V, L, d]
    Tensor ret_tokens;    // per view or undefined
    std::vector<CameraPose> poses;
};

AssembledBatch assemble(MvRagModel& model, const NoiseSchedule& sched,
                        const std::vector<TrainingSample>& batch, const Fusion& fusion,
                        const std::vector<DropFlags>& drops, Rng& rng, bool use_retrieval,
                        int k_cond, int n_views) {
    const int B = static_cast<int>(batch.size());
    const int S = model.config.image_size;
    AssembledBatch out;

    std::vector<Image> targets;
    for (const auto& s : batch)
        for (const auto& img : s.targets) targets.push_back(img);
    if (static_cast<int>(targets.size()) != B * n_views)
        throw std::invalid_argument("loss: target count does not match the mode's view count");
    out.x0 = remap_to_signed(images_to_tensor(targets));

    // one shared timestep per sample across its views
    for (int b = 0; b < B; ++b) {
        const int t = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.T)));
        for (int v = 0; v < n_views; ++v) out.ts.push_back(t);
    }
    out.noise = Tensor::randn({B * n_views, S, S, 3}, rng);

    // x_t = sqrt(abar) x0 + sqrt(1-abar) eps, per-row coefficients
    Tensor ca({B * n_views, S, S, 3});
    Tensor cb({B * n_views, S, S, 3});
    const size_t per = static_cast<size_t>(S) * S * 3;
    for (int r = 0; r < B * n_views; ++r) {
        const double a = std::sqrt(sched.alpha_bars[out.ts[static_cast<size_t>(r)]]);
        const double b = std::sqrt(1.0 - sched.alpha_bars[out.ts[static_cast<size_t>(r)]]);
        std::fill(ca.data().begin() + r * per, ca.data().begin() + (r + 1) * per, a);
        std::fill(cb.data().begin() + r * per, cb.data().begin() + (r + 1) * per, b);
    }
    out.x_t = add(mul(out.x0, ca), mul(out.noise, cb));

    Tensor text = encode_prompts(model.text_encoder, batch, drops);
    out.text_tokens = n_views == 1 ? text : repeat_interleave0(text, n_views);
    if (use_retrieval) {
        Tensor ret = encode_retrieval(model, batch, drops, k_cond);
        out.ret_tokens = n_views == 1 ? ret : repeat_interleave0(ret, n_views);
    }
    if (n_views > 1) {
        for (const auto& s : batch)
            for (const auto& p : s.poses) out.poses.push_back(p);
    }
    (void)fusion;
    return out;
}

}  // namespace

Tensor loss_mode3d(MvRagModel& model, const NoiseSchedule& sched,
                   const std::vector<TrainingSample>& batch, const Fusion& fusion,
                   const std::vector<DropFlags>& drops, Rng& rng, bool use_retrieval, int k_cond) {
    if (batch.empty()) throw std::invalid_argument("loss_mode3d: empty batch");
    for (const auto& s : batch) {
        if (s.mode != BatchMode::Mode3D)
            throw std::invalid_argument("loss_mode3d: batch contains a non-3D sample");
        if (s.poses.size() != kNumViews || s.targets.size() != kNumViews)
            throw std::invalid_argument("loss_mode3d: sample must carry 4 targets and 4 poses");
    }
    AssembledBatch ab =
        assemble(model, sched, batch, fusion, drops, rng, use_retrieval, k_cond, kNumViews);
    Tensor eps_hat = model.denoiser.forward(ab.x_t, ab.ts, ab.text_tokens, ab.ret_tokens,
                                            &ab.poses, kNumViews, fusion);
    return mse(eps_hat, ab.noise);
}

Tensor loss_mode2d(MvRagModel& model, const NoiseSchedule& sched,
                   const std::vector<TrainingSample>& batch, const Fusion& fusion,
                   const std::vector<DropFlags>& drops, Rng& rng, int k_cond) {
    if (batch.empty()) throw std::invalid_argument("loss_mode2d: empty batch");
    for (const auto& s : batch) {
        if (s.mode != BatchMode::Mode2D)
            throw std::invalid_argument("loss_mode2d: batch contains a non-2D sample");
        if (!s.poses.empty())
            throw std::invalid_argument("loss_mode2d: poses present on a 2D sample");
        if (s.targets.size() != 1)
            throw std::invalid_argument("loss_mode2d: sample must carry exactly one target");
    }
    AssembledBatch ab = assemble(model, sched, batch, fusion, drops, rng, true, k_cond, 1);
    Tensor eps_hat =
        model.denoiser.forward(ab.x_t, ab.ts, ab.text_tokens, ab.ret_tokens, nullptr, 1, fusion);
    return mse(eps_hat, ab.noise);
}

// ---------------------------------------------------------------------------
// DDIM
// ---------------------------------------------------------------------------

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw std::invalid_argument("ddim_timesteps: steps must be in [1, T]");
    std::vector<int> ts(static_cast<size_t>(steps));
    if (steps == 1) {
        ts[0] = T - 1;
        return ts;
    }
    for (int j = 0; j < steps; ++j)
        ts[static_cast<size_t>(j)] =
            static_cast<int>(std::lround((steps - 1 - j) * (T - 1) / static_cast<double>(steps - 1)));
    return ts;
}

Tensor ddim_sample(MvRagModel& model, const NoiseSchedule& sched,
                   const SamplerConditioning& cond, const SamplerOptions& opts, uint64_t seed,
                   int n_views, const std::vector<CameraPose>* poses) {
    if (opts.eta != 0.0)
        throw std::invalid_argument("ddim_sample: only deterministic eta=0 is supported");
    if (opts.steps > sched.T) throw std::invalid_argument("ddim_sample: steps > T");
    if (poses && static_cast<int>(poses->size()) != n_views)
        throw std::invalid_argument("ddim_sample: invalid pose count");

    NoGradGuard ng;
    const int S = model.config.image_size;
    Rng rng = Rng(seed).derive("ddim_init");
    Tensor x = Tensor::randn({n_views, S, S, 3}, rng);

    Tensor text = repeat_interleave0(cond.text_tokens, n_views);
    Tensor ret;
    if (cond.ret_tokens.defined()) ret = repeat_interleave0(cond.ret_tokens, n_views);
    Tensor null_text = model.text_encoder.encode_null(n_views);

    const auto ts = ddim_timesteps(sched.T, opts.steps);
    for (size_t j = 0; j < ts.size(); ++j) {
        const int t = ts[j];
        const std::vector<int> t_rows(static_cast<size_t>(n_views), t);
        Tensor eps = model.denoiser.forward(x, t_rows, text, ret, poses, n_views, cond.fusion);
        if (opts.guidance_scale != 1.0) {
            Tensor eps_u = model.denoiser.forward(x, t_rows, null_text, Tensor(), poses, n_views,
                                                  Fusion::text_only());
            eps = add(eps_u, scale(sub(eps, eps_u), opts.guidance_scale));
        }
        const double ab_t = sched.alpha_bars[t];
        const double ab_prev = j + 1 < ts.size() ? sched.alpha_bars[ts[j + 1]] : sched.alpha_bars[0];
        // x0_hat = (x - sqrt(1-ab_t) eps) / sqrt(ab_t)
        Tensor x0_hat = scale(add(x, scale(eps, -std::sqrt(1.0 - ab_t))), 1.0 / std::sqrt(ab_t));
        x = add(scale(x0_hat, std::sqrt(ab_prev)), scale(eps, std::sqrt(1.0 - ab_prev)));
    }
    // remap to [0,1] and clamp
    Tensor out = scale(add_scalar(x, 1.0), 0.5);
    for (auto& v : out.data()) v = std::min(1.0, std::max(0.0, v));
    return out;
}

std::vector<Image> tensor_to_images(const Tensor& views) {
    const auto& s = views.shape();
    if (s.size() != 4 || s[3] != 3)
        throw std::invalid_argument("tensor_to_images: expected [V,H,W,3]");
    std::vector<Image> imgs;
    const size_t per = static_cast<size_t>(s[1]) * s[2] * 3;
    for (int v = 0; v < s[0]; ++v) {
        Image img(s[1], s[2]);
        std::copy(views.data().begin() + v * per, views.data().begin() + (v + 1) * per,
                  img.pix.begin());
        imgs.push_back(std::move(img));
    }
    return imgs;
}

}  // namespace mvrag
