// Wall-clock probe for one training step at the acceptance settings.
#include <chrono>
#include <cstdio>

#include "mvrag/diffusion.hpp"
#include "mvrag/optim.hpp"
#include "mvrag/trainer.hpp"

using namespace mvrag;
using clk = std::chrono::steady_clock;

int main() {
    DenoiserConfig cfg;
    MvRagModel model(cfg, 7, true);
    NoiseSchedule sched;
    auto specs = sample_spec_universe(24, 3);
    auto corpus = build_2d_corpus(specs, 6, 5, 32, 4);

    set_freeze_policy(model, TrainPhase::BasePretrain);
    auto base_train = trainable_params(model);
    AdamW opt(5e-5);
    Rng rng(1);

    auto time_step = [&](bool use_ret, int n3d, const Fusion& fusion,
                         std::vector<Parameter*>& params) {
        double total = 0;
        for (int it = 0; it < n3d; ++it) {
            std::vector<TrainingSample> batch;
            for (int b = 0; b < 2; ++b)
                batch.push_back(make_3d_sample(specs[b % specs.size()], 4, rng.next_u64(), 32));
            auto drops = condition_dropout(batch.size(), 0.1, 0.1, rng);
            const auto t0 = clk::now();
            Tensor loss = loss_mode3d(model, sched, batch, fusion, drops, rng, use_ret, 4);
            opt.zero_grad(params);
            loss.backward();
            opt.step(params);
            total += std::chrono::duration<double>(clk::now() - t0).count();
        }
        return total / n3d;
    };

    const double base_s = time_step(false, 3, Fusion::text_only(), base_train);
    std::printf("base 3D step (batch 8, text-only): %.3f s -> 2000 steps = %.1f min\n", base_s,
                base_s * 2000 / 60);

    set_freeze_policy(model, TrainPhase::AdapterTrain);
    auto ad_train = trainable_params(model);
    const double ad3_s = time_step(true, 3, Fusion::train(0.1), ad_train);

    auto ranges = corpus_class_ranges(corpus);
    double ad2_total = 0;
    for (int it = 0; it < 3; ++it) {
        std::vector<TrainingSample> batch;
        for (int b = 0; b < 8; ++b)
            batch.push_back(make_2d_sample(corpus, ranges[b % ranges.size()].first,
                                           ranges[b % ranges.size()].second, 4, rng.next_u64()));
        auto drops = condition_dropout(batch.size(), 0.1, 0.1, rng);
        const auto t0 = clk::now();
        Tensor loss = loss_mode2d(model, sched, batch, Fusion::train(0.1), drops, rng, 4);
        opt.zero_grad(ad_train);
        loss.backward();
        opt.step(ad_train);
        ad2_total += std::chrono::duration<double>(clk::now() - t0).count();
    }
    const double ad2_s = ad2_total / 3;
    std::printf("adapter 3D step: %.3f s, 2D step: %.3f s -> 2000 alternating = %.1f min\n", ad3_s,
                ad2_s, (1000 * ad3_s + 1000 * ad2_s) / 60);
    std::printf("criterion-8 total estimate: %.1f min\n",
                (2000 * base_s + 1000 * ad3_s + 1000 * ad2_s) / 60);

    // sampling probe: one 4-view generation at 50 steps with CFG
    {
        NoGradGuard ng;
        SamplerConditioning cond;
        cond.text_tokens = Tensor::randn({1, kTextLen, kDCond}, rng);
        cond.fusion = Fusion::text_only();
        auto poses = orthogonal_poses(30, 15);
        const auto t0 = clk::now();
        Tensor out = ddim_sample(model, sched, cond, SamplerOptions{}, 1, 4, &poses);
        std::printf("one 50-step CFG sample (4 views): %.2f s\n",
                    std::chrono::duration<double>(clk::now() - t0).count());
    }
    return 0;
}
