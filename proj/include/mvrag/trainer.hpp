#pragma once

#include <string>
#include <vector>

#include "mvrag/checkpoint.hpp"
#include "mvrag/diffusion.hpp"

namespace mvrag {

struct TrainConfig {
    TrainPhase phase = TrainPhase::BasePretrain;
    double lr = 5e-5;  // reference setting 5e-6, scaled x10 for this model size
    int batch_size = 8;  // target view-images per step (image-level batch)
    int total_steps = 2000;
    uint64_t seed = 0;
    int checkpoint_every = 0;  // 0: only the final checkpoint
    double lambda_train = 0.1;
    double p_text = 0.1;
    double p_ret = 0.1;
    int k_cond = 4;
    std::string log_path;         // TSV: step, mode, loss, lr, wall_ms
    std::string checkpoint_path;  // empty: no checkpoint written
};

struct TrainResult {
    std::vector<double> losses;
    std::vector<BatchMode> modes;
    // moving averages over the first and last 50 steps of each mode mix
    double first_window_avg = 0.0;
    double last_window_avg = 0.0;
    // suffix compliance counters
    int prompts_3d = 0, prompts_3d_suffixed = 0;
    int prompts_2d = 0, prompts_2d_suffixed = 0;
    uint64_t frozen_checksum_before = 0, frozen_checksum_after = 0;
};

// Text-only multiview pretraining on in-domain specs. Throws if a spec from
// the forbidden (OOD) list ever enters the training stream.
TrainResult pretrain_base(MvRagModel& model, const NoiseSchedule& sched, const TrainConfig& cfg,
                          const std::vector<ToyObjectSpec>& in_domain,
                          const std::vector<ToyObjectSpec>& ood_forbidden);

// Hybrid adapter training: strict Mode3D/Mode2D alternation, adapter freeze
// policy, frozen-weight audit (throws on mutation).
TrainResult train_adapter(MvRagModel& model, const NoiseSchedule& sched, const TrainConfig& cfg,
                          const std::vector<ToyObjectSpec>& specs_3d, const Corpus& corpus_2d);

// Contiguous [start, len) record ranges per class (record id prefix).
std::vector<std::pair<size_t, size_t>> corpus_class_ranges(const Corpus& corpus);

}  // namespace mvrag
