#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mvrag/diffusion.hpp"
#include "mvrag/metrics.hpp"
#include "mvrag/retrieval.hpp"

namespace mvrag {

struct FusionParams {
    double alpha = 0.0;
    double lambda_prime = 1.0;
    int probe_steps = 10;
    double similarity = 0.0;
    double s_lo = 0.2, s_hi = 0.8;
};

struct InferenceConfig {
    int k = 4;
    double tau = 0.3;
    double lambda_prime = 1.0;
    int probe_steps = 10;
    double s_lo = 0.2, s_hi = 0.8;
    SamplerOptions sampler;       // 50 steps, CFG 5.0
    double base_azimuth = 30.0;   // generation pose set
    double elevation = 15.0;
    double bm25_k1 = InvertedIndex::kDefaultK1;
    double bm25_b = InvertedIndex::kDefaultB;
};

std::vector<CameraPose> generation_poses(const InferenceConfig& cfg);

// Model prompt for multiview generation: the user prompt with the 3D-mode tag.
std::string model_prompt(const std::string& prompt);

// Short text-only probe at the generation poses; alpha maps the mean probe /
// retrieved-image similarity through the linear clamp between the knees.
FusionParams estimate_alpha(MvRagModel& model, const NoiseSchedule& sched,
                            const std::string& prompt, const std::vector<Image>& retrieved,
                            uint64_t seed, const InferenceConfig& cfg);

struct GenerateReport {
    std::string prompt;
    std::vector<std::string> hit_ids;
    int k_prime = 0;
    double similarity = 0.0;
    double alpha = 0.0;
    double lambda_prime = 1.0;
    bool fallback = false;
    uint64_t seed = 0;
    int steps = 0;
    double guidance_scale = 0.0;
    std::vector<std::string> warnings;
};

// The full inference pipeline. K'=0 falls back to text-only base sampling
// (bitwise identical to sample_text_only with the same seed).
std::vector<Image> generate(MvRagModel& model, const NoiseSchedule& sched,
                            const InvertedIndex& index, const std::string& prompt, uint64_t seed,
                            const InferenceConfig& cfg, GenerateReport* report);

// Base-model sampling of the same pose set (the fallback path's target).
std::vector<Image> sample_text_only(MvRagModel& model, const NoiseSchedule& sched,
                                    const std::string& prompt, uint64_t seed,
                                    const InferenceConfig& cfg);

void write_report_json(const GenerateReport& report, const std::string& path);

// --------------------------------------------------------------------------
// K sweep and the evaluation suite
// --------------------------------------------------------------------------

struct SweepRow {
    int k = 0;
    double mean_psnr = 0.0;
    double mean_similarity = 0.0;
};

// Per-K mean PSNR / pooled similarity against ground-truth views of each
// spec; K=0 evaluates the text-only fallback.
std::vector<SweepRow> sweep_k(MvRagModel& model, const NoiseSchedule& sched,
                              const InvertedIndex& index,
                              const std::vector<ToyObjectSpec>& specs,
                              const std::vector<int>& k_values, uint64_t seed,
                              const InferenceConfig& cfg);

std::string sweep_table(const std::vector<SweepRow>& rows);

struct EvalRow {
    std::string prompt;
    double psnr_base = 0, psnr_mvrag = 0;
    double ssim_base = 0, ssim_mvrag = 0;
    double sim_base = 0, sim_mvrag = 0;  // pooled similarity to GT views
    double alpha = 0;
    bool fallback = false;
};

struct EvalReport {
    std::string split;
    std::vector<EvalRow> rows;
    double median_psnr_base = 0, median_psnr_mvrag = 0;
    double mean_ssim_base = 0, mean_ssim_mvrag = 0;
    double mean_alpha = 0;
};

// Renders GT views per spec, evaluates base and MV-RAG generations against
// them, aggregates medians/means. Deterministic given (models, split, seed).
EvalReport evaluate_suite(MvRagModel& model, const NoiseSchedule& sched,
                          const InvertedIndex& index, const std::vector<ToyObjectSpec>& split,
                          const std::string& split_name, uint64_t seed,
                          const InferenceConfig& cfg);

void write_eval_report(const EvalReport& report, const std::string& json_path);
std::string eval_table(const EvalReport& report);

}  // namespace mvrag
