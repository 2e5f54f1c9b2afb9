#include "mvrag/inference.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mvrag {

std::vector<CameraPose> generation_poses(const InferenceConfig& cfg) {
    return orthogonal_poses(cfg.base_azimuth, cfg.elevation);
}

std::string model_prompt(const std::string& prompt) {
    const std::string suffix = kAssetSuffix;
    if (prompt.size() >= suffix.size() &&
        prompt.compare(prompt.size() - suffix.size(), suffix.size(), suffix) == 0)
        return prompt;
    return prompt + suffix;
}

FusionParams estimate_alpha(MvRagModel& model, const NoiseSchedule& sched,
                            const std::string& prompt, const std::vector<Image>& retrieved,
                            uint64_t seed, const InferenceConfig& cfg) {
    if (retrieved.empty())
        throw std::invalid_argument("estimate_alpha: empty retrieval set (take the fallback)");
    FusionParams fp;
    fp.lambda_prime = cfg.lambda_prime;
    fp.probe_steps = cfg.probe_steps;
    fp.s_lo = cfg.s_lo;
    fp.s_hi = cfg.s_hi;

    const auto poses = generation_poses(cfg);
    SamplerConditioning probe_cond;
    probe_cond.text_tokens =
        reshape(model.text_encoder.encode(model_prompt(prompt)), {1, kTextLen, kDCond});
    probe_cond.fusion = Fusion::text_only();
    SamplerOptions probe_opts = cfg.sampler;
    probe_opts.steps = cfg.probe_steps;
    Tensor probe = ddim_sample(model, sched, probe_cond, probe_opts,
                               Rng(seed).derive("alpha_probe").next_u64(), kNumViews, &poses);
    const auto probe_views = tensor_to_images(probe);

    double total = 0;
    int n = 0;
    for (const auto& view : probe_views)
        for (const auto& ret : retrieved) {
            total += pooled_similarity(model.image_encoder, view, ret);
            ++n;
        }
    fp.similarity = total / n;
    const double t = (fp.similarity - fp.s_lo) / (fp.s_hi - fp.s_lo);
    fp.alpha = fp.lambda_prime * std::min(1.0, std::max(0.0, t));
    return fp;
}

std::vector<Image> sample_text_only(MvRagModel& model, const NoiseSchedule& sched,
                                    const std::string& prompt, uint64_t seed,
                                    const InferenceConfig& cfg) {
    const auto poses = generation_poses(cfg);
    SamplerConditioning cond;
    cond.text_tokens =
        reshape(model.text_encoder.encode(model_prompt(prompt)), {1, kTextLen, kDCond});
    cond.fusion = Fusion::text_only();
    Tensor out = ddim_sample(model, sched, cond, cfg.sampler, seed, kNumViews, &poses);
    return tensor_to_images(out);
}

std::vector<Image> generate(MvRagModel& model, const NoiseSchedule& sched,
                            const InvertedIndex& index, const std::string& prompt, uint64_t seed,
                            const InferenceConfig& cfg, GenerateReport* report) {
    GenerateReport rep;
    rep.prompt = prompt;
    rep.seed = seed;
    rep.steps = cfg.sampler.steps;
    rep.guidance_scale = cfg.sampler.guidance_scale;
    rep.lambda_prime = cfg.lambda_prime;

    auto hits = query(index, prompt, cfg.k, cfg.bm25_k1, cfg.bm25_b);
    const auto prompt_emb = model.text_encoder.pooled(prompt);
    auto kept = threshold_filter(hits, cfg.tau, [&](const std::string& caption) {
        return cosine(prompt_emb, model.text_encoder.pooled(caption));
    });

    std::vector<Image> images;
    for (const auto& h : kept) {
        const fs::path p = fs::path(index.corpus_dir()) / h.record.image;
        try {
            images.push_back(read_png(p.string()));
            rep.hit_ids.push_back(h.record.id);
        } catch (const std::exception& e) {
            rep.warnings.push_back(std::string("skipping ") + h.record.id + ": " + e.what());
        }
    }
    rep.k_prime = static_cast<int>(images.size());

    std::vector<Image> out;
    if (images.empty()) {
        rep.fallback = true;
        rep.alpha = 0.0;
        rep.similarity = 0.0;
        out = sample_text_only(model, sched, prompt, seed, cfg);
    } else {
        const FusionParams fp = estimate_alpha(model, sched, prompt, images, seed, cfg);
        rep.similarity = fp.similarity;
        rep.alpha = fp.alpha;
        const auto poses = generation_poses(cfg);
        SamplerConditioning cond;
        cond.text_tokens =
            reshape(model.text_encoder.encode(model_prompt(prompt)), {1, kTextLen, kDCond});
        Tensor tokens = model.resampler.tokens_for_images(model.image_encoder, images);
        cond.ret_tokens = reshape(tokens, {1, tokens.dim(0), tokens.dim(1)});
        cond.fusion = Fusion::infer(fp.alpha, fp.lambda_prime);
        Tensor views = ddim_sample(model, sched, cond, cfg.sampler, seed, kNumViews, &poses);
        out = tensor_to_images(views);
    }
    if (report) *report = rep;
    return out;
}

void write_report_json(const GenerateReport& rep, const std::string& path) {
    json j = {{"prompt", rep.prompt},
              {"hit_ids", rep.hit_ids},
              {"k_prime", rep.k_prime},
              {"similarity", rep.similarity},
              {"alpha", rep.alpha},
              {"lambda_prime", rep.lambda_prime},
              {"fallback", rep.fallback},
              {"seed", rep.seed},
              {"steps", rep.steps},
              {"guidance_scale", rep.guidance_scale}};
    if (!rep.warnings.empty()) j["warnings"] = rep.warnings;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_report_json: cannot write " + path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// sweep / evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<Image> gt_views(const ToyObjectSpec& spec, const InferenceConfig& cfg, uint64_t seed) {
    std::vector<Image> views;
    const auto poses = generation_poses(cfg);
    for (size_t i = 0; i < poses.size(); ++i) {
        Rng rng = sample_rng(seed, "gt_" + spec.id(), i);
        views.push_back(render(spec, poses[i], 32, rng));
    }
    return views;
}

double mean_view_psnr(const std::vector<Image>& a, const std::vector<Image>& b) {
    std::vector<double> vals;
    for (size_t i = 0; i < a.size(); ++i) vals.push_back(psnr(a[i], b[i]));
    return mean(vals);
}

double mean_view_ssim(const std::vector<Image>& a, const std::vector<Image>& b) {
    std::vector<double> vals;
    for (size_t i = 0; i < a.size(); ++i) vals.push_back(ssim(a[i], b[i]));
    return mean(vals);
}

double mean_view_similarity(const PatchEncoder& enc, const std::vector<Image>& gen,
                            const std::vector<Image>& gt) {
    std::vector<double> vals;
    for (size_t i = 0; i < gen.size(); ++i)
        vals.push_back(pooled_similarity(enc, gen[i], gt[i]));
    return mean(vals);
}

}  // namespace

std::vector<SweepRow> sweep_k(MvRagModel& model, const NoiseSchedule& sched,
                              const InvertedIndex& index,
                              const std::vector<ToyObjectSpec>& specs,
                              const std::vector<int>& k_values, uint64_t seed,
                              const InferenceConfig& cfg) {
    // corpus depth precheck
    int max_k = 0;
    for (int k : k_values) max_k = std::max(max_k, k);
    std::map<std::string, int> per_caption;
    for (const auto& d : index.docs()) ++per_caption[d.caption];
    for (const auto& spec : specs) {
        auto it = per_caption.find(spec.caption());
        if (it == per_caption.end() || it->second < max_k)
            throw std::invalid_argument("sweep_k: corpus has fewer than " + std::to_string(max_k) +
                                        " images for " + spec.caption());
    }

    std::vector<SweepRow> rows;
    for (int k : k_values) {
        std::vector<double> psnrs, sims;
        for (size_t si = 0; si < specs.size(); ++si) {
            const auto& spec = specs[si];
            const uint64_t s = Rng(seed).derive("sweep", si).next_u64();
            const auto gt = gt_views(spec, cfg, s);
            std::vector<Image> gen;
            if (k == 0) {
                gen = sample_text_only(model, sched, spec.caption(), s, cfg);
            } else {
                InferenceConfig kcfg = cfg;
                kcfg.k = k;
                GenerateReport rep;
                gen = generate(model, sched, index, spec.caption(), s, kcfg, &rep);
            }
            psnrs.push_back(mean_view_psnr(gen, gt));
            sims.push_back(mean_view_similarity(model.image_encoder, gen, gt));
        }
        rows.push_back({k, mean(psnrs), mean(sims)});
    }
    return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "  K   mean_PSNR   mean_similarity\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%3d   %9.3f   %15.4f\n", r.k, r.mean_psnr,
                      r.mean_similarity);
        os << buf;
    }
    return os.str();
}

EvalReport evaluate_suite(MvRagModel& model, const NoiseSchedule& sched,
                          const InvertedIndex& index, const std::vector<ToyObjectSpec>& split,
                          const std::string& split_name, uint64_t seed,
                          const InferenceConfig& cfg) {
    EvalReport report;
    report.split = split_name;
    std::vector<double> pb, pm, sb, sm, alphas;
    for (size_t si = 0; si < split.size(); ++si) {
        const auto& spec = split[si];
        const uint64_t s = Rng(seed).derive("eval_" + split_name, si).next_u64();
        const auto gt = gt_views(spec, cfg, s);

        EvalRow row;
        row.prompt = spec.caption();
        const auto base_views = sample_text_only(model, sched, spec.caption(), s, cfg);
        GenerateReport rep;
        const auto mvrag_views = generate(model, sched, index, spec.caption(), s, cfg, &rep);
        row.psnr_base = mean_view_psnr(base_views, gt);
        row.psnr_mvrag = mean_view_psnr(mvrag_views, gt);
        row.ssim_base = mean_view_ssim(base_views, gt);
        row.ssim_mvrag = mean_view_ssim(mvrag_views, gt);
        row.sim_base = mean_view_similarity(model.image_encoder, base_views, gt);
        row.sim_mvrag = mean_view_similarity(model.image_encoder, mvrag_views, gt);
        row.alpha = rep.alpha;
        row.fallback = rep.fallback;
        report.rows.push_back(row);
        pb.push_back(row.psnr_base);
        pm.push_back(row.psnr_mvrag);
        sb.push_back(row.ssim_base);
        sm.push_back(row.ssim_mvrag);
        alphas.push_back(row.alpha);
    }
    report.median_psnr_base = median(pb);
    report.median_psnr_mvrag = median(pm);
    report.mean_ssim_base = mean(sb);
    report.mean_ssim_mvrag = mean(sm);
    report.mean_alpha = mean(alphas);
    return report;
}

void write_eval_report(const EvalReport& report, const std::string& json_path) {
    json rows = json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"prompt", r.prompt},
                        {"psnr_base", r.psnr_base},
                        {"psnr_mvrag", r.psnr_mvrag},
                        {"ssim_base", r.ssim_base},
                        {"ssim_mvrag", r.ssim_mvrag},
                        {"sim_base", r.sim_base},
                        {"sim_mvrag", r.sim_mvrag},
                        {"alpha", r.alpha},
                        {"fallback", r.fallback}});
    json j = {{"split", report.split},
              {"rows", rows},
              {"median_psnr_base", report.median_psnr_base},
              {"median_psnr_mvrag", report.median_psnr_mvrag},
              {"mean_ssim_base", report.mean_ssim_base},
              {"mean_ssim_mvrag", report.mean_ssim_mvrag},
              {"mean_alpha", report.mean_alpha}};
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("write_eval_report: cannot write " + json_path);
    out << j.dump(2) << "\n";
}

std::string eval_table(const EvalReport& report) {
    std::ostringstream os;
    os << "split=" << report.split << "\n";
    os << "prompt\tpsnr_base\tpsnr_mvrag\tssim_base\tssim_mvrag\talpha\tfallback\n";
    char buf[256];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%s\t%.3f\t%.3f\t%.4f\t%.4f\t%.3f\t%d\n", r.prompt.c_str(),
                      r.psnr_base, r.psnr_mvrag, r.ssim_base, r.ssim_mvrag, r.alpha,
                      r.fallback ? 1 : 0);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "median_psnr base=%.3f mvrag=%.3f | mean_ssim base=%.4f mvrag=%.4f | mean_alpha=%.3f\n",
                  report.median_psnr_base, report.median_psnr_mvrag, report.mean_ssim_base,
                  report.mean_ssim_mvrag, report.mean_alpha);
    os << buf;
    return os.str();
}

}  // namespace mvrag
