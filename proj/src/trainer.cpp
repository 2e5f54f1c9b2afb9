#include "mvrag/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <stdexcept>

#include "mvrag/optim.hpp"

namespace mvrag {

namespace {

double window_avg(const std::vector<double>& xs, size_t start, size_t count) {
    double s = 0;
    size_t n = 0;
    for (size_t i = start; i < std::min(xs.size(), start + count); ++i) {
        s += xs[i];
        ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

struct StepLogger {
    std::ofstream out;
    explicit StepLogger(const std::string& path) {
        if (!path.empty()) {
            out.open(path);
            if (!out) throw std::runtime_error("trainer: cannot open log " + path);
            out << "step\tmode\tloss\tlr\twall_ms\n";
        }
    }
    void log(int step, BatchMode mode, double loss, double lr, double wall_ms) {
        if (out.is_open())
            out << step << "\t" << (mode == BatchMode::Mode3D ? "3d" : "2d") << "\t" << loss
                << "\t" << lr << "\t" << wall_ms << "\n";
    }
};

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void count_suffixes(const std::vector<TrainingSample>& batch, TrainResult& res) {
    for (const auto& s : batch) {
        const bool suffixed = has_suffix(s.prompt, kAssetSuffix);
        if (s.mode == BatchMode::Mode3D) {
            ++res.prompts_3d;
            if (suffixed) ++res.prompts_3d_suffixed;
        } else {
            ++res.prompts_2d;
            if (suffixed) ++res.prompts_2d_suffixed;
        }
    }
}

}  // namespace

std::vector<std::pair<size_t, size_t>> corpus_class_ranges(const Corpus& corpus) {
    auto class_of = [](const std::string& id) {
        const auto pos = id.rfind('_');
        return pos == std::string::npos ? id : id.substr(0, pos);
    };
    std::vector<std::pair<size_t, size_t>> ranges;
    size_t start = 0;
    for (size_t i = 1; i <= corpus.records.size(); ++i) {
        if (i == corpus.records.size() ||
            class_of(corpus.records[i].id) != class_of(corpus.records[start].id)) {
            ranges.emplace_back(start, i - start);
            start = i;
        }
    }
    return ranges;
}

TrainResult pretrain_base(MvRagModel& model, const NoiseSchedule& sched, const TrainConfig& cfg,
                          const std::vector<ToyObjectSpec>& in_domain,
                          const std::vector<ToyObjectSpec>& ood_forbidden) {
    if (in_domain.empty()) throw std::invalid_argument("pretrain_base: empty training set");
    std::set<std::string> forbidden;
    for (const auto& s : ood_forbidden) forbidden.insert(s.id());

    set_freeze_policy(model, TrainPhase::BasePretrain);
    auto trainable = trainable_params(model);
    AdamW opt(cfg.lr);
    StepLogger logger(cfg.log_path);
    Rng root(cfg.seed);
    TrainResult res;

    for (int step = 0; step < cfg.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng step_rng = root.derive("base_step", static_cast<uint64_t>(step));
        std::vector<TrainingSample> batch;
        const int samples = std::max(1, cfg.batch_size / kNumViews);
        for (int b = 0; b < samples; ++b) {
            const auto& spec = in_domain[step_rng.uniform_int(in_domain.size())];
            if (forbidden.count(spec.id()))
                throw std::runtime_error("pretrain_base: OOD spec in training stream: " + spec.id());
            batch.push_back(make_3d_sample(spec, cfg.k_cond, step_rng.next_u64(),
                                           model.config.image_size));
        }
        count_suffixes(batch, res);
        auto drops = condition_dropout(batch.size(), cfg.p_text, 0.0, step_rng);
        Tensor loss = loss_mode3d(model, sched, batch, Fusion::text_only(), drops, step_rng,
                                  /*use_retrieval=*/false, cfg.k_cond);
        opt.zero_grad(trainable);
        loss.backward();
        opt.step(trainable);
        const double l = loss.item();
        res.losses.push_back(l);
        res.modes.push_back(BatchMode::Mode3D);
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        logger.log(step, BatchMode::Mode3D, l, cfg.lr, ms);
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            !cfg.checkpoint_path.empty())
            save_checkpoint(model, cfg.checkpoint_path);
    }
    res.first_window_avg = window_avg(res.losses, 0, 50);
    res.last_window_avg =
        window_avg(res.losses, res.losses.size() > 50 ? res.losses.size() - 50 : 0, 50);
    if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    return res;
}

TrainResult train_adapter(MvRagModel& model, const NoiseSchedule& sched, const TrainConfig& cfg,
                          const std::vector<ToyObjectSpec>& specs_3d, const Corpus& corpus_2d) {
    if (specs_3d.empty()) throw std::invalid_argument("train_adapter: empty 3D spec list");
    if (!model.denoiser.has_retrieval())
        throw std::invalid_argument("train_adapter: model has no retrieval projections");
    const auto classes = corpus_class_ranges(corpus_2d);
    for (const auto& [start, len] : classes)
        if (len < static_cast<size_t>(cfg.k_cond) + 1)
            throw std::invalid_argument("train_adapter: a 2D class has fewer than K+1 images");

    set_freeze_policy(model, TrainPhase::AdapterTrain);
    auto trainable = trainable_params(model);
    auto frozen = frozen_params(model);
    TrainResult res;
    res.frozen_checksum_before = params_checksum(frozen);

    AdamW opt(cfg.lr);
    StepLogger logger(cfg.log_path);
    Rng root(cfg.seed);
    const Fusion fusion = Fusion::train(cfg.lambda_train);

    for (int step = 0; step < cfg.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng step_rng = root.derive("adapter_step", static_cast<uint64_t>(step));
        const BatchMode mode = step % 2 == 0 ? BatchMode::Mode3D : BatchMode::Mode2D;
        std::vector<TrainingSample> batch;
        if (mode == BatchMode::Mode3D) {
            const int samples = std::max(1, cfg.batch_size / kNumViews);
            for (int b = 0; b < samples; ++b) {
                const auto& spec = specs_3d[step_rng.uniform_int(specs_3d.size())];
                batch.push_back(make_3d_sample(spec, cfg.k_cond, step_rng.next_u64(),
                                               model.config.image_size));
            }
        } else {
            for (int b = 0; b < cfg.batch_size; ++b) {
                const auto& [start, len] = classes[step_rng.uniform_int(classes.size())];
                batch.push_back(make_2d_sample(corpus_2d, start, len, cfg.k_cond,
                                               step_rng.next_u64()));
            }
        }
        count_suffixes(batch, res);
        auto drops = condition_dropout(batch.size(), cfg.p_text, cfg.p_ret, step_rng);
        Tensor loss = mode == BatchMode::Mode3D
                          ? loss_mode3d(model, sched, batch, fusion, drops, step_rng, true,
                                        cfg.k_cond)
                          : loss_mode2d(model, sched, batch, fusion, drops, step_rng, cfg.k_cond);
        opt.zero_grad(trainable);
        loss.backward();
        opt.step(trainable);
        const double l = loss.item();
        res.losses.push_back(l);
        res.modes.push_back(mode);
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        logger.log(step, mode, l, cfg.lr, ms);
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            !cfg.checkpoint_path.empty())
            save_checkpoint(model, cfg.checkpoint_path);
    }
    res.first_window_avg = window_avg(res.losses, 0, 50);
    res.last_window_avg =
        window_avg(res.losses, res.losses.size() > 50 ? res.losses.size() - 50 : 0, 50);
    res.frozen_checksum_after = params_checksum(frozen);
    if (res.frozen_checksum_after != res.frozen_checksum_before)
        throw std::runtime_error("train_adapter: frozen-weight mutation detected");
    if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    return res;
}

}  // namespace mvrag
