// mvrag: retrieval-augmented multiview diffusion, end to end.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "mvrag/inference.hpp"
#include "mvrag/trainer.hpp"

namespace fs = std::filesystem;
using namespace mvrag;

namespace {

std::string slugify(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else if (!out.empty() && out.back() != '-')
            out += '-';
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out.empty() ? "prompt" : out;
}

Corpus load_training_corpus(const std::string& data_dir, bool images) {
    return load_corpus((fs::path(data_dir) / "corpus").string(), images);
}

std::vector<ToyObjectSpec> load_split_specs(const std::string& data_dir, const std::string& name) {
    return read_split((fs::path(data_dir) / "splits" / (name + ".txt")).string());
}

// Corpus restricted to the classes of the given specs (2D-mode training data).
Corpus filter_corpus(const Corpus& corpus, const std::vector<ToyObjectSpec>& specs) {
    std::set<std::string> keep;
    for (const auto& s : specs) keep.insert(s.id());
    auto class_of = [](const std::string& id) {
        const auto pos = id.rfind('_');
        return pos == std::string::npos ? id : id.substr(0, pos);
    };
    Corpus out;
    out.dir = corpus.dir;
    for (size_t i = 0; i < corpus.records.size(); ++i) {
        if (!keep.count(class_of(corpus.records[i].id))) continue;
        out.records.push_back(corpus.records[i]);
        if (!corpus.images.empty()) out.images.push_back(corpus.images[i]);
    }
    return out;
}

struct RareNameCorpus {
    Corpus corpus;
    std::map<std::string, std::vector<std::string>> relevant;  // prompt -> relevant ids
};

// Synthetic ablation corpus: rare multi-word names share their class word with
// many distractors, mirroring the out-of-domain retrieval setting.
RareNameCorpus build_rare_name_corpus(uint64_t seed) {
    const char* syllables[] = {"rat", "bo", "ler", "mar", "khor", "zen", "qui", "vel",
                               "dun", "sha", "tor", "mil", "gra", "nex", "pol", "yar"};
    const char* classes[] = {"dog", "car", "goat", "chair", "lamp"};
    RareNameCorpus out;
    Rng rng(seed);
    auto specs = sample_spec_universe(25, seed + 1);
    int spec_i = 0;
    for (int cid = 0; cid < 25; ++cid) {
        std::string name;
        for (int w = 0; w < 2 + static_cast<int>(rng.uniform_int(2)); ++w) {
            std::string word;
            for (int s = 0; s < 2 + static_cast<int>(rng.uniform_int(2)); ++s)
                word += syllables[rng.uniform_int(16)];
            name += (w ? " " : "") + word;
        }
        const std::string cls = classes[cid % 5];
        const std::string caption = name + " " + cls;
        const auto& spec = specs[spec_i++ % specs.size()];
        for (int img = 0; img < 5; ++img) {
            Rng r = sample_rng(seed, "rare_" + std::to_string(cid), img);
            const double az = r.uniform(0.0, 360.0);
            const double el = r.uniform(-5.0, 30.0);
            Image im = augment(render(spec, CameraPose::from_angles(az, el), 32, r), r, 0.5);
            CorpusRecord rec;
            rec.id = "c" + std::to_string(cid) + "_" + std::to_string(img);
            rec.caption = caption;
            rec.image = "";
            out.corpus.records.push_back(rec);
            out.corpus.images.push_back(std::move(im));
            out.relevant[caption].push_back(rec.id);
        }
    }
    return out;
}

struct AblationRow {
    std::string method;
    double precision = 0.0;
};

std::vector<AblationRow> run_retrieval_ablation(const TextEncoder& te, const PatchEncoder& pe,
                                                uint64_t seed) {
    auto rare = build_rare_name_corpus(seed);
    auto index = InvertedIndex::build(rare.corpus);
    std::vector<std::vector<double>> text_embs, image_embs;
    for (size_t i = 0; i < rare.corpus.records.size(); ++i) {
        text_embs.push_back(te.pooled(rare.corpus.records[i].caption));
        image_embs.push_back(pe.pooled_features(rare.corpus.images[i]));
    }
    double p_bm25 = 0, p_tt = 0, p_ti = 0;
    int n = 0;
    for (const auto& [prompt, relevant] : rare.relevant) {
        const auto pe_prompt = te.pooled(prompt);
        p_bm25 += precision_at_k(query(index, prompt, 5), relevant, 5);
        p_tt += precision_at_k(embedding_query(index, text_embs, pe_prompt, 5), relevant, 5);
        p_ti += precision_at_k(embedding_query(index, image_embs, pe_prompt, 5), relevant, 5);
        ++n;
    }
    return {{"bm25", p_bm25 / n}, {"embed-tt", p_tt / n}, {"embed-ti", p_ti / n}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mvrag: retrieval-augmented multiview diffusion at desk scale"};
    app.set_config("--config", "", "flat key=value configuration file");
    app.require_subcommand(1);
    app.fallthrough();
    app.option_defaults()->always_capture_default();

    uint64_t seed = 0;
    app.add_option("--seed", seed, "global random seed")->capture_default_str();

    // ---- gen-data ----
    auto* gen_data = app.add_subcommand("gen-data", "generate the synthetic corpus and splits");
    std::string gd_out = "data";
    int gd_classes = 120, gd_images = 9;
    double gd_holdout = 0.2;
    gen_data->add_option("--out", gd_out, "output dataset directory");
    gen_data->add_option("--classes", gd_classes, "number of object classes");
    gen_data->add_option("--images-per-class", gd_images, "corpus images per class");
    gen_data->add_option("--holdout", gd_holdout, "OOD holdout fraction");

    // ---- build-index ----
    auto* build_idx = app.add_subcommand("build-index", "build the BM25 index over a corpus");
    std::string bi_corpus = "data/corpus", bi_out = "index.bin";
    build_idx->add_option("--corpus", bi_corpus, "corpus directory (manifest.jsonl)");
    build_idx->add_option("--out", bi_out, "index output file");

    // ---- retrieve ----
    auto* retrieve_cmd = app.add_subcommand("retrieve", "query the BM25 index");
    std::string rt_index = "index.bin", rt_prompt, rt_ckpt;
    int rt_k = 4;
    double rt_tau = -1.0;
    retrieve_cmd->add_option("--index", rt_index, "index file");
    retrieve_cmd->add_option("--prompt", rt_prompt, "query prompt")->required();
    retrieve_cmd->add_option("--k", rt_k, "number of hits");
    retrieve_cmd->add_option("--tau", rt_tau, "similarity threshold (needs --checkpoint)");
    retrieve_cmd->add_option("--checkpoint", rt_ckpt, "model checkpoint for the text encoder");

    // ---- pretrain-base ----
    auto* pre_base = app.add_subcommand("pretrain-base",
                                        "pretrain the text-only multiview base model");
    std::string pb_data = "data", pb_out = "base.ckpt", pb_log;
    TrainConfig pb_cfg;
    int pb_enc_epochs = 20;
    pre_base->add_option("--data", pb_data, "dataset directory from gen-data");
    pre_base->add_option("--out", pb_out, "checkpoint output");
    pre_base->add_option("--steps", pb_cfg.total_steps, "training steps");
    pre_base->add_option("--lr", pb_cfg.lr, "learning rate");
    pre_base->add_option("--batch", pb_cfg.batch_size, "view-images per step");
    pre_base->add_option("--log", pb_log, "training log TSV path");
    pre_base->add_option("--encoder-epochs", pb_enc_epochs, "image-encoder pretraining epochs");

    // ---- train-adapter ----
    auto* tr_adapter = app.add_subcommand("train-adapter",
                                          "hybrid 2D/3D adapter training from a base checkpoint");
    std::string ta_data = "data", ta_base = "base.ckpt", ta_out = "adapter.ckpt", ta_log;
    TrainConfig ta_cfg;
    tr_adapter->add_option("--data", ta_data, "dataset directory");
    tr_adapter->add_option("--base", ta_base, "base checkpoint");
    tr_adapter->add_option("--out", ta_out, "checkpoint output");
    tr_adapter->add_option("--steps", ta_cfg.total_steps, "training steps");
    tr_adapter->add_option("--lr", ta_cfg.lr, "learning rate");
    tr_adapter->add_option("--batch", ta_cfg.batch_size, "view-images per step");
    tr_adapter->add_option("--lambda", ta_cfg.lambda_train, "training text weight");
    tr_adapter->add_option("--log", ta_log, "training log TSV path");

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "retrieve, probe, and generate 4 views");
    std::string g_ckpt = "adapter.ckpt", g_index = "index.bin", g_prompt, g_out = "out";
    InferenceConfig g_cfg;
    gen->add_option("--checkpoint", g_ckpt, "model checkpoint");
    gen->add_option("--index", g_index, "BM25 index");
    gen->add_option("--prompt", g_prompt, "text prompt")->required();
    gen->add_option("--out", g_out, "output directory");
    gen->add_option("--k", g_cfg.k, "retrieved images");
    gen->add_option("--tau", g_cfg.tau, "similarity threshold");
    gen->add_option("--steps", g_cfg.sampler.steps, "DDIM steps");
    gen->add_option("--guidance", g_cfg.sampler.guidance_scale, "CFG scale");
    gen->add_option("--lambda-prime", g_cfg.lambda_prime, "inference fusion budget");
    gen->add_option("--probe-steps", g_cfg.probe_steps, "alpha probe DDIM steps");
    gen->add_option("--s-lo", g_cfg.s_lo, "alpha mapping lower knee");
    gen->add_option("--s-hi", g_cfg.s_hi, "alpha mapping upper knee");
    gen->add_option("--elevation", g_cfg.elevation, "camera elevation (degrees)");
    gen->add_option("--base-azimuth", g_cfg.base_azimuth, "first view azimuth (degrees)");

    // ---- sweep-k ----
    auto* sweep = app.add_subcommand("sweep-k", "PSNR/similarity sweep over retrieved-image count");
    std::string sk_ckpt = "adapter.ckpt", sk_index = "index.bin", sk_data = "data",
                sk_split = "ood", sk_out;
    std::string sk_kvals = "0,1,2,4,8";
    int sk_limit = 8;
    InferenceConfig sk_cfg;
    sweep->add_option("--checkpoint", sk_ckpt, "model checkpoint");
    sweep->add_option("--index", sk_index, "BM25 index");
    sweep->add_option("--data", sk_data, "dataset directory");
    sweep->add_option("--split", sk_split, "split name (in_domain|ood)");
    sweep->add_option("--k-values", sk_kvals, "comma-separated K values");
    sweep->add_option("--limit", sk_limit, "number of prompts");
    sweep->add_option("--out", sk_out, "machine-readable TSV output path");
    sweep->add_option("--steps", sk_cfg.sampler.steps, "DDIM steps");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate base vs MV-RAG on a split");
    std::string ev_ckpt = "adapter.ckpt", ev_index = "index.bin", ev_data = "data",
                ev_split = "ood", ev_out = "eval_report.json";
    int ev_limit = 0;
    InferenceConfig ev_cfg;
    eval_cmd->add_option("--checkpoint", ev_ckpt, "model checkpoint");
    eval_cmd->add_option("--index", ev_index, "BM25 index");
    eval_cmd->add_option("--data", ev_data, "dataset directory");
    eval_cmd->add_option("--split", ev_split, "split name (in_domain|ood)");
    eval_cmd->add_option("--limit", ev_limit, "cap on prompts (0 = all)");
    eval_cmd->add_option("--out", ev_out, "JSON report path");
    eval_cmd->add_option("--steps", ev_cfg.sampler.steps, "DDIM steps");
    eval_cmd->add_option("--guidance", ev_cfg.sampler.guidance_scale, "CFG scale");

    // ---- ablate-retrieval ----
    auto* ablate = app.add_subcommand("ablate-retrieval",
                                      "compare bm25 / embed-tt / embed-ti precision@5");
    std::string ab_ckpt;
    ablate->add_option("--checkpoint", ab_ckpt, "optional checkpoint for trained encoders");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help text, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage error
    }

    try {
        NoiseSchedule sched;
        if (gen_data->parsed()) {
            auto specs = sample_spec_universe(gd_classes, seed);
            auto [in_domain, ood] = make_ood_split(specs, gd_holdout, seed);
            auto corpus = build_2d_corpus(specs, gd_images, seed, 32, 4);
            write_corpus(corpus, (fs::path(gd_out) / "corpus").string());
            write_split(in_domain, (fs::path(gd_out) / "splits" / "in_domain.txt").string());
            write_split(ood, (fs::path(gd_out) / "splits" / "ood.txt").string());
            std::cout << "wrote " << corpus.records.size() << " corpus records, "
                      << in_domain.size() << " in-domain / " << ood.size() << " ood classes to "
                      << gd_out << "\n";
        } else if (build_idx->parsed()) {
            auto corpus = load_corpus(bi_corpus, /*load_images=*/false);
            auto index = InvertedIndex::build(corpus);
            save_index(index, bi_out);
            std::cout << "indexed " << index.doc_count() << " documents ("
                      << index.postings().size() << " terms) -> " << bi_out << "\n";
        } else if (retrieve_cmd->parsed()) {
            auto index = load_index(rt_index);
            auto hits = query(index, rt_prompt, rt_k);
            if (rt_tau > -1.0) {
                if (rt_ckpt.empty())
                    throw std::runtime_error("retrieve: --tau filtering needs --checkpoint");
                auto model = load_model(rt_ckpt, /*with_retrieval=*/true);
                const auto prompt_emb = model.text_encoder.pooled(rt_prompt);
                hits = threshold_filter(hits, rt_tau, [&](const std::string& caption) {
                    return cosine(prompt_emb, model.text_encoder.pooled(caption));
                });
            }
            for (const auto& h : hits) {
                nlohmann::json j = {{"id", h.record.id},
                                    {"caption", h.record.caption},
                                    {"score", h.score},
                                    {"rank", h.rank}};
                std::cout << j.dump() << "\n";
            }
        } else if (pre_base->parsed()) {
            auto corpus = load_training_corpus(pb_data, true);
            auto in_domain = load_split_specs(pb_data, "in_domain");
            auto ood = load_split_specs(pb_data, "ood");
            DenoiserConfig dc;
            MvRagModel model(dc, seed, /*with_retrieval=*/false);
            const double acc = pretrain_encoder(model.image_encoder, corpus, pb_enc_epochs, seed);
            std::cout << "image encoder pretrained, train accuracy " << acc << "\n";
            pb_cfg.phase = TrainPhase::BasePretrain;
            pb_cfg.seed = seed;
            pb_cfg.log_path = pb_log;
            pb_cfg.checkpoint_path = pb_out;
            auto res = pretrain_base(model, sched, pb_cfg, in_domain, ood);
            std::cout << "base pretraining: first-50 avg loss " << res.first_window_avg
                      << ", last-50 avg loss " << res.last_window_avg << " -> " << pb_out << "\n";
        } else if (tr_adapter->parsed()) {
            auto corpus = load_training_corpus(ta_data, true);
            auto in_domain = load_split_specs(ta_data, "in_domain");
            auto model = load_model(ta_base, /*with_retrieval=*/true);
            auto corpus_2d = filter_corpus(corpus, in_domain);
            ta_cfg.phase = TrainPhase::AdapterTrain;
            ta_cfg.seed = seed;
            ta_cfg.log_path = ta_log;
            ta_cfg.checkpoint_path = ta_out;
            auto res = train_adapter(model, sched, ta_cfg, in_domain, corpus_2d);
            std::cout << "adapter training: first-50 avg loss " << res.first_window_avg
                      << ", last-50 avg loss " << res.last_window_avg << " -> " << ta_out << "\n";
        } else if (gen->parsed()) {
            auto model = load_model(g_ckpt, /*with_retrieval=*/true);
            auto index = load_index(g_index);
            fs::create_directories(g_out);
            GenerateReport report;
            auto views = generate(model, sched, index, g_prompt, seed, g_cfg, &report);
            const std::string stem = slugify(g_prompt) + "_" + std::to_string(seed);
            const auto png_path = (fs::path(g_out) / (stem + ".png")).string();
            write_png(png_path, hstack(views));
            write_report_json(report, (fs::path(g_out) / (stem + ".report.json")).string());
            std::cout << (report.fallback ? "fallback (text-only)" : "retrieval-conditioned")
                      << " K'=" << report.k_prime << " alpha=" << report.alpha << " -> "
                      << png_path << "\n";
        } else if (sweep->parsed()) {
            auto model = load_model(sk_ckpt, true);
            auto index = load_index(sk_index);
            auto specs = load_split_specs(sk_data, sk_split);
            if (sk_limit > 0 && static_cast<int>(specs.size()) > sk_limit) specs.resize(sk_limit);
            std::vector<int> ks;
            std::stringstream ss(sk_kvals);
            std::string tok;
            while (std::getline(ss, tok, ',')) ks.push_back(std::stoi(tok));
            auto rows = sweep_k(model, sched, index, specs, ks, seed, sk_cfg);
            std::cout << sweep_table(rows);
            if (!sk_out.empty()) {
                std::ofstream out(sk_out);
                out << "k\tmean_psnr\tmean_similarity\n";
                for (const auto& r : rows)
                    out << r.k << "\t" << r.mean_psnr << "\t" << r.mean_similarity << "\n";
            }
        } else if (eval_cmd->parsed()) {
            auto model = load_model(ev_ckpt, true);
            auto index = load_index(ev_index);
            auto specs = load_split_specs(ev_data, ev_split);
            if (ev_limit > 0 && static_cast<int>(specs.size()) > ev_limit) specs.resize(ev_limit);
            auto report = evaluate_suite(model, sched, index, specs, ev_split, seed, ev_cfg);
            std::cout << eval_table(report);
            write_eval_report(report, ev_out);
        } else if (ablate->parsed()) {
            std::vector<AblationRow> rows;
            if (!ab_ckpt.empty()) {
                auto model = load_model(ab_ckpt, true);
                rows = run_retrieval_ablation(model.text_encoder, model.image_encoder, seed);
            } else {
                TextEncoder te(seed + 2);
                PatchEncoder pe(seed + 1);
                rows = run_retrieval_ablation(te, pe, seed);
            }
            std::cout << "method     precision@5\n";
            for (const auto& r : rows) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%-10s %.4f\n", r.method.c_str(), r.precision);
                std::cout << buf;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
