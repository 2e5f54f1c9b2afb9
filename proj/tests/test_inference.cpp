#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mvrag/inference.hpp"
#include "testutil.hpp"

using namespace mvrag;
using namespace mvrag::testing;
namespace fs = std::filesystem;

namespace {

struct Pipeline {
    DenoiserConfig dc;
    MvRagModel model{dc, 31, true};
    NoiseSchedule sched;
    std::vector<ToyObjectSpec> specs;
    Corpus corpus;
    InvertedIndex index;
    InferenceConfig cfg;

    Pipeline() {
        specs = sample_spec_universe(6, 41);
        corpus = build_2d_corpus(specs, 5, 43, 32, 4);
        const std::string dir = "/tmp/mvrag_test_inference_corpus";
        fs::remove_all(dir);
        write_corpus(corpus, dir);
        corpus.dir = dir;
        index = InvertedIndex::build(corpus);
        cfg.sampler.steps = 4;  // keep unit tests quick
        cfg.probe_steps = 2;
    }
};

Pipeline& pipe() {
    static Pipeline p;
    return p;
}

}  // namespace

TEST_CASE("alpha mapping endpoints and midpoint") {
    auto& p = pipe();
    Rng rng(5);
    std::vector<Image> retrieved = {render(p.specs[0], CameraPose::from_angles(10, 5), 32, rng)};
    // endpoints are a property of the clamp map; probe similarity feeds it
    auto fp = estimate_alpha(p.model, p.sched, p.specs[0].caption(), retrieved, 3, p.cfg);
    CHECK(fp.lambda_prime == p.cfg.lambda_prime);
    CHECK(fp.alpha >= 0.0);
    CHECK(fp.alpha <= fp.lambda_prime);
    CHECK(fp.alpha ==
          doctest::Approx(fp.lambda_prime *
                          std::min(1.0, std::max(0.0, (fp.similarity - fp.s_lo) /
                                                          (fp.s_hi - fp.s_lo)))));
    // clamp endpoints and midpoint
    auto map_alpha = [&](double sim) {
        return p.cfg.lambda_prime *
               std::min(1.0, std::max(0.0, (sim - p.cfg.s_lo) / (p.cfg.s_hi - p.cfg.s_lo)));
    };
    CHECK(map_alpha(p.cfg.s_hi + 0.1) == p.cfg.lambda_prime);
    CHECK(map_alpha(p.cfg.s_lo - 0.1) == 0.0);
    CHECK(map_alpha((p.cfg.s_lo + p.cfg.s_hi) / 2) == doctest::Approx(p.cfg.lambda_prime / 2));

    CHECK_THROWS_AS(estimate_alpha(p.model, p.sched, "x", {}, 3, p.cfg), std::invalid_argument);

    // probe determinism: same seed gives the same alpha to the last bit
    auto fp2 = estimate_alpha(p.model, p.sched, p.specs[0].caption(), retrieved, 3, p.cfg);
    CHECK(std::memcmp(&fp.alpha, &fp2.alpha, sizeof(double)) == 0);
}

TEST_CASE("fallback path is bitwise identical to base sampling") {
    auto& p = pipe();
    InferenceConfig cfg = p.cfg;
    cfg.tau = 1.0;  // nothing passes: cosine(prompt, caption) < 1 for non-identical text
    GenerateReport rep;
    auto gen = generate(p.model, p.sched, p.index, "a prompt matching nothing at all", 17, cfg,
                        &rep);
    CHECK(rep.fallback);
    CHECK(rep.k_prime == 0);
    auto base = sample_text_only(p.model, p.sched, "a prompt matching nothing at all", 17, cfg);
    REQUIRE(gen.size() == base.size());
    for (size_t i = 0; i < gen.size(); ++i) CHECK(bitwise_equal(gen[i].pix, base[i].pix));
}

TEST_CASE("generate: full path produces 4 views and a coherent report") {
    auto& p = pipe();
    GenerateReport rep;
    const auto prompt = p.specs[0].caption();
    auto views = generate(p.model, p.sched, p.index, prompt, 23, p.cfg, &rep);
    CHECK(views.size() == 4);
    CHECK(!rep.fallback);
    CHECK(rep.k_prime >= 1);
    CHECK(rep.k_prime <= p.cfg.k);
    CHECK(static_cast<int>(rep.hit_ids.size()) == rep.k_prime);
    CHECK(rep.alpha >= 0.0);
    CHECK(rep.alpha <= rep.lambda_prime);
    for (const auto& v : views)
        for (double x : v.pix) {
            CHECK(x >= 0.0);
            CHECK(x <= 1.0);
        }

    // determinism end to end
    GenerateReport rep2;
    auto views2 = generate(p.model, p.sched, p.index, prompt, 23, p.cfg, &rep2);
    for (size_t i = 0; i < views.size(); ++i) CHECK(bitwise_equal(views[i].pix, views2[i].pix));
    CHECK(rep2.alpha == rep.alpha);

    // report JSON round trip has the spec'd fields
    const std::string path = "/tmp/mvrag_test_report.json";
    write_report_json(rep, path);
    std::ifstream in(path);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const char* key : {"prompt", "hit_ids", "k_prime", "similarity", "alpha", "lambda_prime",
                            "fallback", "seed", "steps", "guidance_scale"})
        CHECK_MESSAGE(body.find(key) != std::string::npos, key);
    fs::remove(path);
}

TEST_CASE("generate skips undecodable images and continues") {
    auto& p = pipe();
    // corrupt one corpus image file
    const auto& rec = p.corpus.records[0];
    const auto img_path = fs::path(p.corpus.dir) / rec.image;
    auto backup = img_path.string() + ".bak";
    fs::copy_file(img_path, backup, fs::copy_options::overwrite_existing);
    {
        std::ofstream out(img_path, std::ios::trunc | std::ios::binary);
        out << "not a png";
    }
    GenerateReport rep;
    auto views = generate(p.model, p.sched, p.index, p.corpus.records[0].caption, 29, p.cfg, &rep);
    CHECK(views.size() == 4);
    CHECK(!rep.fallback);       // other class images survive
    CHECK(!rep.warnings.empty());
    fs::copy_file(backup, img_path, fs::copy_options::overwrite_existing);
    fs::remove(backup);
}

TEST_CASE("sweep over K: row per K, zero row equals fallback scores") {
    auto& p = pipe();
    std::vector<ToyObjectSpec> subset = {p.specs[0], p.specs[1]};
    auto rows = sweep_k(p.model, p.sched, p.index, subset, {0, 1, 4}, 51, p.cfg);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].k == 0);
    CHECK(rows[1].k == 1);
    CHECK(rows[2].k == 4);

    // K=0 row reproduces the text-only fallback metric
    std::vector<double> psnrs;
    for (size_t si = 0; si < subset.size(); ++si) {
        const uint64_t s = Rng(51).derive("sweep", si).next_u64();
        auto base = sample_text_only(p.model, p.sched, subset[si].caption(), s, p.cfg);
        std::vector<Image> gt;
        auto poses = generation_poses(p.cfg);
        for (size_t i = 0; i < poses.size(); ++i) {
            Rng rng = sample_rng(s, "gt_" + subset[si].id(), i);
            gt.push_back(render(subset[si], poses[i], 32, rng));
        }
        std::vector<double> v;
        for (size_t i = 0; i < 4; ++i) v.push_back(psnr(base[i], gt[i]));
        psnrs.push_back(mean(v));
    }
    CHECK(rows[0].mean_psnr == doctest::Approx(mean(psnrs)).epsilon(1e-12));

    // corpus depth precheck
    CHECK_THROWS_AS(sweep_k(p.model, p.sched, p.index, subset, {8}, 51, p.cfg),
                    std::invalid_argument);

    auto table = sweep_table(rows);
    CHECK(table.find("mean_PSNR") != std::string::npos);
}

TEST_CASE("evaluate_suite: totals, determinism, report writing") {
    auto& p = pipe();
    std::vector<ToyObjectSpec> split = {p.specs[0], p.specs[1], p.specs[2]};
    auto rep = evaluate_suite(p.model, p.sched, p.index, split, "smoke", 61, p.cfg);
    CHECK(rep.rows.size() == split.size());
    auto rep2 = evaluate_suite(p.model, p.sched, p.index, split, "smoke", 61, p.cfg);
    CHECK(rep.median_psnr_base == rep2.median_psnr_base);
    CHECK(rep.median_psnr_mvrag == rep2.median_psnr_mvrag);
    CHECK(rep.mean_alpha == rep2.mean_alpha);

    const std::string path = "/tmp/mvrag_test_eval.json";
    write_eval_report(rep, path);
    CHECK(fs::exists(path));
    fs::remove(path);
    auto table = eval_table(rep);
    CHECK(table.find("median_psnr") != std::string::npos);
}
