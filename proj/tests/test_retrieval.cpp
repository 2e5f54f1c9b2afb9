#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "mvrag/retrieval.hpp"

using namespace mvrag;
namespace fs = std::filesystem;

namespace {

// Independent direct-formula BM25 oracle: recomputes everything from the raw
// caption list with no inverted index.
double bm25_oracle(const std::vector<std::string>& captions, const std::string& query,
                   size_t doc, double k1, double b) {
    const size_t n = captions.size();
    std::vector<std::vector<std::string>> toks;
    for (const auto& c : captions) toks.push_back(tokenize(c));
    double avgdl = 0;
    for (const auto& t : toks) avgdl += static_cast<double>(t.size());
    avgdl /= static_cast<double>(n);
    double score = 0;
    for (const auto& qt : tokenize(query)) {
        size_t nt = 0;
        for (const auto& t : toks)
            if (std::find(t.begin(), t.end(), qt) != t.end()) ++nt;
        const double idf =
            std::log(1.0 + (static_cast<double>(n) - nt + 0.5) / (nt + 0.5));
        const double tf = static_cast<double>(std::count(toks[doc].begin(), toks[doc].end(), qt));
        if (tf == 0) continue;
        const double dl = static_cast<double>(toks[doc].size());
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    return score;
}

InvertedIndex index_from_captions(const std::vector<std::string>& captions) {
    InvertedIndex idx;
    for (size_t i = 0; i < captions.size(); ++i)
        idx.add_document("d" + std::to_string(i), captions[i], "");
    idx.finalize();
    return idx;
}

}  // namespace

TEST_CASE("tokenize") {
    CHECK(tokenize("Ratonero Bodeguero Andaluz dog") ==
          std::vector<std::string>{"ratonero", "bodeguero", "andaluz", "dog"});
    CHECK(tokenize("BMW-319, automobile!") == std::vector<std::string>{"bmw", "319", "automobile"});
    CHECK(tokenize("").empty());
}

TEST_CASE("bm25: unknown query term scores zero everywhere") {
    auto idx = index_from_captions({"red cube", "blue sphere"});
    CHECK(idx.score({"zebra"}, 0) == 0.0);
    CHECK(idx.score({"zebra"}, 1) == 0.0);
}

TEST_CASE("bm25: single-doc closed form at b=0") {
    auto idx = index_from_captions({"cube"});
    const double k1 = 1.2;
    const double expect = std::log(1.0 + 0.5 / 1.5) * 1.0 * (k1 + 1.0) / (1.0 + k1);
    CHECK(idx.score({"cube"}, 0, k1, 0.0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("bm25 matches the direct-formula oracle") {
    const std::vector<std::string> captions = {"red cube", "blue sphere", "red sphere"};
    auto idx = index_from_captions(captions);
    for (size_t d = 0; d < captions.size(); ++d) {
        const double got = idx.score(tokenize("red cube"), static_cast<int>(d), 1.2, 0.75);
        const double want = bm25_oracle(captions, "red cube", d, 1.2, 0.75);
        CHECK(std::abs(got - want) < 1e-9);
    }

    // 10-doc corpus across parameter settings
    std::vector<std::string> caps;
    for (int i = 0; i < 10; ++i)
        caps.push_back("object " + std::to_string(i % 3) + " with marking " +
                       std::to_string(i % 4) + (i % 2 ? " rare" : " common common"));
    auto idx10 = index_from_captions(caps);
    for (double k1 : {0.5, 1.2, 2.0})
        for (double b : {0.0, 0.75, 1.0})
            for (int d = 0; d < 10; ++d) {
                const double got = idx10.score(tokenize("common marking 1 rare"), d, k1, b);
                const double want = bm25_oracle(caps, "common marking 1 rare", d, k1, b);
                CHECK(std::abs(got - want) < 1e-9);
            }
}

TEST_CASE("bm25 monotone non-decreasing in tf") {
    // same doc length, increasing tf of the query term
    for (int L : {20, 40}) {
        double prev = -1;
        for (int tf = 1; tf <= 20; ++tf) {
            std::string cap;
            for (int i = 0; i < tf; ++i) cap += "target ";
            for (int i = tf; i < L; ++i) cap += "filler" + std::to_string(i) + " ";
            auto idx = index_from_captions({cap, "other doc entirely"});
            const double s = idx.score({"target"}, 0);
            CHECK(s >= prev);
            prev = s;
        }
    }
}

TEST_CASE("query: unique term ranks its doc first; K overflow; tie-break") {
    auto idx = index_from_captions({"red cube", "blue sphere", "unique snowflake object"});
    auto hits = query(idx, "snowflake", 3);
    REQUIRE(!hits.empty());
    CHECK(hits[0].record.id == "d2");
    CHECK(hits[0].rank == 1);

    // K larger than matching docs: only positive scores returned
    auto all = query(idx, "red", 10);
    CHECK(all.size() == 1);

    // exact ties broken by ascending doc id
    auto tie_idx = index_from_captions({"same words", "same words"});
    auto tie = query(tie_idx, "same", 2);
    REQUIRE(tie.size() == 2);
    CHECK(tie[0].record.id == "d0");
    CHECK(tie[1].record.id == "d1");

    CHECK_THROWS_AS(query(InvertedIndex{}, "x", 1), std::invalid_argument);
}

TEST_CASE("incremental and one-pass builds agree") {
    std::vector<std::string> caps = {"alpha beta", "beta gamma gamma", "delta"};
    auto one = index_from_captions(caps);
    InvertedIndex inc;
    inc.add_document("d0", caps[0], "");
    inc.add_document("d1", caps[1], "");
    inc.add_document("d2", caps[2], "");
    inc.finalize();
    auto h1 = query(one, "beta gamma", 3);
    auto h2 = query(inc, "beta gamma", 3);
    REQUIRE(h1.size() == h2.size());
    for (size_t i = 0; i < h1.size(); ++i) {
        CHECK(h1[i].record.id == h2[i].record.id);
        CHECK(h1[i].score == h2[i].score);
    }
}

TEST_CASE("threshold filter keeps order, supports all/none") {
    auto idx = index_from_captions({"red cube", "red cube variant", "blue sphere"});
    auto hits = query(idx, "red cube", 3);
    REQUIRE(hits.size() >= 2);

    auto all = threshold_filter(hits, -1.0, [](const std::string&) { return 0.0; });
    CHECK(all.size() == hits.size());
    for (size_t i = 0; i < all.size(); ++i) CHECK(all[i].record.id == hits[i].record.id);

    // similarity keyed on caption content drops off-class captions
    auto kept = threshold_filter(hits, 0.3, [](const std::string& cap) {
        return cap.find("cube") != std::string::npos ? 0.9 : -0.5;
    });
    for (const auto& h : kept) CHECK(h.record.caption.find("cube") != std::string::npos);

    auto none = threshold_filter(hits, 1.0, [](const std::string&) { return 0.999; });
    CHECK(none.empty());

    CHECK_THROWS_AS(threshold_filter(hits, 1.5, [](const std::string&) { return 0.0; }),
                    std::invalid_argument);
}

TEST_CASE("embedding query: exact match ranks first, orthogonal ties by id") {
    auto idx = index_from_captions({"a", "b", "c"});
    std::vector<std::vector<double>> embs = {{1, 0}, {0, 1}, {1, 0}};
    auto hits = embedding_query(idx, embs, {1, 0}, 3);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].record.id == "d0");  // tie with d2 broken by id
    CHECK(hits[1].record.id == "d2");
    CHECK(hits[2].record.id == "d1");
    CHECK_THROWS_AS(embedding_query(idx, {{1, 0}}, {1, 0}, 2), std::invalid_argument);
}

TEST_CASE("precision at k") {
    std::vector<RetrievalHit> hits;
    for (int i = 0; i < 5; ++i) {
        RetrievalHit h;
        h.record.id = "d" + std::to_string(i);
        h.rank = i + 1;
        hits.push_back(h);
    }
    CHECK(precision_at_k(hits, {"d0", "d1", "d2", "d3", "d4"}, 5) == 1.0);
    CHECK(precision_at_k(hits, {"x"}, 5) == 0.0);
    CHECK(precision_at_k(hits, {"d0", "d2", "d4"}, 5) == doctest::Approx(0.6));
}

TEST_CASE("index save/load round trip and corruption detection") {
    auto classes = sample_spec_universe(6, 7);
    auto corpus = build_2d_corpus(classes, 5, 9, 32, 4);
    corpus.dir = "/tmp/mvrag_test_idx_corpus";
    auto idx = InvertedIndex::build(corpus);
    const std::string path = "/tmp/mvrag_test_index.bin";
    save_index(idx, path);
    auto loaded = load_index(path);
    CHECK(loaded.doc_count() == idx.doc_count());
    CHECK(loaded.avgdl() == idx.avgdl());
    CHECK(loaded.corpus_dir() == corpus.dir);
    CHECK(loaded.postings().size() == idx.postings().size());
    // scores agree exactly after the round trip
    const auto prompt = corpus.records[3].caption;
    auto h1 = query(idx, prompt, 5);
    auto h2 = query(loaded, prompt, 5);
    REQUIRE(h1.size() == h2.size());
    for (size_t i = 0; i < h1.size(); ++i) {
        CHECK(h1[i].record.id == h2[i].record.id);
        CHECK(h1[i].score == h2[i].score);
    }

    // flip one byte in the body: load must fail
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(60);
    char c;
    f.seekg(60);
    f.get(c);
    f.seekp(60);
    f.put(static_cast<char>(c ^ 0x40));
    f.close();
    CHECK_THROWS_AS(load_index(path), std::runtime_error);
    fs::remove(path);
}
