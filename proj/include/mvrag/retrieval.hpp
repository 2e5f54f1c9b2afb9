#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvrag/datagen.hpp"

namespace mvrag {

// Lowercase, split on non-alphanumeric runs, drop empties. No stemming, no
// stopword removal. Bytes >= 0x80 are kept as-is (UTF-8 continuation safe).
std::vector<std::string> tokenize(const std::string& text);

struct Posting {
    int doc = 0;  // index into docs
    int tf = 0;
};

struct IndexDoc {
    std::string id;
    std::string caption;
    std::string image;  // relative path within corpus dir
    int length = 0;     // token count
};

// Okapi BM25 inverted index over corpus captions; immutable after finalize().
class InvertedIndex {
public:
    static constexpr double kDefaultK1 = 1.2;
    static constexpr double kDefaultB = 0.75;

    void add_document(const std::string& id, const std::string& caption,
                      const std::string& image_path);
    void finalize();
    static InvertedIndex build(const Corpus& corpus);

    bool finalized() const { return finalized_; }
    int doc_count() const { return static_cast<int>(docs_.size()); }
    double avgdl() const { return avgdl_; }
    const std::vector<IndexDoc>& docs() const { return docs_; }
    const std::unordered_map<std::string, std::vector<Posting>>& postings() const {
        return postings_;
    }
    const std::string& corpus_dir() const { return corpus_dir_; }
    void set_corpus_dir(const std::string& d) { corpus_dir_ = d; }

    // IDF(t) * tf * (k1+1) / (tf + k1 * (1 - b + b*|d|/avgdl)) summed over the
    // query terms; IDF = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)).
    double score(const std::vector<std::string>& query_terms, int doc,
                 double k1 = kDefaultK1, double b = kDefaultB) const;
    double idf(const std::string& term) const;

private:
    friend InvertedIndex load_index(const std::string& path);
    std::vector<IndexDoc> docs_;
    std::unordered_map<std::string, std::vector<Posting>> postings_;
    double avgdl_ = 0.0;
    bool finalized_ = false;
    std::string corpus_dir_;
};

InvertedIndex load_index(const std::string& path);

struct RetrievalHit {
    IndexDoc record;
    int doc = 0;  // index into index.docs()
    double score = 0.0;
    int rank = 0;  // 1-based
};

// Top-K by BM25, ties broken by ascending doc id; only positive scores.
std::vector<RetrievalHit> query(const InvertedIndex& index, const std::string& prompt, int k,
                                double k1 = InvertedIndex::kDefaultK1,
                                double b = InvertedIndex::kDefaultB);

// Keep hits whose caption similarity to the prompt is >= tau; order preserved.
// caption_sim maps a caption to cosine similarity with the prompt in [-1, 1].
std::vector<RetrievalHit> threshold_filter(const std::vector<RetrievalHit>& hits, double tau,
                                           const std::function<double(const std::string&)>& caption_sim);

// Cosine top-K over precomputed embeddings; used by the retrieval ablation.
// embeddings[i] aligns with index.docs()[i] (or corpus records).
std::vector<RetrievalHit> embedding_query(const InvertedIndex& index,
                                          const std::vector<std::vector<double>>& doc_embeddings,
                                          const std::vector<double>& prompt_embedding, int k);

double precision_at_k(const std::vector<RetrievalHit>& hits,
                      const std::vector<std::string>& relevant_ids, int k);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Binary index file with per-section checksums; single-byte corruption is
// detected at load.
void save_index(const InvertedIndex& index, const std::string& path);
InvertedIndex load_index(const std::string& path);

}  // namespace mvrag
