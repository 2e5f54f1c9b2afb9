#include "mvrag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace mvrag {

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        const bool keep = std::isalnum(c) || c >= 0x80;
        if (keep) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

void InvertedIndex::add_document(const std::string& id, const std::string& caption,
                                 const std::string& image_path) {
    if (finalized_) throw std::logic_error("InvertedIndex: add_document after finalize");
    const int doc = static_cast<int>(docs_.size());
    auto terms = tokenize(caption);
    std::map<std::string, int> tf;
    for (auto& t : terms) ++tf[t];
    for (auto& [term, count] : tf) postings_[term].push_back({doc, count});
    docs_.push_back({id, caption, image_path, static_cast<int>(terms.size())});
}

void InvertedIndex::finalize() {
    if (docs_.empty()) throw std::invalid_argument("InvertedIndex: empty index");
    double total = 0;
    for (const auto& d : docs_) total += d.length;
    avgdl_ = total / static_cast<double>(docs_.size());
    finalized_ = true;
}

InvertedIndex InvertedIndex::build(const Corpus& corpus) {
    InvertedIndex idx;
    for (const auto& rec : corpus.records) idx.add_document(rec.id, rec.caption, rec.image);
    idx.finalize();
    idx.corpus_dir_ = corpus.dir;
    return idx;
}

double InvertedIndex::idf(const std::string& term) const {
    const auto it = postings_.find(term);
    const double nt = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
    const double n = static_cast<double>(docs_.size());
    return std::log(1.0 + (n - nt + 0.5) / (nt + 0.5));
}

double InvertedIndex::score(const std::vector<std::string>& query_terms, int doc, double k1,
                            double b) const {
    if (!finalized_) throw std::logic_error("InvertedIndex: score before finalize");
    if (doc < 0 || doc >= static_cast<int>(docs_.size()))
        throw std::invalid_argument("InvertedIndex: unknown doc " + std::to_string(doc));
    if (k1 <= 0 || b < 0 || b > 1)
        throw std::invalid_argument("InvertedIndex: k1 must be > 0 and b in [0,1]");
    const double dl = static_cast<double>(docs_[doc].length);
    const double norm = k1 * (1.0 - b + b * dl / avgdl_);
    double total = 0;
    for (const auto& term : query_terms) {
        const auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        const auto& plist = it->second;
        // postings are sorted by doc (insertion order is ascending)
        auto p = std::lower_bound(plist.begin(), plist.end(), doc,
                                  [](const Posting& a, int d) { return a.doc < d; });
        if (p == plist.end() || p->doc != doc) continue;
        const double tf = static_cast<double>(p->tf);
        total += idf(term) * tf * (k1 + 1.0) / (tf + norm);
    }
    return total;
}

std::vector<RetrievalHit> query(const InvertedIndex& index, const std::string& prompt, int k,
                                double k1, double b) {
    if (!index.finalized() || index.doc_count() == 0)
        throw std::invalid_argument("query: empty or unbuilt index");
    if (k < 1) throw std::invalid_argument("query: K must be >= 1");
    const auto terms = tokenize(prompt);
    // Accumulate scores only over docs containing at least one query term.
    std::map<int, double> norm_cache;
    std::map<int, double> scores;
    for (const auto& term : terms) {
        const auto it = index.postings().find(term);
        if (it == index.postings().end()) continue;
        const double idf = index.idf(term);
        for (const auto& post : it->second) {
            const double dl = static_cast<double>(index.docs()[post.doc].length);
            const double norm = k1 * (1.0 - b + b * dl / index.avgdl());
            const double tf = static_cast<double>(post.tf);
            scores[post.doc] += idf * tf * (k1 + 1.0) / (tf + norm);
        }
    }
    std::vector<RetrievalHit> hits;
    for (const auto& [doc, sc] : scores) {
        if (sc <= 0.0) continue;
        RetrievalHit h;
        h.record = index.docs()[doc];
        h.doc = doc;
        h.score = sc;
        hits.push_back(std::move(h));
    }
    std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.record.id < b.record.id;
    });
    if (static_cast<int>(hits.size()) > k) hits.resize(static_cast<size_t>(k));
    for (size_t i = 0; i < hits.size(); ++i) hits[i].rank = static_cast<int>(i) + 1;
    return hits;
}

std::vector<RetrievalHit> threshold_filter(
    const std::vector<RetrievalHit>& hits, double tau,
    const std::function<double(const std::string&)>& caption_sim) {
    if (tau < -1.0 || tau > 1.0)
        throw std::invalid_argument("threshold_filter: tau must be in [-1, 1]");
    std::vector<RetrievalHit> kept;
    for (const auto& h : hits)
        if (caption_sim(h.record.caption) >= tau) kept.push_back(h);
    return kept;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<RetrievalHit> embedding_query(const InvertedIndex& index,
                                          const std::vector<std::vector<double>>& doc_embeddings,
                                          const std::vector<double>& prompt_embedding, int k) {
    if (doc_embeddings.size() != static_cast<size_t>(index.doc_count()))
        throw std::invalid_argument("embedding_query: missing embeddings");
    std::vector<RetrievalHit> hits;
    for (int doc = 0; doc < index.doc_count(); ++doc) {
        RetrievalHit h;
        h.record = index.docs()[doc];
        h.doc = doc;
        h.score = cosine(doc_embeddings[static_cast<size_t>(doc)], prompt_embedding);
        hits.push_back(std::move(h));
    }
    std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.record.id < b.record.id;
    });
    if (static_cast<int>(hits.size()) > k) hits.resize(static_cast<size_t>(k));
    for (size_t i = 0; i < hits.size(); ++i) hits[i].rank = static_cast<int>(i) + 1;
    return hits;
}

double precision_at_k(const std::vector<RetrievalHit>& hits,
                      const std::vector<std::string>& relevant_ids, int k) {
    if (k < 1) throw std::invalid_argument("precision_at_k: K must be >= 1");
    int found = 0;
    for (const auto& h : hits) {
        if (h.rank > k) break;
        if (std::find(relevant_ids.begin(), relevant_ids.end(), h.record.id) !=
            relevant_ids.end())
            ++found;
    }
    return static_cast<double>(found) / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// serialization: length-prefixed binary records with section checksums
// ---------------------------------------------------------------------------

namespace {

constexpr char kIndexMagic[8] = {'M', 'V', 'R', 'I', 'D', 'X', '0', '1'};

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_str(std::string& buf, const std::string& s) {
    put_u64(buf, s.size());
    buf += s;
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    uint64_t u64() {
        if (pos + 8 > buf.size()) throw std::runtime_error("index file truncated");
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        const uint64_t n = u64();
        if (pos + n > buf.size()) throw std::runtime_error("index file truncated");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_index(const InvertedIndex& index, const std::string& path) {
    if (!index.finalized()) throw std::logic_error("save_index: index not finalized");
    std::string body;
    put_str(body, index.corpus_dir());
    put_u64(body, static_cast<uint64_t>(index.doc_count()));
    for (const auto& d : index.docs()) {
        put_str(body, d.id);
        put_str(body, d.caption);
        put_str(body, d.image);
        put_u64(body, static_cast<uint64_t>(d.length));
    }
    // terms sorted for a canonical byte stream
    std::vector<const std::string*> terms;
    for (const auto& [t, _] : index.postings()) terms.push_back(&t);
    std::sort(terms.begin(), terms.end(), [](auto* a, auto* b) { return *a < *b; });
    put_u64(body, terms.size());
    for (const auto* t : terms) {
        put_str(body, *t);
        const auto& plist = index.postings().at(*t);
        put_u64(body, plist.size());
        for (const auto& p : plist) {
            put_u64(body, static_cast<uint64_t>(p.doc));
            put_u64(body, static_cast<uint64_t>(p.tf));
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_index: cannot write " + path);
    out.write(kIndexMagic, 8);
    std::string header;
    put_u64(header, body.size());
    put_u64(header, fnv1a64(body.data(), body.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw std::runtime_error("save_index: write failed for " + path);
}

InvertedIndex load_index(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_index: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kIndexMagic, 8) != 0)
        throw std::runtime_error("load_index: bad magic in " + path);
    std::string head(16, '\0');
    in.read(head.data(), 16);
    if (!in) throw std::runtime_error("load_index: truncated header in " + path);
    Reader hr{head};
    const uint64_t body_len = hr.u64();
    const uint64_t want_sum = hr.u64();
    std::string body(body_len, '\0');
    in.read(body.data(), static_cast<std::streamsize>(body_len));
    if (!in || in.gcount() != static_cast<std::streamsize>(body_len))
        throw std::runtime_error("load_index: truncated body in " + path);
    if (fnv1a64(body.data(), body.size()) != want_sum)
        throw std::runtime_error("load_index: checksum mismatch (corrupt index) in " + path);

    Reader r{body};
    InvertedIndex idx;
    idx.corpus_dir_ = r.str();
    const uint64_t ndocs = r.u64();
    for (uint64_t i = 0; i < ndocs; ++i) {
        IndexDoc d;
        d.id = r.str();
        d.caption = r.str();
        d.image = r.str();
        d.length = static_cast<int>(r.u64());
        idx.docs_.push_back(std::move(d));
    }
    const uint64_t nterms = r.u64();
    for (uint64_t t = 0; t < nterms; ++t) {
        std::string term = r.str();
        const uint64_t np = r.u64();
        std::vector<Posting> plist;
        plist.reserve(np);
        for (uint64_t p = 0; p < np; ++p) {
            Posting post;
            post.doc = static_cast<int>(r.u64());
            post.tf = static_cast<int>(r.u64());
            plist.push_back(post);
        }
        idx.postings_.emplace(std::move(term), std::move(plist));
    }
    if (idx.docs_.empty()) throw std::runtime_error("load_index: empty index in " + path);
    double total = 0;
    for (const auto& d : idx.docs_) total += d.length;
    idx.avgdl_ = total / static_cast<double>(idx.docs_.size());
    idx.finalized_ = true;
    return idx;
}

}  // namespace mvrag
