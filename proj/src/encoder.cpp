#include "mvrag/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "mvrag/optim.hpp"
#include "mvrag/retrieval.hpp"

namespace mvrag {

Tensor images_to_tensor(const std::vector<Image>& imgs) {
    if (imgs.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
    const int H = imgs[0].height, W = imgs[0].width;
    Tensor t({static_cast<int>(imgs.size()), H, W, 3});
    auto& d = t.data();
    const size_t per = static_cast<size_t>(H) * W * 3;
    for (size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].height != H || imgs[i].width != W)
            throw std::invalid_argument("images_to_tensor: size mismatch");
        std::copy(imgs[i].pix.begin(), imgs[i].pix.end(), d.begin() + i * per);
    }
    return t;
}

// ---------------------------------------------------------------------------
// TextEncoder
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> template_vocab() {
    std::vector<std::string> words = {"<null>", "<pad>", "<unk>", "a", "with", "3d", "asset"};
    for (ObjShape s : {ObjShape::Cube, ObjShape::Sphere, ObjShape::Cylinder, ObjShape::Cone,
                       ObjShape::Pyramid})
        words.push_back(shape_name(s));
    for (const auto& entry : palette()) words.push_back(entry.name);
    for (Marking m : {Marking::Stripe, Marking::Dot, Marking::Checker})
        words.push_back(marking_name(m));
    return words;
}

}  // namespace

TextEncoder::TextEncoder(uint64_t seed) : vocab_(template_vocab()) {
    for (size_t i = 0; i < vocab_.size(); ++i) word_to_id_[vocab_[i]] = static_cast<int>(i);
    Rng rng = Rng(seed).derive("text_encoder");
    table_ = Parameter(Tensor::randn({static_cast<int>(vocab_.size()), kDCond}, rng, 0.5), "text.embed");
    pos_ = sinusoidal_table(kTextLen, kDCond);
    block_ = TransformerBlock("text.block", kDCond, 4, 2, rng);
}

std::vector<int> TextEncoder::token_ids(const std::string& prompt) const {
    std::vector<int> ids;
    for (const auto& w : tokenize(prompt)) {
        const auto it = word_to_id_.find(w);
        ids.push_back(it == word_to_id_.end() ? kUnk : it->second);
    }
    if (static_cast<int>(ids.size()) > kTextLen)
        ids.erase(ids.begin(), ids.end() - kTextLen);  // keep the tail (mode tag)
    while (static_cast<int>(ids.size()) < kTextLen) ids.push_back(kPad);
    return ids;
}

Tensor TextEncoder::encode_ids(const std::vector<std::vector<int>>& ids) const {
    const int B = static_cast<int>(ids.size());
    std::vector<int> flat;
    for (const auto& row : ids) flat.insert(flat.end(), row.begin(), row.end());
    Tensor emb = embedding(table_.tensor, flat, {B, kTextLen});
    Tensor withpos = add(emb, pos_);
    return block_.forward(withpos);
}

Tensor TextEncoder::encode(const std::string& prompt) const {
    return reshape(encode_batch({prompt}), {kTextLen, kDCond});
}

Tensor TextEncoder::encode_batch(const std::vector<std::string>& prompts) const {
    std::vector<std::vector<int>> ids;
    for (const auto& p : prompts) ids.push_back(token_ids(p));
    return encode_ids(ids);
}

Tensor TextEncoder::encode_null(int batch) const {
    std::vector<std::vector<int>> ids(batch, std::vector<int>(kTextLen, kNull));
    return encode_ids(ids);
}

std::vector<double> TextEncoder::pooled(const std::string& prompt) const {
    NoGradGuard ng;
    Tensor enc = encode(prompt);
    std::vector<double> out(kDCond, 0.0);
    for (int l = 0; l < kTextLen; ++l)
        for (int c = 0; c < kDCond; ++c) out[c] += enc.at({l, c});
    for (auto& v : out) v /= kTextLen;
    return out;
}

void TextEncoder::visit(const ParamVisitor& v) {
    v(table_);
    block_.visit(v);
}

void TextEncoder::set_frozen(bool frozen) {
    ParamVisitor v = [frozen](Parameter& p) { p.set_frozen(frozen); };
    visit(v);
}

// ---------------------------------------------------------------------------
// PatchEncoder
// ---------------------------------------------------------------------------

PatchEncoder::PatchEncoder(uint64_t seed) {
    Rng rng = Rng(seed).derive("patch_encoder");
    const int patch_dim = kPatchSize * kPatchSize * 3;
    patch_proj_ = Linear("E.patch_proj", patch_dim, kDEnc, rng);
    pos_ = sinusoidal_table((32 / kPatchSize) * (32 / kPatchSize), kDEnc);
    block1_ = TransformerBlock("E.block1", kDEnc, 4, 2, rng);
    block2_ = TransformerBlock("E.block2", kDEnc, 4, 2, rng);
    final_norm_ = LayerNorm("E.final", kDEnc);
}

Tensor PatchEncoder::encode_tensor(const Tensor& imgs) const {
    const auto& s = imgs.shape();
    if (s.size() != 4 || s[3] != 3)
        throw std::invalid_argument("PatchEncoder: expected [B,H,W,3], got " + shape_str(s));
    if (s[1] != 32 || s[2] != 32)
        throw std::invalid_argument("PatchEncoder: expected 32x32 input, got " + shape_str(s));
    const int B = s[0];
    const int grid = s[1] / kPatchSize;
    const int P = grid * grid;
    Tensor patches = reshape(patchify(imgs, kPatchSize), {B, P, kPatchSize * kPatchSize * 3});
    Tensor x = add(patch_proj_.forward(patches), pos_);
    x = block1_.forward(x);
    x = block2_.forward(x);
    return final_norm_.forward(x);
}

Tensor PatchEncoder::encode_batch(const std::vector<Image>& imgs) const {
    return encode_tensor(images_to_tensor(imgs));
}

Tensor PatchEncoder::encode(const Image& img) const {
    Tensor batch = encode_batch({img});
    const auto& s = batch.shape();
    return reshape(batch, {s[1], s[2]});
}

std::vector<double> PatchEncoder::pooled_features(const Image& img) const {
    NoGradGuard ng;
    Tensor f = encode(img);
    const int P = f.dim(0), d = f.dim(1);
    std::vector<double> out(d, 0.0);
    for (int p = 0; p < P; ++p)
        for (int c = 0; c < d; ++c) out[c] += f.at({p, c});
    for (auto& v : out) v /= P;
    return out;
}

void PatchEncoder::visit(const ParamVisitor& v) {
    patch_proj_.visit(v);
    block1_.visit(v);
    block2_.visit(v);
    final_norm_.visit(v);
}

void PatchEncoder::set_frozen(bool frozen) {
    frozen_ = frozen;
    ParamVisitor v = [frozen](Parameter& p) { p.set_frozen(frozen); };
    visit(v);
}

double pooled_similarity(const PatchEncoder& enc, const Image& a, const Image& b) {
    return cosine(enc.pooled_features(a), enc.pooled_features(b));
}

double pretrain_encoder(PatchEncoder& enc, const Corpus& corpus, int epochs, uint64_t seed) {
    // Class label = record id prefix (the spec id before the image counter).
    auto class_of = [](const std::string& id) {
        const auto pos = id.rfind('_');
        return pos == std::string::npos ? id : id.substr(0, pos);
    };
    std::map<std::string, int> class_ids;
    std::vector<int> labels;
    for (const auto& rec : corpus.records) {
        const auto key = class_of(rec.id);
        auto [it, inserted] = class_ids.emplace(key, static_cast<int>(class_ids.size()));
        labels.push_back(it->second);
    }
    const int n_classes = static_cast<int>(class_ids.size());
    std::map<int, int> per_class;
    for (int l : labels) ++per_class[l];
    for (const auto& [cls, count] : per_class)
        if (count < 2)
            throw std::invalid_argument("pretrain_encoder: class with fewer than 2 images");

    Rng rng = Rng(seed).derive("pretrain_encoder");
    Linear head("E.head", kDEnc, n_classes, rng);
    enc.set_frozen(false);
    std::vector<Parameter*> params = collect_params(enc);
    {
        ParamVisitor v = [&params](Parameter& p) { params.push_back(&p); };
        head.visit(v);
    }
    AdamW opt(1e-3, 0.9, 0.999, 1e-8, 0.0);

    const int batch_size = 16;
    std::vector<size_t> order(corpus.records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    double accuracy = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (size_t i = 0; i + 1 < order.size(); ++i) {
            const size_t j = i + rng.uniform_int(order.size() - i);
            std::swap(order[i], order[j]);
        }
        int correct = 0;
        for (size_t start = 0; start < order.size(); start += batch_size) {
            const size_t end = std::min(order.size(), start + batch_size);
            std::vector<Image> imgs;
            std::vector<int> ys;
            for (size_t i = start; i < end; ++i) {
                imgs.push_back(corpus.images[order[i]]);
                ys.push_back(labels[order[i]]);
            }
            Tensor feats = enc.encode_batch(imgs);          // [b, P, d]
            Tensor pooledf = mean_axis(feats, 1);           // [b, d]
            Tensor logits = head.forward(pooledf);          // [b, n_classes]
            Tensor logp = log_softmax_lastdim(logits);
            // NLL of the target class via a mask (ids are data, not params).
            Tensor mask = Tensor::zeros({static_cast<int>(ys.size()), n_classes});
            for (size_t i = 0; i < ys.size(); ++i)
                mask.data()[i * n_classes + ys[i]] = -1.0;
            Tensor loss = scale(sum_all(mul(logp, mask)), 1.0 / static_cast<double>(ys.size()));
            opt.zero_grad(params);
            loss.backward();
            opt.step(params);
            for (size_t i = 0; i < ys.size(); ++i) {
                int best = 0;
                for (int c = 1; c < n_classes; ++c)
                    if (logits.at({static_cast<int>(i), c}) >
                        logits.at({static_cast<int>(i), best}))
                        best = c;
                if (best == ys[i]) ++correct;
            }
        }
        accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        if (accuracy >= 0.99) break;
    }
    enc.set_frozen(true);
    return accuracy;
}

// ---------------------------------------------------------------------------
// Resampler
// ---------------------------------------------------------------------------

Resampler::Resampler(uint64_t seed) {
    Rng rng = Rng(seed).derive("resampler");
    queries_ = Parameter(Tensor::randn({kNumTokens, kDCond}, rng, 0.5), "resampler.queries");
    feat_norm_ = LayerNorm("resampler.feat", kDEnc);
    b1_ = {LayerNorm("resampler.b1.q", kDCond),
           MultiheadAttention("resampler.b1.attn", kDCond, kDEnc, 4, rng),
           LayerNorm("resampler.b1.ff", kDCond), FeedForward("resampler.b1.mlp", kDCond, 2, rng)};
    b2_ = {LayerNorm("resampler.b2.q", kDCond),
           MultiheadAttention("resampler.b2.attn", kDCond, kDEnc, 4, rng),
           LayerNorm("resampler.b2.ff", kDCond), FeedForward("resampler.b2.mlp", kDCond, 2, rng)};
    out_proj_ = Linear("resampler.out_proj", kDCond, kDCond, rng);
}

Tensor Resampler::forward(const Tensor& features) const {
    const auto& s = features.shape();
    if (s.size() != 3 || s[2] != kDEnc)
        throw std::invalid_argument("Resampler: expected [B,P,d_enc], got " + shape_str(s));
    if (s[1] < 1) throw std::invalid_argument("Resampler: empty feature sequence");
    const int B = s[0];
    Tensor feat = feat_norm_.forward(features);
    // broadcast the learnable queries over the batch
    Tensor q = reshape(concat(std::vector<Tensor>(static_cast<size_t>(B), queries_.tensor), 0),
                       {B, kNumTokens, kDCond});
    for (const Block* blk : {&b1_, &b2_}) {
        q = add(q, blk->attn.forward(blk->q_norm.forward(q), feat));
        q = add(q, blk->ff.forward(blk->ff_norm.forward(q)));
    }
    return out_proj_.forward(q);
}

Tensor Resampler::tokens_for_images(const PatchEncoder& enc, const std::vector<Image>& imgs) const {
    if (imgs.empty()) return Tensor();
    Tensor feats = enc.encode_batch(imgs);  // [K', P, d_enc]
    Tensor tokens = forward(feats);         // [K', N_t, d_cond]
    return reshape(tokens, {static_cast<int>(imgs.size()) * kNumTokens, kDCond});
}

void Resampler::visit(const ParamVisitor& v) {
    v(queries_);
    feat_norm_.visit(v);
    for (Block* blk : {&b1_, &b2_}) {
        blk->q_norm.visit(v);
        blk->attn.visit(v);
        blk->ff_norm.visit(v);
        blk->ff.visit(v);
    }
    out_proj_.visit(v);
}

void Resampler::set_frozen(bool frozen) {
    ParamVisitor v = [frozen](Parameter& p) { p.set_frozen(frozen); };
    visit(v);
}

}  // namespace mvrag
