#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mvrag/datagen.hpp"
#include "mvrag/image.hpp"
#include "mvrag/nn.hpp"

namespace mvrag {

inline constexpr int kDCond = 64;       // shared token width, text and retrieval
inline constexpr int kDEnc = 64;        // patch feature width
inline constexpr int kPatchSize = 4;    // E's patch size on 32x32 inputs
inline constexpr int kNumTokens = 16;   // N_t resampled tokens per image
inline constexpr int kTextLen = 8;      // L_txt

// Stack a batch of images into a [B, H, W, 3] tensor.
Tensor images_to_tensor(const std::vector<Image>& imgs);

// --------------------------------------------------------------------------
// Toy text encoder: fixed template vocabulary, embedding + positions + one
// transformer layer. Frozen after base pretraining.
// --------------------------------------------------------------------------

class TextEncoder {
public:
    static constexpr int kNull = 0;
    static constexpr int kPad = 1;
    static constexpr int kUnk = 2;

    explicit TextEncoder(uint64_t seed);

    // Token ids, tail-kept to length kTextLen and padded with kPad. Tail-keep
    // truncation preserves the ", 3d asset" mode tag on long captions.
    std::vector<int> token_ids(const std::string& prompt) const;

    Tensor encode(const std::string& prompt) const;                 // [L_txt, d_cond]
    Tensor encode_batch(const std::vector<std::string>& prompts) const;  // [B, L_txt, d_cond]
    Tensor encode_null(int batch = 1) const;                        // NULL-token rows

    // Mean-pooled prompt embedding for similarity work (no gradients).
    std::vector<double> pooled(const std::string& prompt) const;

    int vocab_size() const { return static_cast<int>(vocab_.size()); }
    void visit(const ParamVisitor& v);
    void set_frozen(bool frozen);

private:
    Tensor encode_ids(const std::vector<std::vector<int>>& ids) const;
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> word_to_id_;
    Parameter table_;  // [V, d_cond]
    Tensor pos_;       // fixed sinusoidal [L_txt, d_cond]
    TransformerBlock block_;
};

// --------------------------------------------------------------------------
// Frozen patch feature extractor E (stand-in for a CLIP ViT).
// --------------------------------------------------------------------------

class PatchEncoder {
public:
    explicit PatchEncoder(uint64_t seed);

    int patches_per_image(int image_size) const {
        return (image_size / kPatchSize) * (image_size / kPatchSize);
    }

    Tensor encode(const Image& img) const;                     // [P, d_enc]
    Tensor encode_batch(const std::vector<Image>& imgs) const;  // [B, P, d_enc]
    Tensor encode_tensor(const Tensor& imgs) const;            // [B, H, W, 3] -> [B, P, d_enc]

    std::vector<double> pooled_features(const Image& img) const;

    void visit(const ParamVisitor& v);
    void set_frozen(bool frozen);
    bool frozen() const { return frozen_; }

private:
    Linear patch_proj_;
    Tensor pos_;  // fixed sinusoidal [P, d_enc] for 32x32 inputs
    TransformerBlock block1_, block2_;
    LayerNorm final_norm_;
    bool frozen_ = false;
};

// Cosine similarity of mean-pooled patch features.
double pooled_similarity(const PatchEncoder& enc, const Image& a, const Image& b);

// Train E with a linear classification head on the corpus classes (record id
// prefix = class); head is discarded, E is frozen and returned accuracy is
// the final training accuracy. Throws if any class has fewer than 2 images.
double pretrain_encoder(PatchEncoder& enc, const Corpus& corpus, int epochs, uint64_t seed);

// --------------------------------------------------------------------------
// Perceiver-style resampler: N_t learnable queries cross-attend to patch
// features. No positional encoding touches the incoming features.
// --------------------------------------------------------------------------

class Resampler {
public:
    explicit Resampler(uint64_t seed);

    // features [B, P, d_enc] -> tokens [B, N_t, d_cond]; P may vary.
    Tensor forward(const Tensor& features) const;
    // Convenience: encode K' images through E and concatenate their token
    // blocks -> [K' * N_t, d_cond]. Empty input -> zero-row tensor shape
    // preserved by the caller (returns an undefined tensor).
    Tensor tokens_for_images(const PatchEncoder& enc, const std::vector<Image>& imgs) const;

    void visit(const ParamVisitor& v);
    void set_frozen(bool frozen);

private:
    struct Block {
        LayerNorm q_norm;
        MultiheadAttention attn;
        LayerNorm ff_norm;
        FeedForward ff;
    };
    Parameter queries_;  // [N_t, d_cond]
    LayerNorm feat_norm_;
    Block b1_, b2_;
    Linear out_proj_;
};

}  // namespace mvrag
