#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmae/tensor.hpp"

namespace mmae {

// Per-head projections. Queries and key/values may live in different spaces
// (the encoder attends d_w -> d_m; the decoder's pooled-memory attention is
// d_m -> d_m); heads concatenate directly, so heads * d_v = output width.
template <typename T>
struct HeadParamsT {
    TensorT<T> wq;  // [d_in_q x d_k]
    TensorT<T> wk;  // [d_in_kv x d_k]
    TensorT<T> wv;  // [d_in_kv x d_v]
};

template <typename T>
struct MultiHeadParamsT {
    std::vector<HeadParamsT<T>> heads;

    int head_count() const { return static_cast<int>(heads.size()); }
    int key_dim() const { return heads.front().wk.cols(); }
    int value_dim() const { return heads.front().wv.cols(); }
    int out_dim() const { return head_count() * value_dim(); }
};

using MultiHeadParams = MultiHeadParamsT<float>;

// Boolean allow-grid; entry (query, key) true where attention may look.
struct AttnMask {
    int n_q = 0;
    int n_k = 0;
    std::vector<std::uint8_t> allowed;

    bool at(int q, int k) const { return allowed[static_cast<std::size_t>(q) * n_k + k] != 0; }
    std::uint8_t* row(int q) { return allowed.data() + static_cast<std::size_t>(q) * n_k; }
    const std::uint8_t* row(int q) const { return allowed.data() + static_cast<std::size_t>(q) * n_k; }
};

// (i, j) allowed iff j <= i.
AttnMask causal_mask(int n);

// Broadcasts a per-key allow vector over n_q query rows.
AttnMask key_padding_mask(std::span<const std::uint8_t> key_allowed, int n_q);

// Intersection of causal and per-key padding constraints.
AttnMask causal_with_padding(std::span<const std::uint8_t> key_allowed);

// Post-softmax probabilities, all heads.
struct AttentionTrace {
    int heads = 0;
    int n_q = 0;
    int n_k = 0;
    std::vector<float> weights;  // heads x n_q x n_k

    float at(int h, int q, int k) const {
        return weights[(static_cast<std::size_t>(h) * n_q + q) * n_k + k];
    }
};

template <typename T>
struct MultiHeadCtxT {
    std::vector<TensorT<T>> q_proj;  // per head [n_q x d_k]
    std::vector<TensorT<T>> k_proj;  // per head [n_k x d_k]
    std::vector<TensorT<T>> v_proj;  // per head [n_k x d_v]
    std::vector<TensorT<T>> attn;    // per head [n_q x n_k], post-softmax
    std::optional<AttnMask> mask;

    AttentionTrace trace() const;
};

// Eq.-faithful multi-head attention: project per head, scale by 1/sqrt(d_k),
// mask with an additive -1e9, softmax, weight values, concatenate heads.
// Masked key/value columns are skipped outright in the weighted sum, so
// masked inputs cannot perturb allowed outputs even at the bit level.
template <typename T>
TensorT<T> multihead(const TensorT<T>& query, const TensorT<T>& keys, const TensorT<T>& values,
                     const MultiHeadParamsT<T>& params, const AttnMask* mask, MultiHeadCtxT<T>& ctx);

// Accumulates into d_query/d_keys/d_values (nullable; for self-attention pass
// the same buffer for all three) and into the params' grad slots.
template <typename T>
void multihead_backward(const TensorT<T>& query, const TensorT<T>& keys, const TensorT<T>& values,
                        MultiHeadParamsT<T>& params, const MultiHeadCtxT<T>& ctx, const TensorT<T>& d_out,
                        T* d_query, T* d_keys, T* d_values);

}  // namespace mmae
