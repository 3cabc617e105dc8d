#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmae/attention.hpp"
#include "mmae/embedding.hpp"
#include "mmae/ops.hpp"
#include "mmae/text.hpp"

namespace mmae {

enum class Pooling { mean, max, mean_max };

std::string pooling_name(Pooling p);
Pooling pooling_from_name(const std::string& name);

struct ModelConfig {
    int d_w = 50;        // word/position embedding width
    int d_m = 128;       // hidden width (paper-scale preset: 2048)
    int d_f = 256;       // feed-forward inner width (paper-scale preset: 4096)
    int heads = 4;       // attention heads (paper-scale preset: 8)
    int t_max = 64;      // maximum sequence length, EOS included
    int vocab = 0;       // filled in once the vocabulary exists
    int n_blocks = 1;    // encoder depth; >1 is an ablation knob only
    double dropout = 0.5;
    Pooling pooling = Pooling::mean_max;
    std::uint64_t seed = 42;

    void validate() const;
    int head_dim() const { return d_m / heads; }
    int memory_slots() const { return pooling == Pooling::mean_max ? 2 : 1; }
    int sentence_dim() const { return memory_slots() * d_m; }
};

template <typename T>
struct LayerNormParamsT {
    TensorT<T> gain;
    TensorT<T> bias;
};

template <typename T>
struct FeedForwardParamsT {
    TensorT<T> w_in, b_in;    // [d_m x d_f], [d_f]
    TensorT<T> w_out, b_out;  // [d_f x d_m], [d_m]
};

template <typename T>
struct EncoderBlockParamsT {
    MultiHeadParamsT<T> attn;
    LayerNormParamsT<T> attn_norm;
    FeedForwardParamsT<T> ffn;
    LayerNormParamsT<T> out_norm;
};

template <typename T>
struct DecoderParamsT {
    MultiHeadParamsT<T> self_attn;   // causal, over shifted inputs
    LayerNormParamsT<T> self_norm;
    MultiHeadParamsT<T> pool_attn;   // memory = the pooled sentence rows
    LayerNormParamsT<T> pool_norm;
    FeedForwardParamsT<T> ffn;
    LayerNormParamsT<T> out_norm;
};

template <typename T>
struct ModelParamsT {
    std::vector<EncoderBlockParamsT<T>> encoder;
    DecoderParamsT<T> decoder;
    TensorT<T> vocab_w;  // [d_m x V]
    TensorT<T> vocab_b;  // [V]

    TensorT<T> embedding;  // [V x d_w], frozen: never carries a gradient
    std::vector<Provenance> embedding_provenance;
    TensorT<T> positions;  // [t_max x d_w], derived from the config

    // Stable manifest order shared by checkpoints, Adam state and grad checks.
    std::vector<std::pair<std::string, TensorT<T>*>> trainable();
    std::vector<std::pair<std::string, const TensorT<T>*>> trainable() const;
    void ensure_grads();
    void zero_grads();
};

using ModelParams = ModelParamsT<float>;

// Uniform +-sqrt(6/(fan_in+fan_out)) matrices, zero biases, unit LN gains.
ModelParams init_params(const ModelConfig& cfg, const EmbeddingTable& table);

template <typename To, typename From>
ModelParamsT<To> convert_params(const ModelParamsT<From>& src);

// --- stand-alone blocks ---

template <typename T>
struct SublayerCtxT {
    TensorT<T> input;
    MultiHeadCtxT<T> attn_ctx;
    TensorT<T> attn_out;
    std::vector<std::uint8_t> attn_drop;
    ops::LayerNormCacheT<T> attn_norm_cache;
    TensorT<T> attn_norm_out;
    TensorT<T> ffn_pre;
    TensorT<T> ffn_act;
    TensorT<T> ffn_out;
    std::vector<std::uint8_t> ffn_drop;
    ops::LayerNormCacheT<T> out_norm_cache;
};

template <typename T>
struct EncoderCtxT {
    std::vector<SublayerCtxT<T>> blocks;
};

// Eq.-shaped encoder stack: attention sublayer WITHOUT residual, feed-forward
// sublayer WITH residual; key_allowed masks padded key positions.
template <typename T>
TensorT<T> encoder_forward(const std::vector<EncoderBlockParamsT<T>>& blocks, const TensorT<T>& x,
                           std::span<const std::uint8_t> key_allowed, bool training, double dropout_rate, Rng* rng,
                           EncoderCtxT<T>& ctx);

template <typename T>
void encoder_backward(std::vector<EncoderBlockParamsT<T>>& blocks, const EncoderCtxT<T>& ctx, double dropout_rate,
                      const TensorT<T>& d_hidden, T* d_x);

template <typename T>
struct PoolCtxT {
    std::vector<int> argmax;  // winning row per feature (max slot); lowest index on ties
    int counted = 0;
};

// Rows of the result are the memory slots: [max; mean], or the single slot for
// the ablation poolings. Flat data of the mean_max result is [z_max, z_mean].
template <typename T>
TensorT<T> mean_max_pool(const TensorT<T>& hidden, std::span<const std::uint8_t> allowed, Pooling pooling,
                         PoolCtxT<T>* ctx = nullptr);

template <typename T>
void mean_max_pool_backward(const PoolCtxT<T>& ctx, std::span<const std::uint8_t> allowed, Pooling pooling,
                            const TensorT<T>& d_pooled, T* d_hidden);

template <typename T>
struct DecoderCtxT {
    TensorT<T> input;
    MultiHeadCtxT<T> self_ctx;
    TensorT<T> self_out;
    std::vector<std::uint8_t> self_drop;
    ops::LayerNormCacheT<T> self_norm_cache;
    TensorT<T> self_norm_out;
    MultiHeadCtxT<T> pool_ctx;
    TensorT<T> pool_out;
    std::vector<std::uint8_t> pool_drop;
    ops::LayerNormCacheT<T> pool_norm_cache;
    TensorT<T> pool_norm_out;
    TensorT<T> ffn_pre;
    TensorT<T> ffn_act;
    TensorT<T> ffn_out;
    std::vector<std::uint8_t> ffn_drop;
    ops::LayerNormCacheT<T> out_norm_cache;
};

// y: shifted input embeddings [T x d_w]; memory: pooled rows [slots x d_m].
// Residuals around the pooled-memory attention and the feed-forward sublayer
// only, never around self-attention.
template <typename T>
TensorT<T> decoder_forward(const DecoderParamsT<T>& params, const TensorT<T>& y, const TensorT<T>& memory,
                           const AttnMask& self_mask, bool training, double dropout_rate, Rng* rng,
                           DecoderCtxT<T>& ctx);

template <typename T>
void decoder_backward(DecoderParamsT<T>& params, const TensorT<T>& memory, const DecoderCtxT<T>& ctx,
                      double dropout_rate, const TensorT<T>& d_hidden, T* d_y, T* d_memory);

template <typename T>
TensorT<T> output_logits(const TensorT<T>& hidden, const TensorT<T>& w, const TensorT<T>& b);

template <typename T>
void output_logits_backward(const TensorT<T>& hidden, TensorT<T>& w, TensorT<T>& b, const TensorT<T>& d_logits,
                            T* d_hidden);

// --- whole-model operations ---

// ids must end with EOS and fit t_max. Inference mode, deterministic.
template <typename T>
TensorT<T> encode_ids(const ModelConfig& cfg, const ModelParamsT<T>& params, std::span<const int> ids);

struct EvalStats {
    double loss = 0;
    double accuracy = 0;
    long long tokens = 0;
};

// Teacher forcing over a batch: decoder inputs [GO, w_1..w_{N-1}], targets
// [w_1..w_{N-1}, EOS]; loss is the mean NLL over every unmasked target in the
// batch. backward=true accumulates parameter gradients of exactly that mean.
template <typename T>
EvalStats reconstruct_teacher_forced(const ModelConfig& cfg, ModelParamsT<T>& params, const Batch& batch,
                                     bool training = false, Rng* rng = nullptr, bool backward = false);

std::vector<int> greedy_decode(const ModelConfig& cfg, const ModelParams& params, const Tensor& sentence_z,
                               int max_len);

struct TraceResult {
    AttentionTrace per_head;      // heads x T x slots
    std::vector<float> head_avg;  // T x slots, row-major
    int steps = 0;
    int slots = 0;
};

// Pooled-memory attention weights from a teacher-forced pass over the
// sentence's own tokens.
TraceResult attention_trace(const ModelConfig& cfg, const ModelParams& params, std::span<const int> ids);

// Throughput path: packs every sentence's rows into shared GEMMs and fans the
// batch out over a few worker threads. Numerically equivalent to encode_ids
// up to float summation order.
std::vector<Tensor> encode_batch(const ModelConfig& cfg, const ModelParams& params,
                                 const std::vector<std::vector<int>>& ids, int n_threads = 0);

}  // namespace mmae
