#pragma once

#include <vector>

#include "mmae/model.hpp"
#include "oracle.hpp"

namespace testutil {

template <typename T>
void fill_random(mmae::TensorT<T>& t, mmae::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
oracle::Mat to_mat(const mmae::TensorT<T>& t) {
    oracle::Mat m(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = static_cast<double>(t.data[i]);
    return m;
}

template <typename T>
std::vector<double> to_vec(const mmae::TensorT<T>& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

template <typename T>
std::vector<oracle::Head> to_heads(const mmae::MultiHeadParamsT<T>& p) {
    std::vector<oracle::Head> heads;
    for (const auto& h : p.heads) heads.push_back({to_mat(h.wq), to_mat(h.wk), to_mat(h.wv)});
    return heads;
}

template <typename T>
oracle::BlockWeights to_block(const mmae::EncoderBlockParamsT<T>& b) {
    oracle::BlockWeights w;
    w.heads = to_heads(b.attn);
    w.attn_gain = to_vec(b.attn_norm.gain);
    w.attn_bias = to_vec(b.attn_norm.bias);
    w.w_in = to_mat(b.ffn.w_in);
    w.b_in = to_vec(b.ffn.b_in);
    w.w_out = to_mat(b.ffn.w_out);
    w.b_out = to_vec(b.ffn.b_out);
    w.out_gain = to_vec(b.out_norm.gain);
    w.out_bias = to_vec(b.out_norm.bias);
    return w;
}

template <typename T>
oracle::DecoderWeights to_decoder(const mmae::DecoderParamsT<T>& d) {
    oracle::DecoderWeights w;
    w.self_heads = to_heads(d.self_attn);
    w.self_gain = to_vec(d.self_norm.gain);
    w.self_bias = to_vec(d.self_norm.bias);
    w.pool_heads = to_heads(d.pool_attn);
    w.pool_gain = to_vec(d.pool_norm.gain);
    w.pool_bias = to_vec(d.pool_norm.bias);
    w.w_in = to_mat(d.ffn.w_in);
    w.b_in = to_vec(d.ffn.b_in);
    w.w_out = to_mat(d.ffn.w_out);
    w.b_out = to_vec(d.ffn.b_out);
    w.out_gain = to_vec(d.out_norm.gain);
    w.out_bias = to_vec(d.out_norm.bias);
    return w;
}

// Fresh random model: embedding table is the seeded random-init one.
inline mmae::ModelParams make_params(const mmae::ModelConfig& cfg) {
    mmae::Vocab vocab;
    for (int i = 0; i < cfg.vocab; ++i) {
        const std::string token = i < mmae::Vocab::kNumSpecials ? "<s" + std::to_string(i) + ">"
                                                                : "w" + std::to_string(i);
        vocab.token_to_id.emplace(token, i);
        vocab.id_to_token.push_back(token);
        vocab.counts.push_back(0);
    }
    mmae::EmbeddingTable table = mmae::init_embedding_table(vocab, cfg.d_w, cfg.seed);
    return mmae::init_params(cfg, table);
}

inline double max_abs_diff(const oracle::Mat& a, const std::vector<double>& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) worst = std::max(worst, std::abs(a.v[i] - b[i]));
    return worst;
}

template <typename T>
double max_abs_diff(const oracle::Mat& a, const mmae::TensorT<T>& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        worst = std::max(worst, std::abs(a.v[i] - static_cast<double>(b.data[i])));
    }
    return worst;
}

}  // namespace testutil
