#include "mmae/model.hpp"

#include <algorithm>
#include <cmath>

namespace mmae {

namespace {

constexpr double kLayerNormEps = 1e-6;

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    TensorT<T> y = ops::matmul(x, w);
    const int n = y.cols();
    for (int r = 0; r < y.rows(); ++r) {
        T* row = y.row(r);
        for (int j = 0; j < n; ++j) row[j] += b.data[static_cast<std::size_t>(j)];
    }
    return y;
}

template <typename T>
void linear_backward(const TensorT<T>& x, TensorT<T>& w, TensorT<T>& b, const TensorT<T>& dy, T* dx) {
    w.ensure_grad();
    b.ensure_grad();
    ops::matmul_backward(x, w, dy, dx, w.grad.data());
    const int n = dy.cols();
    for (int r = 0; r < dy.rows(); ++r) {
        const T* row = dy.row(r);
        for (int j = 0; j < n; ++j) b.grad[static_cast<std::size_t>(j)] += row[j];
    }
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    TensorT<T> out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

// Empty mask = dropout was an identity (inference or rate 0).
template <typename T>
TensorT<T> drop_forward(const TensorT<T>& x, double rate, Rng* rng, bool training, std::vector<std::uint8_t>& mask) {
    if (!training || rate == 0.0 || rng == nullptr) {
        mask.clear();
        return x;
    }
    return ops::dropout(x, rate, *rng, true, &mask);
}

template <typename T>
void drop_backward(const std::vector<std::uint8_t>& mask, double rate, const TensorT<T>& dy, T* dx) {
    if (mask.empty()) {
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy.data[i];
    } else {
        ops::dropout_backward(mask, rate, dy, dx);
    }
}

template <typename T, typename F>
void visit_multihead(const std::string& prefix, MultiHeadParamsT<T>& p, F&& f) {
    for (std::size_t h = 0; h < p.heads.size(); ++h) {
        const std::string head = prefix + ".head" + std::to_string(h);
        f(head + ".wq", p.heads[h].wq);
        f(head + ".wk", p.heads[h].wk);
        f(head + ".wv", p.heads[h].wv);
    }
}

template <typename T, typename F>
void visit_trainable(ModelParamsT<T>& p, F&& f) {
    auto norm = [&](const std::string& prefix, LayerNormParamsT<T>& n) {
        f(prefix + ".gain", n.gain);
        f(prefix + ".bias", n.bias);
    };
    auto ffn = [&](const std::string& prefix, FeedForwardParamsT<T>& q) {
        f(prefix + ".w_in", q.w_in);
        f(prefix + ".b_in", q.b_in);
        f(prefix + ".w_out", q.w_out);
        f(prefix + ".b_out", q.b_out);
    };
    for (std::size_t b = 0; b < p.encoder.size(); ++b) {
        const std::string prefix = "encoder." + std::to_string(b);
        auto& block = p.encoder[b];
        visit_multihead(prefix + ".attn", block.attn, f);
        norm(prefix + ".attn_norm", block.attn_norm);
        ffn(prefix + ".ffn", block.ffn);
        norm(prefix + ".out_norm", block.out_norm);
    }
    visit_multihead("decoder.self_attn", p.decoder.self_attn, f);
    norm("decoder.self_norm", p.decoder.self_norm);
    visit_multihead("decoder.pool_attn", p.decoder.pool_attn, f);
    norm("decoder.pool_norm", p.decoder.pool_norm);
    ffn("decoder.ffn", p.decoder.ffn);
    norm("decoder.out_norm", p.decoder.out_norm);
    f("vocab_proj.w", p.vocab_w);
    f("vocab_proj.b", p.vocab_b);
}

void glorot(Tensor& t, Rng& rng) {
    const double limit = std::sqrt(6.0 / (t.rows() + t.cols()));
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-limit, limit));
}

MultiHeadParams init_multihead(int d_in, int d_m, int heads, Rng& rng) {
    MultiHeadParams p;
    const int d_k = d_m / heads;
    for (int h = 0; h < heads; ++h) {
        HeadParamsT<float> head;
        head.wq = Tensor({d_in, d_k});
        head.wk = Tensor({d_in, d_k});
        head.wv = Tensor({d_in, d_k});
        glorot(head.wq, rng);
        glorot(head.wk, rng);
        glorot(head.wv, rng);
        p.heads.push_back(std::move(head));
    }
    return p;
}

LayerNormParamsT<float> init_norm(int d) {
    LayerNormParamsT<float> n;
    n.gain = Tensor({d});
    n.gain.fill(1.0f);
    n.bias = Tensor({d});
    return n;
}

FeedForwardParamsT<float> init_ffn(int d_m, int d_f, Rng& rng) {
    FeedForwardParamsT<float> q;
    q.w_in = Tensor({d_m, d_f});
    glorot(q.w_in, rng);
    q.b_in = Tensor({d_f});
    q.w_out = Tensor({d_f, d_m});
    glorot(q.w_out, rng);
    q.b_out = Tensor({d_m});
    return q;
}

}  // namespace

std::string pooling_name(Pooling p) {
    switch (p) {
        case Pooling::mean: return "mean";
        case Pooling::max: return "max";
        case Pooling::mean_max: return "meanmax";
    }
    return "?";
}

Pooling pooling_from_name(const std::string& name) {
    if (name == "mean") return Pooling::mean;
    if (name == "max") return Pooling::max;
    if (name == "meanmax" || name == "mean_max" || name == "mean-max") return Pooling::mean_max;
    throw ConfigError("unknown pooling \"" + name + "\" (mean|max|meanmax)");
}

void ModelConfig::validate() const {
    if (d_w <= 0 || d_m <= 0 || d_f <= 0 || heads <= 0 || t_max <= 0 || vocab <= 0 || n_blocks <= 0) {
        throw ConfigError("model config: all dimensions must be positive");
    }
    if (d_w % 2 != 0) throw ConfigError("model config: d_w must be even for sinusoidal positions");
    if (d_m % heads != 0) {
        throw ConfigError("model config: heads (" + std::to_string(heads) + ") must divide d_m (" +
                          std::to_string(d_m) + ")");
    }
    if (d_f < d_m) throw ConfigError("model config: d_f must be >= d_m");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must lie in [0,1)");
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> ModelParamsT<T>::trainable() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    visit_trainable(*this, [&](const std::string& name, TensorT<T>& t) { out.emplace_back(name, &t); });
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const TensorT<T>*>> ModelParamsT<T>::trainable() const {
    std::vector<std::pair<std::string, const TensorT<T>*>> out;
    visit_trainable(const_cast<ModelParamsT<T>&>(*this),
                    [&](const std::string& name, TensorT<T>& t) { out.emplace_back(name, &t); });
    return out;
}

template <typename T>
void ModelParamsT<T>::ensure_grads() {
    visit_trainable(*this, [](const std::string&, TensorT<T>& t) { t.ensure_grad(); });
}

template <typename T>
void ModelParamsT<T>::zero_grads() {
    visit_trainable(*this, [](const std::string&, TensorT<T>& t) { t.zero_grad(); });
}

ModelParams init_params(const ModelConfig& cfg, const EmbeddingTable& table) {
    cfg.validate();
    if (table.vocab_size() != cfg.vocab || table.dim() != cfg.d_w) {
        throw ConfigError("init_params: embedding table " + std::to_string(table.vocab_size()) + "x" +
                          std::to_string(table.dim()) + " does not match config");
    }
    Rng rng(Rng::mix(cfg.seed, 0x9a7a));
    ModelParams p;
    for (int b = 0; b < cfg.n_blocks; ++b) {
        EncoderBlockParamsT<float> block;
        block.attn = init_multihead(b == 0 ? cfg.d_w : cfg.d_m, cfg.d_m, cfg.heads, rng);
        block.attn_norm = init_norm(cfg.d_m);
        block.ffn = init_ffn(cfg.d_m, cfg.d_f, rng);
        block.out_norm = init_norm(cfg.d_m);
        p.encoder.push_back(std::move(block));
    }
    p.decoder.self_attn = init_multihead(cfg.d_w, cfg.d_m, cfg.heads, rng);
    p.decoder.self_norm = init_norm(cfg.d_m);
    p.decoder.pool_attn = init_multihead(cfg.d_m, cfg.d_m, cfg.heads, rng);
    p.decoder.pool_norm = init_norm(cfg.d_m);
    p.decoder.ffn = init_ffn(cfg.d_m, cfg.d_f, rng);
    p.decoder.out_norm = init_norm(cfg.d_m);
    p.vocab_w = Tensor({cfg.d_m, cfg.vocab});
    glorot(p.vocab_w, rng);
    p.vocab_b = Tensor({cfg.vocab});
    p.embedding = table.weights;
    p.embedding_provenance = table.provenance;
    p.positions = positional_table<float>(cfg.t_max, cfg.d_w);
    return p;
}

template <typename To, typename From>
ModelParamsT<To> convert_params(const ModelParamsT<From>& src) {
    ModelParamsT<To> dst;
    for (const auto& block : src.encoder) {
        EncoderBlockParamsT<To> out;
        for (const auto& head : block.attn.heads) {
            out.attn.heads.push_back({head.wq.template cast<To>(), head.wk.template cast<To>(),
                                      head.wv.template cast<To>()});
        }
        out.attn_norm = {block.attn_norm.gain.template cast<To>(), block.attn_norm.bias.template cast<To>()};
        out.ffn = {block.ffn.w_in.template cast<To>(), block.ffn.b_in.template cast<To>(),
                   block.ffn.w_out.template cast<To>(), block.ffn.b_out.template cast<To>()};
        out.out_norm = {block.out_norm.gain.template cast<To>(), block.out_norm.bias.template cast<To>()};
        dst.encoder.push_back(std::move(out));
    }
    for (const auto& head : src.decoder.self_attn.heads) {
        dst.decoder.self_attn.heads.push_back({head.wq.template cast<To>(), head.wk.template cast<To>(),
                                               head.wv.template cast<To>()});
    }
    dst.decoder.self_norm = {src.decoder.self_norm.gain.template cast<To>(),
                             src.decoder.self_norm.bias.template cast<To>()};
    for (const auto& head : src.decoder.pool_attn.heads) {
        dst.decoder.pool_attn.heads.push_back({head.wq.template cast<To>(), head.wk.template cast<To>(),
                                               head.wv.template cast<To>()});
    }
    dst.decoder.pool_norm = {src.decoder.pool_norm.gain.template cast<To>(),
                             src.decoder.pool_norm.bias.template cast<To>()};
    dst.decoder.ffn = {src.decoder.ffn.w_in.template cast<To>(), src.decoder.ffn.b_in.template cast<To>(),
                       src.decoder.ffn.w_out.template cast<To>(), src.decoder.ffn.b_out.template cast<To>()};
    dst.decoder.out_norm = {src.decoder.out_norm.gain.template cast<To>(),
                            src.decoder.out_norm.bias.template cast<To>()};
    dst.vocab_w = src.vocab_w.template cast<To>();
    dst.vocab_b = src.vocab_b.template cast<To>();
    dst.embedding = src.embedding.template cast<To>();
    dst.embedding_provenance = src.embedding_provenance;
    dst.positions = src.positions.template cast<To>();
    return dst;
}

template <typename T>
TensorT<T> encoder_forward(const std::vector<EncoderBlockParamsT<T>>& blocks, const TensorT<T>& x,
                           std::span<const std::uint8_t> key_allowed, bool training, double dropout_rate, Rng* rng,
                           EncoderCtxT<T>& ctx) {
    if (x.rows() < 1) throw ShapeError("encoder_forward: empty input");
    const bool any_masked = std::find(key_allowed.begin(), key_allowed.end(), std::uint8_t(0)) != key_allowed.end();
    AttnMask mask;
    if (any_masked) mask = key_padding_mask(key_allowed, x.rows());

    ctx.blocks.assign(blocks.size(), SublayerCtxT<T>{});
    TensorT<T> cur = x;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& p = blocks[b];
        auto& c = ctx.blocks[b];
        c.input = cur;
        c.attn_out = multihead(c.input, c.input, c.input, p.attn, any_masked ? &mask : nullptr, c.attn_ctx);
        TensorT<T> attn_dropped = drop_forward(c.attn_out, dropout_rate, rng, training, c.attn_drop);
        c.attn_norm_out = ops::layer_norm(attn_dropped, p.attn_norm.gain, p.attn_norm.bias,
                                          static_cast<T>(kLayerNormEps), &c.attn_norm_cache);
        c.ffn_pre = linear(c.attn_norm_out, p.ffn.w_in, p.ffn.b_in);
        c.ffn_act = ops::relu(c.ffn_pre);
        c.ffn_out = linear(c.ffn_act, p.ffn.w_out, p.ffn.b_out);
        TensorT<T> ffn_dropped = drop_forward(c.ffn_out, dropout_rate, rng, training, c.ffn_drop);
        TensorT<T> summed = add(ffn_dropped, c.attn_norm_out);
        cur = ops::layer_norm(summed, p.out_norm.gain, p.out_norm.bias, static_cast<T>(kLayerNormEps),
                              &c.out_norm_cache);
    }
    return cur;
}

template <typename T>
void encoder_backward(std::vector<EncoderBlockParamsT<T>>& blocks, const EncoderCtxT<T>& ctx, double dropout_rate,
                      const TensorT<T>& d_hidden, T* d_x) {
    TensorT<T> d_cur = d_hidden;
    for (std::size_t b = blocks.size(); b-- > 0;) {
        auto& p = blocks[b];
        const auto& c = ctx.blocks[b];
        p.attn_norm.gain.ensure_grad();
        p.attn_norm.bias.ensure_grad();
        p.out_norm.gain.ensure_grad();
        p.out_norm.bias.ensure_grad();

        // hidden = LN(ffn_dropped + attn_norm_out)
        TensorT<T> d_sum(d_cur.shape);
        ops::layer_norm_backward(c.out_norm_cache, p.out_norm.gain, d_cur, d_sum.data.data(),
                                 p.out_norm.gain.grad.data(), p.out_norm.bias.grad.data());
        TensorT<T> d_ffn_out(c.ffn_out.shape);
        drop_backward(c.ffn_drop, dropout_rate, d_sum, d_ffn_out.data.data());
        TensorT<T> d_attn_norm = d_sum;  // residual branch

        TensorT<T> d_act(c.ffn_act.shape);
        linear_backward(c.ffn_act, p.ffn.w_out, p.ffn.b_out, d_ffn_out, d_act.data.data());
        TensorT<T> d_pre(c.ffn_pre.shape);
        ops::relu_backward(c.ffn_pre, d_act, d_pre.data.data());
        linear_backward(c.attn_norm_out, p.ffn.w_in, p.ffn.b_in, d_pre, d_attn_norm.data.data());

        TensorT<T> d_attn_dropped(c.attn_out.shape);
        ops::layer_norm_backward(c.attn_norm_cache, p.attn_norm.gain, d_attn_norm, d_attn_dropped.data.data(),
                                 p.attn_norm.gain.grad.data(), p.attn_norm.bias.grad.data());
        TensorT<T> d_attn(c.attn_out.shape);
        drop_backward(c.attn_drop, dropout_rate, d_attn_dropped, d_attn.data.data());

        TensorT<T> d_in(c.input.shape);
        multihead_backward(c.input, c.input, c.input, p.attn, c.attn_ctx, d_attn, d_in.data.data(),
                           d_in.data.data(), d_in.data.data());
        d_cur = std::move(d_in);
    }
    if (d_x != nullptr) {
        for (std::size_t i = 0; i < d_cur.size(); ++i) d_x[i] += d_cur.data[i];
    }
}

template <typename T>
TensorT<T> mean_max_pool(const TensorT<T>& hidden, std::span<const std::uint8_t> allowed, Pooling pooling,
                         PoolCtxT<T>* ctx) {
    const int n = hidden.rows();
    const int d = hidden.cols();
    if (static_cast<int>(allowed.size()) != n) {
        throw ShapeError("mean_max_pool: mask length " + std::to_string(allowed.size()) + " for " +
                         std::to_string(n) + " rows");
    }
    int counted = 0;
    for (auto a : allowed) counted += a ? 1 : 0;
    if (counted == 0) throw MaskError("mean_max_pool: every position masked");

    const bool want_max = pooling != Pooling::mean;
    const bool want_mean = pooling != Pooling::max;
    TensorT<T> out({want_max && want_mean ? 2 : 1, d});
    std::vector<int> argmax(want_max ? static_cast<std::size_t>(d) : 0, -1);

    if (want_max) {
        T* max_row = out.row(0);
        for (int j = 0; j < d; ++j) {
            T best = 0;
            int best_row = -1;
            for (int t = 0; t < n; ++t) {
                if (!allowed[static_cast<std::size_t>(t)]) continue;
                const T v = hidden.at(t, j);
                if (best_row < 0 || v > best) {
                    best = v;
                    best_row = t;
                }
            }
            max_row[j] = best;
            argmax[static_cast<std::size_t>(j)] = best_row;
        }
    }
    if (want_mean) {
        T* mean_row = out.row(want_max ? 1 : 0);
        for (int j = 0; j < d; ++j) {
            T sum = 0;
            for (int t = 0; t < n; ++t) {
                if (allowed[static_cast<std::size_t>(t)]) sum += hidden.at(t, j);
            }
            mean_row[j] = sum / static_cast<T>(counted);
        }
    }
    if (ctx != nullptr) {
        ctx->argmax = std::move(argmax);
        ctx->counted = counted;
    }
    return out;
}

template <typename T>
void mean_max_pool_backward(const PoolCtxT<T>& ctx, std::span<const std::uint8_t> allowed, Pooling pooling,
                            const TensorT<T>& d_pooled, T* d_hidden) {
    const int d = d_pooled.cols();
    const int n = static_cast<int>(allowed.size());
    const bool want_max = pooling != Pooling::mean;
    const bool want_mean = pooling != Pooling::max;
    if (want_max) {
        const T* dmax = d_pooled.row(0);
        for (int j = 0; j < d; ++j) {
            d_hidden[static_cast<std::size_t>(ctx.argmax[static_cast<std::size_t>(j)]) * d + j] += dmax[j];
        }
    }
    if (want_mean) {
        const T* dmean = d_pooled.row(want_max ? 1 : 0);
        const T inv = T(1) / static_cast<T>(ctx.counted);
        for (int t = 0; t < n; ++t) {
            if (!allowed[static_cast<std::size_t>(t)]) continue;
            T* row = d_hidden + static_cast<std::size_t>(t) * d;
            for (int j = 0; j < d; ++j) row[j] += dmean[j] * inv;
        }
    }
}

template <typename T>
TensorT<T> decoder_forward(const DecoderParamsT<T>& params, const TensorT<T>& y, const TensorT<T>& memory,
                           const AttnMask& self_mask, bool training, double dropout_rate, Rng* rng,
                           DecoderCtxT<T>& ctx) {
    ctx.input = y;
    ctx.self_out = multihead(y, y, y, params.self_attn, &self_mask, ctx.self_ctx);
    TensorT<T> self_dropped = drop_forward(ctx.self_out, dropout_rate, rng, training, ctx.self_drop);
    ctx.self_norm_out = ops::layer_norm(self_dropped, params.self_norm.gain, params.self_norm.bias,
                                        static_cast<T>(kLayerNormEps), &ctx.self_norm_cache);

    ctx.pool_out = multihead(ctx.self_norm_out, memory, memory, params.pool_attn, nullptr, ctx.pool_ctx);
    TensorT<T> pool_dropped = drop_forward(ctx.pool_out, dropout_rate, rng, training, ctx.pool_drop);
    TensorT<T> pool_sum = add(pool_dropped, ctx.self_norm_out);
    ctx.pool_norm_out = ops::layer_norm(pool_sum, params.pool_norm.gain, params.pool_norm.bias,
                                        static_cast<T>(kLayerNormEps), &ctx.pool_norm_cache);

    ctx.ffn_pre = linear(ctx.pool_norm_out, params.ffn.w_in, params.ffn.b_in);
    ctx.ffn_act = ops::relu(ctx.ffn_pre);
    ctx.ffn_out = linear(ctx.ffn_act, params.ffn.w_out, params.ffn.b_out);
    TensorT<T> ffn_dropped = drop_forward(ctx.ffn_out, dropout_rate, rng, training, ctx.ffn_drop);
    TensorT<T> out_sum = add(ffn_dropped, ctx.pool_norm_out);
    return ops::layer_norm(out_sum, params.out_norm.gain, params.out_norm.bias, static_cast<T>(kLayerNormEps),
                           &ctx.out_norm_cache);
}

template <typename T>
void decoder_backward(DecoderParamsT<T>& params, const TensorT<T>& memory, const DecoderCtxT<T>& ctx,
                      double dropout_rate, const TensorT<T>& d_hidden, T* d_y, T* d_memory) {
    params.self_norm.gain.ensure_grad();
    params.self_norm.bias.ensure_grad();
    params.pool_norm.gain.ensure_grad();
    params.pool_norm.bias.ensure_grad();
    params.out_norm.gain.ensure_grad();
    params.out_norm.bias.ensure_grad();

    // hidden = LN(ffn_dropped + pool_norm_out)
    TensorT<T> d_out_sum(d_hidden.shape);
    ops::layer_norm_backward(ctx.out_norm_cache, params.out_norm.gain, d_hidden, d_out_sum.data.data(),
                             params.out_norm.gain.grad.data(), params.out_norm.bias.grad.data());
    TensorT<T> d_ffn_out(ctx.ffn_out.shape);
    drop_backward(ctx.ffn_drop, dropout_rate, d_out_sum, d_ffn_out.data.data());
    TensorT<T> d_pool_norm = d_out_sum;  // residual branch

    TensorT<T> d_act(ctx.ffn_act.shape);
    linear_backward(ctx.ffn_act, params.ffn.w_out, params.ffn.b_out, d_ffn_out, d_act.data.data());
    TensorT<T> d_pre(ctx.ffn_pre.shape);
    ops::relu_backward(ctx.ffn_pre, d_act, d_pre.data.data());
    linear_backward(ctx.pool_norm_out, params.ffn.w_in, params.ffn.b_in, d_pre, d_pool_norm.data.data());

    // pool_norm_out = LN(pool_dropped + self_norm_out)
    TensorT<T> d_pool_sum(ctx.pool_out.shape);
    ops::layer_norm_backward(ctx.pool_norm_cache, params.pool_norm.gain, d_pool_norm, d_pool_sum.data.data(),
                             params.pool_norm.gain.grad.data(), params.pool_norm.bias.grad.data());
    TensorT<T> d_pool_out(ctx.pool_out.shape);
    drop_backward(ctx.pool_drop, dropout_rate, d_pool_sum, d_pool_out.data.data());
    TensorT<T> d_self_norm = d_pool_sum;  // residual branch

    multihead_backward(ctx.self_norm_out, memory, memory, params.pool_attn, ctx.pool_ctx, d_pool_out,
                       d_self_norm.data.data(), d_memory, d_memory);

    TensorT<T> d_self_dropped(ctx.self_out.shape);
    ops::layer_norm_backward(ctx.self_norm_cache, params.self_norm.gain, d_self_norm, d_self_dropped.data.data(),
                             params.self_norm.gain.grad.data(), params.self_norm.bias.grad.data());
    TensorT<T> d_self(ctx.self_out.shape);
    drop_backward(ctx.self_drop, dropout_rate, d_self_dropped, d_self.data.data());
    multihead_backward(ctx.input, ctx.input, ctx.input, params.self_attn, ctx.self_ctx, d_self, d_y, d_y, d_y);
}

template <typename T>
TensorT<T> output_logits(const TensorT<T>& hidden, const TensorT<T>& w, const TensorT<T>& b) {
    return linear(hidden, w, b);
}

template <typename T>
void output_logits_backward(const TensorT<T>& hidden, TensorT<T>& w, TensorT<T>& b, const TensorT<T>& d_logits,
                            T* d_hidden) {
    linear_backward(hidden, w, b, d_logits, d_hidden);
}

namespace {

// Everything one teacher-forced sentence needs for its backward pass.
template <typename T>
struct SentenceCtx {
    std::vector<int> dec_ids;
    std::vector<std::uint8_t> allowed;
    std::vector<std::uint8_t> enc_x_drop;
    std::vector<std::uint8_t> dec_y_drop;
    TensorT<T> enc_x;
    EncoderCtxT<T> enc_ctx;
    TensorT<T> enc_hidden;
    PoolCtxT<T> pool_ctx;
    TensorT<T> memory;
    TensorT<T> dec_y;
    AttnMask self_mask;
    DecoderCtxT<T> dec_ctx;
    TensorT<T> dec_hidden;
};

template <typename T>
TensorT<T> forward_sentence(const ModelConfig& cfg, const ModelParamsT<T>& params, std::span<const int> ids,
                            bool training, Rng* rng, SentenceCtx<T>& sc) {
    const int len = static_cast<int>(ids.size());
    if (len < 1) throw DataError("teacher forcing: empty sentence");
    if (len > cfg.t_max) {
        throw DataError("sentence of length " + std::to_string(len) + " exceeds t_max=" + std::to_string(cfg.t_max));
    }
    sc.allowed.assign(static_cast<std::size_t>(len), 1);

    TensorT<T> enc_raw = embed_sequence<T>(ids, params.embedding, params.positions);
    sc.enc_x = drop_forward(enc_raw, cfg.dropout, rng, training, sc.enc_x_drop);
    sc.enc_hidden = encoder_forward(params.encoder, sc.enc_x, sc.allowed, training, cfg.dropout, rng, sc.enc_ctx);
    sc.memory = mean_max_pool(sc.enc_hidden, sc.allowed, cfg.pooling, &sc.pool_ctx);

    sc.dec_ids.assign(static_cast<std::size_t>(len), Vocab::kGo);
    for (int t = 1; t < len; ++t) sc.dec_ids[static_cast<std::size_t>(t)] = ids[static_cast<std::size_t>(t - 1)];
    TensorT<T> dec_raw = embed_sequence<T>(sc.dec_ids, params.embedding, params.positions);
    sc.dec_y = drop_forward(dec_raw, cfg.dropout, rng, training, sc.dec_y_drop);
    sc.self_mask = causal_mask(len);
    sc.dec_hidden = decoder_forward(params.decoder, sc.dec_y, sc.memory, sc.self_mask, training, cfg.dropout, rng,
                                    sc.dec_ctx);
    return output_logits(sc.dec_hidden, params.vocab_w, params.vocab_b);
}

template <typename T>
void backward_sentence(const ModelConfig& cfg, ModelParamsT<T>& params, SentenceCtx<T>& sc,
                       const TensorT<T>& d_logits) {
    TensorT<T> d_dec_hidden(sc.dec_hidden.shape);
    output_logits_backward(sc.dec_hidden, params.vocab_w, params.vocab_b, d_logits, d_dec_hidden.data.data());

    TensorT<T> d_memory(sc.memory.shape);
    // Embeddings are frozen: gradients into the decoder inputs are dropped.
    decoder_backward(params.decoder, sc.memory, sc.dec_ctx, cfg.dropout, d_dec_hidden, static_cast<T*>(nullptr),
                     d_memory.data.data());

    TensorT<T> d_enc_hidden(sc.enc_hidden.shape);
    mean_max_pool_backward(sc.pool_ctx, sc.allowed, cfg.pooling, d_memory, d_enc_hidden.data.data());
    encoder_backward(params.encoder, sc.enc_ctx, cfg.dropout, d_enc_hidden, static_cast<T*>(nullptr));
}

}  // namespace

template <typename T>
TensorT<T> encode_ids(const ModelConfig& cfg, const ModelParamsT<T>& params, std::span<const int> ids) {
    if (static_cast<int>(ids.size()) > cfg.t_max) {
        throw DataError("encode: sentence of length " + std::to_string(ids.size()) +
                        " exceeds t_max=" + std::to_string(cfg.t_max));
    }
    if (ids.empty()) throw DataError("encode: empty id sequence");
    std::vector<std::uint8_t> allowed(ids.size(), 1);
    TensorT<T> x = embed_sequence<T>(ids, params.embedding, params.positions);
    EncoderCtxT<T> ctx;
    TensorT<T> hidden = encoder_forward(params.encoder, x, allowed, false, 0.0, nullptr, ctx);
    return mean_max_pool(hidden, allowed, cfg.pooling, static_cast<PoolCtxT<T>*>(nullptr));
}

template <typename T>
EvalStats reconstruct_teacher_forced(const ModelConfig& cfg, ModelParamsT<T>& params, const Batch& batch,
                                     bool training, Rng* rng, bool backward) {
    long long total = 0;
    for (int r = 0; r < batch.rows; ++r) {
        if (batch.lengths[static_cast<std::size_t>(r)] < 1) throw DataError("teacher forcing: empty batch row");
        total += batch.lengths[static_cast<std::size_t>(r)];
    }

    double nll_sum = 0;
    long long correct = 0;
    for (int r = 0; r < batch.rows; ++r) {
        const int len = batch.lengths[static_cast<std::size_t>(r)];
        std::span<const int> ids(batch.row(r), static_cast<std::size_t>(len));
        SentenceCtx<T> sc;
        TensorT<T> logits = forward_sentence(cfg, params, ids, training, rng, sc);
        std::vector<std::uint8_t> all(static_cast<std::size_t>(len), 1);
        auto ce = ops::cross_entropy_logits(logits, ids, all);
        nll_sum += ce.loss * len;
        correct += ce.correct;
        if (backward) {
            const T scale = static_cast<T>(static_cast<double>(len) / static_cast<double>(total));
            for (auto& g : ce.dlogits.data) g *= scale;
            backward_sentence(cfg, params, sc, ce.dlogits);
        }
    }
    EvalStats stats;
    stats.tokens = total;
    stats.loss = nll_sum / static_cast<double>(total);
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return stats;
}

std::vector<int> greedy_decode(const ModelConfig& cfg, const ModelParams& params, const Tensor& sentence_z,
                               int max_len) {
    if (sentence_z.rows() != cfg.memory_slots() || sentence_z.cols() != cfg.d_m) {
        throw ShapeError("greedy_decode: memory shape " + shape_str(sentence_z.shape) + " does not match config");
    }
    std::vector<int> prefix{Vocab::kGo};
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_len && static_cast<int>(prefix.size()) <= cfg.t_max) {
        Tensor y = embed_sequence<float>(prefix, params.embedding, params.positions);
        AttnMask mask = causal_mask(static_cast<int>(prefix.size()));
        DecoderCtxT<float> ctx;
        Tensor hidden = decoder_forward(params.decoder, y, sentence_z, mask, false, 0.0, nullptr, ctx);
        Tensor logits = output_logits(hidden, params.vocab_w, params.vocab_b);
        const float* row = logits.row(logits.rows() - 1);
        int best = 0;
        for (int j = 1; j < cfg.vocab; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out.push_back(best);
        if (best == Vocab::kEos) break;
        prefix.push_back(best);
    }
    return out;
}

TraceResult attention_trace(const ModelConfig& cfg, const ModelParams& params, std::span<const int> ids) {
    SentenceCtx<float> sc;
    ModelParamsT<float>& p = const_cast<ModelParamsT<float>&>(params);
    forward_sentence<float>(cfg, p, ids, false, nullptr, sc);
    TraceResult result;
    result.per_head = sc.dec_ctx.pool_ctx.trace();
    result.steps = result.per_head.n_q;
    result.slots = result.per_head.n_k;
    result.head_avg.assign(static_cast<std::size_t>(result.steps) * result.slots, 0.0f);
    for (int h = 0; h < result.per_head.heads; ++h) {
        for (int t = 0; t < result.steps; ++t) {
            for (int s = 0; s < result.slots; ++s) {
                result.head_avg[static_cast<std::size_t>(t) * result.slots + s] +=
                    result.per_head.at(h, t, s) / result.per_head.heads;
            }
        }
    }
    return result;
}

#define MMAE_INSTANTIATE_MODEL(T)                                                                                  \
    template struct ModelParamsT<T>;                                                                               \
    template TensorT<T> encoder_forward<T>(const std::vector<EncoderBlockParamsT<T>>&, const TensorT<T>&,          \
                                           std::span<const std::uint8_t>, bool, double, Rng*, EncoderCtxT<T>&);    \
    template void encoder_backward<T>(std::vector<EncoderBlockParamsT<T>>&, const EncoderCtxT<T>&, double,         \
                                      const TensorT<T>&, T*);                                                      \
    template TensorT<T> mean_max_pool<T>(const TensorT<T>&, std::span<const std::uint8_t>, Pooling, PoolCtxT<T>*); \
    template void mean_max_pool_backward<T>(const PoolCtxT<T>&, std::span<const std::uint8_t>, Pooling,            \
                                            const TensorT<T>&, T*);                                                \
    template TensorT<T> decoder_forward<T>(const DecoderParamsT<T>&, const TensorT<T>&, const TensorT<T>&,         \
                                           const AttnMask&, bool, double, Rng*, DecoderCtxT<T>&);                  \
    template void decoder_backward<T>(DecoderParamsT<T>&, const TensorT<T>&, const DecoderCtxT<T>&, double,        \
                                      const TensorT<T>&, T*, T*);                                                  \
    template TensorT<T> output_logits<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);                 \
    template void output_logits_backward<T>(const TensorT<T>&, TensorT<T>&, TensorT<T>&, const TensorT<T>&, T*);   \
    template TensorT<T> encode_ids<T>(const ModelConfig&, const ModelParamsT<T>&, std::span<const int>);           \
    template EvalStats reconstruct_teacher_forced<T>(const ModelConfig&, ModelParamsT<T>&, const Batch&, bool,     \
                                                     Rng*, bool);

MMAE_INSTANTIATE_MODEL(float)
MMAE_INSTANTIATE_MODEL(double)

#undef MMAE_INSTANTIATE_MODEL

template ModelParamsT<double> convert_params<double, float>(const ModelParamsT<float>&);
template ModelParamsT<float> convert_params<float, double>(const ModelParamsT<double>&);

}  // namespace mmae
