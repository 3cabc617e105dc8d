#include "mmae/attention.hpp"

#include <cmath>

#include "mmae/ops.hpp"

namespace mmae {

namespace {

constexpr double kMaskPenalty = -1e9;

void check_mask(const AttnMask& mask, int n_q, int n_k) {
    if (mask.n_q != n_q || mask.n_k != n_k) {
        throw ShapeError("attention mask is " + std::to_string(mask.n_q) + "x" + std::to_string(mask.n_k) +
                         " for a " + std::to_string(n_q) + "x" + std::to_string(n_k) + " score grid");
    }
    for (int i = 0; i < n_q; ++i) {
        bool any = false;
        for (int j = 0; j < n_k && !any; ++j) any = mask.at(i, j);
        if (!any) throw MaskError("attention: query row " + std::to_string(i) + " is fully masked");
    }
}

}  // namespace

AttnMask causal_mask(int n) {
    if (n < 1) throw ConfigError("causal_mask: length must be >= 1");
    AttnMask mask;
    mask.n_q = mask.n_k = n;
    mask.allowed.assign(static_cast<std::size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) mask.allowed[static_cast<std::size_t>(i) * n + j] = 1;
    }
    return mask;
}

AttnMask key_padding_mask(std::span<const std::uint8_t> key_allowed, int n_q) {
    AttnMask mask;
    mask.n_q = n_q;
    mask.n_k = static_cast<int>(key_allowed.size());
    mask.allowed.resize(static_cast<std::size_t>(n_q) * mask.n_k);
    for (int i = 0; i < n_q; ++i) {
        std::copy(key_allowed.begin(), key_allowed.end(), mask.row(i));
    }
    return mask;
}

AttnMask causal_with_padding(std::span<const std::uint8_t> key_allowed) {
    const int n = static_cast<int>(key_allowed.size());
    AttnMask mask = causal_mask(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            if (!key_allowed[static_cast<std::size_t>(j)]) mask.allowed[static_cast<std::size_t>(i) * n + j] = 0;
        }
    }
    return mask;
}

template <typename T>
AttentionTrace MultiHeadCtxT<T>::trace() const {
    AttentionTrace tr;
    tr.heads = static_cast<int>(attn.size());
    tr.n_q = attn.front().rows();
    tr.n_k = attn.front().cols();
    tr.weights.reserve(static_cast<std::size_t>(tr.heads) * tr.n_q * tr.n_k);
    for (const auto& a : attn) {
        for (T v : a.data) tr.weights.push_back(static_cast<float>(v));
    }
    return tr;
}

template <typename T>
TensorT<T> multihead(const TensorT<T>& query, const TensorT<T>& keys, const TensorT<T>& values,
                     const MultiHeadParamsT<T>& params, const AttnMask* mask, MultiHeadCtxT<T>& ctx) {
    const int n_q = query.rows();
    const int n_k = keys.rows();
    if (keys.rows() != values.rows()) {
        throw ShapeError("multihead: " + std::to_string(keys.rows()) + " keys vs " + std::to_string(values.rows()) +
                         " values");
    }
    if (mask != nullptr) check_mask(*mask, n_q, n_k);

    const int l = params.head_count();
    const int d_v = params.value_dim();
    TensorT<T> out({n_q, params.out_dim()});

    ctx.q_proj.clear();
    ctx.k_proj.clear();
    ctx.v_proj.clear();
    ctx.attn.clear();
    ctx.mask = mask != nullptr ? std::optional<AttnMask>(*mask) : std::nullopt;

    for (int h = 0; h < l; ++h) {
        const auto& head = params.heads[static_cast<std::size_t>(h)];
        TensorT<T> qb = ops::matmul(query, head.wq);
        TensorT<T> kb = ops::matmul(keys, head.wk);
        TensorT<T> vb = ops::matmul(values, head.wv);

        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head.wk.cols())));
        const int d_head = qb.cols();
        TensorT<T> scores({n_q, n_k});
        for (int i = 0; i < n_q; ++i) {
            const T* qrow = qb.row(i);
            T* srow = scores.row(i);
            for (int j = 0; j < n_k; ++j) {
                const T* krow = kb.row(j);
                T acc = 0;
                for (int c = 0; c < d_head; ++c) acc += qrow[c] * krow[c];
                srow[j] = acc * scale;
            }
        }
        if (mask != nullptr) {
            for (int i = 0; i < n_q; ++i) {
                T* row = scores.row(i);
                for (int j = 0; j < n_k; ++j) {
                    if (!mask->at(i, j)) row[j] += static_cast<T>(kMaskPenalty);
                }
            }
        }
        TensorT<T> attn = ops::softmax_rows(scores);

        // Weighted sum of values; masked columns are skipped, not multiplied.
        for (int i = 0; i < n_q; ++i) {
            const T* a = attn.row(i);
            T* dst = out.row(i) + h * d_v;
            std::fill(dst, dst + d_v, T(0));
            for (int j = 0; j < n_k; ++j) {
                if (mask != nullptr && !mask->at(i, j)) continue;
                const T w = a[j];
                const T* vrow = vb.row(j);
                for (int c = 0; c < d_v; ++c) dst[c] += w * vrow[c];
            }
        }

        ctx.q_proj.push_back(std::move(qb));
        ctx.k_proj.push_back(std::move(kb));
        ctx.v_proj.push_back(std::move(vb));
        ctx.attn.push_back(std::move(attn));
    }
    return out;
}

template <typename T>
void multihead_backward(const TensorT<T>& query, const TensorT<T>& keys, const TensorT<T>& values,
                        MultiHeadParamsT<T>& params, const MultiHeadCtxT<T>& ctx, const TensorT<T>& d_out,
                        T* d_query, T* d_keys, T* d_values) {
    const int n_q = query.rows();
    const int n_k = keys.rows();
    const int l = params.head_count();
    const int d_v = params.value_dim();
    const AttnMask* mask = ctx.mask.has_value() ? &*ctx.mask : nullptr;

    for (int h = 0; h < l; ++h) {
        auto& head = params.heads[static_cast<std::size_t>(h)];
        const auto& qb = ctx.q_proj[static_cast<std::size_t>(h)];
        const auto& kb = ctx.k_proj[static_cast<std::size_t>(h)];
        const auto& vb = ctx.v_proj[static_cast<std::size_t>(h)];
        const auto& attn = ctx.attn[static_cast<std::size_t>(h)];

        // Split d_out into this head's block.
        TensorT<T> d_head({n_q, d_v});
        for (int i = 0; i < n_q; ++i) {
            const T* src = d_out.row(i) + h * d_v;
            std::copy(src, src + d_v, d_head.row(i));
        }

        TensorT<T> d_attn({n_q, n_k});
        TensorT<T> d_vb({n_k, d_v});
        for (int i = 0; i < n_q; ++i) {
            const T* dh = d_head.row(i);
            const T* a = attn.row(i);
            T* da = d_attn.row(i);
            for (int j = 0; j < n_k; ++j) {
                if (mask != nullptr && !mask->at(i, j)) continue;
                const T* vrow = vb.row(j);
                T* dvrow = d_vb.row(j);
                T acc = 0;
                for (int c = 0; c < d_v; ++c) {
                    acc += dh[c] * vrow[c];
                    dvrow[c] += a[j] * dh[c];
                }
                da[j] = acc;
            }
        }

        TensorT<T> d_scores({n_q, n_k});
        ops::softmax_rows_backward(attn, d_attn, d_scores.data.data());
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head.wk.cols())));
        for (auto& v : d_scores.data) v *= scale;
        if (mask != nullptr) {
            for (int i = 0; i < n_q; ++i) {
                for (int j = 0; j < n_k; ++j) {
                    if (!mask->at(i, j)) d_scores.row(i)[j] = T(0);
                }
            }
        }

        const int key_dim = qb.cols();
        TensorT<T> d_qb({n_q, key_dim});
        TensorT<T> d_kb({n_k, key_dim});
        for (int i = 0; i < n_q; ++i) {
            const T* dsrow = d_scores.row(i);
            const T* qrow = qb.row(i);
            T* dqrow = d_qb.row(i);
            for (int j = 0; j < n_k; ++j) {
                const T ds = dsrow[j];
                if (ds == T(0)) continue;
                const T* krow = kb.row(j);
                T* dkrow = d_kb.row(j);
                for (int c = 0; c < key_dim; ++c) {
                    dqrow[c] += ds * krow[c];
                    dkrow[c] += ds * qrow[c];
                }
            }
        }

        head.wq.ensure_grad();
        head.wk.ensure_grad();
        head.wv.ensure_grad();
        ops::matmul_backward(query, head.wq, d_qb, d_query, head.wq.grad.data());
        ops::matmul_backward(keys, head.wk, d_kb, d_keys, head.wk.grad.data());
        ops::matmul_backward(values, head.wv, d_vb, d_values, head.wv.grad.data());
    }
}

template struct MultiHeadCtxT<float>;
template struct MultiHeadCtxT<double>;
template TensorT<float> multihead<float>(const TensorT<float>&, const TensorT<float>&, const TensorT<float>&,
                                         const MultiHeadParamsT<float>&, const AttnMask*, MultiHeadCtxT<float>&);
template TensorT<double> multihead<double>(const TensorT<double>&, const TensorT<double>&, const TensorT<double>&,
                                           const MultiHeadParamsT<double>&, const AttnMask*, MultiHeadCtxT<double>&);
template void multihead_backward<float>(const TensorT<float>&, const TensorT<float>&, const TensorT<float>&,
                                        MultiHeadParamsT<float>&, const MultiHeadCtxT<float>&, const TensorT<float>&,
                                        float*, float*, float*);
template void multihead_backward<double>(const TensorT<double>&, const TensorT<double>&, const TensorT<double>&,
                                         MultiHeadParamsT<double>&, const MultiHeadCtxT<double>&,
                                         const TensorT<double>&, double*, double*, double*);

}  // namespace mmae
