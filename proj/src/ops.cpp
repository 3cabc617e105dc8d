#include "mmae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mmae::ops {

namespace {

template <typename T>
void require_finite_rows(const TensorT<T>& x, const char* op) {
    for (T v : x.data) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<T> c({m, n});
    for (int i = 0; i < m; ++i) {
        const T* arow = a.row(i);
        T* crow = c.row(i);
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b.row(p);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

template <typename T>
void matmul_backward(const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& dc, T* da, T* db) {
    if (dc.rows() != a.rows() || dc.cols() != b.cols() || a.cols() != b.rows()) {
        throw ShapeError("matmul_backward: shape mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape) +
                         " -> " + shape_str(dc.shape));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (da != nullptr) {
        // da += dc . b^T, rows of dc against rows of b
        for (int i = 0; i < m; ++i) {
            const T* dcrow = dc.row(i);
            T* darow = da + static_cast<std::size_t>(i) * k;
            for (int q = 0; q < k; ++q) {
                const T* brow = b.row(q);
                T acc = 0;
                for (int p = 0; p < n; ++p) acc += dcrow[p] * brow[p];
                darow[q] += acc;
            }
        }
    }
    if (db != nullptr) {
        // db += a^T . dc
        for (int i = 0; i < m; ++i) {
            const T* arow = a.row(i);
            const T* dcrow = dc.row(i);
            for (int q = 0; q < k; ++q) {
                const T av = arow[q];
                T* dbrow = db + static_cast<std::size_t>(q) * n;
                for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
            }
        }
    }
}

template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    if (x.cols() < 1) throw ShapeError("softmax_rows: empty rows");
    require_finite_rows(x, "softmax_rows");
    TensorT<T> y(x.shape);
    const int n = x.cols();
    for (int r = 0; r < x.rows(); ++r) {
        const T* in = x.row(r);
        T* out = y.row(r);
        T m = in[0];
        for (int j = 1; j < n; ++j) m = std::max(m, in[j]);
        T sum = 0;
        for (int j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - m);
            sum += out[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < n; ++j) out[j] *= inv;
    }
    return y;
}

template <typename T>
void softmax_rows_backward(const TensorT<T>& y, const TensorT<T>& dy, T* dx) {
    const int n = y.cols();
    for (int r = 0; r < y.rows(); ++r) {
        const T* yr = y.row(r);
        const T* dyr = dy.row(r);
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += dyr[j] * yr[j];
        T* dst = dx + static_cast<std::size_t>(r) * n;
        for (int j = 0; j < n; ++j) dst[j] += yr[j] * (dyr[j] - dot);
    }
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps,
                      LayerNormCacheT<T>* cache) {
    const int d = x.cols();
    if (d < 2) throw ShapeError("layer_norm: feature dimension must be >= 2, got " + std::to_string(d));
    if (static_cast<int>(gain.size()) != d || static_cast<int>(bias.size()) != d) {
        throw ShapeError("layer_norm: gain/bias length mismatch for width " + std::to_string(d));
    }
    TensorT<T> y(x.shape);
    if (cache != nullptr) {
        cache->normalized = TensorT<T>(x.shape);
        cache->inv_std.assign(x.rows(), T(0));
    }
    for (int r = 0; r < x.rows(); ++r) {
        const T* in = x.row(r);
        T mean = 0;
        for (int j = 0; j < d; ++j) mean += in[j];
        mean /= d;
        T var = 0;
        for (int j = 0; j < d; ++j) {
            const T c = in[j] - mean;
            var += c * c;
        }
        var /= d;
        const T inv_std = T(1) / std::sqrt(var + eps);
        T* out = y.row(r);
        for (int j = 0; j < d; ++j) {
            const T norm = (in[j] - mean) * inv_std;
            out[j] = gain.data[j] * norm + bias.data[j];
            if (cache != nullptr) cache->normalized.row(r)[j] = norm;
        }
        if (cache != nullptr) cache->inv_std[r] = inv_std;
    }
    return y;
}

template <typename T>
void layer_norm_backward(const LayerNormCacheT<T>& cache, const TensorT<T>& gain, const TensorT<T>& dy, T* dx,
                         T* dgain, T* dbias) {
    const int d = cache.normalized.cols();
    for (int r = 0; r < cache.normalized.rows(); ++r) {
        const T* norm = cache.normalized.row(r);
        const T* dyr = dy.row(r);
        T sum_dn = 0;
        T sum_dn_norm = 0;
        for (int j = 0; j < d; ++j) {
            const T dn = dyr[j] * gain.data[j];
            sum_dn += dn;
            sum_dn_norm += dn * norm[j];
            if (dgain != nullptr) dgain[j] += dyr[j] * norm[j];
            if (dbias != nullptr) dbias[j] += dyr[j];
        }
        if (dx == nullptr) continue;
        const T inv_std = cache.inv_std[r];
        T* dst = dx + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) {
            const T dn = dyr[j] * gain.data[j];
            dst[j] += inv_std * (dn - sum_dn / d - norm[j] * sum_dn_norm / d);
        }
    }
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

template <typename T>
void relu_backward(const TensorT<T>& x, const TensorT<T>& dy, T* dx) {
    // Subgradient at exactly 0 is 0.
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.data[i] > T(0)) dx[i] += dy.data[i];
    }
}

template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Rng& rng, bool training, std::vector<std::uint8_t>* mask_out) {
    if (rate >= 1.0 || rate < 0.0) {
        throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) {
        if (mask_out != nullptr) mask_out->assign(x.size(), 1);
        return x;
    }
    TensorT<T> y(x.shape);
    if (mask_out != nullptr) mask_out->assign(x.size(), 0);
    const T scale = T(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (rng.uniform01() >= rate) {
            y.data[i] = x.data[i] * scale;
            if (mask_out != nullptr) (*mask_out)[i] = 1;
        }
    }
    return y;
}

template <typename T>
void dropout_backward(const std::vector<std::uint8_t>& mask, double rate, const TensorT<T>& dy, T* dx) {
    const T scale = T(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < dy.size(); ++i) {
        if (mask[i]) dx[i] += dy.data[i] * scale;
    }
}

template <typename T>
CrossEntropyResultT<T> cross_entropy_logits(const TensorT<T>& logits, std::span<const int> targets,
                                            std::span<const std::uint8_t> mask) {
    const int steps = logits.rows();
    const int vocab = logits.cols();
    if (static_cast<int>(targets.size()) != steps || static_cast<int>(mask.size()) != steps) {
        throw ShapeError("cross_entropy_logits: " + std::to_string(steps) + " rows vs " +
                         std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) + " mask");
    }
    int counted = 0;
    for (int t = 0; t < steps; ++t) {
        if (!mask[t]) continue;
        ++counted;
        if (targets[t] < 0 || targets[t] >= vocab) {
            throw DataError("cross_entropy_logits: target id " + std::to_string(targets[t]) +
                            " out of vocabulary of size " + std::to_string(vocab));
        }
    }
    if (counted == 0) throw MaskError("cross_entropy_logits: every position masked");

    CrossEntropyResultT<T> res;
    res.dlogits = TensorT<T>(logits.shape);
    res.counted = counted;
    const double inv = 1.0 / counted;
    double loss = 0;
    for (int t = 0; t < steps; ++t) {
        if (!mask[t]) continue;
        const T* in = logits.row(t);
        T m = in[0];
        int argmax = 0;
        for (int j = 1; j < vocab; ++j) {
            if (in[j] > m) {
                m = in[j];
                argmax = j;
            }
        }
        double sum = 0;
        for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(in[j] - m));
        const double log_sum = std::log(sum);
        loss += inv * (log_sum - static_cast<double>(in[targets[t]] - m));
        if (argmax == targets[t]) ++res.correct;
        T* grad = res.dlogits.row(t);
        for (int j = 0; j < vocab; ++j) {
            grad[j] = static_cast<T>(inv * (std::exp(static_cast<double>(in[j] - m)) / sum));
        }
        grad[targets[t]] -= static_cast<T>(inv);
    }
    if (!std::isfinite(loss)) throw NumericError("cross_entropy_logits: non-finite loss");
    res.loss = loss;
    return res;
}

GradCheckReport grad_check(const std::function<double()>& loss, const std::function<void()>& compute_grads,
                           const std::vector<std::pair<std::string, TensorD*>>& params,
                           const GradCheckOptions& opts) {
    GradCheckReport report;
    report.tol = opts.tol;

    const double base = loss();
    if (loss() != base) throw NumericError("grad_check: objective is not deterministic");

    compute_grads();

    for (const auto& [name, tensor] : params) {
        if (!tensor->has_grad()) throw ShapeError("grad_check: no analytic gradient for " + name);
        GradCheckEntry entry;
        entry.name = name;

        std::vector<std::size_t> indices;
        const std::size_t n = tensor->size();
        if (n <= opts.max_elements_per_tensor) {
            indices.resize(n);
            for (std::size_t i = 0; i < n; ++i) indices[i] = i;
        } else {
            Rng rng(Rng::mix(opts.sample_seed, std::hash<std::string>{}(name)));
            indices.resize(opts.max_elements_per_tensor);
            for (auto& idx : indices) idx = rng.below(n);
        }

        for (std::size_t idx : indices) {
            const double saved = tensor->data[idx];
            tensor->data[idx] = saved + opts.step;
            const double up = loss();
            tensor->data[idx] = saved - opts.step;
            const double down = loss();
            tensor->data[idx] = saved;

            const double numeric = (up - down) / (2.0 * opts.step);
            const double analytic = tensor->grad[idx];
            const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.elements_checked = indices.size();
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.passed = report.max_rel_err <= opts.tol;
    return report;
}

#define MMAE_INSTANTIATE_OPS(T)                                                                                \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                                       \
    template void matmul_backward<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T*, T*);         \
    template TensorT<T> softmax_rows<T>(const TensorT<T>&);                                                    \
    template void softmax_rows_backward<T>(const TensorT<T>&, const TensorT<T>&, T*);                          \
    template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T,              \
                                      LayerNormCacheT<T>*);                                                    \
    template void layer_norm_backward<T>(const LayerNormCacheT<T>&, const TensorT<T>&, const TensorT<T>&, T*,  \
                                         T*, T*);                                                              \
    template TensorT<T> relu<T>(const TensorT<T>&);                                                            \
    template void relu_backward<T>(const TensorT<T>&, const TensorT<T>&, T*);                                  \
    template TensorT<T> dropout<T>(const TensorT<T>&, double, Rng&, bool, std::vector<std::uint8_t>*);         \
    template void dropout_backward<T>(const std::vector<std::uint8_t>&, double, const TensorT<T>&, T*);        \
    template CrossEntropyResultT<T> cross_entropy_logits<T>(const TensorT<T>&, std::span<const int>,           \
                                                            std::span<const std::uint8_t>);

MMAE_INSTANTIATE_OPS(float)
MMAE_INSTANTIATE_OPS(double)

#undef MMAE_INSTANTIATE_OPS

}  // namespace mmae::ops
