#pragma once

// Test-only oracles: straight-line loop reimplementations of every stage of
// the architecture in double precision. Deliberately independent of the
// library's kernels (no Eigen, no shared helpers) so the two routes can be
// compared against each other.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0;
            for (int k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

inline void softmax_row_inplace(Mat& m, int row) {
    double mx = m.at(row, 0);
    for (int j = 1; j < m.cols; ++j) mx = std::max(mx, m.at(row, j));
    double sum = 0;
    for (int j = 0; j < m.cols; ++j) {
        m.at(row, j) = std::exp(m.at(row, j) - mx);
        sum += m.at(row, j);
    }
    for (int j = 0; j < m.cols; ++j) m.at(row, j) /= sum;
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& gain, const std::vector<double>& bias, double eps) {
    Mat y(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        double mean = 0;
        for (int j = 0; j < x.cols; ++j) mean += x.at(r, j);
        mean /= x.cols;
        double var = 0;
        for (int j = 0; j < x.cols; ++j) var += (x.at(r, j) - mean) * (x.at(r, j) - mean);
        var /= x.cols;
        const double denom = std::sqrt(var + eps);
        for (int j = 0; j < x.cols; ++j) {
            y.at(r, j) = gain[static_cast<std::size_t>(j)] * ((x.at(r, j) - mean) / denom) +
                         bias[static_cast<std::size_t>(j)];
        }
    }
    return y;
}

struct Head {
    Mat wq, wk, wv;
};

// Per-head scaled dot-product attention with optional allow-grid, heads
// concatenated. `trace` (optional) receives the post-softmax weights.
inline Mat multihead(const Mat& q, const Mat& keys, const Mat& values, const std::vector<Head>& heads,
                     const std::vector<std::uint8_t>* allow_grid, std::vector<Mat>* trace = nullptr) {
    const int n_q = q.rows;
    const int n_k = keys.rows;
    const int d_v = heads.front().wv.cols;
    Mat out(n_q, static_cast<int>(heads.size()) * d_v);
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const Mat qb = matmul(q, heads[h].wq);
        const Mat kb = matmul(keys, heads[h].wk);
        const Mat vb = matmul(values, heads[h].wv);
        const double scale = 1.0 / std::sqrt(static_cast<double>(heads[h].wk.cols));
        Mat scores(n_q, n_k);
        for (int i = 0; i < n_q; ++i) {
            for (int j = 0; j < n_k; ++j) {
                double acc = 0;
                for (int c = 0; c < qb.cols; ++c) acc += qb.at(i, c) * kb.at(j, c);
                acc *= scale;
                if (allow_grid != nullptr && !(*allow_grid)[static_cast<std::size_t>(i) * n_k + j]) acc += -1e9;
                scores.at(i, j) = acc;
            }
            softmax_row_inplace(scores, i);
        }
        for (int i = 0; i < n_q; ++i) {
            for (int c = 0; c < d_v; ++c) {
                double acc = 0;
                for (int j = 0; j < n_k; ++j) acc += scores.at(i, j) * vb.at(j, c);
                out.at(i, static_cast<int>(h) * d_v + c) = acc;
            }
        }
        if (trace != nullptr) trace->push_back(scores);
    }
    return out;
}

struct BlockWeights {
    std::vector<Head> heads;
    std::vector<double> attn_gain, attn_bias;
    Mat w_in;
    std::vector<double> b_in;
    Mat w_out;
    std::vector<double> b_out;
    std::vector<double> out_gain, out_bias;
};

inline Mat affine(const Mat& x, const Mat& w, const std::vector<double>& b) {
    Mat y = matmul(x, w);
    for (int r = 0; r < y.rows; ++r) {
        for (int j = 0; j < y.cols; ++j) y.at(r, j) += b[static_cast<std::size_t>(j)];
    }
    return y;
}

inline Mat encoder_block(const Mat& x, const BlockWeights& w, const std::vector<std::uint8_t>* allow_grid,
                         double eps) {
    const Mat attn = multihead(x, x, x, w.heads, allow_grid);
    const Mat attn_norm = layer_norm(attn, w.attn_gain, w.attn_bias, eps);
    Mat inner = affine(attn_norm, w.w_in, w.b_in);
    for (auto& v : inner.v) v = v > 0 ? v : 0;
    Mat ff = affine(inner, w.w_out, w.b_out);
    for (int r = 0; r < ff.rows; ++r) {
        for (int j = 0; j < ff.cols; ++j) ff.at(r, j) += attn_norm.at(r, j);
    }
    return layer_norm(ff, w.out_gain, w.out_bias, eps);
}

// Returns [max; mean] rows over all input rows (no masking in the oracle).
inline Mat mean_max_pool(const Mat& h) {
    Mat z(2, h.cols);
    for (int j = 0; j < h.cols; ++j) {
        double best = h.at(0, j);
        double sum = 0;
        for (int t = 0; t < h.rows; ++t) {
            best = std::max(best, h.at(t, j));
            sum += h.at(t, j);
        }
        z.at(0, j) = best;
        z.at(1, j) = sum / h.rows;
    }
    return z;
}

struct DecoderWeights {
    std::vector<Head> self_heads;
    std::vector<double> self_gain, self_bias;
    std::vector<Head> pool_heads;
    std::vector<double> pool_gain, pool_bias;
    Mat w_in;
    std::vector<double> b_in;
    Mat w_out;
    std::vector<double> b_out;
    std::vector<double> out_gain, out_bias;
};

inline Mat decoder_block(const Mat& y, const Mat& memory, const DecoderWeights& w, double eps) {
    const int t = y.rows;
    std::vector<std::uint8_t> causal(static_cast<std::size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j <= i; ++j) causal[static_cast<std::size_t>(i) * t + j] = 1;
    }
    const Mat self = multihead(y, y, y, w.self_heads, &causal);
    const Mat self_norm = layer_norm(self, w.self_gain, w.self_bias, eps);
    Mat pooled = multihead(self_norm, memory, memory, w.pool_heads, nullptr);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < pooled.cols; ++j) pooled.at(i, j) += self_norm.at(i, j);
    }
    const Mat pool_norm = layer_norm(pooled, w.pool_gain, w.pool_bias, eps);
    Mat inner = affine(pool_norm, w.w_in, w.b_in);
    for (auto& v : inner.v) v = v > 0 ? v : 0;
    Mat ff = affine(inner, w.w_out, w.b_out);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < ff.cols; ++j) ff.at(i, j) += pool_norm.at(i, j);
    }
    return layer_norm(ff, w.out_gain, w.out_bias, eps);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    long double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxy += static_cast<long double>(x[i]) * y[i];
        sxx += static_cast<long double>(x[i]) * x[i];
        syy += static_cast<long double>(y[i]) * y[i];
    }
    const long double num = n * sxy - sx * sy;
    const long double den = std::sqrt(n * sxx - sx * sx) * std::sqrt(n * syy - sy * sy);
    return static_cast<double>(num / den);
}

inline std::vector<double> ranks_with_ties(const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        int less = 0, equal = 0;
        for (std::size_t j = 0; j < x.size(); ++j) {
            if (x[j] < x[i]) ++less;
            if (x[j] == x[i]) ++equal;
        }
        r[i] = less + (equal + 1) / 2.0;  // average rank of the tie group
    }
    return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(ranks_with_ties(x), ranks_with_ties(y));
}

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
    long double dot = 0, uu = 0, vv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<long double>(u[i]) * v[i];
        uu += static_cast<long double>(u[i]) * u[i];
        vv += static_cast<long double>(v[i]) * v[i];
    }
    return static_cast<double>(dot / (std::sqrt(uu) * std::sqrt(vv)));
}

}  // namespace oracle
