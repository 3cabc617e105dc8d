#include <Eigen/Dense>

#include <cmath>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>

#include "mmae/model.hpp"

// Batched inference path for the encoder: sentences are packed into row tiles
// that share one projection / feed-forward GEMM each (per-head weights fused
// column-wise), tiles reuse the same scratch, and chunks of the batch fan out
// over worker threads. No padding rows exist in the packed layout, so no key
// masking is needed.
namespace mmae {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using ConstMap = Eigen::Map<const RowMat>;

constexpr double kLayerNormEps = 1e-6;
constexpr int kTileRows = 96;

struct FusedBlock {
    RowMat wq, wk, wv;  // [d_in x d_m], heads side by side
};

FusedBlock fuse(const EncoderBlockParamsT<float>& block) {
    FusedBlock f;
    const int d_in = block.attn.heads.front().wq.rows();
    const int d_k = block.attn.key_dim();
    const int l = block.attn.head_count();
    f.wq.resize(d_in, l * d_k);
    f.wk.resize(d_in, l * d_k);
    f.wv.resize(d_in, l * d_k);
    for (int h = 0; h < l; ++h) {
        const auto& head = block.attn.heads[static_cast<std::size_t>(h)];
        f.wq.middleCols(h * d_k, d_k) = ConstMap(head.wq.data.data(), d_in, d_k);
        f.wk.middleCols(h * d_k, d_k) = ConstMap(head.wk.data.data(), d_in, d_k);
        f.wv.middleCols(h * d_k, d_k) = ConstMap(head.wv.data.data(), d_in, d_k);
    }
    return f;
}

void layer_norm_rows(RowMat& x, int rows, const Tensor& gain, const Tensor& bias) {
    const int d = static_cast<int>(x.cols());
    Eigen::Map<const Eigen::ArrayXf> g(gain.data.data(), d);
    Eigen::Map<const Eigen::ArrayXf> b(bias.data.data(), d);
    for (int r = 0; r < rows; ++r) {
        Eigen::Map<Eigen::ArrayXf> row(x.data() + static_cast<std::ptrdiff_t>(r) * d, d);
        const float mean = row.mean();
        const float var = (row - mean).square().sum() / static_cast<float>(d);
        const float inv_std = 1.0f / std::sqrt(var + static_cast<float>(kLayerNormEps));
        row = g * ((row - mean) * inv_std) + b;
    }
}

struct ChunkScratch {
    RowMat x, q, k, v, attn, hid, pre;
    std::vector<float> scores;

    ChunkScratch(const ModelConfig& cfg, int tile) {
        x.resize(tile, cfg.d_w);
        q.resize(tile, cfg.d_m);
        k.resize(tile, cfg.d_m);
        v.resize(tile, cfg.d_m);
        attn.resize(tile, cfg.d_m);
        hid.resize(tile, cfg.d_m);
        pre.resize(tile, cfg.d_f);
        scores.assign(static_cast<std::size_t>(cfg.t_max) * cfg.t_max, 0.0f);
    }
};

// One tile of whole sentences: embed, run the encoder stack, pool.
void run_tile(const ModelConfig& cfg, const ModelParams& params, const std::vector<FusedBlock>& fused,
              const std::vector<std::vector<int>>& ids, int first, int last, int rows, ChunkScratch& sc,
              std::vector<Tensor>& out) {
    {
        int r = 0;
        for (int s = first; s < last; ++s) {
            const auto& sentence = ids[static_cast<std::size_t>(s)];
            for (std::size_t t = 0; t < sentence.size(); ++t, ++r) {
                const float* word = params.embedding.row(sentence[t]);
                const float* pos = params.positions.row(static_cast<int>(t));
                for (int j = 0; j < cfg.d_w; ++j) sc.x(r, j) = word[j] + pos[j];
            }
        }
    }

    const int d_k = cfg.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_k));

    for (std::size_t b = 0; b < params.encoder.size(); ++b) {
        const auto& block = params.encoder[b];
        const int d_in = b == 0 ? cfg.d_w : cfg.d_m;
        const auto input = (b == 0 ? sc.x : sc.hid).topRows(rows).leftCols(d_in);
        sc.q.topRows(rows).noalias() = input * fused[b].wq;
        sc.k.topRows(rows).noalias() = input * fused[b].wk;
        sc.v.topRows(rows).noalias() = input * fused[b].wv;

        // Per-sentence, per-head scaled dot-product attention on strided views
        // of the packed projections.
        using Stride = Eigen::OuterStride<>;
        int r0 = 0;
        for (int s = first; s < last; ++s) {
            const int len = static_cast<int>(ids[static_cast<std::size_t>(s)].size());
            Map weights(sc.scores.data(), len, len);
            for (int h = 0; h < cfg.heads; ++h) {
                const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(h) * d_k;
                const std::ptrdiff_t at = static_cast<std::ptrdiff_t>(r0) * cfg.d_m + col;
                Eigen::Map<const RowMat, 0, Stride> qh(sc.q.data() + at, len, d_k, Stride(cfg.d_m));
                Eigen::Map<const RowMat, 0, Stride> kh(sc.k.data() + at, len, d_k, Stride(cfg.d_m));
                Eigen::Map<const RowMat, 0, Stride> vh(sc.v.data() + at, len, d_k, Stride(cfg.d_m));
                weights.noalias() = qh * kh.transpose() * scale;
                for (int i = 0; i < len; ++i) {
                    Eigen::Map<Eigen::ArrayXf> row(weights.data() + static_cast<std::ptrdiff_t>(i) * len, len);
                    row = (row - row.maxCoeff()).exp();
                    row /= row.sum();
                }
                Eigen::Map<RowMat, 0, Stride> ah(sc.attn.data() + at, len, d_k, Stride(cfg.d_m));
                ah.noalias() = weights * vh;
            }
            r0 += len;
        }

        layer_norm_rows(sc.attn, rows, block.attn_norm.gain, block.attn_norm.bias);
        sc.pre.topRows(rows).noalias() = sc.attn.topRows(rows) * ConstMap(block.ffn.w_in.data.data(), cfg.d_m, cfg.d_f);
        sc.pre.topRows(rows).rowwise() += Eigen::Map<const Eigen::RowVectorXf>(block.ffn.b_in.data.data(), cfg.d_f);
        sc.pre.topRows(rows) = sc.pre.topRows(rows).cwiseMax(0.0f);
        sc.hid.topRows(rows).noalias() =
            sc.pre.topRows(rows) * ConstMap(block.ffn.w_out.data.data(), cfg.d_f, cfg.d_m);
        sc.hid.topRows(rows).rowwise() += Eigen::Map<const Eigen::RowVectorXf>(block.ffn.b_out.data.data(), cfg.d_m);
        sc.hid.topRows(rows) += sc.attn.topRows(rows);
        layer_norm_rows(sc.hid, rows, block.out_norm.gain, block.out_norm.bias);
    }

    int r0 = 0;
    for (int s = first; s < last; ++s) {
        const int len = static_cast<int>(ids[static_cast<std::size_t>(s)].size());
        Tensor hidden({len, cfg.d_m});
        Map(hidden.data.data(), len, cfg.d_m) = sc.hid.block(r0, 0, len, cfg.d_m);
        std::vector<std::uint8_t> allowed(static_cast<std::size_t>(len), 1);
        out[static_cast<std::size_t>(s)] =
            mean_max_pool(hidden, allowed, cfg.pooling, static_cast<PoolCtxT<float>*>(nullptr));
        r0 += len;
    }
}

void run_chunk(const ModelConfig& cfg, const ModelParams& params, const std::vector<FusedBlock>& fused,
               const std::vector<std::vector<int>>& ids, int first, int last, std::vector<Tensor>& out) {
    const int tile = std::max(kTileRows, cfg.t_max);
    ChunkScratch sc(cfg, tile);
    int s = first;
    while (s < last) {
        int e = s;
        int rows = 0;
        while (e < last) {
            const int len = static_cast<int>(ids[static_cast<std::size_t>(e)].size());
            if (rows > 0 && rows + len > tile) break;
            rows += len;
            ++e;
        }
        run_tile(cfg, params, fused, ids, s, e, rows, sc, out);
        s = e;
    }
}

// Persistent workers so repeated batch calls pay no spawn cost and keep their
// allocator arenas warm. Callers serialize; the calling thread works too.
class WorkerPool {
  public:
    static WorkerPool& get() {
        static WorkerPool pool;
        return pool;
    }

    int max_parallelism() const { return static_cast<int>(workers_.size()) + 1; }

    void run(int tasks, const std::function<void(int)>& fn) {
        if (tasks <= 1) {
            if (tasks == 1) fn(0);
            return;
        }
        std::lock_guard<std::mutex> serial(caller_mutex_);
        {
            std::lock_guard<std::mutex> lock(m_);
            fn_ = &fn;
            total_ = tasks;
            next_ = 0;
            remaining_ = tasks;
        }
        cv_.notify_all();
        while (true) {
            int task = -1;
            {
                std::lock_guard<std::mutex> lock(m_);
                if (next_ >= total_) break;
                task = next_++;
            }
            fn(task);
            finish_one();
        }
        std::unique_lock<std::mutex> lock(m_);
        done_cv_.wait(lock, [&] { return remaining_ == 0; });
        fn_ = nullptr;
        total_ = 0;
    }

  private:
    WorkerPool() {
        const unsigned hw = std::max(1u, std::min(std::thread::hardware_concurrency(), 8u));
        for (unsigned i = 0; i + 1 < hw; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~WorkerPool() {
        {
            std::lock_guard<std::mutex> lock(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    void worker_loop() {
        while (true) {
            int task = -1;
            const std::function<void(int)>* fn = nullptr;
            {
                std::unique_lock<std::mutex> lock(m_);
                cv_.wait(lock, [&] { return stop_ || next_ < total_; });
                if (stop_) return;
                task = next_++;
                fn = fn_;
            }
            (*fn)(task);
            finish_one();
        }
    }

    void finish_one() {
        std::lock_guard<std::mutex> lock(m_);
        if (--remaining_ == 0) done_cv_.notify_all();
    }

    std::mutex caller_mutex_;
    std::mutex m_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int)>* fn_ = nullptr;
    int total_ = 0;
    int next_ = 0;
    int remaining_ = 0;
    bool stop_ = false;
    std::vector<std::thread> workers_;
};

}  // namespace

std::vector<Tensor> encode_batch(const ModelConfig& cfg, const ModelParams& params,
                                 const std::vector<std::vector<int>>& ids, int n_threads) {
    for (const auto& sentence : ids) {
        if (sentence.empty()) throw DataError("encode_batch: empty id sequence");
        if (static_cast<int>(sentence.size()) > cfg.t_max) {
            throw DataError("encode_batch: sentence of length " + std::to_string(sentence.size()) +
                            " exceeds t_max=" + std::to_string(cfg.t_max));
        }
    }
    std::vector<FusedBlock> fused;
    fused.reserve(params.encoder.size());
    for (const auto& block : params.encoder) fused.push_back(fuse(block));

    if (n_threads <= 0) n_threads = WorkerPool::get().max_parallelism();
    n_threads = std::min<int>(n_threads, static_cast<int>(ids.size()));

    std::vector<Tensor> out(ids.size());
    if (n_threads <= 1) {
        run_chunk(cfg, params, fused, ids, 0, static_cast<int>(ids.size()), out);
        return out;
    }

    // Contiguous chunks balanced on total token rows.
    long long total_rows = 0;
    for (const auto& sentence : ids) total_rows += static_cast<long long>(sentence.size());
    std::vector<int> bounds{0};
    long long acc = 0;
    for (std::size_t s = 0; s < ids.size() && static_cast<int>(bounds.size()) < n_threads; ++s) {
        acc += static_cast<long long>(ids[s].size());
        if (acc * n_threads >= total_rows * static_cast<long long>(bounds.size())) {
            bounds.push_back(static_cast<int>(s + 1));
        }
    }
    if (bounds.back() != static_cast<int>(ids.size())) bounds.push_back(static_cast<int>(ids.size()));

    std::vector<std::exception_ptr> errors(bounds.size() - 1);
    auto task = [&](int c) {
        try {
            run_chunk(cfg, params, fused, ids, bounds[static_cast<std::size_t>(c)],
                      bounds[static_cast<std::size_t>(c) + 1], out);
        } catch (...) {
            errors[static_cast<std::size_t>(c)] = std::current_exception();
        }
    };
    WorkerPool::get().run(static_cast<int>(bounds.size()) - 1, task);
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

}  // namespace mmae
