#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmae/tensor.hpp"

// Forward/backward primitives for the hand-wired model graph. Every backward
// function ACCUMULATES into its destination buffers; callers zero them first.
// Null destinations skip that branch (e.g. no gradient into frozen inputs).
namespace mmae::ops {

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
void matmul_backward(const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& dc, T* da, T* db);

template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x);

template <typename T>
void softmax_rows_backward(const TensorT<T>& y, const TensorT<T>& dy, T* dx);

template <typename T>
struct LayerNormCacheT {
    TensorT<T> normalized;   // (x - mean) / sqrt(var + eps), per row
    std::vector<T> inv_std;  // per row
};

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps,
                      LayerNormCacheT<T>* cache = nullptr);

template <typename T>
void layer_norm_backward(const LayerNormCacheT<T>& cache, const TensorT<T>& gain, const TensorT<T>& dy, T* dx,
                         T* dgain, T* dbias);

template <typename T>
TensorT<T> relu(const TensorT<T>& x);

template <typename T>
void relu_backward(const TensorT<T>& x, const TensorT<T>& dy, T* dx);

// Inverted dropout: survivors scaled by 1/(1-rate) so inference is identity.
// rate == 0 draws nothing from the rng.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Rng& rng, bool training,
                   std::vector<std::uint8_t>* mask_out = nullptr);

template <typename T>
void dropout_backward(const std::vector<std::uint8_t>& mask, double rate, const TensorT<T>& dy, T* dx);

template <typename T>
struct CrossEntropyResultT {
    double loss = 0;        // mean negative log likelihood over unmasked positions
    TensorT<T> dlogits;     // exact gradient of that mean
    int correct = 0;        // argmax matches among unmasked positions (lowest index wins ties)
    int counted = 0;        // unmasked positions
};

template <typename T>
CrossEntropyResultT<T> cross_entropy_logits(const TensorT<T>& logits, std::span<const int> targets,
                                            std::span<const std::uint8_t> mask);

// --- finite-difference gradient checker (wide precision) ---

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0;
    std::size_t elements_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0;
    double tol = 0;
    bool passed = false;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tol = 1e-4;
    // Tensors larger than this get a seeded element sample instead of a sweep.
    std::size_t max_elements_per_tensor = 4096;
    std::uint64_t sample_seed = 7;
};

// `loss` re-evaluates the scalar objective at the current parameter values and
// must be deterministic (checked by double evaluation); `compute_grads` fills
// every listed tensor's grad with the analytic gradient at the unperturbed
// point. Central differences: (f(t+h) - f(t-h)) / 2h per sampled element.
GradCheckReport grad_check(const std::function<double()>& loss, const std::function<void()>& compute_grads,
                           const std::vector<std::pair<std::string, TensorD*>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace mmae::ops
