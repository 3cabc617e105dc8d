#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmae {

// Error taxonomy, mapped to CLI exit codes: ConfigError -> 1, DataError -> 2,
// NumericError -> 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Shape/mask violations are malformed data from the caller's point of view.
struct ShapeError : DataError {
    using DataError::DataError;
};
struct MaskError : DataError {
    using DataError::DataError;
};

std::string shape_str(const std::vector<int>& shape);

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

// Dense row-major tensor with an optional gradient buffer of the same length.
// Rank is normally 1 or 2; the model wires all shapes statically.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until ensure_grad()

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        for (int d : shape) {
            if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
        }
        data.assign(shape_numel(shape), T(0));
    }
    TensorT(std::vector<int> s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }
    T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols(); }
    const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols(); }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// Seeded generator with hand-rolled value transforms so that identical seeds
// yield identical streams on every platform (mt19937_64 is fully specified by
// the standard; the stock <random> distributions are not).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Unbiased enough for shuffling at desk scale.
    std::uint64_t below(std::uint64_t n) {
        return n == 0 ? 0 : static_cast<std::uint64_t>(uniform01() * static_cast<double>(n)) % n;
    }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Derives a decorrelated stream id, used to give every consumer
    // (init, dropout per epoch, shuffle per epoch, ...) its own generator.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace mmae
