#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmae/ops.hpp"

using namespace mmae;

namespace {

// Central differences over a flat buffer for a scalar objective.
template <typename F>
std::vector<double> fd_grad(F&& f, std::vector<double>& x, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f();
        x[i] = saved - h;
        const double down = f();
        x[i] = saved;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("matmul identity and small product") {
    TensorD eye({2, 2}, {1, 0, 0, 1});
    TensorD b({2, 3}, {1, 2, 3, 4, 5, 6});
    auto c = ops::matmul(eye, b);
    CHECK(c.data == b.data);

    TensorD a({2, 2}, {1, 2, 3, 4});
    TensorD ones({2, 1}, {1, 1});
    auto p = ops::matmul(a, ones);
    CHECK(p.data == std::vector<double>{3, 7});
}

TEST_CASE("matmul shape mismatch names both shapes") {
    TensorD a({2, 3});
    TensorD b({2, 3});
    CHECK_THROWS_WITH_AS(ops::matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
}

TEST_CASE("matmul backward matches finite differences") {
    Rng rng(11);
    TensorD a({3, 4});
    TensorD b({4, 2});
    for (auto& v : a.data) v = rng.uniform(-1, 1);
    for (auto& v : b.data) v = rng.uniform(-1, 1);
    TensorD up({3, 2});
    for (auto& v : up.data) v = rng.uniform(-1, 1);

    // objective: sum(upstream * (a @ b))
    auto loss = [&] {
        auto c = ops::matmul(a, b);
        double acc = 0;
        for (std::size_t i = 0; i < c.size(); ++i) acc += up.data[i] * c.data[i];
        return acc;
    };
    TensorD da(a.shape), db(b.shape);
    ops::matmul_backward(a, b, up, da.data.data(), db.data.data());

    auto fa = fd_grad(loss, a.data);
    auto fb = fd_grad(loss, b.data);
    for (std::size_t i = 0; i < fa.size(); ++i) CHECK(rel_err(fa[i], da.data[i]) < 1e-5);
    for (std::size_t i = 0; i < fb.size(); ++i) CHECK(rel_err(fb[i], db.data[i]) < 1e-5);
}

TEST_CASE("softmax_rows values") {
    TensorD sym({1, 2}, {0, 0});
    auto y = ops::softmax_rows(sym);
    CHECK(y.data[0] == doctest::Approx(0.5));
    CHECK(y.data[1] == doctest::Approx(0.5));

    TensorD single({1, 1}, {3.7});
    CHECK(ops::softmax_rows(single).data[0] == doctest::Approx(1.0));

    TensorD row({1, 3}, {1, 2, 3});
    auto s = ops::softmax_rows(row);
    CHECK(s.data[0] == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(s.data[1] == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(s.data[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax_rows rows sum to 1 even at extreme magnitudes") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        TensorD x({4, 6});
        for (auto& v : x.data) v = rng.uniform(-1e4, 1e4);
        auto y = ops::softmax_rows(x);
        for (int r = 0; r < 4; ++r) {
            double sum = 0;
            for (int j = 0; j < 6; ++j) sum += y.at(r, j);
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
    TensorD bad({1, 2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(ops::softmax_rows(bad), NumericError);
}

TEST_CASE("softmax_rows backward matches finite differences") {
    Rng rng(17);
    TensorD x({2, 5});
    TensorD up({2, 5});
    for (auto& v : x.data) v = rng.uniform(-2, 2);
    for (auto& v : up.data) v = rng.uniform(-1, 1);
    auto loss = [&] {
        auto y = ops::softmax_rows(x);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += up.data[i] * y.data[i];
        return acc;
    };
    auto y = ops::softmax_rows(x);
    TensorD dx(x.shape);
    ops::softmax_rows_backward(y, up, dx.data.data());
    auto fd = fd_grad(loss, x.data);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(rel_err(fd[i], dx.data[i]) < 1e-5);
}

TEST_CASE("layer_norm hand-checked rows") {
    TensorD gain({2}, {1, 1});
    TensorD bias({2}, {0, 0});

    TensorD already({1, 2}, {-1, 1});
    auto y = ops::layer_norm(already, gain, bias, 0.0);
    CHECK(y.data[0] == doctest::Approx(-1));
    CHECK(y.data[1] == doctest::Approx(1));

    TensorD constant({1, 2}, {5, 5});
    auto c = ops::layer_norm(constant, gain, bias, 1e-6);
    CHECK(c.data[0] == doctest::Approx(0));
    CHECK(c.data[1] == doctest::Approx(0));

    TensorD pair({1, 2}, {1, 3});
    auto p = ops::layer_norm(pair, gain, bias, 0.0);
    CHECK(p.data[0] == doctest::Approx(-1));
    CHECK(p.data[1] == doctest::Approx(1));

    TensorD narrow({1, 1}, {1});
    TensorD g1({1}, {1}), b1({1}, {0});
    CHECK_THROWS_AS(ops::layer_norm(narrow, g1, b1, 1e-6), ShapeError);
}

TEST_CASE("layer_norm standardizes non-constant rows") {
    Rng rng(3);
    TensorD x({8, 16});
    for (auto& v : x.data) v = rng.uniform(-4, 4);
    TensorD gain({16});
    gain.fill(1.0);
    TensorD bias({16});
    auto y = ops::layer_norm(x, gain, bias, 1e-6);
    for (int r = 0; r < 8; ++r) {
        double mean = 0, var = 0;
        for (int j = 0; j < 16; ++j) mean += y.at(r, j);
        mean /= 16;
        for (int j = 0; j < 16; ++j) var += (y.at(r, j) - mean) * (y.at(r, j) - mean);
        var /= 16;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("layer_norm backward matches finite differences through all inputs") {
    Rng rng(23);
    TensorD x({3, 6});
    TensorD gain({6});
    TensorD bias({6});
    TensorD up({3, 6});
    for (auto& v : x.data) v = rng.uniform(-2, 2);
    for (auto& v : gain.data) v = rng.uniform(0.5, 1.5);
    for (auto& v : bias.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : up.data) v = rng.uniform(-1, 1);

    auto loss = [&] {
        auto y = ops::layer_norm(x, gain, bias, 1e-6);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += up.data[i] * y.data[i];
        return acc;
    };
    ops::LayerNormCacheT<double> cache;
    ops::layer_norm(x, gain, bias, 1e-6, &cache);
    TensorD dx(x.shape), dgain(gain.shape), dbias(bias.shape);
    ops::layer_norm_backward(cache, gain, up, dx.data.data(), dgain.data.data(), dbias.data.data());

    auto fx = fd_grad(loss, x.data);
    auto fg = fd_grad(loss, gain.data);
    auto fb = fd_grad(loss, bias.data);
    for (std::size_t i = 0; i < fx.size(); ++i) CHECK(rel_err(fx[i], dx.data[i]) < 1e-4);
    for (std::size_t i = 0; i < fg.size(); ++i) CHECK(rel_err(fg[i], dgain.data[i]) < 1e-4);
    for (std::size_t i = 0; i < fb.size(); ++i) CHECK(rel_err(fb[i], dbias.data[i]) < 1e-4);
}

TEST_CASE("relu forward and subgradient at zero") {
    TensorD x({1, 3}, {-1, 0, 2});
    auto y = ops::relu(x);
    CHECK(y.data == std::vector<double>{0, 0, 2});

    TensorD neg({1, 3}, {-5, -0.1, -100});
    auto z = ops::relu(neg);
    CHECK(z.data == std::vector<double>{0, 0, 0});

    TensorD at0({1, 2}, {-1, 2});
    TensorD up({1, 2}, {1, 1});
    TensorD dx({1, 2});
    ops::relu_backward(at0, up, dx.data.data());
    CHECK(dx.data == std::vector<double>{0, 1});

    TensorD exactly0({1, 1}, {0.0});
    TensorD up1({1, 1}, {7.0});
    TensorD d0({1, 1});
    ops::relu_backward(exactly0, up1, d0.data.data());
    CHECK(d0.data[0] == 0.0);
}

TEST_CASE("dropout identities and statistics") {
    Rng rng(99);
    TensorD x({4, 4});
    for (auto& v : x.data) v = rng.uniform(-1, 1);

    auto same = ops::dropout(x, 0.0, rng, true);
    CHECK(same.data == x.data);
    auto infer = ops::dropout(x, 0.7, rng, false);
    CHECK(infer.data == x.data);
    CHECK_THROWS_AS(ops::dropout(x, 1.0, rng, true), ConfigError);

    TensorD ones({100000});
    ones.fill(1.0);
    Rng seeded(1234);
    std::vector<std::uint8_t> mask;
    auto dropped = ops::dropout(ones, 0.5, seeded, true, &mask);
    double sum = 0;
    long long zeros = 0;
    for (double v : dropped.data) {
        sum += v;
        if (v == 0.0) ++zeros;
    }
    const double mean = sum / static_cast<double>(ones.size());
    const double zero_frac = static_cast<double>(zeros) / static_cast<double>(ones.size());
    CHECK(std::abs(mean - 1.0) < 0.01);
    CHECK(std::abs(zero_frac - 0.5) < 0.005);

    // same seed, same stream
    Rng again(1234);
    auto dropped2 = ops::dropout(ones, 0.5, again, true);
    CHECK(dropped2.data == dropped.data);
}

TEST_CASE("cross entropy on uniform and saturated logits") {
    TensorD logits({1, 4});
    std::vector<int> targets{2};
    std::vector<std::uint8_t> mask{1};
    auto res = ops::cross_entropy_logits(logits, targets, mask);
    CHECK(res.loss == doctest::Approx(std::log(4.0)).epsilon(1e-9));

    TensorD hot({1, 4});
    hot.data[2] = 1e6;
    auto sat = ops::cross_entropy_logits(hot, targets, mask);
    CHECK(sat.loss == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(sat.correct == 1);

    std::vector<int> oov{7};
    CHECK_THROWS_AS(ops::cross_entropy_logits(logits, oov, mask), DataError);
    std::vector<std::uint8_t> none{0};
    CHECK_THROWS_AS(ops::cross_entropy_logits(logits, targets, none), MaskError);
}

TEST_CASE("cross entropy masked positions contribute nothing") {
    Rng rng(7);
    TensorD logits({3, 5});
    for (auto& v : logits.data) v = rng.uniform(-2, 2);
    std::vector<int> targets{1, 4, 2};
    std::vector<std::uint8_t> mask{1, 0, 1};
    auto res = ops::cross_entropy_logits(logits, targets, mask);
    for (int j = 0; j < 5; ++j) CHECK(res.dlogits.at(1, j) == 0.0);

    // altering the masked row's logits changes nothing
    TensorD other = logits;
    other.at(1, 0) += 100;
    auto res2 = ops::cross_entropy_logits(other, targets, mask);
    CHECK(res2.loss == res.loss);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(31);
    TensorD logits({3, 5});
    for (auto& v : logits.data) v = rng.uniform(-2, 2);
    std::vector<int> targets{1, 4, 0};
    std::vector<std::uint8_t> mask{1, 1, 1};
    auto loss = [&] { return ops::cross_entropy_logits(logits, targets, mask).loss; };
    auto res = ops::cross_entropy_logits(logits, targets, mask);
    auto fd = fd_grad(loss, logits.data);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(rel_err(fd[i], res.dlogits.data[i]) < 1e-5);
}

TEST_CASE("grad_check on a quadratic and a constant") {
    TensorD theta({2}, {1, 2});
    theta.ensure_grad();
    auto loss = [&] {
        double acc = 0;
        for (double v : theta.data) acc += v * v;
        return acc;
    };
    auto grads = [&] {
        theta.zero_grad();
        for (std::size_t i = 0; i < theta.size(); ++i) theta.grad[i] = 2 * theta.data[i];
    };
    ops::GradCheckOptions opts;
    opts.tol = 1e-8;
    auto report = ops::grad_check(loss, grads, {{"theta", &theta}}, opts);
    CHECK(report.passed);
    CHECK(report.max_rel_err < 1e-8);
    CHECK(report.entries.size() == 1);
    CHECK(report.entries[0].elements_checked == 2);

    auto const_loss = [] { return 42.0; };
    auto zero_grads = [&] { theta.zero_grad(); };
    auto report2 = ops::grad_check(const_loss, zero_grads, {{"theta", &theta}});
    CHECK(report2.passed);
}

TEST_CASE("grad_check rejects a non-deterministic objective") {
    TensorD theta({1}, {1});
    theta.ensure_grad();
    int calls = 0;
    auto loss = [&] { return static_cast<double>(++calls); };
    auto grads = [&] { theta.zero_grad(); };
    CHECK_THROWS_AS(ops::grad_check(loss, grads, {{"theta", &theta}}), NumericError);
}

TEST_CASE("grad_check samples large tensors") {
    TensorD big({100});
    for (std::size_t i = 0; i < big.size(); ++i) big.data[i] = 0.01 * static_cast<double>(i);
    big.ensure_grad();
    auto loss = [&] {
        double acc = 0;
        for (double v : big.data) acc += std::sin(v);
        return acc;
    };
    auto grads = [&] {
        big.zero_grad();
        for (std::size_t i = 0; i < big.size(); ++i) big.grad[i] = std::cos(big.data[i]);
    };
    ops::GradCheckOptions opts;
    opts.max_elements_per_tensor = 10;
    auto report = ops::grad_check(loss, grads, {{"big", &big}}, opts);
    CHECK(report.passed);
    CHECK(report.entries[0].elements_checked == 10);
}
