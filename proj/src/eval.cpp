#include "mmae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mmae/tensor.hpp"

namespace mmae {

template <typename T>
double cosine(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine: lengths " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    }
    double dot = 0, uu = 0, vv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        uu += static_cast<double>(u[i]) * u[i];
        vv += static_cast<double>(v[i]) * v[i];
    }
    if (uu == 0 || vv == 0) throw DataError("cosine: zero-norm vector");
    return dot / (std::sqrt(uu) * std::sqrt(vv));
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("pearson: length mismatch");
    const std::size_t n = x.size();
    if (n < 2) throw DataError("pearson: need at least 2 points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double cov = 0, vx = 0, vy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = x[i] - mx;
        const double b = y[i] - my;
        cov += a * b;
        vx += a * a;
        vy += b * b;
    }
    if (vx == 0 || vy == 0) throw DataError("pearson: correlation undefined for a constant sequence");
    return cov / std::sqrt(vx * vy);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry);
}

SimilarityResult similarity_eval(const std::vector<SimilarityPair>& pairs, const SentenceEncoder& encoder) {
    if (pairs.size() < 2) throw DataError("similarity_eval: need at least 2 pairs");
    std::vector<double> predicted, gold;
    predicted.reserve(pairs.size());
    gold.reserve(pairs.size());
    for (const auto& pair : pairs) {
        const auto za = encoder(pair.a);
        const auto zb = encoder(pair.b);
        predicted.push_back(cosine<float>(za, zb));
        gold.push_back(pair.gold);
    }
    SimilarityResult result;
    result.pairs = static_cast<int>(pairs.size());
    result.pearson = pearson(predicted, gold);
    result.spearman = spearman(predicted, gold);
    return result;
}

double probe_eval_features(const std::vector<std::vector<float>>& train_x, const std::vector<int>& train_y,
                           const std::vector<std::vector<float>>& test_x, const std::vector<int>& test_y,
                           const ProbeOptions& opts) {
    if (train_x.empty() || train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
        throw DataError("probe: empty or mismatched datasets");
    }
    const int dim = static_cast<int>(train_x.front().size());
    int n_classes = 0;
    for (int label : train_y) n_classes = std::max(n_classes, label + 1);
    for (int label : test_y) n_classes = std::max(n_classes, label + 1);
    if (n_classes < 2) throw DataError("probe: need at least 2 classes");
    std::vector<long long> seen(static_cast<std::size_t>(n_classes), 0);
    for (int label : train_y) {
        if (label < 0) throw DataError("probe: negative label");
        ++seen[static_cast<std::size_t>(label)];
    }
    for (long long c : seen) {
        if (c == 0) throw DataError("probe: a class has no training example");
    }

    const std::size_t n = train_x.size();
    // Stable full-batch GD step size from the softmax-loss smoothness bound.
    double mean_sq = 0;
    for (const auto& row : train_x) {
        double sq = 0;
        for (float v : row) sq += static_cast<double>(v) * v;
        mean_sq += sq;
    }
    mean_sq /= static_cast<double>(n);
    const double lr = 1.0 / (mean_sq + opts.l2 + 1e-12);

    std::vector<double> w(static_cast<std::size_t>(dim) * n_classes, 0.0);
    std::vector<double> bias(static_cast<std::size_t>(n_classes), 0.0);
    std::vector<double> logits(static_cast<std::size_t>(n_classes));
    std::vector<double> gw(w.size());
    std::vector<double> gb(bias.size());

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& x = train_x[i];
            for (int c = 0; c < n_classes; ++c) {
                double acc = bias[static_cast<std::size_t>(c)];
                for (int j = 0; j < dim; ++j) acc += w[static_cast<std::size_t>(j) * n_classes + c] * x[static_cast<std::size_t>(j)];
                logits[static_cast<std::size_t>(c)] = acc;
            }
            const double m = *std::max_element(logits.begin(), logits.end());
            double sum = 0;
            for (double& v : logits) {
                v = std::exp(v - m);
                sum += v;
            }
            for (int c = 0; c < n_classes; ++c) {
                const double p = logits[static_cast<std::size_t>(c)] / sum;
                const double delta = (p - (c == train_y[i] ? 1.0 : 0.0)) / static_cast<double>(n);
                gb[static_cast<std::size_t>(c)] += delta;
                for (int j = 0; j < dim; ++j) {
                    gw[static_cast<std::size_t>(j) * n_classes + c] += delta * x[static_cast<std::size_t>(j)];
                }
            }
        }
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * (gw[k] + opts.l2 * w[k]);
        for (std::size_t c = 0; c < bias.size(); ++c) bias[c] -= lr * gb[c];
    }

    long long correct = 0;
    for (std::size_t i = 0; i < test_x.size(); ++i) {
        const auto& x = test_x[i];
        int best = 0;
        double best_score = -1e300;
        for (int c = 0; c < n_classes; ++c) {
            double acc = bias[static_cast<std::size_t>(c)];
            for (int j = 0; j < dim; ++j) acc += w[static_cast<std::size_t>(j) * n_classes + c] * x[static_cast<std::size_t>(j)];
            if (acc > best_score) {
                best_score = acc;
                best = c;
            }
        }
        if (best == test_y[i]) ++correct;
    }
    return test_x.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_x.size());
}

double probe_eval(const std::vector<ProbeExample>& train, const std::vector<ProbeExample>& test,
                  const SentenceEncoder& encoder, const ProbeOptions& opts) {
    std::vector<std::vector<float>> train_x, test_x;
    std::vector<int> train_y, test_y;
    for (const auto& ex : train) {
        train_x.push_back(encoder(ex.text));
        train_y.push_back(ex.label);
    }
    for (const auto& ex : test) {
        test_x.push_back(encoder(ex.text));
        test_y.push_back(ex.label);
    }
    return probe_eval_features(train_x, train_y, test_x, test_y, opts);
}

std::vector<std::pair<int, double>> nearest_neighbors(std::span<const float> query,
                                                      const std::vector<std::vector<float>>& corpus, int k) {
    if (corpus.empty()) throw DataError("nearest_neighbors: empty corpus");
    if (k < 1 || k > static_cast<int>(corpus.size())) {
        throw ConfigError("nearest_neighbors: k=" + std::to_string(k) + " for corpus of " +
                          std::to_string(corpus.size()));
    }
    std::vector<std::pair<int, double>> scored;
    scored.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        scored.emplace_back(static_cast<int>(i), cosine<float>(query, corpus[i]));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    scored.resize(static_cast<std::size_t>(k));
    return scored;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return fields;
}

}  // namespace

std::vector<SimilarityPair> read_similarity_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open similarity file " + path);
    std::vector<SimilarityPair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() != 3) {
            throw DataError(path + " line " + std::to_string(line_no) + ": expected 3 tab-separated fields");
        }
        try {
            pairs.push_back({fields[0], fields[1], std::stod(fields[2])});
        } catch (const std::exception&) {
            throw DataError(path + " line " + std::to_string(line_no) + ": bad score \"" + fields[2] + "\"");
        }
    }
    return pairs;
}

std::vector<ProbeExample> read_probe_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open probe file " + path);
    std::vector<ProbeExample> examples;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() != 2) {
            throw DataError(path + " line " + std::to_string(line_no) + ": expected 2 tab-separated fields");
        }
        try {
            examples.push_back({std::stoi(fields[0]), fields[1]});
        } catch (const std::exception&) {
            throw DataError(path + " line " + std::to_string(line_no) + ": bad label \"" + fields[0] + "\"");
        }
    }
    return examples;
}

template double cosine<float>(std::span<const float>, std::span<const float>);
template double cosine<double>(std::span<const double>, std::span<const double>);

}  // namespace mmae
