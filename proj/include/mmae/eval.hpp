#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mmae {

template <typename T>
double cosine(std::span<const T> u, std::span<const T> v);

double pearson(std::span<const double> x, std::span<const double> y);

// Pearson over average-ranked values (ties get fractional ranks).
double spearman(std::span<const double> x, std::span<const double> y);

using SentenceEncoder = std::function<std::vector<float>(const std::string&)>;

struct SimilarityPair {
    std::string a;
    std::string b;
    double gold = 0;
};

struct SimilarityResult {
    double pearson = 0;
    double spearman = 0;
    int pairs = 0;
};

// Predicted score per pair = cosine of the two sentence embeddings.
SimilarityResult similarity_eval(const std::vector<SimilarityPair>& pairs, const SentenceEncoder& encoder);

struct ProbeExample {
    int label = 0;
    std::string text;
};

struct ProbeOptions {
    double l2 = 1e-3;
    int epochs = 500;
};

// Multinomial logistic regression on frozen embeddings, full-batch gradient
// descent, deterministic (zero init). Returns test accuracy.
double probe_eval(const std::vector<ProbeExample>& train, const std::vector<ProbeExample>& test,
                  const SentenceEncoder& encoder, const ProbeOptions& opts = {});

// Feature-space variant for callers that already hold embeddings.
double probe_eval_features(const std::vector<std::vector<float>>& train_x, const std::vector<int>& train_y,
                           const std::vector<std::vector<float>>& test_x, const std::vector<int>& test_y,
                           const ProbeOptions& opts = {});

// Top-k (corpus index, cosine) by descending score, ties by ascending index.
std::vector<std::pair<int, double>> nearest_neighbors(std::span<const float> query,
                                                      const std::vector<std::vector<float>>& corpus, int k);

// TSV "sentence_a<TAB>sentence_b<TAB>score".
std::vector<SimilarityPair> read_similarity_tsv(const std::string& path);
// TSV "label<TAB>sentence".
std::vector<ProbeExample> read_probe_tsv(const std::string& path);

}  // namespace mmae
