#include "mmae/embedding.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace mmae {

char provenance_tag(Provenance p) {
    switch (p) {
        case Provenance::pretrained: return 'p';
        case Provenance::random_special: return 's';
        case Provenance::random_missing: return 'm';
    }
    return '?';
}

Provenance provenance_from_tag(char c) {
    switch (c) {
        case 'p': return Provenance::pretrained;
        case 's': return Provenance::random_special;
        case 'm': return Provenance::random_missing;
    }
    throw DataError(std::string("unknown provenance tag '") + c + "'");
}

template <typename T>
std::vector<T> positional_encoding(int position, int dim) {
    if (dim <= 0 || dim % 2 != 0) {
        throw ConfigError("positional_encoding: dimension must be positive and even, got " + std::to_string(dim));
    }
    if (position < 0) throw ConfigError("positional_encoding: negative position");
    std::vector<T> out(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim / 2; ++i) {
        const double angle = position / std::pow(10000.0, (2.0 * i) / dim);
        out[static_cast<std::size_t>(2 * i)] = static_cast<T>(std::sin(angle));
        out[static_cast<std::size_t>(2 * i + 1)] = static_cast<T>(std::cos(angle));
    }
    return out;
}

template <typename T>
TensorT<T> positional_table(int max_len, int dim) {
    TensorT<T> table({max_len, dim});
    for (int t = 0; t < max_len; ++t) {
        const auto row = positional_encoding<T>(t, dim);
        std::copy(row.begin(), row.end(), table.row(t));
    }
    return table;
}

template <typename T>
TensorT<T> embed_sequence(std::span<const int> ids, const TensorT<T>& table, const TensorT<T>& positions) {
    const int n = static_cast<int>(ids.size());
    if (n > positions.rows()) {
        throw DataError("embed_sequence: sequence length " + std::to_string(n) + " exceeds max length " +
                        std::to_string(positions.rows()));
    }
    const int dim = table.cols();
    TensorT<T> out({n, dim});
    for (int t = 0; t < n; ++t) {
        if (ids[static_cast<std::size_t>(t)] < 0 || ids[static_cast<std::size_t>(t)] >= table.rows()) {
            throw DataError("embed_sequence: id " + std::to_string(ids[static_cast<std::size_t>(t)]) +
                            " outside table of " + std::to_string(table.rows()) + " rows");
        }
        const T* word = table.row(ids[static_cast<std::size_t>(t)]);
        const T* pos = positions.row(t);
        T* dst = out.row(t);
        for (int j = 0; j < dim; ++j) dst[j] = word[j] + pos[j];
    }
    return out;
}

namespace {

// Parses one "word v_1 ... v_dim" line. Returns false on blank lines.
bool parse_vector_line(const std::string& line, int line_no, int dim, std::string& word, std::vector<float>& values) {
    if (line.empty()) return false;
    std::istringstream ss(line);
    if (!(ss >> word)) return false;
    values.clear();
    float v;
    while (ss >> v) values.push_back(v);
    if (static_cast<int>(values.size()) != dim) {
        throw DataError("vector file line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                        " values for \"" + word + "\", got " + std::to_string(values.size()));
    }
    return true;
}

void random_row(float* dst, int dim, Rng& rng) {
    for (int j = 0; j < dim; ++j) dst[j] = static_cast<float>(rng.uniform(-0.1, 0.1));
}

}  // namespace

EmbeddingTable init_embedding_table(const Vocab& vocab, int dim, std::uint64_t seed, const std::string& vectors_path,
                                    VectorFileStats* stats) {
    EmbeddingTable table;
    table.weights = Tensor({vocab.size(), dim});
    table.provenance.assign(static_cast<std::size_t>(vocab.size()), Provenance::random_missing);

    Rng rng(Rng::mix(seed, 0xe1bedd1e));
    // All rows start random so every id has a deterministic vector regardless
    // of file coverage; file rows overwrite below.
    for (int i = 0; i < vocab.size(); ++i) random_row(table.weights.row(i), dim, rng);
    for (int i = 0; i < Vocab::kNumSpecials; ++i) table.provenance[static_cast<std::size_t>(i)] = Provenance::random_special;

    if (!vectors_path.empty()) {
        std::ifstream in(vectors_path, std::ios::binary);
        if (!in) throw DataError("cannot open vector file " + vectors_path);
        std::unordered_map<std::string, bool> seen;
        std::string line, word;
        std::vector<float> values;
        int line_no = 0;
        VectorFileStats local;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!parse_vector_line(line, line_no, dim, word, values)) continue;
            if (seen.count(word)) {
                ++local.duplicates;
                continue;
            }
            seen.emplace(word, true);
            const auto it = vocab.token_to_id.find(word);
            if (it == vocab.token_to_id.end() || it->second < Vocab::kNumSpecials) continue;
            std::copy(values.begin(), values.end(), table.weights.row(it->second));
            table.provenance[static_cast<std::size_t>(it->second)] = Provenance::pretrained;
            ++local.loaded;
        }
        local.missing = vocab.size() - Vocab::kNumSpecials - local.loaded;
        if (stats != nullptr) *stats = local;
    } else if (stats != nullptr) {
        *stats = VectorFileStats{0, vocab.size() - Vocab::kNumSpecials, 0};
    }
    return table;
}

ExpandStats expand_vocab(EmbeddingTable& table, Vocab& vocab, const std::string& vectors_path) {
    std::ifstream in(vectors_path, std::ios::binary);
    if (!in) throw DataError("cannot open vector file " + vectors_path);
    const int dim = table.dim();

    std::vector<std::string> new_words;
    std::vector<float> new_rows;
    std::unordered_map<std::string, bool> seen;
    ExpandStats stats;

    std::string line, word;
    std::vector<float> values;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!parse_vector_line(line, line_no, dim, word, values)) continue;
        if (seen.count(word)) {
            ++stats.duplicates;
            continue;
        }
        seen.emplace(word, true);
        if (vocab.token_to_id.count(word)) continue;  // training-time column wins
        new_words.push_back(word);
        new_rows.insert(new_rows.end(), values.begin(), values.end());
    }

    if (!new_words.empty()) {
        Tensor expanded({vocab.size() + static_cast<int>(new_words.size()), dim});
        std::copy(table.weights.data.begin(), table.weights.data.end(), expanded.data.begin());
        std::copy(new_rows.begin(), new_rows.end(),
                  expanded.data.begin() + static_cast<std::ptrdiff_t>(table.weights.size()));
        table.weights = std::move(expanded);
        for (const auto& w : new_words) {
            vocab.token_to_id.emplace(w, vocab.size());
            vocab.id_to_token.push_back(w);
            vocab.counts.push_back(0);
            table.provenance.push_back(Provenance::pretrained);
        }
    }
    stats.added = static_cast<int>(new_words.size());
    return stats;
}

template std::vector<float> positional_encoding<float>(int, int);
template std::vector<double> positional_encoding<double>(int, int);
template TensorT<float> positional_table<float>(int, int);
template TensorT<double> positional_table<double>(int, int);
template TensorT<float> embed_sequence<float>(std::span<const int>, const TensorT<float>&, const TensorT<float>&);
template TensorT<double> embed_sequence<double>(std::span<const int>, const TensorT<double>&, const TensorT<double>&);

}  // namespace mmae
