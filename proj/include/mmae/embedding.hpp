#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmae/tensor.hpp"
#include "mmae/text.hpp"

namespace mmae {

enum class Provenance : std::uint8_t { pretrained, random_special, random_missing };

char provenance_tag(Provenance p);
Provenance provenance_from_tag(char c);

// Frozen word-vector table, one row per vocab id.
struct EmbeddingTable {
    Tensor weights;                      // [V x d_w]
    std::vector<Provenance> provenance;  // per id

    int vocab_size() const { return weights.rows(); }
    int dim() const { return weights.cols(); }
};

// Sinusoidal position vector, 0-based position and dimension indices.
template <typename T>
std::vector<T> positional_encoding(int position, int dim);

template <typename T>
TensorT<T> positional_table(int max_len, int dim);

// Row t = word vector of ids[t] + position vector t.
template <typename T>
TensorT<T> embed_sequence(std::span<const int> ids, const TensorT<T>& table, const TensorT<T>& positions);

struct VectorFileStats {
    int loaded = 0;      // vocab words found in the file
    int missing = 0;     // vocab words absent from the file (got random vectors)
    int duplicates = 0;  // repeated file words (first occurrence wins)
};

// Word vectors for an existing vocab: rows come from the vector file where the
// word appears there, otherwise seeded uniform +-0.1. Specials are always
// random. Empty path = fully random table.
EmbeddingTable init_embedding_table(const Vocab& vocab, int dim, std::uint64_t seed,
                                    const std::string& vectors_path = {}, VectorFileStats* stats = nullptr);

struct ExpandStats {
    int added = 0;
    int duplicates = 0;
};

// Appends every file word missing from the vocab (encoding-side only: the
// decoder's output projection is untouched, so new words cannot be generated).
ExpandStats expand_vocab(EmbeddingTable& table, Vocab& vocab, const std::string& vectors_path);

}  // namespace mmae
