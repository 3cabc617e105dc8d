#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmae {

// Token/id lookup. Ids 0..3 are the specials; the rest are corpus tokens in
// descending frequency order, ties broken lexicographically.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kGo = 2;
    static constexpr int kEos = 3;
    static constexpr int kNumSpecials = 4;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;
    std::vector<long long> counts;  // corpus frequency; 0 for the specials

    int size() const { return static_cast<int>(id_to_token.size()); }
    int id(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? kUnk : it->second;
    }
    const std::string& token(int id) const { return id_to_token.at(static_cast<std::size_t>(id)); }
};

// Right-padded id grid with per-row true lengths (EOS included) and pad mask.
struct Batch {
    int rows = 0;
    int max_len = 0;
    std::vector<int> ids;               // rows x max_len
    std::vector<int> lengths;           // per row
    std::vector<std::uint8_t> pad_mask; // rows x max_len, 1 where position < length

    const int* row(int r) const { return ids.data() + static_cast<std::size_t>(r) * max_len; }
    const std::uint8_t* mask_row(int r) const { return pad_mask.data() + static_cast<std::size_t>(r) * max_len; }
};

// Lowercase (ASCII) + whitespace split.
std::vector<std::string> tokenize(const std::string& sentence);

Vocab build_vocab(const std::vector<std::string>& corpus, int max_size);

// Token ids with EOS appended; unknown tokens map to UNK. "" -> [EOS].
std::vector<int> encode_sentence(const std::string& sentence, const Vocab& vocab);

// Joins tokens for ids, stopping before EOS/PAD.
std::string decode_ids(std::span<const int> ids, const Vocab& vocab);

// pad_to < 0 pads to the longest sequence.
Batch make_batch(const std::vector<std::vector<int>>& sequences, int pad_to = -1);

std::vector<std::string> read_corpus_lines(const std::string& path);

void write_vocab_file(const Vocab& vocab, const std::string& path);
Vocab read_vocab_file(const std::string& path);

}  // namespace mmae
