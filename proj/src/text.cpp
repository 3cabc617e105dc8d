#include "mmae/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "mmae/io.hpp"
#include "mmae/tensor.hpp"

namespace mmae {

namespace {

const char* kSpecialNames[Vocab::kNumSpecials] = {"<pad>", "<unk>", "<go>", "</s>"};

void push_token(Vocab& vocab, const std::string& token, long long count) {
    vocab.token_to_id.emplace(token, vocab.size());
    vocab.id_to_token.push_back(token);
    vocab.counts.push_back(count);
}

}  // namespace

std::vector<std::string> tokenize(const std::string& sentence) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : sentence) {
        if (std::isspace(c)) {
            if (!current.empty()) {
                tokens.push_back(std::move(current));
                current.clear();
            }
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

Vocab build_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    if (max_size < Vocab::kNumSpecials) {
        throw ConfigError("build_vocab: max_size must be >= " + std::to_string(Vocab::kNumSpecials));
    }
    std::unordered_map<std::string, long long> freq;
    for (const auto& sentence : corpus) {
        for (auto& token : tokenize(sentence)) ++freq[token];
    }
    std::vector<std::pair<std::string, long long>> ordered(freq.begin(), freq.end());
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab vocab;
    for (const char* name : kSpecialNames) push_token(vocab, name, 0);
    const std::size_t keep = static_cast<std::size_t>(max_size - Vocab::kNumSpecials);
    for (std::size_t i = 0; i < ordered.size() && i < keep; ++i) {
        push_token(vocab, ordered[i].first, ordered[i].second);
    }
    return vocab;
}

std::vector<int> encode_sentence(const std::string& sentence, const Vocab& vocab) {
    std::vector<int> ids;
    for (const auto& token : tokenize(sentence)) ids.push_back(vocab.id(token));
    ids.push_back(Vocab::kEos);
    return ids;
}

std::string decode_ids(std::span<const int> ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocab::kEos || id == Vocab::kPad) break;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

Batch make_batch(const std::vector<std::vector<int>>& sequences, int pad_to) {
    if (sequences.empty()) throw DataError("make_batch: no sequences");
    int longest = 0;
    for (const auto& seq : sequences) longest = std::max(longest, static_cast<int>(seq.size()));
    const int width = pad_to < 0 ? longest : pad_to;
    if (longest > width) {
        throw DataError("make_batch: sequence of length " + std::to_string(longest) +
                        " exceeds pad_to=" + std::to_string(width));
    }

    Batch batch;
    batch.rows = static_cast<int>(sequences.size());
    batch.max_len = width;
    batch.ids.assign(static_cast<std::size_t>(batch.rows) * width, Vocab::kPad);
    batch.pad_mask.assign(static_cast<std::size_t>(batch.rows) * width, 0);
    batch.lengths.resize(batch.rows);
    for (int r = 0; r < batch.rows; ++r) {
        const auto& seq = sequences[static_cast<std::size_t>(r)];
        batch.lengths[r] = static_cast<int>(seq.size());
        for (std::size_t t = 0; t < seq.size(); ++t) {
            batch.ids[static_cast<std::size_t>(r) * width + t] = seq[t];
            batch.pad_mask[static_cast<std::size_t>(r) * width + t] = 1;
        }
    }
    return batch;
}

std::vector<std::string> read_corpus_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

void write_vocab_file(const Vocab& vocab, const std::string& path) {
    write_file_atomic(path, [&](std::ostream& out) {
        for (int i = 0; i < vocab.size(); ++i) {
            out << vocab.id_to_token[static_cast<std::size_t>(i)] << '\t'
                << vocab.counts[static_cast<std::size_t>(i)] << '\n';
        }
    });
}

Vocab read_vocab_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocab file " + path);
    Vocab vocab;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError("vocab file " + path + ": missing tab on line " + std::to_string(line_no));
        }
        push_token(vocab, line.substr(0, tab), std::stoll(line.substr(tab + 1)));
    }
    if (vocab.size() < Vocab::kNumSpecials) throw DataError("vocab file " + path + ": too few entries");
    for (int i = 0; i < Vocab::kNumSpecials; ++i) {
        if (vocab.id_to_token[static_cast<std::size_t>(i)] != kSpecialNames[i]) {
            throw DataError("vocab file " + path + ": specials out of order");
        }
    }
    return vocab;
}

}  // namespace mmae
