#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mmae/embedding.hpp"

using namespace mmae;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& body) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << body;
    return path;
}

Vocab tiny_vocab(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& name : {"<pad>", "<unk>", "<go>", "</s>"}) {
        v.token_to_id.emplace(name, v.size());
        v.id_to_token.push_back(name);
        v.counts.push_back(0);
    }
    for (const auto& w : words) {
        v.token_to_id.emplace(w, v.size());
        v.id_to_token.push_back(w);
        v.counts.push_back(1);
    }
    return v;
}

}  // namespace

TEST_CASE("positional encoding at t=0 alternates 0,1") {
    for (int d : {2, 8, 50}) {
        auto p = positional_encoding<double>(0, d);
        for (int i = 0; i < d; i += 2) {
            CHECK(p[static_cast<std::size_t>(i)] == 0.0);
            CHECK(p[static_cast<std::size_t>(i + 1)] == 1.0);
        }
    }
    CHECK_THROWS_AS(positional_encoding<double>(0, 3), ConfigError);
    CHECK_THROWS_AS(positional_encoding<double>(-1, 4), ConfigError);
}

TEST_CASE("positional encoding t=1 d=2 is sin(1),cos(1)") {
    auto p = positional_encoding<double>(1, 2);
    CHECK(p[0] == doctest::Approx(0.84147).epsilon(1e-5));
    CHECK(p[1] == doctest::Approx(0.54030).epsilon(1e-5));
}

TEST_CASE("positional encoding wavelengths strictly increase across pairs") {
    const int d = 50;
    // wavelength of pair i is 2*pi*10000^(2i/d): compare successive angular rates
    double prev_rate = std::numeric_limits<double>::infinity();
    for (int i = 0; i < d / 2; ++i) {
        const double rate = 1.0 / std::pow(10000.0, 2.0 * i / d);
        CHECK(rate < prev_rate);
        prev_rate = rate;
    }
    // the same fact observed numerically through the table at t=10000
    auto p = positional_encoding<double>(10000, d);
    for (double v : p) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("positional table is bounded and rows are pairwise distinct") {
    auto table = positional_table<double>(64, 50);
    for (double v : table.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    for (int a = 0; a < 64; ++a) {
        for (int b = a + 1; b < 64; ++b) {
            bool differs = false;
            for (int j = 0; j < 50 && !differs; ++j) differs = table.at(a, j) != table.at(b, j);
            CHECK(differs);
        }
    }
}

TEST_CASE("embed_sequence adds word and position vectors") {
    TensorD table({5, 4});
    TensorD pos = positional_table<double>(8, 4);
    // zero embedding at id 2: row equals the position vector
    std::vector<int> ids{2};
    auto x = embed_sequence<double>(ids, table, pos);
    CHECK(x.at(0, 0) == 0.0);
    CHECK(x.at(0, 1) == 1.0);

    // same token at t=0 and t=1 differs by P[1]-P[0]
    Rng rng(2);
    for (auto& v : table.data) v = rng.uniform(-1, 1);
    std::vector<int> twice{3, 3};
    auto y = embed_sequence<double>(twice, table, pos);
    for (int j = 0; j < 4; ++j) {
        CHECK(y.at(1, j) - y.at(0, j) == doctest::Approx(pos.at(1, j) - pos.at(0, j)).epsilon(1e-12));
    }

    // subtracting the position recovers the embedding column exactly
    std::vector<int> random_ids{4, 0, 1, 2};
    auto z = embed_sequence<double>(random_ids, table, pos);
    for (int t = 0; t < 4; ++t) {
        for (int j = 0; j < 4; ++j) {
            CHECK(z.at(t, j) - pos.at(t, j) == doctest::Approx(table.at(random_ids[t], j)).epsilon(1e-12));
        }
    }

    std::vector<int> bad{7};
    CHECK_THROWS_AS(embed_sequence<double>(bad, table, pos), DataError);
    std::vector<int> long_ids(9, 1);
    CHECK_THROWS_AS(embed_sequence<double>(long_ids, table, pos), DataError);
}

TEST_CASE("init_embedding_table loads file rows and tags provenance") {
    Vocab v = tiny_vocab({"cat", "dog"});
    const auto path = write_temp("mmae_vecs1.txt", "cat 1 2\nbird 9 9\n");
    VectorFileStats stats;
    EmbeddingTable table = init_embedding_table(v, 2, 7, path.string(), &stats);
    CHECK(stats.loaded == 1);
    CHECK(stats.missing == 1);
    CHECK(table.weights.at(v.id("cat"), 0) == 1.0f);
    CHECK(table.weights.at(v.id("cat"), 1) == 2.0f);
    CHECK(table.provenance[static_cast<std::size_t>(v.id("cat"))] == Provenance::pretrained);
    CHECK(table.provenance[static_cast<std::size_t>(v.id("dog"))] == Provenance::random_missing);
    CHECK(table.provenance[Vocab::kPad] == Provenance::random_special);
    // random rows live on +-0.1
    for (int j = 0; j < 2; ++j) {
        CHECK(std::abs(table.weights.at(v.id("dog"), j)) <= 0.1f);
    }
    std::filesystem::remove(path);
}

TEST_CASE("expand_vocab appends only new words") {
    Vocab v = tiny_vocab({"cat"});
    EmbeddingTable table = init_embedding_table(v, 2, 7);
    const Tensor before = table.weights;

    // only existing words: no growth
    const auto same = write_temp("mmae_vecs2.txt", "cat 5 5\n");
    ExpandStats s1 = expand_vocab(table, v, same.string());
    CHECK(s1.added == 0);
    CHECK(v.size() == 5);
    CHECK(table.weights.data == before.data);  // training-time columns untouched

    // three new words appended with ids >= old V
    const auto fresh = write_temp("mmae_vecs3.txt", "red 1 0\ngreen 0 1\nblue 1 1\nred 9 9\n");
    ExpandStats s2 = expand_vocab(table, v, fresh.string());
    CHECK(s2.added == 3);
    CHECK(s2.duplicates == 1);  // second "red" ignored, first wins
    CHECK(v.size() == 8);
    CHECK(v.id("red") >= 5);
    CHECK(table.weights.at(v.id("red"), 0) == 1.0f);
    CHECK(table.weights.at(v.id("red"), 1) == 0.0f);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(table.weights.data[i] == before.data[i]);

    // a sentence of purely new words encodes with zero UNKs
    auto ids = encode_sentence("red green blue", v);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) CHECK(ids[i] != Vocab::kUnk);

    std::filesystem::remove(same);
    std::filesystem::remove(fresh);
}

TEST_CASE("vector files with wrong dimensions fail with the line number") {
    Vocab v = tiny_vocab({"cat"});
    EmbeddingTable table = init_embedding_table(v, 2, 7);
    const auto bad = write_temp("mmae_vecs4.txt", "cat 1 2\ndog 1 2 3\n");
    CHECK_THROWS_WITH_AS(expand_vocab(table, v, bad.string()), doctest::Contains("line 2"), DataError);
    std::filesystem::remove(bad);
}
