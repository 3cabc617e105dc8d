#include <bit>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mmae/io.hpp"
#include "mmae/training.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

namespace mmae {

namespace {

using json = nlohmann::ordered_json;

json config_to_json(const ModelConfig& m) {
    return json{{"d_w", m.d_w},         {"d_m", m.d_m},
                {"d_f", m.d_f},         {"heads", m.heads},
                {"t_max", m.t_max},     {"vocab", m.vocab},
                {"n_blocks", m.n_blocks}, {"dropout", m.dropout},
                {"pooling", pooling_name(m.pooling)}, {"seed", m.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig m;
    m.d_w = j.at("d_w");
    m.d_m = j.at("d_m");
    m.d_f = j.at("d_f");
    m.heads = j.at("heads");
    m.t_max = j.at("t_max");
    m.vocab = j.at("vocab");
    m.n_blocks = j.at("n_blocks");
    m.dropout = j.at("dropout");
    m.pooling = pooling_from_name(j.at("pooling"));
    m.seed = j.at("seed");
    return m;
}

json train_to_json(const TrainConfig& t) {
    return json{{"lr", t.lr},           {"clip_norm", t.clip_norm}, {"batch_size", t.batch_size},
                {"patience", t.patience}, {"max_epochs", t.max_epochs}, {"seed", t.seed},
                {"vocab_size", t.vocab_size}};
}

TrainConfig train_from_json(const json& j) {
    TrainConfig t;
    t.lr = j.at("lr");
    t.clip_norm = j.at("clip_norm");
    t.batch_size = j.at("batch_size");
    t.patience = j.at("patience");
    t.max_epochs = j.at("max_epochs");
    t.seed = j.at("seed");
    t.vocab_size = j.at("vocab_size");
    return t;
}

struct ManifestEntry {
    std::string name;
    std::vector<int> shape;
    const std::vector<float>* values;
};

std::vector<ManifestEntry> build_manifest(const Checkpoint& ckpt) {
    std::vector<ManifestEntry> entries;
    entries.push_back({"embedding", ckpt.params.embedding.shape, &ckpt.params.embedding.data});
    const auto trainable = ckpt.params.trainable();
    for (const auto& [name, tensor] : trainable) entries.push_back({name, tensor->shape, &tensor->data});
    if (ckpt.adam.has_value()) {
        if (ckpt.adam->m.size() != trainable.size() || ckpt.adam->v.size() != trainable.size()) {
            throw DataError("checkpoint: adam state does not match the trainable manifest");
        }
        for (std::size_t i = 0; i < trainable.size(); ++i) {
            entries.push_back({"adam.m." + trainable[i].first, trainable[i].second->shape, &ckpt.adam->m[i]});
        }
        for (std::size_t i = 0; i < trainable.size(); ++i) {
            entries.push_back({"adam.v." + trainable[i].first, trainable[i].second->shape, &ckpt.adam->v[i]});
        }
    }
    return entries;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const auto entries = build_manifest(ckpt);

    json header;
    header["format"] = "mean-max-aae-ckpt-1";
    header["model"] = config_to_json(ckpt.model);
    header["train"] = train_to_json(ckpt.train);
    header["epoch"] = ckpt.epoch;
    header["steps"] = ckpt.steps;
    header["best_dev_acc"] = ckpt.best_dev_acc;

    std::string provenance;
    provenance.reserve(ckpt.params.embedding_provenance.size());
    for (auto p : ckpt.params.embedding_provenance) provenance.push_back(provenance_tag(p));
    header["embedding_provenance"] = provenance;

    header["vocab"] = json{{"tokens", ckpt.vocab.id_to_token}, {"counts", ckpt.vocab.counts}};
    header["adam"] = ckpt.adam.has_value()
                         ? json{{"present", true},
                                {"t", ckpt.adam->step},
                                {"beta1", ckpt.adam->beta1},
                                {"beta2", ckpt.adam->beta2},
                                {"eps", ckpt.adam->eps}}
                         : json{{"present", false}};

    json manifest = json::array();
    std::size_t offset = 0;
    for (const auto& entry : entries) {
        manifest.push_back(json{{"name", entry.name}, {"shape", entry.shape}, {"offset", offset}});
        offset += entry.values->size();
    }
    header["manifest"] = manifest;
    header["total_floats"] = offset;

    write_file_atomic(path, [&](std::ostream& out) {
        out << header.dump() << '\n';
        for (const auto& entry : entries) {
            out.write(reinterpret_cast<const char*>(entry.values->data()),
                      static_cast<std::streamsize>(entry.values->size() * sizeof(float)));
        }
    });
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw DataError("checkpoint " + path + ": missing header");

    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + path + ": bad header: " + e.what());
    }
    if (header.value("format", "") != "mean-max-aae-ckpt-1") {
        throw DataError("checkpoint " + path + ": unknown format");
    }

    Checkpoint ckpt;
    ckpt.model = config_from_json(header.at("model"));
    ckpt.train = train_from_json(header.at("train"));
    ckpt.epoch = header.at("epoch");
    ckpt.steps = header.at("steps");
    ckpt.best_dev_acc = header.at("best_dev_acc");

    const auto& vj = header.at("vocab");
    const std::vector<std::string> tokens = vj.at("tokens");
    const std::vector<long long> counts = vj.at("counts");
    if (tokens.size() != counts.size() || static_cast<int>(tokens.size()) != ckpt.model.vocab) {
        throw DataError("checkpoint " + path + ": vocab does not match model config");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        ckpt.vocab.token_to_id.emplace(tokens[i], static_cast<int>(i));
        ckpt.vocab.id_to_token.push_back(tokens[i]);
        ckpt.vocab.counts.push_back(counts[i]);
    }

    const std::string provenance = header.at("embedding_provenance");
    if (static_cast<int>(provenance.size()) != ckpt.model.vocab) {
        throw DataError("checkpoint " + path + ": provenance length mismatch");
    }

    // Build the parameter skeleton, then overwrite every tensor from the file.
    EmbeddingTable table;
    table.weights = Tensor({ckpt.model.vocab, ckpt.model.d_w});
    for (char c : provenance) table.provenance.push_back(provenance_from_tag(c));
    ckpt.params = init_params(ckpt.model, table);

    auto trainable = ckpt.params.trainable();
    std::vector<std::pair<std::string, std::vector<float>*>> slots;
    slots.emplace_back("embedding", &ckpt.params.embedding.data);
    std::vector<std::vector<int>> expected_shapes{ckpt.params.embedding.shape};
    for (auto& [name, tensor] : trainable) {
        slots.emplace_back(name, &tensor->data);
        expected_shapes.push_back(tensor->shape);
    }

    const auto& aj = header.at("adam");
    if (aj.at("present").get<bool>()) {
        AdamState adam;
        adam.step = aj.at("t");
        adam.beta1 = aj.at("beta1");
        adam.beta2 = aj.at("beta2");
        adam.eps = aj.at("eps");
        adam.m.resize(trainable.size());
        adam.v.resize(trainable.size());
        ckpt.adam = std::move(adam);
        for (std::size_t i = 0; i < trainable.size(); ++i) {
            ckpt.adam->m[i].assign(trainable[i].second->size(), 0.0f);
            slots.emplace_back("adam.m." + trainable[i].first, &ckpt.adam->m[i]);
            expected_shapes.push_back(trainable[i].second->shape);
        }
        for (std::size_t i = 0; i < trainable.size(); ++i) {
            ckpt.adam->v[i].assign(trainable[i].second->size(), 0.0f);
            slots.emplace_back("adam.v." + trainable[i].first, &ckpt.adam->v[i]);
            expected_shapes.push_back(trainable[i].second->shape);
        }
    }

    const auto& manifest = header.at("manifest");
    if (manifest.size() != slots.size()) {
        throw DataError("checkpoint " + path + ": manifest lists " + std::to_string(manifest.size()) +
                        " tensors, expected " + std::to_string(slots.size()));
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& entry = manifest[i];
        const std::string name = entry.at("name");
        const std::vector<int> shape = entry.at("shape");
        if (name != slots[i].first) {
            throw DataError("checkpoint " + path + ": manifest entry \"" + name + "\" where \"" + slots[i].first +
                            "\" was expected");
        }
        if (shape != expected_shapes[i] || entry.at("offset").get<std::size_t>() != offset) {
            throw DataError("checkpoint " + path + ": corrupt tensor \"" + name + "\": shape " + shape_str(shape) +
                            " vs expected " + shape_str(expected_shapes[i]));
        }
        auto* dst = slots[i].second;
        in.read(reinterpret_cast<char*>(dst->data()), static_cast<std::streamsize>(dst->size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(dst->size() * sizeof(float))) {
            throw DataError("checkpoint " + path + ": truncated while reading \"" + name + "\"");
        }
        offset += dst->size();
    }
    if (header.at("total_floats").get<std::size_t>() != offset) {
        throw DataError("checkpoint " + path + ": header float count does not match manifest");
    }
    char extra;
    if (in.read(&extra, 1)) throw DataError("checkpoint " + path + ": trailing bytes after manifest data");
    return ckpt;
}

}  // namespace mmae
