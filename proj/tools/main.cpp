// Command-line surface for the mean-max attention autoencoder: train, encode,
// reconstruct, eval, inspect-attention.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mmae/eval.hpp"
#include "mmae/io.hpp"
#include "mmae/model.hpp"
#include "mmae/training.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace mmae;

struct TrainArgs {
    std::string corpus, dev, checkpoint, vectors, log_path, vocab_path;
    ModelConfig model;
    TrainConfig train;
    std::string pooling = "meanmax";
    std::string preset = "desk";
    bool no_exact_match = false;
};

int cmd_train(const TrainArgs& args) {
    ModelConfig mcfg = args.model;
    mcfg.pooling = pooling_from_name(args.pooling);
    TrainConfig tcfg = args.train;
    tcfg.log_exact_match = !args.no_exact_match;
    tcfg.diagnostic_path = args.checkpoint + ".diag";

    const std::string log_path = args.log_path.empty() ? args.checkpoint + ".log.jsonl" : args.log_path;
    const std::string vocab_path = args.vocab_path.empty() ? args.checkpoint + ".vocab" : args.vocab_path;

    std::ostringstream log;
    TrainResult result = train_files(args.corpus, args.dev, mcfg, tcfg, args.vectors, &log, &std::cout);

    save_checkpoint(result.best, args.checkpoint);
    write_vocab_file(result.best.vocab, vocab_path);
    write_file_atomic(log_path, [&](std::ostream& out) { out << log.str(); });

    std::cout << "best dev accuracy " << result.best.best_dev_acc << " (epoch " << result.best_epoch << ", "
              << result.steps << " steps)\n"
              << "checkpoint: " << args.checkpoint << "\nvocab: " << vocab_path << "\nlog: " << log_path << "\n";
    return 0;
}

struct Loaded {
    Checkpoint ckpt;
    Vocab vocab;  // possibly expanded
    EmbeddingTable table;
};

Loaded load_for_inference(const std::string& checkpoint_path, const std::string& vectors_path) {
    Loaded loaded;
    loaded.ckpt = load_checkpoint(checkpoint_path);
    loaded.vocab = loaded.ckpt.vocab;
    if (!vectors_path.empty()) {
        loaded.table.weights = loaded.ckpt.params.embedding;
        loaded.table.provenance = loaded.ckpt.params.embedding_provenance;
        const ExpandStats stats = expand_vocab(loaded.table, loaded.vocab, vectors_path);
        loaded.ckpt.params.embedding = loaded.table.weights;
        loaded.ckpt.params.embedding_provenance = loaded.table.provenance;
        loaded.ckpt.model.vocab = loaded.vocab.size();  // encoder-side only
        std::cerr << "vocabulary expanded by " << stats.added << " words";
        if (stats.duplicates > 0) std::cerr << " (" << stats.duplicates << " duplicate file rows ignored)";
        std::cerr << "\n";
    }
    return loaded;
}

int cmd_encode(const std::string& checkpoint_path, const std::string& input, const std::string& output,
               const std::string& vectors, int threads) {
    Loaded loaded = load_for_inference(checkpoint_path, vectors);
    const auto lines = read_corpus_lines(input);

    std::vector<std::vector<int>> ids;
    std::vector<int> line_of;
    int errors = 0;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto encoded = encode_sentence(lines[i], loaded.vocab);
        if (static_cast<int>(encoded.size()) > loaded.ckpt.model.t_max) {
            std::cerr << "line " << (i + 1) << ": length " << encoded.size() << " exceeds t_max="
                      << loaded.ckpt.model.t_max << ", skipped\n";
            ++errors;
            continue;
        }
        ids.push_back(std::move(encoded));
        line_of.push_back(static_cast<int>(i + 1));
    }

    const auto embeddings = encode_batch(loaded.ckpt.model, loaded.ckpt.params, ids, threads);
    write_file_atomic(output, [&](std::ostream& out) {
        out << std::setprecision(9);
        for (std::size_t i = 0; i < embeddings.size(); ++i) {
            out << line_of[i];
            for (float v : embeddings[i].data) out << '\t' << v;
            out << '\n';
        }
    });
    std::cout << "wrote " << embeddings.size() << " embeddings of dimension "
              << loaded.ckpt.model.sentence_dim() << " to " << output;
    if (errors > 0) std::cout << " (" << errors << " lines skipped)";
    std::cout << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& checkpoint_path, const std::string& input, int max_len) {
    Loaded loaded = load_for_inference(checkpoint_path, {});
    const auto& cfg = loaded.ckpt.model;
    const auto lines = read_corpus_lines(input);
    const int cap = max_len > 0 ? max_len : cfg.t_max;

    int exact = 0;
    for (const auto& line : lines) {
        const auto ids = encode_sentence(line, loaded.vocab);
        if (static_cast<int>(ids.size()) > cfg.t_max) {
            std::cout << "0\t<over-length>\n";
            continue;
        }
        const Tensor z = encode_ids<float>(cfg, loaded.ckpt.params, ids);
        const auto decoded = greedy_decode(cfg, loaded.ckpt.params, z, cap);
        const bool match = decoded == ids;
        exact += match ? 1 : 0;
        std::cout << (match ? 1 : 0) << '\t' << decode_ids(decoded, loaded.vocab) << '\n';
    }
    if (!lines.empty()) {
        std::cerr << "exact-match " << exact << "/" << lines.size() << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& task, const std::string& data,
             const std::string& train_data, const std::string& test_data, double l2, int epochs,
             const std::string& output) {
    Loaded loaded = load_for_inference(checkpoint_path, {});
    const auto& cfg = loaded.ckpt.model;
    SentenceEncoder encoder = [&](const std::string& s) {
        const auto ids = encode_sentence(s, loaded.vocab);
        const Tensor z = encode_ids<float>(cfg, loaded.ckpt.params, ids);
        return z.data;
    };

    std::vector<json> results;
    if (task == "similarity") {
        if (data.empty()) throw ConfigError("eval similarity: --data is required");
        const auto pairs = read_similarity_tsv(data);
        const auto r = similarity_eval(pairs, encoder);
        results.push_back(json{{"task", "similarity"}, {"metric", "pearson"}, {"value", r.pearson}});
        results.push_back(json{{"task", "similarity"}, {"metric", "spearman"}, {"value", r.spearman}});
    } else if (task == "probe") {
        if (train_data.empty() || test_data.empty()) {
            throw ConfigError("eval probe: --train-data and --test-data are required");
        }
        ProbeOptions opts;
        opts.l2 = l2;
        opts.epochs = epochs;
        const double acc = probe_eval(read_probe_tsv(train_data), read_probe_tsv(test_data), encoder, opts);
        results.push_back(json{{"task", "probe"}, {"metric", "accuracy"}, {"value", acc}});
    } else {
        throw ConfigError("eval: unknown task \"" + task + "\" (similarity|probe)");
    }

    std::ostringstream body;
    for (const auto& r : results) body << r.dump() << '\n';
    std::cout << body.str();
    if (!output.empty()) write_file_atomic(output, [&](std::ostream& out) { out << body.str(); });
    return 0;
}

int cmd_inspect_attention(const std::string& checkpoint_path, const std::string& sentence,
                          const std::string& output) {
    Loaded loaded = load_for_inference(checkpoint_path, {});
    const auto& cfg = loaded.ckpt.model;
    const auto ids = encode_sentence(sentence, loaded.vocab);
    if (static_cast<int>(ids.size()) > cfg.t_max) throw DataError("sentence exceeds t_max");

    const TraceResult trace = attention_trace(cfg, loaded.ckpt.params, ids);

    std::vector<std::string> tokens;
    for (int id : ids) tokens.push_back(loaded.vocab.token(id));

    json doc;
    doc["heads"] = trace.per_head.heads;
    doc["n_q"] = trace.per_head.n_q;
    doc["n_k"] = trace.per_head.n_k;
    doc["slots"] = cfg.pooling == Pooling::mean_max ? json::array({"max", "mean"})
                                                    : json::array({pooling_name(cfg.pooling)});
    doc["tokens"] = tokens;
    json weights = json::array();
    for (int h = 0; h < trace.per_head.heads; ++h) {
        json per_q = json::array();
        for (int t = 0; t < trace.per_head.n_q; ++t) {
            json row = json::array();
            for (int s = 0; s < trace.per_head.n_k; ++s) row.push_back(trace.per_head.at(h, t, s));
            per_q.push_back(row);
        }
        weights.push_back(per_q);
    }
    doc["weights"] = weights;
    json avg = json::array();
    for (int t = 0; t < trace.steps; ++t) {
        json row = json::array();
        for (int s = 0; s < trace.slots; ++s) {
            row.push_back(trace.head_avg[static_cast<std::size_t>(t) * trace.slots + s]);
        }
        avg.push_back(row);
    }
    doc["head_avg"] = avg;
    write_file_atomic(output, [&](std::ostream& out) { out << doc.dump(2) << '\n'; });

    // The decoding step's target token and where its head-averaged attention
    // went; the trace stores [max, mean], the table prints mean first.
    std::cout << std::left << std::setw(16) << "token";
    if (cfg.pooling == Pooling::mean_max) {
        std::cout << std::right << std::setw(8) << "mean" << std::setw(8) << "max" << "\n";
    } else {
        std::cout << std::right << std::setw(8) << pooling_name(cfg.pooling) << "\n";
    }
    for (int t = 0; t < trace.steps; ++t) {
        std::cout << std::left << std::setw(16) << tokens[static_cast<std::size_t>(t)] << std::right
                  << std::fixed << std::setprecision(2);
        if (cfg.pooling == Pooling::mean_max) {
            std::cout << std::setw(8) << trace.head_avg[static_cast<std::size_t>(t) * 2 + 1] << std::setw(8)
                      << trace.head_avg[static_cast<std::size_t>(t) * 2 + 0];
        } else {
            std::cout << std::setw(8) << trace.head_avg[static_cast<std::size_t>(t)];
        }
        std::cout << "\n";
        std::cout.unsetf(std::ios::fixed);
    }
    std::cout << "trace written to " << output << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mean-max attention autoencoder: unsupervised sentence embeddings"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key=value config file; flags override file values");

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train on a one-sentence-per-line corpus");
    train_cmd->add_option("--corpus", ta.corpus, "training corpus, one sentence per line")->required();
    train_cmd->add_option("--dev", ta.dev, "development corpus for early stopping")->required();
    train_cmd->add_option("--checkpoint", ta.checkpoint, "output checkpoint path")->required();
    train_cmd->add_option("--vectors", ta.vectors, "pretrained word-vector text file");
    train_cmd->add_option("--log", ta.log_path, "training log path (default: <checkpoint>.log.jsonl)");
    train_cmd->add_option("--vocab-file", ta.vocab_path, "vocab file path (default: <checkpoint>.vocab)");
    train_cmd->add_option("--d-w", ta.model.d_w, "word/position embedding width")->capture_default_str();
    train_cmd->add_option("--d-m", ta.model.d_m, "hidden width (paper: 2048)")->capture_default_str();
    train_cmd->add_option("--d-f", ta.model.d_f, "feed-forward inner width (paper: 4096)")->capture_default_str();
    train_cmd->add_option("--heads", ta.model.heads, "attention heads (paper: 8)")->capture_default_str();
    train_cmd->add_option("--t-max", ta.model.t_max, "maximum sentence length incl EOS")->capture_default_str();
    train_cmd->add_option("--n-blocks", ta.model.n_blocks, "encoder depth, ablation only")->capture_default_str();
    train_cmd->add_option("--dropout", ta.model.dropout, "dropout rate (paper: 0.5)")->capture_default_str();
    train_cmd->add_option("--pooling", ta.pooling, "mean|max|meanmax")->capture_default_str();
    train_cmd->add_option("--lr", ta.train.lr, "Adam learning rate (paper: 2e-4)")->capture_default_str();
    train_cmd->add_option("--clip", ta.train.clip_norm, "gradient-norm threshold (paper: 5)")->capture_default_str();
    train_cmd->add_option("--batch-size", ta.train.batch_size, "mini-batch size (paper: 64)")->capture_default_str();
    train_cmd->add_option("--patience", ta.train.patience, "early-stopping patience, epochs")->capture_default_str();
    train_cmd->add_option("--max-epochs", ta.train.max_epochs, "epoch cap")->capture_default_str();
    train_cmd->add_option("--vocab-size", ta.train.vocab_size, "vocabulary cap incl specials (paper: 21583)")
        ->capture_default_str();
    train_cmd->add_option("--seed", ta.train.seed, "seed for init/shuffle/dropout")->capture_default_str();
    train_cmd->add_flag("--no-exact-match", ta.no_exact_match, "skip the greedy exact-match dev metric");
    train_cmd->add_option("--preset", ta.preset, "desk|paper size profile")->capture_default_str();

    std::string checkpoint, input, output, vectors, task, data, train_data, test_data, sentence;
    int threads = 0, max_len = 0, probe_epochs = 500;
    double probe_l2 = 1e-3;

    auto* encode_cmd = app.add_subcommand("encode", "embed sentences, one per input line");
    encode_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    encode_cmd->add_option("--input", input, "sentences, one per line")->required();
    encode_cmd->add_option("--output", output, "TSV output: line-number then 2*d_m floats")->required();
    encode_cmd->add_option("--vectors", vectors, "expand the encoder vocabulary from this vector file");
    encode_cmd->add_option("--threads", threads, "worker threads (0 = auto)")->capture_default_str();

    auto* rec_cmd = app.add_subcommand("reconstruct", "greedy-decode each sentence from its own embedding");
    rec_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    rec_cmd->add_option("--input", input, "sentences, one per line")->required();
    rec_cmd->add_option("--max-len", max_len, "decode cap (default t_max)");

    auto* eval_cmd = app.add_subcommand("eval", "similarity correlations or a classification probe");
    eval_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    eval_cmd->add_option("--task", task, "similarity|probe")->required();
    eval_cmd->add_option("--data", data, "similarity TSV: sentence_a<TAB>sentence_b<TAB>score");
    eval_cmd->add_option("--train-data", train_data, "probe TSV: label<TAB>sentence");
    eval_cmd->add_option("--test-data", test_data, "probe TSV: label<TAB>sentence");
    eval_cmd->add_option("--l2", probe_l2, "probe L2 penalty")->capture_default_str();
    eval_cmd->add_option("--epochs", probe_epochs, "probe GD epochs")->capture_default_str();
    eval_cmd->add_option("--output", output, "also write the JSON lines here");

    auto* inspect_cmd = app.add_subcommand("inspect-attention", "pooled-memory attention heatmap for a sentence");
    inspect_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    inspect_cmd->add_option("--sentence", sentence, "sentence to trace")->required();
    inspect_cmd->add_option("--output", output, "JSON trace path")->required();

    try {
        app.parse(argc, argv);
        if (train_cmd->parsed()) {
            if (ta.preset == "paper") {
                if (train_cmd->count("--d-m") == 0) ta.model.d_m = 2048;
                if (train_cmd->count("--d-f") == 0) ta.model.d_f = 4096;
                if (train_cmd->count("--heads") == 0) ta.model.heads = 8;
            } else if (ta.preset != "desk") {
                throw ConfigError("unknown preset \"" + ta.preset + "\" (desk|paper)");
            }
            ta.model.seed = ta.train.seed;
            return cmd_train(ta);
        }
        if (encode_cmd->parsed()) return cmd_encode(checkpoint, input, output, vectors, threads);
        if (rec_cmd->parsed()) return cmd_reconstruct(checkpoint, input, max_len);
        if (eval_cmd->parsed()) {
            return cmd_eval(checkpoint, task, data, train_data, test_data, probe_l2, probe_epochs, output);
        }
        if (inspect_cmd->parsed()) return cmd_inspect_attention(checkpoint, sentence, output);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
