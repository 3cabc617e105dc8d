#include "mmae/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>

namespace mmae {

namespace {

using json = nlohmann::ordered_json;

std::vector<std::vector<int>> encode_corpus(const std::vector<std::string>& sentences, const Vocab& vocab,
                                            int t_max, int* skipped) {
    std::vector<std::vector<int>> out;
    int dropped = 0;
    for (const auto& s : sentences) {
        auto ids = encode_sentence(s, vocab);
        if (static_cast<int>(ids.size()) > t_max) {
            ++dropped;
            continue;
        }
        out.push_back(std::move(ids));
    }
    if (skipped != nullptr) *skipped = dropped;
    return out;
}

double dev_accuracy(const ModelConfig& cfg, ModelParams& params, const std::vector<std::vector<int>>& dev,
                    int batch_size) {
    long long tokens = 0;
    double correct = 0;
    for (std::size_t start = 0; start < dev.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(dev.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::vector<int>> group(dev.begin() + static_cast<std::ptrdiff_t>(start),
                                            dev.begin() + static_cast<std::ptrdiff_t>(stop));
        Batch batch = make_batch(group);
        EvalStats stats = reconstruct_teacher_forced(cfg, params, batch, false, nullptr, false);
        correct += stats.accuracy * static_cast<double>(stats.tokens);
        tokens += stats.tokens;
    }
    return tokens == 0 ? 0.0 : correct / static_cast<double>(tokens);
}

double dev_exact_match(const ModelConfig& cfg, const ModelParams& params, const std::vector<std::vector<int>>& dev) {
    if (dev.empty()) return 0.0;
    int exact = 0;
    for (const auto& ids : dev) {
        Tensor z = encode_ids<float>(cfg, params, ids);
        const auto decoded = greedy_decode(cfg, params, z, cfg.t_max);
        if (decoded == ids) ++exact;
    }
    return static_cast<double>(exact) / static_cast<double>(dev.size());
}

Checkpoint snapshot(const ModelConfig& mcfg, const TrainConfig& tcfg, const Vocab& vocab, const ModelParams& params,
                    const AdamState& adam, int epoch, long long steps, double best_dev_acc) {
    Checkpoint ckpt;
    ckpt.model = mcfg;
    ckpt.train = tcfg;
    ckpt.vocab = vocab;
    ckpt.params = params;
    if (!adam.m.empty()) ckpt.adam = adam;  // absent until the first step
    ckpt.epoch = epoch;
    ckpt.steps = steps;
    ckpt.best_dev_acc = best_dev_acc;
    return ckpt;
}

}  // namespace

double clip_gradients(const std::vector<std::pair<std::string, Tensor*>>& params, double threshold) {
    if (threshold <= 0) throw ConfigError("clip_gradients: threshold must be positive");
    double sq_sum = 0;
    for (const auto& [name, tensor] : params) {
        for (float g : tensor->grad) sq_sum += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq_sum);
    if (!std::isfinite(norm)) throw NumericError("clip_gradients: non-finite gradient norm");
    if (norm > threshold) {
        const float scale = static_cast<float>(threshold / norm);
        for (const auto& [name, tensor] : params) {
            for (float& g : tensor->grad) g *= scale;
        }
    }
    return norm;
}

void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params, AdamState& state, double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].second->size(), 0.0f);
            state.v[i].assign(params[i].second->size(), 0.0f);
        }
    }
    if (state.m.size() != params.size()) {
        throw DataError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                        " tensors, got " + std::to_string(params.size()));
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = *params[i].second;
        if (state.m[i].size() != t.size()) {
            throw DataError("adam_step: state shape mismatch for " + params[i].first);
        }
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double g = t.grad[j];
            const double m = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
            const double v = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
            state.m[i][j] = static_cast<float>(m);
            state.v[i][j] = static_cast<float>(v);
            t.data[j] -= static_cast<float>(lr * (m / bc1) / (std::sqrt(v / bc2) + state.eps));
        }
    }
}

TrainResult train(const std::vector<std::string>& corpus, const std::vector<std::string>& dev, ModelConfig mcfg,
                  const TrainConfig& tcfg, const std::string& vectors_path, std::ostream* log,
                  const Checkpoint* resume, std::ostream* console) {
    const auto t_start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count(); };

    if (dev.empty()) throw DataError("train: development set is empty");

    TrainResult result;
    Vocab vocab;
    ModelParams params;
    AdamState adam;
    long long step = 0;
    int start_epoch = 0;
    if (resume != nullptr) {
        vocab = resume->vocab;
        mcfg = resume->model;
        params = resume->params;
        if (resume->adam.has_value()) adam = *resume->adam;
        step = resume->steps;
        start_epoch = resume->epoch;
    } else {
        vocab = build_vocab(corpus, tcfg.vocab_size);
        mcfg.vocab = vocab.size();
        mcfg.validate();
        VectorFileStats emb_stats;
        EmbeddingTable table = init_embedding_table(vocab, mcfg.d_w, mcfg.seed, vectors_path, &emb_stats);
        params = init_params(mcfg, table);
        if (console != nullptr && !vectors_path.empty()) {
            *console << "embeddings: " << emb_stats.loaded << " pretrained, " << emb_stats.missing
                     << " random, " << emb_stats.duplicates << " duplicate file rows\n";
        }
    }

    auto train_ids = encode_corpus(corpus, vocab, mcfg.t_max, &result.skipped_train);
    auto dev_ids = encode_corpus(dev, vocab, mcfg.t_max, &result.skipped_dev);
    if (train_ids.empty()) throw DataError("train: no usable training sentences (all empty or over-length)");
    if (dev_ids.empty()) throw DataError("train: no usable dev sentences");
    if (console != nullptr && (result.skipped_train > 0 || result.skipped_dev > 0)) {
        *console << "skipped over-length sentences: train " << result.skipped_train << ", dev "
                 << result.skipped_dev << "\n";
    }

    double best_acc = dev_accuracy(mcfg, params, dev_ids, tcfg.batch_size);
    result.best = snapshot(mcfg, tcfg, vocab, params, adam, start_epoch, step, best_acc);
    result.best_epoch = start_epoch;
    if (console != nullptr) *console << "initial dev accuracy " << best_acc << "\n";

    params.ensure_grads();
    auto trainable = params.trainable();

    int stale_epochs = 0;
    int epoch = start_epoch;
    for (; epoch < tcfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_ids.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(Rng::mix(Rng::mix(tcfg.seed, 0x0df5), static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        Rng dropout_rng(Rng::mix(Rng::mix(tcfg.seed, 0xd70b), static_cast<std::uint64_t>(epoch)));

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tcfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(tcfg.batch_size));
            std::vector<std::vector<int>> group;
            group.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) group.push_back(train_ids[order[i]]);
            Batch batch = make_batch(group);

            params.zero_grads();
            EvalStats stats = reconstruct_teacher_forced(mcfg, params, batch, true, &dropout_rng, true);
            if (!std::isfinite(stats.loss)) {
                if (!tcfg.diagnostic_path.empty()) {
                    save_checkpoint(snapshot(mcfg, tcfg, vocab, params, adam, epoch, step, best_acc),
                                    tcfg.diagnostic_path);
                }
                throw NumericError("train: non-finite loss at step " + std::to_string(step + 1) +
                                   (tcfg.diagnostic_path.empty() ? "" : "; state dumped to " + tcfg.diagnostic_path));
            }
            const double grad_norm = clip_gradients(trainable, tcfg.clip_norm);
            adam_step(trainable, adam, tcfg.lr);
            ++step;

            if (log != nullptr) {
                json line{{"step", step},         {"epoch", epoch},
                          {"loss", stats.loss},   {"acc", stats.accuracy},
                          {"grad_norm", grad_norm}, {"seconds", elapsed()}};
                *log << line.dump() << '\n';
            }
        }

        const double acc = dev_accuracy(mcfg, params, dev_ids, tcfg.batch_size);
        if (console != nullptr) {
            *console << "epoch " << epoch << " dev accuracy " << acc;
            if (tcfg.log_exact_match) *console << " exact-match " << dev_exact_match(mcfg, params, dev_ids);
            *console << "\n";
        }
        if (acc > best_acc) {
            best_acc = acc;
            result.best = snapshot(mcfg, tcfg, vocab, params, adam, epoch + 1, step, best_acc);
            result.best_epoch = epoch + 1;
            stale_epochs = 0;
        } else {
            ++stale_epochs;
            if (stale_epochs >= tcfg.patience) {
                ++epoch;
                break;
            }
        }
    }

    result.last = snapshot(mcfg, tcfg, vocab, params, adam, epoch, step, best_acc);
    result.steps = step;
    result.epochs_run = epoch - start_epoch;
    return result;
}

TrainResult train_files(const std::string& corpus_path, const std::string& dev_path, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, const std::string& vectors_path, std::ostream* log,
                        std::ostream* console) {
    return train(read_corpus_lines(corpus_path), read_corpus_lines(dev_path), model_cfg, train_cfg, vectors_path,
                 log, nullptr, console);
}

}  // namespace mmae
