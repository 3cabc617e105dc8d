#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmae/model.hpp"

namespace mmae {

struct TrainConfig {
    double lr = 2e-4;       // Adam learning rate
    double clip_norm = 5.0; // global gradient-norm threshold
    int batch_size = 64;
    int patience = 3;       // epochs without dev improvement before stopping
    int max_epochs = 10;
    std::uint64_t seed = 42;
    int vocab_size = 21583;
    bool log_exact_match = true;  // greedy exact-match on dev, logged only
    std::string diagnostic_path;  // dump state here if the loss goes non-finite
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::vector<std::vector<float>> m;  // parallel to the trainable manifest
    std::vector<std::vector<float>> v;
};

// Scales every gradient by threshold/norm when the global L2 norm exceeds the
// threshold. Returns the pre-clip norm.
double clip_gradients(const std::vector<std::pair<std::string, Tensor*>>& params, double threshold);

// Bias-corrected Adam update over the params' grad slots.
void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params, AdamState& state, double lr);

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    Vocab vocab;
    ModelParams params;
    std::optional<AdamState> adam;
    int epoch = 0;  // completed epochs
    long long steps = 0;
    double best_dev_acc = 0;
};

// One JSON header line (configs, vocab, provenance tags, manifest), then raw
// little-endian f32 arrays in manifest order. save/load round-trips bit-exact.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
    Checkpoint best;  // highest dev teacher-forced accuracy seen
    Checkpoint last;  // state after the final epoch (resume point)
    int best_epoch = 0;
    long long steps = 0;
    int epochs_run = 0;
    int skipped_train = 0;  // over-length sentences dropped, never truncated
    int skipped_dev = 0;
};

// Seeded-shuffle epochs of teacher-forced minibatches with gradient clipping
// and Adam; keeps the best-dev checkpoint and stops after `patience` epochs
// without improvement. `log` receives one JSON object per step:
// {step, epoch, loss, acc, grad_norm, seconds}.
TrainResult train(const std::vector<std::string>& corpus, const std::vector<std::string>& dev,
                  ModelConfig model_cfg, const TrainConfig& train_cfg, const std::string& vectors_path = {},
                  std::ostream* log = nullptr, const Checkpoint* resume = nullptr, std::ostream* console = nullptr);

TrainResult train_files(const std::string& corpus_path, const std::string& dev_path, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, const std::string& vectors_path = {},
                        std::ostream* log = nullptr, std::ostream* console = nullptr);

}  // namespace mmae
