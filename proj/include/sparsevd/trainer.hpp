#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sparsevd/model.hpp"

namespace sparsevd {

// The loss went NaN/Inf; the run stops with the last finished epoch's
// checkpoint still on disk.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A corpus/checkpoint file is missing, unreadable, or unusable.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::string task = "charlm";   // charlm | sentiment
    std::string mode = "none";     // none | vbd | sparse-vd
    int hiddenSize = 32;
    int embedSize = 16;            // sentiment only
    int batchSize = 32;
    int epochs = 1;
    int seqLen = 50;               // charlm window / sentiment padded length
    double learningRate = 1e-3;
    double clipThreshold = 1.0;
    double vbdRate = 0.0;
    double weightDecay = 0.0;
    double klScale = 1.0;
    int klWarmupEpochs = 0;        // 0 = no warm-up
    int snapshotEpoch = 0;         // 0 = off; else save checkpoint-epochN.bin too
    std::uint64_t seed = 1;
    std::string initFrom;          // optional dense checkpoint to start from
    std::string dataTrain, dataValid, dataTest;
    std::string outDir = ".";

    void validate() const;  // throws std::invalid_argument naming the offending key
};

// Builds a config from key=value pairs (file lines and command-line overrides
// alike). Later pairs win; unknown keys and unparsable values are rejected by
// name.
TrainConfig config_from_pairs(const std::vector<std::pair<std::string, std::string>>& kv);

// Full key set in canonical order; embedding this in a manifest is enough to
// re-run the job.
ojson config_echo(const TrainConfig& cfg);

struct AdamState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    long step = 0;
    std::vector<Tensor> m1, m2;  // per-parameter moment accumulators

    void init(const std::vector<NamedTensor>& params);
};

// In-place bias-corrected Adam update. Rejects non-finite gradients by
// parameter name without touching anything.
void adam_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr);

double global_grad_norm(const std::vector<Tensor>& grads);

// Global-norm clipping: if ||g|| > threshold every gradient is scaled by
// threshold/||g||. Returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& grads, double threshold);

struct TrainResult {
    std::string checkpointPath;      // state after the last finished epoch
    std::string bestCheckpointPath;  // best validation quality
    std::string snapshotPath;        // "" unless snapshotEpoch fired
    std::string metricsPath;
    int bestEpoch = 0;
    double bestValid = 0;
    double finalTrainLoss = 0;
    double finalValid = 0;
    double finalTest = 0;
    std::vector<std::string> metricsLines;  // exactly what went into the file
};

// Full run: load data, build (or restore) the model, then per epoch shuffle,
// sample noise per minibatch, minimize the bound, clip, step; evaluate with
// mean weights; append one metrics line; save checkpoints (last / best /
// optional snapshot).
TrainResult train(const TrainConfig& cfg);

}  // namespace sparsevd
