#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sparsevd/datatext.hpp"
#include "sparsevd/graph.hpp"
#include "sparsevd/ortho.hpp"
#include "sparsevd/rng.hpp"
#include "sparsevd/serialize.hpp"
#include "sparsevd/sparsity.hpp"
#include "sparsevd/varlayers.hpp"

namespace sparsevd {

// logS2 value written into every posterior when a run starts from a dense
// checkpoint (and the default for fresh models).
constexpr double kLogS2Init = -6.0;

// One network: an LSTM over characters (one-hot indices) with a softmax head,
// or an LSTM over embedded word tokens with a scalar regression head. Every
// weight matrix carries a posterior spread (logS2) even when the training mode
// never touches it; that keeps checkpoints a single uniform container.
struct Model {
    std::string task;  // "charlm" | "sentiment"
    Vocab vocab;
    int seqLen = 0;     // training window (charlm) / padded length (sentiment)
    int classes = 0;    // charlm: vocab.size()+1 (unk bucket); sentiment: 1
    int embedSize = 0;  // sentiment only
    LSTMVarParams lstm;
    VariationalWeight head;  // [hidden x classes]
    Tensor headBias;         // [classes]
    Tensor embed;            // [(vocab+2) x embedSize], sentiment only

    int hiddenSize() const { return lstm.hiddenSize(); }
    int inputSize() const { return lstm.inputSize(); }
};

// Zero-filled model with the right shapes (deserialization target).
Model model_skeleton(const std::string& task, const Vocab& vocab, int seqLen,
                     int hidden, int embedSize);

Model make_charlm_model(Rng& rng, const Vocab& vocab, int hidden, int seqLen,
                        double logS2Init = kLogS2Init);
Model make_sentiment_model(Rng& rng, const Vocab& vocab, int embedSize, int hidden,
                           int seqLen, double logS2Init = kLogS2Init);

// ---- parameter enumeration ----

struct NamedTensor {
    std::string name;
    Tensor* t;
};
struct NamedTensorView {
    std::string name;
    const Tensor* t;
};
struct NamedWeight {
    std::string name;
    VariationalWeight* w;
};

// Every tensor of the model in canonical order (checkpoint layout).
std::vector<NamedTensor> model_tensors(Model& model);
std::vector<NamedTensorView> model_tensors(const Model& model);

// Weights that carry a live posterior under this mode: all of them for
// charlm sparse-vd, the LSTM only for sentiment sparse-vd (the embedding and
// head keep binary masks there), none otherwise.
std::vector<NamedWeight> variational_weights(Model& model, NoiseMode mode);

// What the optimizer updates: all means, biases, state inits, the embedding,
// plus logS2 for exactly the variational set.
std::vector<NamedTensor> trainable_tensors(Model& model, NoiseMode mode);

// L2-decayed set: weight matrices whose posterior is NOT live under the mode
// (a spread-carrying weight gets its regularization from the KL term instead).
// Biases and initial states are never decayed.
std::vector<Tensor*> decayed_tensors(Model& model, NoiseMode mode);

// ---- training-graph assembly ----

struct ModelNodes {
    LstmNodes lstm;
    VwNodes head;
    int headBias = -1;
    int embed = -1;
    std::map<const Tensor*, int> nodeOf;  // master tensor -> param node
};

ModelNodes bind_model(Graph& g, Model& model);

struct BuiltLoss {
    int loss = -1;        // scalar node to run backward from
    double dataTerm = 0;  // mean per-sequence NLL over the batch
    double klTerm = 0;    // raw KL sum before scaling (0 when no posterior is live)
    double decayTerm = 0; // raw L2 sum before scaling
    ModelNodes nodes;
};

// Minimized objective for one minibatch: mean per-sequence NLL (summed over
// time steps within a sequence) + (klScale/datasetSize) * KL + weightDecay * L2.
// Consumes rng for this batch's noise; a rate of 0 disables the binary masks.
BuiltLoss build_charlm_elbo(Graph& g, Model& model, const CharBatch& batch,
                            NoiseMode mode, Rng& rng, double klScale,
                            std::int64_t datasetSize, double weightDecay,
                            double vbdRate);
BuiltLoss build_sentiment_elbo(Graph& g, Model& model, const RegBatch& batch,
                               NoiseMode mode, Rng& rng, double klScale,
                               std::int64_t datasetSize, double weightDecay,
                               double vbdRate);

// ---- deterministic mean-weight inference (no tape, no noise) ----

// Per-step logits [len x classes] for one window of character indices.
Tensor charlm_logits_mean(const Model& model, const std::vector<int>& window);
// Bits per character over every full window of the corpus.
double eval_charlm_bpc(const Model& model, const std::vector<int>& corpus,
                       int batch = 64);
double sentiment_pred_mean(const Model& model, const std::vector<int>& tokens,
                           int lastPos);
double eval_sentiment_mse(const Model& model, const RegDataset& data,
                          int batch = 64);

// ---- checkpoints ----

ojson model_to_container(const Model& model, const ojson& meta);
Model model_from_container(const ojson& root);
void save_checkpoint(const std::string& path, const Model& model, const ojson& meta);
struct LoadedCheckpoint {
    Model model;
    ojson meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies the source's means/biases/states/embedding into `fresh` (shapes and
// vocab must match; mismatches are rejected with per-tensor diagnostics) and
// resets every logS2 to kLogS2Init. Optimizer state is the caller's to reset.
void init_from_model(Model& fresh, const Model& source);

// ---- pruned model with compressed storage ----

struct SparseModel {
    std::string task;
    Vocab vocab;
    int seqLen = 0, classes = 0, embedSize = 0, hidden = 0, inputSize = 0;
    double threshold = 3.0;
    CsrMatrix wx[kGates], wh[kGates];
    bool headSparse = false;
    CsrMatrix headCsr;  // charlm (posterior-carrying head)
    Tensor headDense;   // sentiment (deterministic head)
    Tensor bias[kGates], h0, c0, headBias, embed;
    std::vector<double> sparsity;  // x, h [, y] percentages
};

// Keep/drop percentages at the threshold, grouped per matrix family:
// {x, h} for sentiment, {x, h, y} for charlm (gates aggregate).
std::vector<double> model_sparsity(const Model& model, double threshold = 3.0);

// Prunes at the log-alpha threshold and packs survivors into CSR. Only a
// sparse-vd checkpoint carries a meaningful posterior spread; other modes are
// rejected.
SparseModel sparsify(const Model& model, NoiseMode mode, double threshold = 3.0);

ojson sparse_to_container(const SparseModel& s, const ojson& meta);
SparseModel sparse_from_container(const ojson& root);

Tensor charlm_logits_sparse(const SparseModel& s, const std::vector<int>& window);
double eval_charlm_bpc_sparse(const SparseModel& s, const std::vector<int>& corpus);
double sentiment_pred_sparse(const SparseModel& s, const std::vector<int>& tokens,
                             int lastPos);
double eval_sentiment_mse_sparse(const SparseModel& s, const RegDataset& data);

}  // namespace sparsevd
