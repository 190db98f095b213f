#pragma once

#include <string>
#include <vector>

#include "sparsevd/graph.hpp"
#include "sparsevd/rng.hpp"
#include "sparsevd/varweight.hpp"

namespace sparsevd {

enum class NoiseMode { kNone, kVbd, kSparseVd };

NoiseMode parse_mode(const std::string& name);  // "none" | "vbd" | "sparse-vd"
std::string mode_name(NoiseMode m);

// Gate order everywhere: i (input), o (output), f (forget), g (modulation).
constexpr int kGates = 4;
extern const char* const kGateNames[kGates];

// Floor inside the sqrt of the preactivation variance: anything below it is
// treated as exactly zero variance (value and derivative), so a collapsed
// posterior reproduces the deterministic forward bit-for-bit close.
constexpr double kVarFloor = 1e-16;

struct LSTMVarParams {
    VariationalWeight Wx[kGates];  // [n x m]
    VariationalWeight Wh[kGates];  // [m x m]
    Tensor bias[kGates];           // [m], deterministic (no posterior)
    Tensor h0, c0;                 // [m], trainable, deterministic

    int inputSize() const { return Wx[0].M.rows(); }
    int hiddenSize() const { return Wh[0].M.rows(); }
};

// Orthogonal means, zero biases, zero initial state, logS2 constant.
LSTMVarParams make_lstm(Rng& rng, int n, int m, double logS2Init);

// Binary mask with entries 0 (probability p) or 1/(1-p); E[mask] = 1.
Tensor vbd_mask(Rng& rng, double p, Shape shape);

// One minibatch's noise realization; sampled once, reused by every time step.
struct LstmNoise {
    NoiseMode mode = NoiseMode::kNone;
    Tensor inputEps[kGates];   // [batch x m] standard normal (sparse-vd)
    Tensor hiddenEps[kGates];  // [m x m] standard normal (sparse-vd)
    Tensor maskX[kGates];      // [batch x n] binary masks (vbd); empty = identity
    Tensor maskH[kGates];      // [batch x m]
};

// pX / pH are the vbd drop rates for input and hidden neurons; a rate of 0
// skips that mask entirely.
LstmNoise sample_lstm_noise(Rng& rng, NoiseMode mode, int batch, int n, int m,
                            double pX, double pH);

// ---- graph-side handles ----

struct VwNodes {
    int M = -1;
    int logS2 = -1;
};

struct LstmNodes {
    VwNodes wx[kGates], wh[kGates];
    int bias[kGates] = {-1, -1, -1, -1};
    int h0 = -1, c0 = -1;
};

// Pushes every trainable tensor of the layer as a graph parameter.
LstmNodes bind_lstm(Graph& g, LSTMVarParams& p);

// out = x'M + eps . sqrt(x'^2 sigma^2), the preactivation-noise form of the
// input-to-hidden product.
int local_reparam_matmul(Graph& g, int x, const VwNodes& vw, int eps);

// W = M + exp(logS2/2) . eps, one weight sample per minibatch.
int sample_weight_matrix(Graph& g, const VwNodes& vw, int eps);

// Per-minibatch subgraph shared by all time steps: sampled hidden weights,
// cached variance matrices, noise/mask input nodes.
struct LstmStepCtx {
    NoiseMode mode = NoiseMode::kNone;
    int whHat[kGates] = {-1, -1, -1, -1};     // weights the recurrence multiplies
    int wxVar[kGates] = {-1, -1, -1, -1};     // exp(logS2) of Wx (sparse-vd)
    int inputEps[kGates] = {-1, -1, -1, -1};  // [batch x m] or -1
    int maskX[kGates] = {-1, -1, -1, -1};
    int maskH[kGates] = {-1, -1, -1, -1};
    // When no per-gate masks are in play the gate weights are also glued
    // column-wise (order i, o, f, g) so each step runs one matmul or gather
    // plus a fused cell update instead of four of everything.
    bool fused = false;
    int whCat = -1;        // [m x 4m]
    int wxMCat = -1;       // [n x 4m]
    int wxVarCat = -1;     // [n x 4m] (sparse-vd)
    int biasCat = -1;      // [4m]
    int inputEpsCat = -1;  // [batch x 4m] (sparse-vd)
};

LstmStepCtx bind_lstm_noise(Graph& g, const LstmNodes& nodes, const LstmNoise& noise);

struct LstmState {
    int h = -1, c = -1;
};

LstmState lstm_initial_state(Graph& g, const LstmNodes& nodes, int batch);

// One recurrence step on a dense input node x [batch x n].
LstmState lstm_step(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx, int x,
                    LstmState prev);

// One step where the inputs are token indices (rows of a one-hot matrix), so
// x W reduces to a row gather of W.
LstmState lstm_step_indices(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx,
                            const std::vector<int>& idx, LstmState prev);

// Whole unrolled sequence; returns the state after every step.
std::vector<LstmState> lstm_forward(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx,
                                    const std::vector<int>& xNodes, int batch);
std::vector<LstmState> lstm_forward_indices(Graph& g, const LstmNodes& nodes,
                                            const LstmStepCtx& ctx,
                                            const std::vector<std::vector<int>>& steps);

// x (optionally masked) through a dense head: local reparameterization when
// eps >= 0, plain mean weights otherwise; bias always added.
int variational_dense(Graph& g, int x, const VwNodes& vw, int bias, int eps, int maskInput);

}  // namespace sparsevd
