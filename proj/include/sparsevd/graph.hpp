#pragma once

#include <cstdint>
#include <vector>

#include "sparsevd/tensor.hpp"

namespace sparsevd {

// Primitive ops recorded on the tape. Each keeps enough state on its node to
// run its local gradient rule in one reverse sweep.
enum class Op : std::uint8_t {
    kInput,         // constant leaf
    kParam,         // trainable leaf, receives a gradient
    kMatmul,        // [m×k]·[k×n]
    kGatherRows,    // out[i,:] = A[itab[i],:]
    kAdd,           // same shape
    kAddRow,        // [m×n] + row vector [n]
    kBroadcastRow,  // [n] -> [itab0 × n]
    kMul,           // Hadamard
    kRowScale,      // out[r,:] = a[r,:] * s[r]
    kScale,         // out = cscalar * a
    kSigmoid,
    kTanh,
    kExp,
    kSquare,
    kSqrtGate,      // out = x < floor ? 0 : sqrt(x)
    kSum,           // scalar
    kSumSq,         // scalar sum of squares
    kLogAlpha,      // clamp(logS2 - 2 log|m|, ±20), elementwise over (a=M, b=logS2)
    kKlLogUniform,  // per-entry KL penalty as a function of log alpha
    kSoftmaxCeSum,  // scalar: sum over rows of cross-entropy at target index
    kSqErrSum,      // scalar: sum of (pred - target)^2
    kConcatCols,    // [r x ca] ++ [r x cb] -> [r x (ca+cb)]
    kLstmCellC,     // (gate preactivations [B x 4m], prev cell) -> next cell
    kLstmCellH,     // (cell node, preactivations) -> hidden output
};

struct Node {
    Op op;
    int a = -1;
    int b = -1;
    double cscalar = 0.0;       // scale factor / sqrt floor
    Tensor value;
    Tensor grad;                // allocated during backward when needed
    Tensor aux;                 // cached softmax probs / squared-error targets
    std::vector<int> itab;      // gather rows / CE target indices / broadcast count
    bool needs_grad = false;
    bool grad_ready = false;
    bool grad_fresh = false;    // grad allocated but not yet written to
};

// Reverse-mode tape. Nodes are appended in forward (topological) order during
// a pass; one backward sweep fills gradients for every param node reachable
// from the loss.
class Graph {
public:
    int input(Tensor v);
    int param(const Tensor& v);

    int matmul(int a, int b);
    int gather_rows(int a, std::vector<int> rows);
    int add(int a, int b);
    int add_row(int a, int bias);
    int broadcast_row(int v, int nrows);
    int mul(int a, int b);
    int row_scale(int a, int s);
    int scale(int a, double c);
    int sigmoid(int a);
    int tanh(int a);
    int exp(int a);
    int square(int a);
    int sqrt_gate(int a, double floor_val);
    int sum(int a);
    int sum_sq(int a);
    int log_alpha(int m, int logs2);
    int kl_log_uniform(int log_alpha_node);
    int softmax_ce_sum(int logits, std::vector<int> targets);
    int sq_err_sum(int pred, const std::vector<double>& targets);
    int concat_cols(int a, int b);
    // Fused cell-state update over gate preactivations laid out as column
    // blocks i, o, f, g. lstm_cell_c caches the activated gates; lstm_cell_h
    // must be handed that same cell node so it can reuse them.
    int lstm_cell_c(int pre, int c_prev);
    int lstm_cell_h(int cell, int pre);

    void backward(int loss);

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& grad(int id) const;
    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad_ready; }

    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    int size() const { return static_cast<int>(nodes_.size()); }
    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;

    int push(Node n);
    Node& at(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    void ensure_grad(int id);
    void backward_node(int id);
};

// Numerically stable scalar helpers shared by kernels and oracles.
double stable_sigmoid(double x);
double softplus(double x);

}  // namespace sparsevd
