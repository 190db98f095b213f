#include "sparsevd/varlayers.hpp"

#include <algorithm>
#include <stdexcept>

#include "sparsevd/ortho.hpp"

namespace sparsevd {

const char* const kGateNames[kGates] = {"i", "o", "f", "g"};

NoiseMode parse_mode(const std::string& name) {
    if (name == "none") return NoiseMode::kNone;
    if (name == "vbd") return NoiseMode::kVbd;
    if (name == "sparse-vd") return NoiseMode::kSparseVd;
    throw std::invalid_argument("mode must be none, vbd or sparse-vd, got '" + name + "'");
}

std::string mode_name(NoiseMode m) {
    switch (m) {
        case NoiseMode::kNone: return "none";
        case NoiseMode::kVbd: return "vbd";
        case NoiseMode::kSparseVd: return "sparse-vd";
    }
    return "?";
}

LSTMVarParams make_lstm(Rng& rng, int n, int m, double logS2Init) {
    if (n < 1 || m < 1) throw std::invalid_argument("make_lstm: bad sizes");
    LSTMVarParams p;
    for (int gate = 0; gate < kGates; ++gate) {
        p.Wx[gate] = VariationalWeight::with_init(orthogonal_init(rng, n, m), logS2Init);
        p.Wh[gate] = VariationalWeight::with_init(orthogonal_init(rng, m, m), logS2Init);
        p.bias[gate] = Tensor({m});
    }
    p.h0 = Tensor({m});
    p.c0 = Tensor({m});
    return p;
}

Tensor vbd_mask(Rng& rng, double p, Shape shape) {
    if (p < 0.0 || p >= 1.0)
        throw std::invalid_argument("vbd_mask: drop rate must be in [0, 1), got " +
                                    std::to_string(p));
    Tensor out(std::move(shape));
    double survivor = 1.0 / (1.0 - p);
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = rng.uniform() < p ? 0.0 : survivor;
    return out;
}

LstmNoise sample_lstm_noise(Rng& rng, NoiseMode mode, int batch, int n, int m, double pX,
                            double pH) {
    LstmNoise noise;
    noise.mode = mode;
    if (mode == NoiseMode::kSparseVd) {
        for (int gate = 0; gate < kGates; ++gate) {
            noise.inputEps[gate] = rng.normal_tensor({batch, m});
            noise.hiddenEps[gate] = rng.normal_tensor({m, m});
        }
    } else if (mode == NoiseMode::kVbd) {
        for (int gate = 0; gate < kGates; ++gate) {
            if (pX > 0.0) noise.maskX[gate] = vbd_mask(rng, pX, {batch, n});
            if (pH > 0.0) noise.maskH[gate] = vbd_mask(rng, pH, {batch, m});
        }
    }
    return noise;
}

LstmNodes bind_lstm(Graph& g, LSTMVarParams& p) {
    LstmNodes nodes;
    for (int gate = 0; gate < kGates; ++gate) {
        nodes.wx[gate] = {g.param(p.Wx[gate].M), g.param(p.Wx[gate].logS2)};
        nodes.wh[gate] = {g.param(p.Wh[gate].M), g.param(p.Wh[gate].logS2)};
        nodes.bias[gate] = g.param(p.bias[gate]);
    }
    nodes.h0 = g.param(p.h0);
    nodes.c0 = g.param(p.c0);
    return nodes;
}

int local_reparam_matmul(Graph& g, int x, const VwNodes& vw, int eps) {
    int mean = g.matmul(x, vw.M);
    int var = g.matmul(g.square(x), g.exp(vw.logS2));
    return g.add(mean, g.mul(g.sqrt_gate(var, kVarFloor), eps));
}

int sample_weight_matrix(Graph& g, const VwNodes& vw, int eps) {
    int sd = g.exp(g.scale(vw.logS2, 0.5));
    return g.add(vw.M, g.mul(sd, eps));
}

LstmStepCtx bind_lstm_noise(Graph& g, const LstmNodes& nodes, const LstmNoise& noise) {
    LstmStepCtx ctx;
    ctx.mode = noise.mode;
    for (int gate = 0; gate < kGates; ++gate) {
        if (noise.mode == NoiseMode::kSparseVd) {
            ctx.whHat[gate] =
                sample_weight_matrix(g, nodes.wh[gate], g.input(noise.hiddenEps[gate]));
            ctx.wxVar[gate] = g.exp(nodes.wx[gate].logS2);
            ctx.inputEps[gate] = g.input(noise.inputEps[gate]);
        } else {
            ctx.whHat[gate] = nodes.wh[gate].M;
            if (noise.maskX[gate].size() > 0) ctx.maskX[gate] = g.input(noise.maskX[gate]);
            if (noise.maskH[gate].size() > 0) ctx.maskH[gate] = g.input(noise.maskH[gate]);
        }
    }
    bool masked = false;
    for (int gate = 0; gate < kGates; ++gate)
        if (ctx.maskX[gate] >= 0 || ctx.maskH[gate] >= 0) masked = true;
    ctx.fused = !masked;
    if (ctx.fused) {
        ctx.whCat = g.concat_cols(g.concat_cols(ctx.whHat[0], ctx.whHat[1]),
                                  g.concat_cols(ctx.whHat[2], ctx.whHat[3]));
        ctx.wxMCat = g.concat_cols(g.concat_cols(nodes.wx[0].M, nodes.wx[1].M),
                                   g.concat_cols(nodes.wx[2].M, nodes.wx[3].M));
        ctx.biasCat = g.concat_cols(g.concat_cols(nodes.bias[0], nodes.bias[1]),
                                    g.concat_cols(nodes.bias[2], nodes.bias[3]));
        if (noise.mode == NoiseMode::kSparseVd) {
            ctx.wxVarCat = g.concat_cols(g.concat_cols(ctx.wxVar[0], ctx.wxVar[1]),
                                         g.concat_cols(ctx.wxVar[2], ctx.wxVar[3]));
            int batch = noise.inputEps[0].rows();
            int m = noise.inputEps[0].cols();
            Tensor cat = Tensor::uninit({batch, kGates * m});
            for (int gate = 0; gate < kGates; ++gate)
                for (int r = 0; r < batch; ++r)
                    std::copy(noise.inputEps[gate].data() + static_cast<std::size_t>(r) * m,
                              noise.inputEps[gate].data() + static_cast<std::size_t>(r + 1) * m,
                              cat.data() + static_cast<std::size_t>(r) * (kGates * m) +
                                  static_cast<std::size_t>(gate) * m);
            ctx.inputEpsCat = g.input(std::move(cat));
        }
    }
    return ctx;
}

LstmState lstm_initial_state(Graph& g, const LstmNodes& nodes, int batch) {
    return {g.broadcast_row(nodes.h0, batch), g.broadcast_row(nodes.c0, batch)};
}

namespace {

// combine per-gate preactivations into the state update
LstmState finish_step(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx,
                      const int xpre[kGates], LstmState prev) {
    int act[kGates];
    for (int gate = 0; gate < kGates; ++gate) {
        int hIn = prev.h;
        if (ctx.maskH[gate] >= 0) hIn = g.mul(hIn, ctx.maskH[gate]);
        int pre = g.add_row(g.add(xpre[gate], g.matmul(hIn, ctx.whHat[gate])),
                            nodes.bias[gate]);
        act[gate] = gate == 3 ? g.tanh(pre) : g.sigmoid(pre);
    }
    int c = g.add(g.mul(act[2], prev.c), g.mul(act[0], act[3]));
    int h = g.mul(act[1], g.tanh(c));
    return {h, c};
}

}  // namespace

namespace {

// shared tail of the fused path: one recurrence matmul over the glued gate
// weights, then the cell update in two nodes
LstmState fused_tail(Graph& g, const LstmStepCtx& ctx, int xpre, LstmState prev) {
    int pre = g.add_row(g.add(xpre, g.matmul(prev.h, ctx.whCat)), ctx.biasCat);
    int c = g.lstm_cell_c(pre, prev.c);
    int h = g.lstm_cell_h(c, pre);
    return {h, c};
}

}  // namespace

LstmState lstm_step(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx, int x,
                    LstmState prev) {
    if (ctx.fused) {
        int xpre;
        if (ctx.mode == NoiseMode::kSparseVd) {
            int mean = g.matmul(x, ctx.wxMCat);
            int var = g.matmul(g.square(x), ctx.wxVarCat);
            xpre = g.add(mean, g.mul(g.sqrt_gate(var, kVarFloor), ctx.inputEpsCat));
        } else {
            xpre = g.matmul(x, ctx.wxMCat);
        }
        return fused_tail(g, ctx, xpre, prev);
    }
    int xpre[kGates];
    for (int gate = 0; gate < kGates; ++gate) {
        int xIn = x;
        if (ctx.maskX[gate] >= 0) xIn = g.mul(xIn, ctx.maskX[gate]);
        if (ctx.mode == NoiseMode::kSparseVd) {
            int mean = g.matmul(xIn, nodes.wx[gate].M);
            int var = g.matmul(g.square(xIn), ctx.wxVar[gate]);
            xpre[gate] =
                g.add(mean, g.mul(g.sqrt_gate(var, kVarFloor), ctx.inputEps[gate]));
        } else {
            xpre[gate] = g.matmul(xIn, nodes.wx[gate].M);
        }
    }
    return finish_step(g, nodes, ctx, xpre, prev);
}

LstmState lstm_step_indices(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx,
                            const std::vector<int>& idx, LstmState prev) {
    if (ctx.fused) {
        int xpre;
        if (ctx.mode == NoiseMode::kSparseVd) {
            // one-hot input: x W is a row gather, x^2 sigma^2 likewise
            int mean = g.gather_rows(ctx.wxMCat, idx);
            int var = g.gather_rows(ctx.wxVarCat, idx);
            xpre = g.add(mean, g.mul(g.sqrt_gate(var, kVarFloor), ctx.inputEpsCat));
        } else {
            xpre = g.gather_rows(ctx.wxMCat, idx);
        }
        return fused_tail(g, ctx, xpre, prev);
    }
    int xpre[kGates];
    for (int gate = 0; gate < kGates; ++gate) {
        if (ctx.maskX[gate] >= 0)
            throw std::invalid_argument("lstm_step_indices: input masks need dense inputs");
        if (ctx.mode == NoiseMode::kSparseVd) {
            int mean = g.gather_rows(nodes.wx[gate].M, idx);
            int var = g.gather_rows(ctx.wxVar[gate], idx);
            xpre[gate] =
                g.add(mean, g.mul(g.sqrt_gate(var, kVarFloor), ctx.inputEps[gate]));
        } else {
            xpre[gate] = g.gather_rows(nodes.wx[gate].M, idx);
        }
    }
    return finish_step(g, nodes, ctx, xpre, prev);
}

std::vector<LstmState> lstm_forward(Graph& g, const LstmNodes& nodes, const LstmStepCtx& ctx,
                                    const std::vector<int>& xNodes, int batch) {
    if (xNodes.empty()) throw std::invalid_argument("lstm_forward: empty sequence");
    std::vector<LstmState> states;
    states.reserve(xNodes.size());
    LstmState s = lstm_initial_state(g, nodes, batch);
    for (int x : xNodes) {
        s = lstm_step(g, nodes, ctx, x, s);
        states.push_back(s);
    }
    return states;
}

std::vector<LstmState> lstm_forward_indices(Graph& g, const LstmNodes& nodes,
                                            const LstmStepCtx& ctx,
                                            const std::vector<std::vector<int>>& steps) {
    if (steps.empty()) throw std::invalid_argument("lstm_forward_indices: empty sequence");
    std::vector<LstmState> states;
    states.reserve(steps.size());
    LstmState s = lstm_initial_state(g, nodes, static_cast<int>(steps[0].size()));
    for (const auto& idx : steps) {
        s = lstm_step_indices(g, nodes, ctx, idx, s);
        states.push_back(s);
    }
    return states;
}

int variational_dense(Graph& g, int x, const VwNodes& vw, int bias, int eps, int maskInput) {
    int xIn = maskInput >= 0 ? g.mul(x, maskInput) : x;
    int out = eps >= 0 ? local_reparam_matmul(g, xIn, vw, eps) : g.matmul(xIn, vw.M);
    return g.add_row(out, bias);
}

}  // namespace sparsevd
