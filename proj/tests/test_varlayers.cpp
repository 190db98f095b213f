#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "sparsevd/graph.hpp"
#include "sparsevd/rng.hpp"
#include "sparsevd/varlayers.hpp"

#include <cmath>
#include <cstring>
#include <vector>

using namespace sparsevd;

// ---- independent plain-LSTM oracle: scalar loops, no Graph, no Eigen ----

struct PlainLstm {
    // gate order i, o, f, g; Wx[gate] is [n][m], Wh[gate] is [m][m]
    std::vector<std::vector<double>> Wx[4], Wh[4];
    std::vector<double> bias[4], h0, c0;
    int n = 0, m = 0;

    static std::vector<std::vector<double>> grid(const Tensor& t) {
        std::vector<std::vector<double>> out(static_cast<std::size_t>(t.rows()),
                                             std::vector<double>(static_cast<std::size_t>(t.cols())));
        for (int r = 0; r < t.rows(); ++r)
            for (int c = 0; c < t.cols(); ++c) out[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = t.at(r, c);
        return out;
    }

    static PlainLstm from(const LSTMVarParams& p) {
        PlainLstm o;
        o.n = p.inputSize();
        o.m = p.hiddenSize();
        for (int g = 0; g < 4; ++g) {
            o.Wx[g] = grid(p.Wx[g].M);
            o.Wh[g] = grid(p.Wh[g].M);
            o.bias[g].assign(p.bias[g].v.begin(), p.bias[g].v.end());
        }
        o.h0.assign(p.h0.v.begin(), p.h0.v.end());
        o.c0.assign(p.c0.v.begin(), p.c0.v.end());
        return o;
    }

    void step(const std::vector<double>& x, std::vector<double>& h, std::vector<double>& c) const {
        std::vector<double> act[4];
        for (int g = 0; g < 4; ++g) {
            act[g].assign(static_cast<std::size_t>(m), 0.0);
            for (int j = 0; j < m; ++j) {
                double pre = bias[g][static_cast<std::size_t>(j)];
                for (int k = 0; k < n; ++k)
                    pre += x[static_cast<std::size_t>(k)] * Wx[g][static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
                for (int k = 0; k < m; ++k)
                    pre += h[static_cast<std::size_t>(k)] * Wh[g][static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
                act[g][static_cast<std::size_t>(j)] =
                    g == 3 ? std::tanh(pre) : 1.0 / (1.0 + std::exp(-pre));
            }
        }
        for (int j = 0; j < m; ++j) {
            std::size_t js = static_cast<std::size_t>(j);
            c[js] = act[2][js] * c[js] + act[0][js] * act[3][js];
            h[js] = act[1][js] * std::tanh(c[js]);
        }
    }
};

// ---- local reparameterization ----

TEST_CASE("local reparam with collapsed variance is the plain product") {
    Rng rng(1);
    Tensor x = rng.normal_tensor({2, 3});
    Tensor M = rng.normal_tensor({3, 4});
    Tensor ls({3, 4}, -60.0);  // sigma^2 ~ 1e-26, under the floor after summing
    Tensor eps = rng.normal_tensor({2, 4});

    Graph g;
    int xn = g.input(x);
    VwNodes vw{g.param(M), g.param(ls)};
    int out = local_reparam_matmul(g, xn, vw, g.input(eps));
    int plain = g.matmul(xn, vw.M);
    for (std::int64_t i = 0; i < g.value(out).size(); ++i)
        CHECK(std::fabs(g.value(out)[i] - g.value(plain)[i]) <= 1e-12);
}

TEST_CASE("local reparam kills zero input rows regardless of noise") {
    Rng rng(2);
    Tensor x(Shape{2, 3});  // all zero
    Tensor M = rng.normal_tensor({3, 4});
    Tensor ls({3, 4}, 1.0);
    Tensor eps = rng.normal_tensor({2, 4});
    for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] += 5.0;  // big noise

    Graph g;
    VwNodes vw{g.param(M), g.param(ls)};
    int out = local_reparam_matmul(g, g.input(x), vw, g.input(eps));
    for (std::int64_t i = 0; i < g.value(out).size(); ++i) CHECK(g.value(out)[i] == 0.0);
}

TEST_CASE("local reparam moments match the analytic mean and variance") {
    Rng rng(3);
    Tensor x = rng.normal_tensor({2, 3});
    Tensor M = rng.normal_tensor({3, 4});
    Tensor ls = rng.normal_tensor({3, 4});

    const int draws = 100000;
    Tensor sum({2, 4}), sumsq({2, 4});
    for (int d = 0; d < draws; ++d) {
        Graph g;
        VwNodes vw{g.input(M), g.input(ls)};
        int out = local_reparam_matmul(g, g.input(x), vw, g.input(rng.normal_tensor({2, 4})));
        for (std::int64_t i = 0; i < sum.size(); ++i) {
            double v = g.value(out)[i];
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < 4; ++j) {
            double wantMean = 0.0, wantVar = 0.0;
            for (int k = 0; k < 3; ++k) {
                wantMean += x.at(b, k) * M.at(k, j);
                wantVar += x.at(b, k) * x.at(b, k) * std::exp(ls.at(k, j));
            }
            std::int64_t i = b * 4 + j;
            double mean = sum[i] / draws;
            double var = sumsq[i] / draws - mean * mean;
            double seMean = std::sqrt(wantVar / draws);
            double seVar = wantVar * std::sqrt(2.0 / (draws - 1));
            CHECK(std::fabs(mean - wantMean) <= 3.0 * seMean);
            CHECK(std::fabs(var - wantVar) <= 3.0 * seVar);
        }
}

TEST_CASE("local reparam and direct weight sampling agree in distribution") {
    Rng rng(4);
    Tensor x = rng.normal_tensor({2, 3});
    Tensor M = rng.normal_tensor({3, 4});
    Tensor ls = rng.normal_tensor({3, 4});

    const int draws = 100000;
    Tensor sumA({2, 4}), sumsqA({2, 4}), sumB({2, 4}), sumsqB({2, 4});
    for (int d = 0; d < draws; ++d) {
        Graph g;
        VwNodes vw{g.input(M), g.input(ls)};
        int xn = g.input(x);
        int a = local_reparam_matmul(g, xn, vw, g.input(rng.normal_tensor({2, 4})));
        int w = sample_weight_matrix(g, vw, g.input(rng.normal_tensor({3, 4})));
        int b = g.matmul(xn, w);
        for (std::int64_t i = 0; i < sumA.size(); ++i) {
            double va = g.value(a)[i], vb = g.value(b)[i];
            sumA[i] += va;
            sumsqA[i] += va * va;
            sumB[i] += vb;
            sumsqB[i] += vb * vb;
        }
    }
    for (std::int64_t i = 0; i < sumA.size(); ++i) {
        double meanA = sumA[i] / draws, meanB = sumB[i] / draws;
        double varA = sumsqA[i] / draws - meanA * meanA;
        double varB = sumsqB[i] / draws - meanB * meanB;
        double seMean = std::sqrt(varA / draws) + std::sqrt(varB / draws);
        double seVar = (varA + varB) * std::sqrt(2.0 / (draws - 1));
        CHECK(std::fabs(meanA - meanB) <= 3.0 * seMean);
        CHECK(std::fabs(varA - varB) <= 3.0 * seVar);
    }
}

// ---- weight sampling ----

TEST_CASE("sampled weights reduce to means at zero noise") {
    Rng rng(5);
    Tensor M = rng.normal_tensor({3, 4});
    Tensor ls = rng.normal_tensor({3, 4});
    Graph g;
    VwNodes vw{g.param(M), g.param(ls)};
    int w = sample_weight_matrix(g, vw, g.input(Tensor({3, 4}, 0.0)));
    for (std::int64_t i = 0; i < M.size(); ++i) CHECK(g.value(w)[i] == doctest::Approx(M[i]));
}

TEST_CASE("unit log-variance and unit noise shift means by one") {
    Rng rng(6);
    Tensor M = rng.normal_tensor({2, 2});
    Graph g;
    VwNodes vw{g.param(M), g.param(Tensor({2, 2}, 0.0))};
    int w = sample_weight_matrix(g, vw, g.input(Tensor({2, 2}, 1.0)));
    for (std::int64_t i = 0; i < M.size(); ++i)
        CHECK(g.value(w)[i] == doctest::Approx(M[i] + 1.0).epsilon(1e-12));
}

TEST_CASE("sampled weight moments match the posterior") {
    Rng rng(7);
    Tensor M = rng.normal_tensor({2, 3});
    Tensor ls = rng.normal_tensor({2, 3});
    const int draws = 100000;
    Tensor sum({2, 3}), sumsq({2, 3});
    for (int d = 0; d < draws; ++d) {
        Graph g;
        VwNodes vw{g.input(M), g.input(ls)};
        int w = sample_weight_matrix(g, vw, g.input(rng.normal_tensor({2, 3})));
        for (std::int64_t i = 0; i < sum.size(); ++i) {
            sum[i] += g.value(w)[i];
            sumsq[i] += g.value(w)[i] * g.value(w)[i];
        }
    }
    for (std::int64_t i = 0; i < sum.size(); ++i) {
        double wantVar = std::exp(ls[i]);
        double mean = sum[i] / draws;
        double var = sumsq[i] / draws - mean * mean;
        CHECK(std::fabs(mean - M[i]) <= 3.0 * std::sqrt(wantVar / draws));
        CHECK(std::fabs(var - wantVar) <= 3.0 * wantVar * std::sqrt(2.0 / (draws - 1)));
    }
}

// ---- vbd masks ----

TEST_CASE("vbd mask contract") {
    Rng rng(8);
    Tensor ones = vbd_mask(rng, 0.0, {5, 5});
    for (std::int64_t i = 0; i < ones.size(); ++i) CHECK(ones[i] == 1.0);

    Tensor m = vbd_mask(rng, 0.3, {1000, 1000});
    std::int64_t zeros = 0;
    double sum = 0.0;
    for (std::int64_t i = 0; i < m.size(); ++i) {
        if (m[i] == 0.0)
            ++zeros;
        else
            CHECK(m[i] == doctest::Approx(1.0 / 0.7).epsilon(1e-12));
        sum += m[i];
    }
    double frac = static_cast<double>(zeros) / static_cast<double>(m.size());
    CHECK(std::fabs(frac - 0.3) <= 0.002);
    // E[mask] = 1 so masked values are unbiased
    CHECK(std::fabs(sum / static_cast<double>(m.size()) - 1.0) <= 0.005);

    CHECK_THROWS_AS(vbd_mask(rng, 1.0, {2}), std::invalid_argument);
    CHECK_THROWS_AS(vbd_mask(rng, -0.1, {2}), std::invalid_argument);
}

// ---- lstm step ----

TEST_CASE("all-zero parameters give the hand-computed fixed point") {
    Rng rng(9);
    LSTMVarParams p = make_lstm(rng, 3, 4, -60.0);
    for (int gate = 0; gate < kGates; ++gate) {
        p.Wx[gate].M.fill(0.0);
        p.Wh[gate].M.fill(0.0);
    }
    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    LstmNoise noise = sample_lstm_noise(rng, NoiseMode::kSparseVd, 2, 3, 4, 0, 0);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes, noise);
    LstmState s0 = lstm_initial_state(g, nodes, 2);
    LstmState s1 = lstm_step(g, nodes, ctx, g.input(rng.normal_tensor({2, 3})), s0);
    // i = f = o = 0.5, g = 0 up to 1e-26-scale hidden-weight noise
    for (std::int64_t i = 0; i < g.value(s1.c).size(); ++i) {
        CHECK(std::fabs(g.value(s1.c)[i]) <= 1e-10);
        CHECK(std::fabs(g.value(s1.h)[i]) <= 1e-10);
    }
}

TEST_CASE("saturated forget gate carries the cell state") {
    Rng rng(10);
    LSTMVarParams p = make_lstm(rng, 3, 4, -60.0);
    p.bias[2].fill(50.0);   // forget gate -> 1
    p.bias[0].fill(-50.0);  // input gate -> 0
    Tensor cPrev = rng.normal_tensor({2, 4});

    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes, sample_lstm_noise(rng, NoiseMode::kNone, 2, 3, 4, 0, 0));
    LstmState prev{g.input(rng.normal_tensor({2, 4})), g.input(cPrev)};
    LstmState s = lstm_step(g, nodes, ctx, g.input(rng.normal_tensor({2, 3})), prev);
    for (std::int64_t i = 0; i < cPrev.size(); ++i)
        CHECK(g.value(s.c)[i] == doctest::Approx(cPrev[i]).epsilon(1e-9));
}

TEST_CASE("collapsed-variance step matches the plain oracle") {
    Rng rng(11);
    LSTMVarParams p = make_lstm(rng, 3, 4, -60.0);
    for (int gate = 0; gate < kGates; ++gate) rng.fill_normal(p.bias[gate]);
    rng.fill_normal(p.h0);
    rng.fill_normal(p.c0);
    Tensor x = rng.normal_tensor({1, 3});

    PlainLstm oracle = PlainLstm::from(p);
    std::vector<double> h = oracle.h0, c = oracle.c0;
    oracle.step(std::vector<double>(x.v.begin(), x.v.end()), h, c);

    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    LstmStepCtx ctx =
        bind_lstm_noise(g, nodes, sample_lstm_noise(rng, NoiseMode::kSparseVd, 1, 3, 4, 0, 0));
    LstmState s = lstm_step(g, nodes, ctx, g.input(x), lstm_initial_state(g, nodes, 1));
    for (int j = 0; j < 4; ++j) {
        CHECK(std::fabs(g.value(s.h)[j] - h[static_cast<std::size_t>(j)]) <= 1e-12);
        CHECK(std::fabs(g.value(s.c)[j] - c[static_cast<std::size_t>(j)]) <= 1e-12);
    }
}

// ---- lstm forward over sequences ----

static std::vector<double> run_forward(LSTMVarParams& p, NoiseMode mode, Rng& rng,
                                       const std::vector<Tensor>& xs) {
    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    LstmNoise noise = sample_lstm_noise(rng, mode, xs[0].rows(), p.inputSize(),
                                        p.hiddenSize(), 0.25, 0.25);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes, noise);
    std::vector<int> xNodes;
    for (const Tensor& x : xs) xNodes.push_back(g.input(x));
    auto states = lstm_forward(g, nodes, ctx, xNodes, xs[0].rows());
    std::vector<double> out;
    for (const auto& s : states)
        for (std::int64_t i = 0; i < g.value(s.h).size(); ++i) out.push_back(g.value(s.h)[i]);
    return out;
}

TEST_CASE("mode none is deterministic and collapsed sparse-vd matches it") {
    Rng rng(12);
    LSTMVarParams p = make_lstm(rng, 3, 5, -60.0);
    std::vector<Tensor> xs;
    for (int t = 0; t < 4; ++t) xs.push_back(rng.normal_tensor({2, 3}));

    Rng r1(100), r2(100), r3(200);
    auto a = run_forward(p, NoiseMode::kNone, r1, xs);
    auto b = run_forward(p, NoiseMode::kNone, r2, xs);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);

    auto c = run_forward(p, NoiseMode::kSparseVd, r3, xs);
    REQUIRE(c.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - c[i]) <= 1e-10);
}

TEST_CASE("vbd with zero drop rate equals mode none") {
    Rng rng(13);
    LSTMVarParams p = make_lstm(rng, 3, 5, -6.0);
    std::vector<Tensor> xs;
    for (int t = 0; t < 3; ++t) xs.push_back(rng.normal_tensor({2, 3}));

    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    Rng noiseRng(77);
    LstmStepCtx ctxVbd =
        bind_lstm_noise(g, nodes, sample_lstm_noise(noiseRng, NoiseMode::kVbd, 2, 3, 5, 0.0, 0.0));
    LstmStepCtx ctxNone =
        bind_lstm_noise(g, nodes, sample_lstm_noise(noiseRng, NoiseMode::kNone, 2, 3, 5, 0, 0));
    std::vector<int> xNodes;
    for (const Tensor& x : xs) xNodes.push_back(g.input(x));
    auto sv = lstm_forward(g, nodes, ctxVbd, xNodes, 2);
    auto sn = lstm_forward(g, nodes, ctxNone, xNodes, 2);
    for (std::size_t t = 0; t < sv.size(); ++t)
        for (std::int64_t i = 0; i < g.value(sv[t].h).size(); ++i)
            CHECK(g.value(sv[t].h)[i] == g.value(sn[t].h)[i]);
}

TEST_CASE("empty sequences are rejected") {
    Rng rng(14);
    LSTMVarParams p = make_lstm(rng, 3, 4, -6.0);
    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes, sample_lstm_noise(rng, NoiseMode::kNone, 2, 3, 4, 0, 0));
    CHECK_THROWS_AS(lstm_forward(g, nodes, ctx, {}, 2), std::invalid_argument);
    CHECK_THROWS_AS(lstm_forward_indices(g, nodes, ctx, {}), std::invalid_argument);
}

TEST_CASE("one noise realization serves every time step") {
    Rng rng(15);
    LSTMVarParams p = make_lstm(rng, 3, 4, -6.0);
    auto countInputs = [&](int steps) {
        Graph g;
        LstmNodes nodes = bind_lstm(g, p);
        Rng nr(55);
        LstmStepCtx ctx =
            bind_lstm_noise(g, nodes, sample_lstm_noise(nr, NoiseMode::kSparseVd, 2, 3, 4, 0, 0));
        std::vector<int> xNodes;
        Rng xr(66);
        for (int t = 0; t < steps; ++t) xNodes.push_back(g.input(xr.normal_tensor({2, 3})));
        lstm_forward(g, nodes, ctx, xNodes, 2);
        int inputs = 0;
        for (int id = 0; id < g.size(); ++id)
            if (g.node(id).op == Op::kInput) ++inputs;
        return inputs - steps;  // subtract the data inputs
    };
    // 4 input-noise + 4 hidden-noise tensors, independent of sequence length
    CHECK(countInputs(3) == 8);
    CHECK(countInputs(9) == 8);
}

TEST_CASE("index inputs match explicit one-hot inputs") {
    Rng rng(16);
    LSTMVarParams p = make_lstm(rng, 5, 4, -2.0);
    std::vector<std::vector<int>> steps = {{1, 4}, {0, 2}, {3, 3}};

    auto run = [&](bool onehot) {
        Graph g;
        LstmNodes nodes = bind_lstm(g, p);
        Rng nr(88);
        LstmStepCtx ctx =
            bind_lstm_noise(g, nodes, sample_lstm_noise(nr, NoiseMode::kSparseVd, 2, 5, 4, 0, 0));
        std::vector<LstmState> states;
        if (onehot) {
            std::vector<int> xNodes;
            for (const auto& idx : steps) {
                Tensor x(Shape{2, 5});
                for (int b = 0; b < 2; ++b) x.at(b, idx[static_cast<std::size_t>(b)]) = 1.0;
                xNodes.push_back(g.input(x));
            }
            states = lstm_forward(g, nodes, ctx, xNodes, 2);
        } else {
            states = lstm_forward_indices(g, nodes, ctx, steps);
        }
        std::vector<double> out;
        for (const auto& s : states)
            for (std::int64_t i = 0; i < g.value(s.h).size(); ++i) out.push_back(g.value(s.h)[i]);
        return out;
    };
    auto a = run(true), b = run(false);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 1e-12);
}

// ---- dense head ----

TEST_CASE("dense head with collapsed variance is a plain affine map") {
    Rng rng(17);
    Tensor x = rng.normal_tensor({2, 3});
    Tensor M = rng.normal_tensor({3, 2});
    Tensor b = rng.normal_tensor({2});
    Graph g;
    VwNodes vw{g.param(M), g.param(Tensor({3, 2}, -60.0))};
    int bn = g.param(b);
    int out = variational_dense(g, g.input(x), vw, bn, g.input(rng.normal_tensor({2, 2})), -1);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            double want = b[c];
            for (int k = 0; k < 3; ++k) want += x.at(r, k) * M.at(k, c);
            CHECK(g.value(out).at(r, c) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("dense head on zero input returns the bias") {
    Rng rng(18);
    Tensor b = rng.normal_tensor({4});
    Graph g;
    VwNodes vw{g.param(rng.normal_tensor({3, 4})), g.param(Tensor({3, 4}, 0.5))};
    int out = variational_dense(g, g.input(Tensor({2, 3})), vw, g.param(b),
                                g.input(rng.normal_tensor({2, 4})), -1);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c) CHECK(g.value(out).at(r, c) == doctest::Approx(b[c]));
}

// ---- gradient flow ----

TEST_CASE("every posterior parameter of every gate receives gradient") {
    Rng rng(19);
    LSTMVarParams p = make_lstm(rng, 3, 4, -2.0);
    Graph g;
    LstmNodes nodes = bind_lstm(g, p);
    Rng nr(21);
    LstmStepCtx ctx =
        bind_lstm_noise(g, nodes, sample_lstm_noise(nr, NoiseMode::kSparseVd, 2, 3, 4, 0, 0));
    std::vector<int> xNodes;
    for (int t = 0; t < 3; ++t) xNodes.push_back(g.input(nr.normal_tensor({2, 3})));
    auto states = lstm_forward(g, nodes, ctx, xNodes, 2);
    int loss = g.sum_sq(states.back().h);
    for (std::size_t t = 0; t + 1 < states.size(); ++t)
        loss = g.add(loss, g.sum_sq(states[t].h));
    g.backward(loss);
    for (int gate = 0; gate < kGates; ++gate) {
        for (int id : {nodes.wx[gate].M, nodes.wx[gate].logS2, nodes.wh[gate].M,
                       nodes.wh[gate].logS2}) {
            REQUIRE(g.has_grad(id));
            for (std::int64_t i = 0; i < g.grad(id).size(); ++i) {
                INFO("gate " << kGateNames[gate] << " node " << id << " entry " << i);
                CHECK(g.grad(id)[i] != 0.0);
            }
        }
    }
    CHECK(g.has_grad(nodes.h0));
    CHECK(g.has_grad(nodes.c0));
}
