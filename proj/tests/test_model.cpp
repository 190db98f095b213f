#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "sparsevd/model.hpp"
#include "sparsevd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

using namespace sparsevd;

namespace {

bool close(double a, double b, double tol) {
    double denom = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) <= tol * denom;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

// Independent cross-entropy over engine logits; the graph route computes the
// same quantity through its own kernel.
double ce_nats(const Tensor& logits, const std::vector<int>& targets) {
    double total = 0;
    int K = logits.cols();
    for (int t = 0; t < logits.rows(); ++t) {
        double mx = logits.at(t, 0);
        for (int k = 1; k < K; ++k) mx = std::max(mx, logits.at(t, k));
        double se = 0;
        for (int k = 0; k < K; ++k) se += std::exp(logits.at(t, k) - mx);
        total += std::log(se) + mx - logits.at(t, targets[static_cast<std::size_t>(t)]);
    }
    return total;
}

Vocab char_vocab(int n) {
    std::string text;
    for (int i = 0; i < n; ++i) text += static_cast<char>('0' + i);
    return build_vocab_chars(text);
}

std::vector<int> pattern_corpus(const Vocab& v, int len) {
    std::vector<int> out;
    for (int i = 0; i < len; ++i) out.push_back((i * i + i / 3) % v.size());
    return out;
}

Model small_charlm(std::uint64_t seed = 7) {
    Rng rng(seed);
    return make_charlm_model(rng, char_vocab(5), 4, 6);
}

RegDataset small_reg(std::uint64_t seed = 9) {
    Rng rng(seed);
    std::string tsv = gen_sentiment_tsv(rng, 40, 30, 6);
    return parse_regression_tsv(tsv, 6, nullptr);
}

Model small_sentiment(const RegDataset& ds, std::uint64_t seed = 11) {
    Rng rng(seed);
    return make_sentiment_model(rng, ds.vocab, 3, 4, ds.L);
}

std::string tmp_path(const std::string& name) {
    return std::string("test-model-") + name;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("model construction: shapes, classes, determinism") {
    Model md = small_charlm();
    CHECK(md.classes == 6);  // 5 symbols + unk bucket
    CHECK(md.inputSize() == 6);
    CHECK(md.hiddenSize() == 4);
    CHECK(md.lstm.Wx[0].M.shape == Shape{6, 4});
    CHECK(md.lstm.Wh[3].logS2.shape == Shape{4, 4});
    CHECK(md.head.M.shape == Shape{4, 6});
    CHECK(md.headBias.shape == Shape{6});
    for (std::int64_t i = 0; i < md.lstm.Wx[0].logS2.size(); ++i)
        CHECK(md.lstm.Wx[0].logS2[i] == kLogS2Init);

    Model md2 = small_charlm();
    for (int g = 0; g < kGates; ++g) CHECK(bitwise_equal(md.lstm.Wx[g].M, md2.lstm.Wx[g].M));
    CHECK(bitwise_equal(md.head.M, md2.head.M));

    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    CHECK(sm.classes == 1);
    CHECK(sm.embed.shape == Shape{ds.vocab.size() + 2, 3});
    CHECK(sm.inputSize() == 3);
    CHECK(sm.head.M.shape == Shape{4, 1});

    CHECK_THROWS_AS(model_skeleton("mlp", char_vocab(3), 4, 4, 0), std::invalid_argument);
    CHECK_THROWS_AS(model_skeleton("sentiment", char_vocab(3), 4, 4, 0),
                    std::invalid_argument);
}

TEST_CASE("parameter enumeration per mode") {
    Model md = small_charlm();
    CHECK(model_tensors(md).size() == 25);
    CHECK(variational_weights(md, NoiseMode::kNone).empty());
    CHECK(variational_weights(md, NoiseMode::kVbd).empty());
    CHECK(variational_weights(md, NoiseMode::kSparseVd).size() == 9);
    CHECK(trainable_tensors(md, NoiseMode::kNone).size() == 16);
    CHECK(trainable_tensors(md, NoiseMode::kSparseVd).size() == 25);
    CHECK(decayed_tensors(md, NoiseMode::kNone).size() == 9);
    CHECK(decayed_tensors(md, NoiseMode::kVbd).size() == 9);
    CHECK(decayed_tensors(md, NoiseMode::kSparseVd).empty());

    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    CHECK(model_tensors(sm).size() == 26);
    CHECK(variational_weights(sm, NoiseMode::kSparseVd).size() == 8);  // LSTM only
    CHECK(trainable_tensors(sm, NoiseMode::kNone).size() == 17);
    CHECK(trainable_tensors(sm, NoiseMode::kSparseVd).size() == 25);  // head logS2 stays out
    CHECK(decayed_tensors(sm, NoiseMode::kNone).size() == 10);
    CHECK(decayed_tensors(sm, NoiseMode::kSparseVd).size() == 2);  // embedding + head

    // Names are stable and logS2 rides along only where the posterior is live.
    bool sawHeadLogS2 = false;
    for (const auto& nt : trainable_tensors(sm, NoiseMode::kSparseVd))
        if (nt.name == "head.W.logS2") sawHeadLogS2 = true;
    CHECK(!sawHeadLogS2);
}

TEST_CASE("charlm objective: data term matches an engine-side oracle") {
    Model md = small_charlm();
    std::vector<int> corpus = pattern_corpus(md.vocab, 40);
    CharBatch cb = make_char_batch(corpus, md.seqLen, {0, 1});

    Graph g;
    Rng rng(123);
    BuiltLoss bl = build_charlm_elbo(g, md, cb, NoiseMode::kNone, rng, 0.0, 2, 0.0, 0.0);
    CHECK(g.value(bl.loss)[0] == bl.dataTerm);  // klScale 0 leaves the bare data term
    CHECK(bl.klTerm == 0.0);

    double hand = 0;
    for (int b = 0; b < 2; ++b)
        hand += ce_nats(charlm_logits_mean(md, cb.inputs[static_cast<std::size_t>(b)]),
                        cb.targets[static_cast<std::size_t>(b)]);
    hand /= 2;
    CHECK(close(bl.dataTerm, hand, 1e-12));

    // The deterministic mode ignores the noise stream entirely.
    Graph g2;
    Rng rng2(999);
    BuiltLoss bl2 = build_charlm_elbo(g2, md, cb, NoiseMode::kNone, rng2, 0.0, 2, 0.0, 0.0);
    CHECK(g2.value(bl2.loss)[0] == g.value(bl.loss)[0]);

    CHECK_THROWS_AS(
        (void)build_charlm_elbo(g2, md, cb, NoiseMode::kNone, rng2, 1.0, 0, 0.0, 0.0),
        std::invalid_argument);
}

TEST_CASE("sentiment objective: data term matches per-item engine predictions") {
    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    std::vector<std::int64_t> ids = {0, 1, 2, 3, 4};
    RegBatch rb = make_reg_batch(ds, ids);

    Graph g;
    Rng rng(5);
    BuiltLoss bl = build_sentiment_elbo(g, sm, rb, NoiseMode::kNone, rng, 0.0,
                                        ds.size(), 0.0, 0.0);
    double hand = 0;
    for (std::size_t b = 0; b < ids.size(); ++b) {
        double p = sentiment_pred_mean(sm, rb.tokens[b], rb.lastPos[b]);
        double d = p - rb.targets[b];
        hand += d * d;
    }
    hand /= static_cast<double>(ids.size());
    CHECK(close(bl.dataTerm, hand, 1e-12));

    // vbd with rate 0 collapses to the deterministic graph.
    Graph g2;
    Rng rng2(5);
    BuiltLoss bl2 = build_sentiment_elbo(g2, sm, rb, NoiseMode::kVbd, rng2, 0.0,
                                         ds.size(), 0.0, 0.0);
    CHECK(g2.value(bl2.loss)[0] == g.value(bl.loss)[0]);
}

TEST_CASE("objective composition: scaled KL and weight decay enter as stated") {
    Model md = small_charlm();
    std::vector<int> corpus = pattern_corpus(md.vocab, 30);
    CharBatch cb = make_char_batch(corpus, md.seqLen, {0});

    Graph g;
    Rng rng(77);
    double klScale = 0.7;
    std::int64_t N = 13;
    BuiltLoss bl = build_charlm_elbo(g, md, cb, NoiseMode::kSparseVd, rng, klScale, N,
                                     0.0, 0.0);
    std::vector<const VariationalWeight*> ws;
    for (const auto& nw : variational_weights(md, NoiseMode::kSparseVd)) ws.push_back(nw.w);
    CHECK(ws.size() == 9);
    CHECK(close(bl.klTerm, kl_total(ws), 1e-12));
    CHECK(close(g.value(bl.loss)[0],
                bl.dataTerm + klScale / static_cast<double>(N) * bl.klTerm, 1e-12));

    // Decay scope under vbd: every weight matrix, but no bias/state.
    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    RegBatch rb = make_reg_batch(ds, {0, 1, 2});
    Graph g2;
    Rng rng2(3);
    double wd = 0.01;
    BuiltLoss blv = build_sentiment_elbo(g2, sm, rb, NoiseMode::kVbd, rng2, 0.0,
                                         ds.size(), wd, 0.3);
    double l2 = 0;
    for (Tensor* t : decayed_tensors(sm, NoiseMode::kVbd))
        for (double x : t->v) l2 += x * x;
    CHECK(close(blv.decayTerm, l2, 1e-12));
    CHECK(close(g2.value(blv.loss)[0], blv.dataTerm + wd * l2, 1e-12));

    // Under sparse-vd the LSTM leaves the decay set but keeps the KL set.
    Graph g3;
    Rng rng3(3);
    BuiltLoss bls = build_sentiment_elbo(g3, sm, rb, NoiseMode::kSparseVd, rng3, 1.0,
                                         ds.size(), wd, 0.0);
    double l2s = 0;
    for (double x : sm.embed.v) l2s += x * x;
    for (double x : sm.head.M.v) l2s += x * x;
    CHECK(close(bls.decayTerm, l2s, 1e-12));
    std::vector<const VariationalWeight*> lstmW;
    for (const auto& nw : variational_weights(sm, NoiseMode::kSparseVd)) lstmW.push_back(nw.w);
    CHECK(close(bls.klTerm, kl_total(lstmW), 1e-12));
    CHECK(close(g3.value(bls.loss)[0],
                bls.dataTerm + bls.klTerm / static_cast<double>(ds.size()) + wd * l2s,
                1e-12));
}

TEST_CASE("graph forward and batched engine agree on charlm logits") {
    Model md = small_charlm();
    std::vector<int> corpus = pattern_corpus(md.vocab, 20);
    CharBatch cb = make_char_batch(corpus, md.seqLen, {1});
    const std::vector<int>& window = cb.inputs[0];

    Graph g;
    ModelNodes nodes = bind_model(g, md);
    Rng rng(1);
    LstmNoise noise = sample_lstm_noise(rng, NoiseMode::kNone, 1, md.inputSize(),
                                        md.hiddenSize(), 0, 0);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes.lstm, noise);
    std::vector<std::vector<int>> steps;
    for (int x : window) steps.push_back({x});
    auto states = lstm_forward_indices(g, nodes.lstm, ctx, steps);

    Tensor engine = charlm_logits_mean(md, window);
    for (std::size_t t = 0; t < steps.size(); ++t) {
        int ln = variational_dense(g, states[t].h, nodes.head, nodes.headBias, -1, -1);
        const Tensor& row = g.value(ln);
        for (int k = 0; k < md.classes; ++k)
            CHECK(close(row[k], engine.at(static_cast<int>(t), k), 1e-12));
    }
}

TEST_CASE("bpc evaluation: uniform head gives log2 of the class count") {
    Vocab v = char_vocab(9);  // 10 classes with the unk bucket
    Model md = model_skeleton("charlm", v, 5, 4, 0);  // all-zero weights
    std::vector<int> corpus = pattern_corpus(v, 61);
    double bpc = eval_charlm_bpc(md, corpus);
    CHECK(close(bpc, std::log2(10.0), 1e-12));
}

TEST_CASE("batched bpc equals the single-window engine run window by window") {
    Model md = small_charlm(21);
    std::vector<int> corpus = pattern_corpus(md.vocab, 80);
    double batched = eval_charlm_bpc(md, corpus, 3);

    std::int64_t nwin = char_window_count(static_cast<std::int64_t>(corpus.size()), md.seqLen);
    double nats = 0;
    for (std::int64_t w = 0; w < nwin; ++w) {
        CharBatch cb = make_char_batch(corpus, md.seqLen, {w});
        nats += ce_nats(charlm_logits_mean(md, cb.inputs[0]), cb.targets[0]);
    }
    double hand = nats / (std::log(2.0) * static_cast<double>(nwin * md.seqLen));
    CHECK(close(batched, hand, 1e-12));

    CHECK_THROWS_AS(eval_charlm_bpc(md, std::vector<int>(3, 0)), std::invalid_argument);
}

TEST_CASE("batched mse equals the per-item engine run") {
    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    double batched = eval_sentiment_mse(sm, ds, 7);
    double sse = 0;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        double d = sentiment_pred_mean(sm, ds.tokens[static_cast<std::size_t>(i)],
                                       ds.lastPos[static_cast<std::size_t>(i)]) -
                   ds.targets[static_cast<std::size_t>(i)];
        sse += d * d;
    }
    CHECK(close(batched, sse / static_cast<double>(ds.size()), 1e-12));

    Model wrongLen = small_sentiment(ds);
    wrongLen.seqLen = ds.L + 1;
    CHECK_THROWS_AS(eval_sentiment_mse(wrongLen, ds), std::invalid_argument);
}

TEST_CASE("checkpoint container round trip is exact") {
    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    // Awkward values must survive the byte format untouched.
    sm.lstm.bias[0][0] = 5e-324;
    sm.lstm.h0[1] = -0.0;
    sm.head.M[0] = 1e308;
    sm.embed[2] = std::nextafter(1.0, 2.0);

    ojson meta;
    meta["epoch"] = 3;
    meta["mode"] = "sparse-vd";
    std::string path = tmp_path("ckpt.bin");
    save_checkpoint(path, sm, meta);
    LoadedCheckpoint lc = load_checkpoint(path);

    CHECK(lc.model.task == sm.task);
    CHECK(lc.model.vocab.items == sm.vocab.items);
    CHECK(lc.model.seqLen == sm.seqLen);
    auto a = model_tensors(sm);
    auto b = model_tensors(lc.model);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(*a[i].t, *b[i].t));
    CHECK(lc.meta.at("epoch").get<int>() == 3);

    save_checkpoint(tmp_path("ckpt2.bin"), sm, meta);
    CHECK(file_bytes(path) == file_bytes(tmp_path("ckpt2.bin")));

    // Tampering is caught by name.
    ojson root = model_to_container(sm, meta);
    root["tensors"].erase("lstm.h0");
    root["tensors"]["lstm.h0.bogus"] = tensor_to_json(sm.lstm.h0);
    CHECK_THROWS_WITH_AS(
        (void)model_from_container(root),
        doctest::Contains("lstm.h0"), std::runtime_error);
    ojson bad = model_to_container(sm, meta);
    bad["tensors"]["lstm.c0"] = tensor_to_json(Tensor({2}));
    CHECK_THROWS_WITH_AS((void)model_from_container(bad),
                         doctest::Contains("lstm.c0"), std::runtime_error);
    ojson notCkpt;
    notCkpt["format"] = "something-else";
    CHECK_THROWS_AS((void)model_from_container(notCkpt), std::runtime_error);
}

TEST_CASE("starting from a dense checkpoint copies means and resets spreads") {
    Model src = small_charlm(31);
    src.lstm.Wx[2].logS2.fill(-1.25);  // pretend training moved the spread
    Model fresh = small_charlm(99);    // different draw, same shapes
    init_from_model(fresh, src);
    for (int g = 0; g < kGates; ++g) {
        CHECK(bitwise_equal(fresh.lstm.Wx[g].M, src.lstm.Wx[g].M));
        CHECK(bitwise_equal(fresh.lstm.Wh[g].M, src.lstm.Wh[g].M));
        CHECK(bitwise_equal(fresh.lstm.bias[g], src.lstm.bias[g]));
        for (double x : fresh.lstm.Wx[g].logS2.v) CHECK(x == kLogS2Init);
    }
    CHECK(bitwise_equal(fresh.head.M, src.head.M));
    for (double x : fresh.head.logS2.v) CHECK(x == kLogS2Init);

    Rng rng(1);
    Model bigger = make_charlm_model(rng, src.vocab, 8, src.seqLen);
    CHECK_THROWS_WITH_AS(init_from_model(bigger, src), doctest::Contains("lstm.Wh.i.M"),
                         std::invalid_argument);

    Rng rng2(1);
    Model otherVocab = make_charlm_model(rng2, char_vocab(4), 4, src.seqLen);
    CHECK_THROWS_AS(init_from_model(otherVocab, src), std::invalid_argument);
}

TEST_CASE("pruned export: survivors, storage round trip, matched inference") {
    Model md = small_charlm(55);
    // Spread the posteriors so both sides of the threshold are populated.
    Rng rng(4);
    for (const auto& nw : variational_weights(md, NoiseMode::kSparseVd))
        for (double& x : nw.w->logS2.v) x = rng.uniform_range(-8.0, 8.0);

    SparseModel sp = sparsify(md, NoiseMode::kSparseVd, 3.0);
    CHECK(sp.headSparse);
    CHECK(sp.sparsity.size() == 3);
    CHECK(sp.sparsity == model_sparsity(md, 3.0));

    // CSR holds exactly the zeroed means that pruning produces.
    for (int g = 0; g < kGates; ++g) {
        PruneResult pr = prune(md.lstm.Wx[g], 3.0);
        CHECK(bitwise_equal(csr_to_dense(sp.wx[g]), pr.zeroedMeans));
    }
    CHECK_THROWS_AS((void)sparsify(md, NoiseMode::kNone, 3.0), std::invalid_argument);
    CHECK_THROWS_AS((void)sparsify(md, NoiseMode::kVbd, 3.0), std::invalid_argument);

    std::string path = tmp_path("sparse.bin");
    save_container(path, sparse_to_container(sp, ojson::object()));
    SparseModel rt = sparse_from_container(load_container(path));
    for (int g = 0; g < kGates; ++g) {
        CHECK(rt.wx[g].rowOffsets == sp.wx[g].rowOffsets);
        CHECK(rt.wx[g].colIndices == sp.wx[g].colIndices);
        CHECK(rt.wh[g].values == sp.wh[g].values);
    }
    CHECK(rt.headCsr.values == sp.headCsr.values);
    CHECK(bitwise_equal(rt.h0, sp.h0));

    // Compressed forward vs the same model with dropped means zeroed out.
    Model zeroed = md;
    for (const auto& nw : variational_weights(zeroed, NoiseMode::kSparseVd))
        nw.w->M = prune(*nw.w, 3.0).zeroedMeans;
    std::vector<int> corpus = pattern_corpus(md.vocab, 60);
    CharBatch cb = make_char_batch(corpus, md.seqLen, {0, 3});
    for (int b = 0; b < 2; ++b) {
        Tensor dense = charlm_logits_mean(zeroed, cb.inputs[static_cast<std::size_t>(b)]);
        Tensor csr = charlm_logits_sparse(rt, cb.inputs[static_cast<std::size_t>(b)]);
        REQUIRE(dense.shape == csr.shape);
        for (std::int64_t i = 0; i < dense.size(); ++i)
            CHECK(close(dense[i], csr[i], 1e-12));
    }
    CHECK(close(eval_charlm_bpc_sparse(rt, corpus), eval_charlm_bpc(zeroed, corpus), 1e-12));
}

TEST_CASE("sentiment export keeps the head dense and matches zeroed inference") {
    RegDataset ds = small_reg();
    Model sm = small_sentiment(ds);
    Rng rng(8);
    for (const auto& nw : variational_weights(sm, NoiseMode::kSparseVd))
        for (double& x : nw.w->logS2.v) x = rng.uniform_range(-8.0, 8.0);

    SparseModel sp = sparsify(sm, NoiseMode::kSparseVd, 3.0);
    CHECK(!sp.headSparse);
    CHECK(sp.sparsity.size() == 2);
    CHECK(bitwise_equal(sp.headDense, sm.head.M));
    CHECK(bitwise_equal(sp.embed, sm.embed));

    std::string path = tmp_path("sparse-reg.bin");
    save_container(path, sparse_to_container(sp, ojson::object()));
    SparseModel rt = sparse_from_container(load_container(path));

    Model zeroed = sm;
    for (const auto& nw : variational_weights(zeroed, NoiseMode::kSparseVd))
        nw.w->M = prune(*nw.w, 3.0).zeroedMeans;
    CHECK(close(eval_sentiment_mse_sparse(rt, ds), eval_sentiment_mse(zeroed, ds), 1e-12));
    double p0 = sentiment_pred_sparse(rt, ds.tokens[0], ds.lastPos[0]);
    double p1 = sentiment_pred_mean(zeroed, ds.tokens[0], ds.lastPos[0]);
    CHECK(close(p0, p1, 1e-12));
}
