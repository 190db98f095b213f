#include "sparsevd/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sparsevd {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ERow = Eigen::RowVectorXd;

Eigen::Map<const EMat> cmat(const Tensor& t) {
    return Eigen::Map<const EMat>(t.data(), t.rows(), t.cols());
}
Eigen::Map<const ERow> crow(const Tensor& t) {
    return Eigen::Map<const ERow>(t.data(), t.size());
}

void require_task(const Model& m, const char* task, const char* where) {
    if (m.task != task)
        throw std::invalid_argument(std::string(where) + ": model trained for '" +
                                    m.task + "', not '" + task + "'");
}

int chain_add(Graph& g, int acc, int term) { return acc < 0 ? term : g.add(acc, term); }

// inputs[b][t] -> steps[t][b]
std::vector<std::vector<int>> transpose_steps(const std::vector<std::vector<int>>& rows) {
    std::size_t B = rows.size(), T = rows[0].size();
    std::vector<std::vector<int>> steps(T, std::vector<int>(B));
    for (std::size_t b = 0; b < B; ++b) {
        if (rows[b].size() != T)
            throw std::invalid_argument("ragged batch: row lengths differ");
        for (std::size_t t = 0; t < T; ++t) steps[t][b] = rows[b][t];
    }
    return steps;
}

int kl_sum_node(Graph& g, Model& model, NoiseMode mode, const ModelNodes& nodes) {
    int acc = -1;
    for (const auto& nw : variational_weights(model, mode)) {
        int mN = nodes.nodeOf.at(&nw.w->M);
        int sN = nodes.nodeOf.at(&nw.w->logS2);
        acc = chain_add(g, acc, g.sum(g.kl_log_uniform(g.log_alpha(mN, sN))));
    }
    return acc;
}

int decay_sum_node(Graph& g, Model& model, NoiseMode mode, const ModelNodes& nodes) {
    int acc = -1;
    for (Tensor* t : decayed_tensors(model, mode))
        acc = chain_add(g, acc, g.sum_sq(nodes.nodeOf.at(t)));
    return acc;
}

// Shared tail of the two elbo builders: data term -> + scaled KL -> + L2.
BuiltLoss finish_elbo(Graph& g, Model& model, NoiseMode mode, ModelNodes nodes,
                      int nll, double klScale, std::int64_t datasetSize,
                      double weightDecay) {
    BuiltLoss out;
    out.dataTerm = g.value(nll)[0];
    int loss = nll;
    if (klScale != 0.0) {
        int kl = kl_sum_node(g, model, mode, nodes);
        if (kl >= 0) {
            out.klTerm = g.value(kl)[0];
            loss = g.add(loss, g.scale(kl, klScale / static_cast<double>(datasetSize)));
        }
    }
    if (weightDecay != 0.0) {
        int l2 = decay_sum_node(g, model, mode, nodes);
        if (l2 >= 0) {
            out.decayTerm = g.value(l2)[0];
            loss = g.add(loss, g.scale(l2, weightDecay));
        }
    }
    out.loss = loss;
    out.nodes = std::move(nodes);
    return out;
}

}  // namespace

// ---- construction ----

Model model_skeleton(const std::string& task, const Vocab& vocab, int seqLen,
                     int hidden, int embedSize) {
    if (task != "charlm" && task != "sentiment")
        throw std::invalid_argument("unknown task '" + task + "'");
    if (vocab.size() < 1) throw std::invalid_argument("model needs a nonempty vocabulary");
    if (seqLen < 1 || hidden < 1)
        throw std::invalid_argument("seqLen and hiddenSize must be at least 1");

    Model md;
    md.task = task;
    md.vocab = vocab;
    md.seqLen = seqLen;
    int n;
    if (task == "charlm") {
        md.classes = vocab.size() + 1;  // trailing unk bucket
        md.embedSize = 0;
        n = md.classes;
    } else {
        if (embedSize < 1) throw std::invalid_argument("embedSize must be at least 1");
        md.classes = 1;
        md.embedSize = embedSize;
        n = embedSize;
        md.embed = Tensor({vocab.size() + 2, embedSize});  // + unk + pad rows
    }
    for (int gate = 0; gate < kGates; ++gate) {
        md.lstm.Wx[gate] = VariationalWeight(Tensor({n, hidden}), Tensor({n, hidden}));
        md.lstm.Wh[gate] = VariationalWeight(Tensor({hidden, hidden}), Tensor({hidden, hidden}));
        md.lstm.bias[gate] = Tensor({hidden});
    }
    md.lstm.h0 = Tensor({hidden});
    md.lstm.c0 = Tensor({hidden});
    md.head = VariationalWeight(Tensor({hidden, md.classes}), Tensor({hidden, md.classes}));
    md.headBias = Tensor({md.classes});
    return md;
}

static void init_posteriors(Model& md, Rng& rng, double logS2Init) {
    int n = md.inputSize(), m = md.hiddenSize();
    for (int gate = 0; gate < kGates; ++gate) {
        md.lstm.Wx[gate].M = orthogonal_init(rng, n, m);
        md.lstm.Wx[gate].logS2.fill(logS2Init);
    }
    for (int gate = 0; gate < kGates; ++gate) {
        md.lstm.Wh[gate].M = orthogonal_init(rng, m, m);
        md.lstm.Wh[gate].logS2.fill(logS2Init);
    }
    md.head.M = orthogonal_init(rng, m, md.classes);
    md.head.logS2.fill(logS2Init);
}

Model make_charlm_model(Rng& rng, const Vocab& vocab, int hidden, int seqLen,
                        double logS2Init) {
    Model md = model_skeleton("charlm", vocab, seqLen, hidden, 0);
    init_posteriors(md, rng, logS2Init);
    return md;
}

Model make_sentiment_model(Rng& rng, const Vocab& vocab, int embedSize, int hidden,
                           int seqLen, double logS2Init) {
    Model md = model_skeleton("sentiment", vocab, seqLen, hidden, embedSize);
    rng.fill_normal(md.embed);
    double sc = 1.0 / std::sqrt(static_cast<double>(embedSize));
    for (double& x : md.embed.v) x *= sc;
    init_posteriors(md, rng, logS2Init);
    return md;
}

// ---- enumeration ----

std::vector<NamedTensor> model_tensors(Model& model) {
    std::vector<NamedTensor> out;
    for (int gate = 0; gate < kGates; ++gate) {
        std::string gn = kGateNames[gate];
        out.push_back({"lstm.Wx." + gn + ".M", &model.lstm.Wx[gate].M});
        out.push_back({"lstm.Wx." + gn + ".logS2", &model.lstm.Wx[gate].logS2});
    }
    for (int gate = 0; gate < kGates; ++gate) {
        std::string gn = kGateNames[gate];
        out.push_back({"lstm.Wh." + gn + ".M", &model.lstm.Wh[gate].M});
        out.push_back({"lstm.Wh." + gn + ".logS2", &model.lstm.Wh[gate].logS2});
    }
    for (int gate = 0; gate < kGates; ++gate)
        out.push_back({std::string("lstm.bias.") + kGateNames[gate], &model.lstm.bias[gate]});
    out.push_back({"lstm.h0", &model.lstm.h0});
    out.push_back({"lstm.c0", &model.lstm.c0});
    out.push_back({"head.W.M", &model.head.M});
    out.push_back({"head.W.logS2", &model.head.logS2});
    out.push_back({"head.b", &model.headBias});
    if (model.task == "sentiment") out.push_back({"embed.table", &model.embed});
    return out;
}

std::vector<NamedTensorView> model_tensors(const Model& model) {
    std::vector<NamedTensorView> out;
    for (const auto& nt : model_tensors(const_cast<Model&>(model)))
        out.push_back({nt.name, nt.t});
    return out;
}

std::vector<NamedWeight> variational_weights(Model& model, NoiseMode mode) {
    std::vector<NamedWeight> out;
    if (mode != NoiseMode::kSparseVd) return out;
    for (int gate = 0; gate < kGates; ++gate)
        out.push_back({std::string("lstm.Wx.") + kGateNames[gate], &model.lstm.Wx[gate]});
    for (int gate = 0; gate < kGates; ++gate)
        out.push_back({std::string("lstm.Wh.") + kGateNames[gate], &model.lstm.Wh[gate]});
    if (model.task == "charlm") out.push_back({"head.W", &model.head});
    return out;
}

std::vector<NamedTensor> trainable_tensors(Model& model, NoiseMode mode) {
    std::set<const Tensor*> live;
    for (const auto& nw : variational_weights(model, mode)) live.insert(&nw.w->logS2);
    std::vector<NamedTensor> out;
    for (const auto& nt : model_tensors(model)) {
        if (nt.name.ends_with(".logS2") && live.count(nt.t) == 0) continue;
        out.push_back(nt);
    }
    return out;
}

std::vector<Tensor*> decayed_tensors(Model& model, NoiseMode mode) {
    std::set<const Tensor*> live;
    for (const auto& nw : variational_weights(model, mode)) live.insert(&nw.w->M);
    std::vector<Tensor*> out;
    if (model.task == "sentiment") out.push_back(&model.embed);
    for (int gate = 0; gate < kGates; ++gate) {
        if (live.count(&model.lstm.Wx[gate].M) == 0) out.push_back(&model.lstm.Wx[gate].M);
        if (live.count(&model.lstm.Wh[gate].M) == 0) out.push_back(&model.lstm.Wh[gate].M);
    }
    if (live.count(&model.head.M) == 0) out.push_back(&model.head.M);
    return out;
}

// ---- graph assembly ----

ModelNodes bind_model(Graph& g, Model& model) {
    ModelNodes nodes;
    nodes.lstm = bind_lstm(g, model.lstm);
    for (int gate = 0; gate < kGates; ++gate) {
        nodes.nodeOf[&model.lstm.Wx[gate].M] = nodes.lstm.wx[gate].M;
        nodes.nodeOf[&model.lstm.Wx[gate].logS2] = nodes.lstm.wx[gate].logS2;
        nodes.nodeOf[&model.lstm.Wh[gate].M] = nodes.lstm.wh[gate].M;
        nodes.nodeOf[&model.lstm.Wh[gate].logS2] = nodes.lstm.wh[gate].logS2;
        nodes.nodeOf[&model.lstm.bias[gate]] = nodes.lstm.bias[gate];
    }
    nodes.nodeOf[&model.lstm.h0] = nodes.lstm.h0;
    nodes.nodeOf[&model.lstm.c0] = nodes.lstm.c0;
    nodes.head.M = g.param(model.head.M);
    nodes.head.logS2 = g.param(model.head.logS2);
    nodes.headBias = g.param(model.headBias);
    nodes.nodeOf[&model.head.M] = nodes.head.M;
    nodes.nodeOf[&model.head.logS2] = nodes.head.logS2;
    nodes.nodeOf[&model.headBias] = nodes.headBias;
    if (model.task == "sentiment") {
        nodes.embed = g.param(model.embed);
        nodes.nodeOf[&model.embed] = nodes.embed;
    }
    return nodes;
}

BuiltLoss build_charlm_elbo(Graph& g, Model& model, const CharBatch& batch,
                            NoiseMode mode, Rng& rng, double klScale,
                            std::int64_t datasetSize, double weightDecay,
                            double vbdRate) {
    require_task(model, "charlm", "build_charlm_elbo");
    if (batch.inputs.empty()) throw std::invalid_argument("empty batch");
    if (datasetSize <= 0) throw std::invalid_argument("datasetSize must be positive");
    int B = static_cast<int>(batch.inputs.size());

    ModelNodes nodes = bind_model(g, model);
    // Recurrent-only binary masks for the vbd baseline; input masks stay off.
    double pH = (mode == NoiseMode::kVbd) ? vbdRate : 0.0;
    LstmNoise noise = sample_lstm_noise(rng, mode, B, model.inputSize(),
                                        model.hiddenSize(), 0.0, pH);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes.lstm, noise);
    int epsHead = -1;
    if (mode == NoiseMode::kSparseVd)
        epsHead = g.input(sample_standard_normal(rng, {B, model.classes}));

    auto steps = transpose_steps(batch.inputs);
    auto states = lstm_forward_indices(g, nodes.lstm, ctx, steps);

    int ce = -1;
    for (std::size_t t = 0; t < states.size(); ++t) {
        int logits = variational_dense(g, states[t].h, nodes.head, nodes.headBias,
                                       epsHead, -1);
        std::vector<int> tgt(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) tgt[static_cast<std::size_t>(b)] = batch.targets[b][t];
        ce = chain_add(g, ce, g.softmax_ce_sum(logits, std::move(tgt)));
    }
    int nll = g.scale(ce, 1.0 / B);
    return finish_elbo(g, model, mode, std::move(nodes), nll, klScale, datasetSize,
                       weightDecay);
}

BuiltLoss build_sentiment_elbo(Graph& g, Model& model, const RegBatch& batch,
                               NoiseMode mode, Rng& rng, double klScale,
                               std::int64_t datasetSize, double weightDecay,
                               double vbdRate) {
    require_task(model, "sentiment", "build_sentiment_elbo");
    if (batch.tokens.empty()) throw std::invalid_argument("empty batch");
    if (datasetSize <= 0) throw std::invalid_argument("datasetSize must be positive");
    int B = static_cast<int>(batch.tokens.size());
    int L = static_cast<int>(batch.tokens[0].size());
    if (L != model.seqLen)
        throw std::invalid_argument("batch padded to " + std::to_string(L) +
                                    " but the model expects " + std::to_string(model.seqLen));

    ModelNodes nodes = bind_model(g, model);
    // Binary masks stay on the embedding and head under both vbd and
    // sparse-vd; only the LSTM trades them for a posterior.
    bool binaryMasks = mode != NoiseMode::kNone && vbdRate > 0.0;
    int maskEmbed = -1;
    if (binaryMasks)
        maskEmbed = g.input(vbd_mask(rng, vbdRate, {B, model.embedSize}));
    double pXH = (mode == NoiseMode::kVbd) ? vbdRate : 0.0;
    LstmNoise noise = sample_lstm_noise(rng, mode, B, model.embedSize,
                                        model.hiddenSize(), pXH, pXH);
    LstmStepCtx ctx = bind_lstm_noise(g, nodes.lstm, noise);
    int maskHead = -1;
    if (binaryMasks)
        maskHead = g.input(vbd_mask(rng, vbdRate, {B, model.hiddenSize()}));

    auto steps = transpose_steps(batch.tokens);
    std::vector<int> xNodes;
    for (const auto& idx : steps) {
        int x = g.gather_rows(nodes.embed, idx);
        if (maskEmbed >= 0) x = g.mul(x, maskEmbed);
        xNodes.push_back(x);
    }
    auto states = lstm_forward(g, nodes.lstm, ctx, xNodes, B);

    // The head reads h at each item's last non-pad position.
    int hLast = -1;
    for (int t = 0; t < L; ++t) {
        Tensor sel({B});
        bool any = false;
        for (int b = 0; b < B; ++b) {
            if (batch.lastPos[static_cast<std::size_t>(b)] == t) {
                sel[b] = 1.0;
                any = true;
            }
        }
        if (!any) continue;
        hLast = chain_add(g, hLast,
                          g.row_scale(states[static_cast<std::size_t>(t)].h, g.input(sel)));
    }
    int pred = variational_dense(g, hLast, nodes.head, nodes.headBias, -1, maskHead);
    int nll = g.scale(g.sq_err_sum(pred, batch.targets), 1.0 / B);
    return finish_elbo(g, model, mode, std::move(nodes), nll, klScale, datasetSize,
                       weightDecay);
}

// ---- deterministic mean-weight inference ----

namespace {

// One batched LSTM step on preactivation matrices P[4] (overwritten), updating
// H and C in place. Gate order: i, o, f, g.
void lstm_gates_inplace(EMat P[kGates], EMat& H, EMat& C) {
    double* pi = P[0].data();
    double* po = P[1].data();
    double* pf = P[2].data();
    double* pg = P[3].data();
    double* c = C.data();
    double* h = H.data();
    std::int64_t n = C.size();
    for (std::int64_t k = 0; k < n; ++k) {
        double gi = stable_sigmoid(pi[k]);
        double go = stable_sigmoid(po[k]);
        double gf = stable_sigmoid(pf[k]);
        double gg = std::tanh(pg[k]);
        c[k] = gf * c[k] + gi * gg;
        h[k] = go * std::tanh(c[k]);
    }
}

double row_ce_nats(const double* logits, int K, int target) {
    double mx = logits[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, logits[k]);
    double se = 0;
    for (int k = 0; k < K; ++k) se += std::exp(logits[k] - mx);
    return std::log(se) + mx - logits[target];
}

}  // namespace

Tensor charlm_logits_mean(const Model& model, const std::vector<int>& window) {
    require_task(model, "charlm", "charlm_logits_mean");
    if (window.empty()) throw std::invalid_argument("empty window");
    int m = model.hiddenSize(), K = model.classes;
    int len = static_cast<int>(window.size());

    ERow h = crow(model.lstm.h0), c = crow(model.lstm.c0);
    Tensor out({len, K});
    EMat P[kGates];
    EMat H(1, m), C(1, m);
    H.row(0) = h;
    C.row(0) = c;
    for (int t = 0; t < len; ++t) {
        int idx = window[static_cast<std::size_t>(t)];
        if (idx < 0 || idx >= model.inputSize())
            throw std::invalid_argument("symbol index " + std::to_string(idx) +
                                        " outside the input range");
        for (int gate = 0; gate < kGates; ++gate) {
            P[gate] = H * cmat(model.lstm.Wh[gate].M);
            P[gate].row(0) += cmat(model.lstm.Wx[gate].M).row(idx);
            P[gate].row(0) += crow(model.lstm.bias[gate]);
        }
        lstm_gates_inplace(P, H, C);
        ERow logits = H.row(0) * cmat(model.head.M) + crow(model.headBias);
        std::copy(logits.data(), logits.data() + K, out.data() + std::int64_t(t) * K);
    }
    return out;
}

double eval_charlm_bpc(const Model& model, const std::vector<int>& corpus, int batch) {
    require_task(model, "charlm", "eval_charlm_bpc");
    if (batch < 1) throw std::invalid_argument("batch must be at least 1");
    auto batches = char_windows(corpus, model.seqLen, batch);
    int K = model.classes;

    double nats = 0;
    std::int64_t total = 0;
    EMat P[kGates];
    for (const auto& cb : batches) {
        int B = static_cast<int>(cb.inputs.size());
        int T = static_cast<int>(cb.inputs[0].size());
        EMat H = crow(model.lstm.h0).replicate(B, 1);
        EMat C = crow(model.lstm.c0).replicate(B, 1);
        for (int t = 0; t < T; ++t) {
            for (int gate = 0; gate < kGates; ++gate) {
                P[gate].noalias() = H * cmat(model.lstm.Wh[gate].M);
                auto wx = cmat(model.lstm.Wx[gate].M);
                for (int b = 0; b < B; ++b) P[gate].row(b) += wx.row(cb.inputs[b][t]);
                P[gate].rowwise() += crow(model.lstm.bias[gate]);
            }
            lstm_gates_inplace(P, H, C);
            EMat logits = H * cmat(model.head.M);
            logits.rowwise() += crow(model.headBias);
            for (int b = 0; b < B; ++b)
                nats += row_ce_nats(logits.data() + std::int64_t(b) * K, K,
                                    cb.targets[b][t]);
        }
        total += std::int64_t(B) * T;
    }
    return nats / (std::log(2.0) * static_cast<double>(total));
}

double sentiment_pred_mean(const Model& model, const std::vector<int>& tokens,
                           int lastPos) {
    require_task(model, "sentiment", "sentiment_pred_mean");
    if (lastPos < 0 || lastPos >= static_cast<int>(tokens.size()))
        throw std::invalid_argument("lastPos outside the sequence");
    int m = model.hiddenSize();
    EMat H(1, m), C(1, m), P[kGates];
    H.row(0) = crow(model.lstm.h0);
    C.row(0) = crow(model.lstm.c0);
    for (int t = 0; t <= lastPos; ++t) {
        int idx = tokens[static_cast<std::size_t>(t)];
        if (idx < 0 || idx >= model.embed.rows())
            throw std::invalid_argument("token index " + std::to_string(idx) +
                                        " outside the embedding table");
        ERow x = cmat(model.embed).row(idx);
        for (int gate = 0; gate < kGates; ++gate) {
            P[gate] = x * cmat(model.lstm.Wx[gate].M) + H * cmat(model.lstm.Wh[gate].M);
            P[gate].row(0) += crow(model.lstm.bias[gate]);
        }
        lstm_gates_inplace(P, H, C);
    }
    return (H.row(0) * cmat(model.head.M))(0, 0) + model.headBias[0];
}

double eval_sentiment_mse(const Model& model, const RegDataset& data, int batch) {
    require_task(model, "sentiment", "eval_sentiment_mse");
    if (batch < 1) throw std::invalid_argument("batch must be at least 1");
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    if (data.L != model.seqLen)
        throw std::invalid_argument("dataset padded to " + std::to_string(data.L) +
                                    " but the model expects " +
                                    std::to_string(model.seqLen));
    int m = model.hiddenSize();
    double sse = 0;
    EMat P[kGates];
    for (std::int64_t start = 0; start < data.size(); start += batch) {
        std::int64_t stop = std::min<std::int64_t>(start + batch, data.size());
        std::vector<std::int64_t> ids;
        for (std::int64_t i = start; i < stop; ++i) ids.push_back(i);
        RegBatch rb = make_reg_batch(data, ids);
        int B = static_cast<int>(rb.tokens.size());

        EMat H = crow(model.lstm.h0).replicate(B, 1);
        EMat C = crow(model.lstm.c0).replicate(B, 1);
        EMat HLast = EMat::Zero(B, m);
        EMat X(B, model.embedSize);
        auto emb = cmat(model.embed);
        for (int t = 0; t < data.L; ++t) {
            for (int b = 0; b < B; ++b) X.row(b) = emb.row(rb.tokens[b][t]);
            for (int gate = 0; gate < kGates; ++gate) {
                P[gate].noalias() = X * cmat(model.lstm.Wx[gate].M);
                P[gate].noalias() += H * cmat(model.lstm.Wh[gate].M);
                P[gate].rowwise() += crow(model.lstm.bias[gate]);
            }
            lstm_gates_inplace(P, H, C);
            for (int b = 0; b < B; ++b)
                if (rb.lastPos[static_cast<std::size_t>(b)] == t) HLast.row(b) = H.row(b);
        }
        EMat pred = HLast * cmat(model.head.M);
        for (int b = 0; b < B; ++b) {
            double d = pred(b, 0) + model.headBias[0] - rb.targets[static_cast<std::size_t>(b)];
            sse += d * d;
        }
    }
    return sse / static_cast<double>(data.size());
}

// ---- checkpoints ----

ojson model_to_container(const Model& model, const ojson& meta) {
    ojson root;
    root["format"] = "sparsevd-checkpoint-v1";
    root["task"] = model.task;
    root["vocab"] = model.vocab.items;
    root["seqLen"] = model.seqLen;
    root["classes"] = model.classes;
    root["embedSize"] = model.embedSize;
    root["hidden"] = model.hiddenSize();
    ojson tens;
    for (const auto& nt : model_tensors(model)) tens[nt.name] = tensor_to_json(*nt.t);
    root["tensors"] = std::move(tens);
    root["meta"] = meta.is_null() ? ojson::object() : meta;
    return root;
}

Model model_from_container(const ojson& root) {
    if (!root.is_object() || root.value("format", std::string()) != "sparsevd-checkpoint-v1")
        throw std::runtime_error("not a checkpoint container");
    Vocab vocab;
    for (const auto& item : root.at("vocab")) vocab.add(item.get<std::string>());
    if (vocab.size() != static_cast<int>(root.at("vocab").size()))
        throw std::runtime_error("checkpoint vocabulary has duplicate symbols");
    Model md = model_skeleton(root.at("task").get<std::string>(), vocab,
                              root.at("seqLen").get<int>(), root.at("hidden").get<int>(),
                              root.at("embedSize").get<int>());
    if (md.classes != root.at("classes").get<int>())
        throw std::runtime_error("checkpoint class count does not match its vocabulary");
    const ojson& tens = root.at("tensors");
    auto named = model_tensors(md);
    if (tens.size() != named.size())
        throw std::runtime_error("checkpoint holds " + std::to_string(tens.size()) +
                                 " tensors, expected " + std::to_string(named.size()));
    for (auto& nt : named) {
        auto it = tens.find(nt.name);
        if (it == tens.end())
            throw std::runtime_error("checkpoint is missing tensor " + nt.name);
        Tensor t = tensor_from_json(*it);
        if (!t.same_shape(*nt.t))
            throw std::runtime_error("checkpoint tensor " + nt.name + " has shape " +
                                     shape_str(t.shape) + ", expected " +
                                     shape_str(nt.t->shape));
        *nt.t = std::move(t);
    }
    return md;
}

void save_checkpoint(const std::string& path, const Model& model, const ojson& meta) {
    save_container(path, model_to_container(model, meta));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    ojson root = load_container(path);
    LoadedCheckpoint out{model_from_container(root), ojson::object()};
    if (root.contains("meta")) out.meta = root["meta"];
    return out;
}

void init_from_model(Model& fresh, const Model& source) {
    if (fresh.task != source.task)
        throw std::invalid_argument("checkpoint task '" + source.task +
                                    "' does not match '" + fresh.task + "'");
    if (fresh.vocab.items != source.vocab.items)
        throw std::invalid_argument(
            "checkpoint vocabulary (" + std::to_string(source.vocab.size()) +
            " symbols) does not match the training data's (" +
            std::to_string(fresh.vocab.size()) + ")");
    auto dst = model_tensors(fresh);
    auto src = model_tensors(const_cast<Model&>(source));
    std::string bad;
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (!dst[i].t->same_shape(*src[i].t))
            bad += "\n  " + dst[i].name + ": checkpoint " + shape_str(src[i].t->shape) +
                   " vs model " + shape_str(dst[i].t->shape);
    }
    if (!bad.empty())
        throw std::invalid_argument("checkpoint shapes do not match the model:" + bad);
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].name.ends_with(".logS2"))
            dst[i].t->fill(kLogS2Init);
        else
            *dst[i].t = *src[i].t;
    }
}

// ---- pruned model ----

std::vector<double> model_sparsity(const Model& model, double threshold) {
    std::vector<PruneMask> mx, mh;
    for (int gate = 0; gate < kGates; ++gate) {
        mx.push_back(prune(model.lstm.Wx[gate], threshold).mask);
        mh.push_back(prune(model.lstm.Wh[gate], threshold).mask);
    }
    std::vector<const PruneMask*> gx, gh;
    for (const auto& pm : mx) gx.push_back(&pm);
    for (const auto& pm : mh) gh.push_back(&pm);
    std::vector<double> out = {sparsity_percent(gx), sparsity_percent(gh)};
    if (model.task == "charlm") {
        PruneMask my = prune(model.head, threshold).mask;
        out.push_back(sparsity_percent({&my}));
    }
    return out;
}

SparseModel sparsify(const Model& model, NoiseMode mode, double threshold) {
    if (mode != NoiseMode::kSparseVd)
        throw std::invalid_argument("checkpoint was trained with mode '" + mode_name(mode) +
                                    "', which keeps dense weights; nothing to prune");
    SparseModel s;
    s.task = model.task;
    s.vocab = model.vocab;
    s.seqLen = model.seqLen;
    s.classes = model.classes;
    s.embedSize = model.embedSize;
    s.hidden = model.hiddenSize();
    s.inputSize = model.inputSize();
    s.threshold = threshold;

    std::vector<PruneMask> mx, mh;
    for (int gate = 0; gate < kGates; ++gate) {
        PruneResult px = prune(model.lstm.Wx[gate], threshold);
        s.wx[gate] = to_csr(px.zeroedMeans);
        mx.push_back(std::move(px.mask));
        PruneResult ph = prune(model.lstm.Wh[gate], threshold);
        s.wh[gate] = to_csr(ph.zeroedMeans);
        mh.push_back(std::move(ph.mask));
        s.bias[gate] = model.lstm.bias[gate];
    }
    s.h0 = model.lstm.h0;
    s.c0 = model.lstm.c0;
    s.headBias = model.headBias;

    std::vector<const PruneMask*> gx, gh;
    for (const auto& pm : mx) gx.push_back(&pm);
    for (const auto& pm : mh) gh.push_back(&pm);
    s.sparsity = {sparsity_percent(gx), sparsity_percent(gh)};

    if (model.task == "charlm") {
        PruneResult py = prune(model.head, threshold);
        s.headCsr = to_csr(py.zeroedMeans);
        s.headSparse = true;
        s.sparsity.push_back(sparsity_percent({&py.mask}));
    } else {
        s.headDense = model.head.M;
        s.headSparse = false;
        s.embed = model.embed;
    }
    return s;
}

ojson sparse_to_container(const SparseModel& s, const ojson& meta) {
    ojson root;
    root["format"] = "sparsevd-sparse-v1";
    root["task"] = s.task;
    root["vocab"] = s.vocab.items;
    root["seqLen"] = s.seqLen;
    root["classes"] = s.classes;
    root["embedSize"] = s.embedSize;
    root["hidden"] = s.hidden;
    root["inputSize"] = s.inputSize;
    root["threshold"] = s.threshold;
    root["headSparse"] = s.headSparse;
    root["sparsity"] = s.sparsity;
    ojson csr;
    for (int gate = 0; gate < kGates; ++gate) {
        csr[std::string("lstm.Wx.") + kGateNames[gate]] = csr_to_json(s.wx[gate]);
        csr[std::string("lstm.Wh.") + kGateNames[gate]] = csr_to_json(s.wh[gate]);
    }
    if (s.headSparse) csr["head.W"] = csr_to_json(s.headCsr);
    root["csr"] = std::move(csr);
    ojson tens;
    for (int gate = 0; gate < kGates; ++gate)
        tens[std::string("lstm.bias.") + kGateNames[gate]] = tensor_to_json(s.bias[gate]);
    tens["lstm.h0"] = tensor_to_json(s.h0);
    tens["lstm.c0"] = tensor_to_json(s.c0);
    if (!s.headSparse) tens["head.W"] = tensor_to_json(s.headDense);
    tens["head.b"] = tensor_to_json(s.headBias);
    if (s.task == "sentiment") tens["embed.table"] = tensor_to_json(s.embed);
    root["tensors"] = std::move(tens);
    root["meta"] = meta.is_null() ? ojson::object() : meta;
    return root;
}

SparseModel sparse_from_container(const ojson& root) {
    if (!root.is_object() || root.value("format", std::string()) != "sparsevd-sparse-v1")
        throw std::runtime_error("not a sparse export container");
    SparseModel s;
    s.task = root.at("task").get<std::string>();
    for (const auto& item : root.at("vocab")) s.vocab.add(item.get<std::string>());
    s.seqLen = root.at("seqLen").get<int>();
    s.classes = root.at("classes").get<int>();
    s.embedSize = root.at("embedSize").get<int>();
    s.hidden = root.at("hidden").get<int>();
    s.inputSize = root.at("inputSize").get<int>();
    s.threshold = root.at("threshold").get<double>();
    s.headSparse = root.at("headSparse").get<bool>();
    s.sparsity = root.at("sparsity").get<std::vector<double>>();
    const ojson& csr = root.at("csr");
    const ojson& tens = root.at("tensors");
    for (int gate = 0; gate < kGates; ++gate) {
        s.wx[gate] = csr_from_json(csr.at(std::string("lstm.Wx.") + kGateNames[gate]));
        s.wh[gate] = csr_from_json(csr.at(std::string("lstm.Wh.") + kGateNames[gate]));
        if (s.wx[gate].rows != s.inputSize || s.wx[gate].cols != s.hidden ||
            s.wh[gate].rows != s.hidden || s.wh[gate].cols != s.hidden)
            throw std::runtime_error("sparse export matrix sizes do not match its header");
        s.bias[gate] = tensor_from_json(tens.at(std::string("lstm.bias.") + kGateNames[gate]));
    }
    if (s.headSparse)
        s.headCsr = csr_from_json(csr.at("head.W"));
    else
        s.headDense = tensor_from_json(tens.at("head.W"));
    s.h0 = tensor_from_json(tens.at("lstm.h0"));
    s.c0 = tensor_from_json(tens.at("lstm.c0"));
    s.headBias = tensor_from_json(tens.at("head.b"));
    if (s.task == "sentiment") s.embed = tensor_from_json(tens.at("embed.table"));
    return s;
}

// ---- compressed inference ----

namespace {

// One step of the compressed recurrence; x enters either as a row of the
// input-weight matrices (charlm one-hot) or as a dense embedded vector.
void sparse_step(const SparseModel& s, const std::vector<double>* xDense, int xRow,
                 std::vector<double>& h, std::vector<double>& c) {
    int m = s.hidden;
    std::vector<double> pre[kGates];
    for (int gate = 0; gate < kGates; ++gate) {
        pre[gate].assign(static_cast<std::size_t>(m), 0.0);
        const CsrMatrix& wx = s.wx[gate];
        if (xDense) {
            pre[gate] = csr_vecmat(*xDense, wx);
        } else {
            for (std::int64_t k = wx.rowOffsets[static_cast<std::size_t>(xRow)];
                 k < wx.rowOffsets[static_cast<std::size_t>(xRow) + 1]; ++k)
                pre[gate][static_cast<std::size_t>(wx.colIndices[static_cast<std::size_t>(k)])] +=
                    wx.values[static_cast<std::size_t>(k)];
        }
        std::vector<double> hw = csr_vecmat(h, s.wh[gate]);
        for (int j = 0; j < m; ++j) pre[gate][static_cast<std::size_t>(j)] +=
            hw[static_cast<std::size_t>(j)] + s.bias[gate][j];
    }
    for (int j = 0; j < m; ++j) {
        std::size_t u = static_cast<std::size_t>(j);
        double gi = stable_sigmoid(pre[0][u]);
        double go = stable_sigmoid(pre[1][u]);
        double gf = stable_sigmoid(pre[2][u]);
        double gg = std::tanh(pre[3][u]);
        c[u] = gf * c[u] + gi * gg;
        h[u] = go * std::tanh(c[u]);
    }
}

std::vector<double> sparse_head(const SparseModel& s, const std::vector<double>& h) {
    std::vector<double> logits;
    if (s.headSparse)
        logits = csr_vecmat(h, s.headCsr);
    else {
        logits.assign(static_cast<std::size_t>(s.classes), 0.0);
        for (int j = 0; j < s.hidden; ++j)
            for (int k = 0; k < s.classes; ++k)
                logits[static_cast<std::size_t>(k)] += h[static_cast<std::size_t>(j)] *
                                                       s.headDense.at(j, k);
    }
    for (int k = 0; k < s.classes; ++k) logits[static_cast<std::size_t>(k)] += s.headBias[k];
    return logits;
}

}  // namespace

Tensor charlm_logits_sparse(const SparseModel& s, const std::vector<int>& window) {
    if (s.task != "charlm")
        throw std::invalid_argument("charlm_logits_sparse: export is for " + s.task);
    if (window.empty()) throw std::invalid_argument("empty window");
    std::vector<double> h(s.h0.v.begin(), s.h0.v.end());
    std::vector<double> c(s.c0.v.begin(), s.c0.v.end());
    Tensor out({static_cast<int>(window.size()), s.classes});
    for (std::size_t t = 0; t < window.size(); ++t) {
        int idx = window[t];
        if (idx < 0 || idx >= s.inputSize)
            throw std::invalid_argument("symbol index outside the input range");
        sparse_step(s, nullptr, idx, h, c);
        std::vector<double> logits = sparse_head(s, h);
        std::copy(logits.begin(), logits.end(),
                  out.data() + static_cast<std::int64_t>(t) * s.classes);
    }
    return out;
}

double eval_charlm_bpc_sparse(const SparseModel& s, const std::vector<int>& corpus) {
    std::int64_t nwin = char_window_count(static_cast<std::int64_t>(corpus.size()), s.seqLen);
    double nats = 0;
    for (std::int64_t w = 0; w < nwin; ++w) {
        CharBatch cb = make_char_batch(corpus, s.seqLen, {w});
        Tensor logits = charlm_logits_sparse(s, cb.inputs[0]);
        for (int t = 0; t < s.seqLen; ++t)
            nats += row_ce_nats(logits.data() + std::int64_t(t) * s.classes, s.classes,
                                cb.targets[0][t]);
    }
    return nats / (std::log(2.0) * static_cast<double>(nwin * s.seqLen));
}

double sentiment_pred_sparse(const SparseModel& s, const std::vector<int>& tokens,
                             int lastPos) {
    if (s.task != "sentiment")
        throw std::invalid_argument("sentiment_pred_sparse: export is for " + s.task);
    if (lastPos < 0 || lastPos >= static_cast<int>(tokens.size()))
        throw std::invalid_argument("lastPos outside the sequence");
    std::vector<double> h(s.h0.v.begin(), s.h0.v.end());
    std::vector<double> c(s.c0.v.begin(), s.c0.v.end());
    std::vector<double> x(static_cast<std::size_t>(s.embedSize));
    for (int t = 0; t <= lastPos; ++t) {
        int idx = tokens[static_cast<std::size_t>(t)];
        if (idx < 0 || idx >= s.embed.rows())
            throw std::invalid_argument("token index outside the embedding table");
        for (int j = 0; j < s.embedSize; ++j) x[static_cast<std::size_t>(j)] = s.embed.at(idx, j);
        sparse_step(s, &x, -1, h, c);
    }
    double pred = s.headBias[0];
    for (int j = 0; j < s.hidden; ++j) pred += h[static_cast<std::size_t>(j)] * s.headDense[j];
    return pred;
}

double eval_sentiment_mse_sparse(const SparseModel& s, const RegDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    if (data.L != s.seqLen)
        throw std::invalid_argument("dataset padded to " + std::to_string(data.L) +
                                    " but the export expects " + std::to_string(s.seqLen));
    double sse = 0;
    for (std::int64_t i = 0; i < data.size(); ++i) {
        double d = sentiment_pred_sparse(s, data.tokens[static_cast<std::size_t>(i)],
                                         data.lastPos[static_cast<std::size_t>(i)]) -
                   data.targets[static_cast<std::size_t>(i)];
        sse += d * d;
    }
    return sse / static_cast<double>(data.size());
}

}  // namespace sparsevd
