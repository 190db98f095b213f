#include "sparsevd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

namespace sparsevd {

namespace {

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
    throw std::invalid_argument("config key '" + key + "' " + why);
}

long long parse_ll(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(value, &used);
    } catch (const std::exception&) {
        bad_key(key, "needs an integer, got '" + value + "'");
    }
    if (used != value.size()) bad_key(key, "needs an integer, got '" + value + "'");
    return out;
}

int parse_int(const std::string& key, const std::string& value) {
    long long out = parse_ll(key, value);
    if (out < std::numeric_limits<int>::min() || out > std::numeric_limits<int>::max())
        bad_key(key, "is out of range: '" + value + "'");
    return static_cast<int>(out);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(value, &used);
    } catch (const std::exception&) {
        bad_key(key, "needs a nonnegative integer, got '" + value + "'");
    }
    if (used != value.size() || value.find('-') != std::string::npos)
        bad_key(key, "needs a nonnegative integer, got '" + value + "'");
    return out;
}

double parse_float(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(value, &used);
    } catch (const std::exception&) {
        bad_key(key, "needs a number, got '" + value + "'");
    }
    if (used != value.size()) bad_key(key, "needs a number, got '" + value + "'");
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (task != "charlm" && task != "sentiment")
        bad_key("task", "must be charlm or sentiment, got '" + task + "'");
    try {
        parse_mode(mode);
    } catch (const std::exception&) {
        bad_key("mode", "must be none, vbd or sparse-vd, got '" + mode + "'");
    }
    if (hiddenSize < 1) bad_key("hiddenSize", "must be at least 1");
    if (task == "sentiment" && embedSize < 1) bad_key("embedSize", "must be at least 1");
    if (batchSize < 1) bad_key("batchSize", "must be at least 1");
    if (epochs < 1) bad_key("epochs", "must be at least 1");
    if (seqLen < 1) bad_key("seqLen", "must be at least 1");
    if (!(learningRate > 0) || !std::isfinite(learningRate))
        bad_key("learningRate", "must be positive");
    if (!(clipThreshold > 0) || !std::isfinite(clipThreshold))
        bad_key("clipThreshold", "must be positive");
    if (!(vbdRate >= 0 && vbdRate < 1)) bad_key("vbdRate", "must be in [0, 1)");
    if (!(weightDecay >= 0) || !std::isfinite(weightDecay))
        bad_key("weightDecay", "must be nonnegative");
    if (!(klScale >= 0) || !std::isfinite(klScale)) bad_key("klScale", "must be nonnegative");
    if (klWarmupEpochs < 0) bad_key("klWarmupEpochs", "must be nonnegative");
    if (snapshotEpoch < 0) bad_key("snapshotEpoch", "must be nonnegative");
    if (snapshotEpoch > epochs) bad_key("snapshotEpoch", "exceeds epochs; it would never fire");
    if (dataTrain.empty()) bad_key("dataTrain", "is required");
    if (dataValid.empty()) bad_key("dataValid", "is required");
    if (dataTest.empty()) bad_key("dataTest", "is required");
    if (outDir.empty()) bad_key("outDir", "is required");
}

TrainConfig config_from_pairs(const std::vector<std::pair<std::string, std::string>>& kv) {
    TrainConfig cfg;
    for (const auto& [key, value] : kv) {
        if (key == "task") cfg.task = value;
        else if (key == "mode") cfg.mode = value;
        else if (key == "hiddenSize") cfg.hiddenSize = parse_int(key, value);
        else if (key == "embedSize") cfg.embedSize = parse_int(key, value);
        else if (key == "batchSize") cfg.batchSize = parse_int(key, value);
        else if (key == "epochs") cfg.epochs = parse_int(key, value);
        else if (key == "seqLen") cfg.seqLen = parse_int(key, value);
        else if (key == "learningRate") cfg.learningRate = parse_float(key, value);
        else if (key == "clipThreshold") cfg.clipThreshold = parse_float(key, value);
        else if (key == "vbdRate") cfg.vbdRate = parse_float(key, value);
        else if (key == "weightDecay") cfg.weightDecay = parse_float(key, value);
        else if (key == "klScale") cfg.klScale = parse_float(key, value);
        else if (key == "klWarmupEpochs") cfg.klWarmupEpochs = parse_int(key, value);
        else if (key == "snapshotEpoch") cfg.snapshotEpoch = parse_int(key, value);
        else if (key == "seed") cfg.seed = parse_u64(key, value);
        else if (key == "initFrom") cfg.initFrom = value;
        else if (key == "dataTrain") cfg.dataTrain = value;
        else if (key == "dataValid") cfg.dataValid = value;
        else if (key == "dataTest") cfg.dataTest = value;
        else if (key == "outDir") cfg.outDir = value;
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
    return cfg;
}

ojson config_echo(const TrainConfig& cfg) {
    ojson j;
    j["task"] = cfg.task;
    j["mode"] = cfg.mode;
    j["hiddenSize"] = cfg.hiddenSize;
    j["embedSize"] = cfg.embedSize;
    j["batchSize"] = cfg.batchSize;
    j["epochs"] = cfg.epochs;
    j["seqLen"] = cfg.seqLen;
    j["learningRate"] = cfg.learningRate;
    j["clipThreshold"] = cfg.clipThreshold;
    j["vbdRate"] = cfg.vbdRate;
    j["weightDecay"] = cfg.weightDecay;
    j["klScale"] = cfg.klScale;
    j["klWarmupEpochs"] = cfg.klWarmupEpochs;
    j["snapshotEpoch"] = cfg.snapshotEpoch;
    j["seed"] = cfg.seed;
    j["initFrom"] = cfg.initFrom;
    j["dataTrain"] = cfg.dataTrain;
    j["dataValid"] = cfg.dataValid;
    j["dataTest"] = cfg.dataTest;
    j["outDir"] = cfg.outDir;
    return j;
}

void AdamState::init(const std::vector<NamedTensor>& params) {
    step = 0;
    m1.clear();
    m2.clear();
    for (const auto& p : params) {
        m1.emplace_back(p.t->shape);
        m2.emplace_back(p.t->shape);
    }
}

void adam_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m1.size())
        throw std::invalid_argument("adam_step: parameter/gradient/state lists disagree");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(*params[i].t, grads[i], "adam_step");
        if (!grads[i].all_finite())
            throw std::runtime_error("adam_step: non-finite gradient for " + params[i].name);
    }
    ++state.step;
    double b1c = 1.0 - std::pow(AdamState::kBeta1, static_cast<double>(state.step));
    double b2c = 1.0 - std::pow(AdamState::kBeta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& th = *params[i].t;
        Tensor& m1 = state.m1[i];
        Tensor& m2 = state.m2[i];
        const Tensor& g = grads[i];
        for (std::int64_t k = 0; k < th.size(); ++k) {
            m1[k] = AdamState::kBeta1 * m1[k] + (1.0 - AdamState::kBeta1) * g[k];
            m2[k] = AdamState::kBeta2 * m2[k] + (1.0 - AdamState::kBeta2) * g[k] * g[k];
            th[k] -= lr * (m1[k] / b1c) / (std::sqrt(m2[k] / b2c) + AdamState::kEps);
        }
    }
}

double global_grad_norm(const std::vector<Tensor>& grads) {
    double ss = 0;
    for (const Tensor& g : grads)
        for (double x : g.v) ss += x * x;
    return std::sqrt(ss);
}

double clip_gradients(std::vector<Tensor>& grads, double threshold) {
    if (!(threshold > 0) || !std::isfinite(threshold))
        throw std::invalid_argument("clip threshold must be positive");
    double norm = global_grad_norm(grads);
    if (norm > threshold) {
        double sc = threshold / norm;
        for (Tensor& g : grads)
            for (double& x : g.v) x *= sc;
    }
    return norm;
}

namespace {

std::vector<int> encode_split(const Vocab& vocab, const std::string& path, int seqLen) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
    std::vector<int> corpus = encode_chars(vocab, text);
    try {
        char_window_count(static_cast<std::int64_t>(corpus.size()), seqLen);
    } catch (const std::exception&) {
        throw DataError(path + ": needs at least seqLen+1 = " + std::to_string(seqLen + 1) +
                        " characters, has " + std::to_string(corpus.size()));
    }
    return corpus;
}

RegDataset load_split(const std::string& path, int L, const Vocab* shared) {
    RegDataset ds;
    try {
        ds = load_regression_tsv(path, L, shared);
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
    if (ds.size() == 0) throw DataError(path + ": no usable lines");
    return ds;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    NoiseMode mode = parse_mode(cfg.mode);
    bool charlm = cfg.task == "charlm";
    std::filesystem::create_directories(cfg.outDir);

    // ---- data ----
    std::vector<int> trainCorpus, validCorpus, testCorpus;
    RegDataset trainDs, validDs, testDs;
    Vocab vocab;
    std::int64_t datasetSize = 0;
    if (charlm) {
        std::string text;
        try {
            text = read_text_file(cfg.dataTrain);
        } catch (const std::exception& e) {
            throw DataError(e.what());
        }
        try {
            vocab = build_vocab_chars(text);
        } catch (const std::exception& e) {
            throw DataError(cfg.dataTrain + ": " + e.what());
        }
        trainCorpus = encode_chars(vocab, text);
        try {
            datasetSize = char_window_count(static_cast<std::int64_t>(trainCorpus.size()),
                                            cfg.seqLen);
        } catch (const std::exception&) {
            throw DataError(cfg.dataTrain + ": too short for seqLen " +
                            std::to_string(cfg.seqLen));
        }
        validCorpus = encode_split(vocab, cfg.dataValid, cfg.seqLen);
        testCorpus = encode_split(vocab, cfg.dataTest, cfg.seqLen);
    } else {
        trainDs = load_split(cfg.dataTrain, cfg.seqLen, nullptr);
        validDs = load_split(cfg.dataValid, cfg.seqLen, &trainDs.vocab);
        testDs = load_split(cfg.dataTest, cfg.seqLen, &trainDs.vocab);
        vocab = trainDs.vocab;
        datasetSize = trainDs.size();
    }

    // ---- model ----
    Rng rng(cfg.seed);
    Model model = charlm
                      ? make_charlm_model(rng, vocab, cfg.hiddenSize, cfg.seqLen)
                      : make_sentiment_model(rng, vocab, cfg.embedSize, cfg.hiddenSize,
                                             cfg.seqLen);
    if (!cfg.initFrom.empty()) {
        LoadedCheckpoint src;
        try {
            src = load_checkpoint(cfg.initFrom);
        } catch (const std::exception& e) {
            throw DataError(cfg.initFrom + ": " + e.what());
        }
        try {
            init_from_model(model, src.model);
        } catch (const std::exception& e) {
            throw DataError(cfg.initFrom + ": " + e.what());
        }
    }

    auto params = trainable_tensors(model, mode);
    AdamState adam;
    adam.init(params);

    // ---- artifacts ----
    TrainResult res;
    res.metricsPath = cfg.outDir + "/metrics.jsonl";
    res.checkpointPath = cfg.outDir + "/checkpoint.bin";
    res.bestCheckpointPath = cfg.outDir + "/checkpoint-best.bin";
    std::ofstream mf(res.metricsPath, std::ios::binary | std::ios::trunc);
    if (!mf) throw DataError("cannot write " + res.metricsPath);

    auto save_state = [&](const std::string& path, int epoch, double vq, double tq,
                          bool evaluated) {
        ojson meta;
        meta["epoch"] = epoch;
        meta["mode"] = cfg.mode;
        if (evaluated) {
            meta["validQuality"] = vq;
            meta["testQuality"] = tq;
        }
        meta["config"] = config_echo(cfg);
        save_checkpoint(path, model, meta);
    };
    save_state(res.checkpointPath, 0, 0, 0, false);  // last-good from the start

    auto eval_quality = [&](bool valid) {
        if (charlm) return eval_charlm_bpc(model, valid ? validCorpus : testCorpus);
        return eval_sentiment_mse(model, valid ? validDs : testDs);
    };

    // ---- epochs ----
    double bestValid = std::numeric_limits<double>::infinity();
    auto t0 = std::chrono::steady_clock::now();
    std::vector<std::int64_t> order(static_cast<std::size_t>(datasetSize));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double klEff = cfg.klScale;
        if (cfg.klWarmupEpochs > 0)
            klEff = cfg.klScale *
                    std::min(1.0, static_cast<double>(epoch) / cfg.klWarmupEpochs);
        rng.shuffle(order);

        double lossSum = 0;
        long nb = 0;
        for (std::int64_t start = 0; start < datasetSize; start += cfg.batchSize) {
            std::int64_t stop = std::min<std::int64_t>(start + cfg.batchSize, datasetSize);
            std::vector<std::int64_t> ids(order.begin() + start, order.begin() + stop);

            Graph g;
            BuiltLoss built =
                charlm ? build_charlm_elbo(g, model,
                                           make_char_batch(trainCorpus, cfg.seqLen, ids),
                                           mode, rng, klEff, datasetSize, cfg.weightDecay,
                                           cfg.vbdRate)
                       : build_sentiment_elbo(g, model, make_reg_batch(trainDs, ids), mode,
                                              rng, klEff, datasetSize, cfg.weightDecay,
                                              cfg.vbdRate);
            double lv = g.value(built.loss)[0];
            if (!std::isfinite(lv))
                throw DivergenceError("loss became non-finite at epoch " +
                                      std::to_string(epoch) + ", batch " +
                                      std::to_string(nb + 1));
            g.backward(built.loss);

            std::vector<Tensor> grads;
            grads.reserve(params.size());
            for (const auto& p : params) {
                int nid = built.nodes.nodeOf.at(p.t);
                grads.push_back(g.has_grad(nid) ? g.grad(nid) : Tensor(p.t->shape));
            }
            for (std::size_t i = 0; i < grads.size(); ++i)
                if (!grads[i].all_finite())
                    throw DivergenceError("gradient for " + params[i].name +
                                          " became non-finite at epoch " +
                                          std::to_string(epoch));
            clip_gradients(grads, cfg.clipThreshold);
            adam_step(params, grads, adam, cfg.learningRate);
            lossSum += lv;
            ++nb;
        }

        double trainLoss = lossSum / static_cast<double>(nb);
        double vq = eval_quality(true);
        double tq = eval_quality(false);

        ojson line;
        line["epoch"] = epoch;
        line["trainLoss"] = trainLoss;
        line["validQuality"] = vq;
        line["testQuality"] = tq;
        if (mode == NoiseMode::kSparseVd) {
            auto sp = model_sparsity(model);
            line["sparsityX"] = sp[0];
            line["sparsityH"] = sp[1];
            if (sp.size() > 2)
                line["sparsityY"] = sp[2];
            else
                line["sparsityY"] = nullptr;
        } else {
            line["sparsityX"] = nullptr;
            line["sparsityH"] = nullptr;
            line["sparsityY"] = nullptr;
        }
        if (cfg.klWarmupEpochs > 0) line["klScale"] = klEff;
        line["wallClock"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string lineStr = line.dump();
        mf << lineStr << "\n" << std::flush;
        res.metricsLines.push_back(lineStr);

        save_state(res.checkpointPath, epoch, vq, tq, true);
        if (vq < bestValid) {
            bestValid = vq;
            res.bestEpoch = epoch;
            res.bestValid = vq;
            save_state(res.bestCheckpointPath, epoch, vq, tq, true);
        }
        if (epoch == cfg.snapshotEpoch) {
            res.snapshotPath =
                cfg.outDir + "/checkpoint-epoch" + std::to_string(epoch) + ".bin";
            save_state(res.snapshotPath, epoch, vq, tq, true);
        }
        res.finalTrainLoss = trainLoss;
        res.finalValid = vq;
        res.finalTest = tq;
    }
    return res;
}

}  // namespace sparsevd
