#include "sparsevd/cli.hpp"

#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "sparsevd/trainer.hpp"

namespace sparsevd {

namespace fs = std::filesystem;

namespace {

std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", x);
    return buf;
}

std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string iso_utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Flat "key = value" lines; '#' starts a comment; blank lines skipped.
std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const std::exception& e) {
        throw std::invalid_argument(std::string("config file: ") + e.what());
    }
    std::vector<std::pair<std::string, std::string>> pairs;
    std::istringstream in(text);
    std::string line;
    int lineNo = 0;
    while (std::getline(in, line)) {
        ++lineNo;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(path + " line " + std::to_string(lineNo) +
                                        ": expected key=value");
        pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return pairs;
}

std::pair<std::string, std::string> parse_override(const std::string& arg) {
    std::size_t eq = arg.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override \"" + arg + "\": expected key=value");
    return {arg.substr(0, eq), arg.substr(eq + 1)};
}

LoadedCheckpoint load_checkpoint_or_die(const std::string& path) {
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw DataError("checkpoint " + path + ": " + e.what());
    }
}

std::string quality_name(const std::string& task) {
    return task == "charlm" ? "bpc" : "mse";
}

// Dense-mean quality of a checkpointed model on one data file.
double eval_quality(const Model& model, const std::string& dataPath) {
    if (model.task == "charlm") {
        std::string text;
        try {
            text = read_text_file(dataPath);
        } catch (const std::exception& e) {
            throw DataError(e.what());
        }
        std::vector<int> corpus = encode_chars(model.vocab, text);
        if (char_window_count(static_cast<std::int64_t>(corpus.size()), model.seqLen) < 1)
            throw DataError(dataPath + ": too short for a length-" +
                            std::to_string(model.seqLen) + " window");
        return eval_charlm_bpc(model, corpus);
    }
    RegDataset ds;
    try {
        ds = load_regression_tsv(dataPath, model.seqLen, &model.vocab);
    } catch (const std::exception& e) {
        throw DataError(e.what());
    }
    if (ds.size() == 0) throw DataError(dataPath + ": no usable lines");
    return eval_sentiment_mse(model, ds);
}

double eval_quality_sparse(const SparseModel& sp, const std::string& dataPath) {
    if (sp.task == "charlm") {
        std::vector<int> corpus = encode_chars(sp.vocab, read_text_file(dataPath));
        return eval_charlm_bpc_sparse(sp, corpus);
    }
    RegDataset ds = load_regression_tsv(dataPath, sp.seqLen, &sp.vocab);
    return eval_sentiment_mse_sparse(sp, ds);
}

int cmd_train(const std::string& configFile, const std::vector<std::string>& extras,
              const std::string& seed, const std::string& outDir,
              const std::string& initFrom, std::ostream& out) {
    std::vector<std::pair<std::string, std::string>> pairs;
    if (!configFile.empty()) pairs = parse_config_file(configFile);
    for (const auto& e : extras) pairs.push_back(parse_override(e));
    // Named flags outrank both the file and positional overrides.
    if (!seed.empty()) pairs.emplace_back("seed", seed);
    if (!outDir.empty()) pairs.emplace_back("outDir", outDir);
    if (!initFrom.empty()) pairs.emplace_back("initFrom", initFrom);

    TrainConfig cfg = config_from_pairs(pairs);
    std::string startedAt = iso_utc_now();
    TrainResult res = train(cfg);
    for (const auto& line : res.metricsLines) out << line << "\n";
    out << "best epoch " << res.bestEpoch << " validQuality " << num(res.bestValid)
        << "\n";

    ojson echo = config_echo(cfg);
    ojson man;
    man["runId"] = fnv1a_hex(echo.dump());
    man["startedAt"] = startedAt;
    man["endedAt"] = iso_utc_now();
    man["config"] = echo;
    ojson arts;
    arts["checkpoint"] = res.checkpointPath;
    arts["bestCheckpoint"] = res.bestCheckpointPath;
    if (!res.snapshotPath.empty()) arts["snapshot"] = res.snapshotPath;
    arts["metrics"] = res.metricsPath;
    man["artifacts"] = arts;
    man["finalMetrics"] = ojson::parse(res.metricsLines.back());
    std::string manPath = (fs::path(cfg.outDir) / "manifest.json").string();
    write_text_file(manPath, man.dump(2) + "\n");  // written last: paths all exist
    out << "manifest " << manPath << "\n";
    return 0;
}

int cmd_eval(const std::string& ckptPath, const std::string& dataPath, std::ostream& out) {
    LoadedCheckpoint lc = load_checkpoint_or_die(ckptPath);
    out << quality_name(lc.model.task) << " " << num(eval_quality(lc.model, dataPath))
        << "\n";
    return 0;
}

int cmd_prune(const std::string& ckptPath, double threshold, std::string outPath,
              const std::string& dataPath, std::ostream& out) {
    LoadedCheckpoint lc = load_checkpoint_or_die(ckptPath);
    std::string mode = lc.meta.value("mode", "none");
    if (mode != "sparse-vd")
        throw DataError("checkpoint " + ckptPath + " was trained with mode '" + mode +
                        "': its weights carry no posterior spreads, so there is "
                        "nothing to prune (needs a sparse-vd run)");
    SparseModel sp = sparsify(lc.model, NoiseMode::kSparseVd, threshold);
    if (outPath.empty())
        outPath = (fs::path(ckptPath).parent_path() / "sparse.bin").string();
    save_container(outPath, sparse_to_container(sp, lc.meta));
    out << sparsity_report(sp.sparsity) << "\n";
    out << "wrote " << outPath << "\n";
    if (!dataPath.empty()) {
        double dense = eval_quality(lc.model, dataPath);
        double pruned = eval_quality_sparse(sp, dataPath);
        std::string q = quality_name(sp.task);
        out << q << " dense " << num(dense) << "\n";
        out << q << " pruned " << num(pruned) << "\n";
        out << q << " delta " << num(pruned - dense) << "\n";
    }
    return 0;
}

const char* kMetricKeys[] = {"epoch",     "trainLoss", "validQuality", "testQuality",
                             "sparsityX", "sparsityH", "sparsityY"};

std::string csv_cell(const ojson& rec, const std::string& key) {
    if (!rec.contains(key) || rec.at(key).is_null()) return "";
    const ojson& v = rec.at(key);
    return v.is_number_integer() ? std::to_string(v.get<long long>())
                                 : num(v.get<double>());
}

int cmd_report(const std::vector<std::string>& files, const std::string& csvOut,
               std::ostream& out) {
    struct Series {
        std::string label;
        std::vector<ojson> records;
    };
    std::vector<Series> runs;
    for (const auto& path : files) {
        std::string text;
        try {
            text = read_text_file(path);
        } catch (const std::exception& e) {
            throw DataError(e.what());
        }
        Series s{path, {}};
        std::istringstream in(text);
        std::string line;
        int lineNo = 0;
        while (std::getline(in, line)) {
            ++lineNo;
            if (trim(line).empty()) continue;
            try {
                s.records.push_back(ojson::parse(line));
            } catch (const std::exception&) {
                throw DataError(path + ": line " + std::to_string(lineNo) +
                                ": malformed metrics line");
            }
            if (!s.records.back().contains("epoch"))
                throw DataError(path + ": line " + std::to_string(lineNo) +
                                ": malformed metrics line (no epoch field)");
        }
        if (s.records.empty()) throw DataError(path + ": empty metrics file");
        runs.push_back(std::move(s));
    }

    std::ostringstream csv;
    csv << "run";
    for (const char* k : kMetricKeys) csv << "," << k;
    csv << "\n";
    for (const auto& run : runs)
        for (const auto& rec : run.records) {
            csv << run.label;
            for (const char* k : kMetricKeys) csv << "," << csv_cell(rec, k);
            csv << "\n";
        }

    if (!csvOut.empty()) {
        write_text_file(csvOut, csv.str());
        out << "wrote " << csvOut << "\n";
    } else {
        out << csv.str() << "\n";
    }

    // Summary: one row per run taken from its last record.
    std::size_t w = 3;
    for (const auto& run : runs) w = std::max(w, run.label.size());
    out << std::left << std::setw(static_cast<int>(w)) << "run"
        << "  epochs  trainLoss     validQuality  testQuality   sparsity\n";
    for (const auto& run : runs) {
        const ojson& last = run.records.back();
        std::vector<double> sp;
        for (const char* k : {"sparsityX", "sparsityH", "sparsityY"})
            if (last.contains(k) && last.at(k).is_number())
                sp.push_back(last.at(k).get<double>());
        out << std::left << std::setw(static_cast<int>(w)) << run.label << "  "
            << std::setw(6) << csv_cell(last, "epoch") << "  " << std::setw(12)
            << csv_cell(last, "trainLoss") << "  " << std::setw(12)
            << csv_cell(last, "validQuality") << "  " << std::setw(12)
            << csv_cell(last, "testQuality") << "  "
            << (sp.empty() ? std::string("-") : sparsity_report(sp)) << "\n";
    }
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sparse variational dropout for LSTM models: train, evaluate, "
                 "prune, report"};
    app.name("sparsevd");
    app.require_subcommand(1);

    auto* tr = app.add_subcommand("train", "Run a training job from a config file");
    std::string configFile, seed, outDir, initFrom;
    tr->add_option("--config", configFile, "flat key=value config file");
    tr->add_option("--seed", seed, "override the run seed");
    tr->add_option("--out", outDir, "override the output directory");
    tr->add_option("--init-from", initFrom, "dense checkpoint to start from");
    tr->allow_extras();  // trailing key=value overrides

    auto* ev = app.add_subcommand("eval", "Deterministic-forward quality of a checkpoint");
    std::string evCkpt, evData;
    ev->add_option("checkpoint", evCkpt, "checkpoint file")->required();
    ev->add_option("--data", evData, "corpus / tsv split to evaluate")->required();

    auto* pr = app.add_subcommand("prune", "Threshold a trained posterior into a "
                                           "compressed model");
    std::string prCkpt, prOut, prData;
    double threshold = 3.0;
    pr->add_option("checkpoint", prCkpt, "sparse-vd checkpoint file")->required();
    pr->add_option("--threshold", threshold, "log-alpha cut (default 3.0)");
    pr->add_option("--out", prOut, "compressed output path (default: sparse.bin "
                                   "next to the checkpoint)");
    pr->add_option("--data", prData, "optional split for a dense-vs-pruned "
                                     "quality comparison");

    auto* rp = app.add_subcommand("report", "Consolidate metrics files into CSV + summary");
    std::vector<std::string> rpFiles;
    std::string rpCsv;
    rp->add_option("metrics", rpFiles, "metrics files (one per run)")->required();
    rp->add_option("--out", rpCsv, "write the CSV here instead of stdout");

    try {
        app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (tr->parsed())
            return cmd_train(configFile, tr->remaining(), seed, outDir, initFrom, out);
        if (ev->parsed()) return cmd_eval(evCkpt, evData, out);
        if (pr->parsed()) return cmd_prune(prCkpt, threshold, prOut, prData, out);
        return cmd_report(rpFiles, rpCsv, out);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace sparsevd
