#include "sparsevd/datatext.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sparsevd {

Vocab build_vocab_chars(const std::string& trainText) {
    if (trainText.empty()) throw std::invalid_argument("build_vocab_chars: empty training text");
    Vocab v;
    for (char c : trainText) v.add(std::string(1, c));
    return v;
}

std::vector<int> encode_chars(const Vocab& v, const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(v.lookup(std::string(1, c)));
    return out;
}

std::string decode_chars(const Vocab& v, const std::vector<int>& idx) {
    std::string out;
    out.reserve(idx.size());
    for (int i : idx)
        out += (i >= 0 && i < v.size()) ? v.items[static_cast<std::size_t>(i)]
                                        : std::string(1, '\xFF');
    return out;
}

std::int64_t char_window_count(std::int64_t corpusLen, int T) {
    if (T < 1) throw std::invalid_argument("char_window_count: T must be positive");
    if (corpusLen < T + 1)
        throw std::invalid_argument("corpus of " + std::to_string(corpusLen) +
                                    " symbols is shorter than one window of " +
                                    std::to_string(T + 1));
    return (corpusLen - 1) / T;
}

CharBatch make_char_batch(const std::vector<int>& corpus, int T,
                          const std::vector<std::int64_t>& windowIds) {
    CharBatch b;
    b.inputs.reserve(windowIds.size());
    b.targets.reserve(windowIds.size());
    for (std::int64_t w : windowIds) {
        std::int64_t start = w * T;
        b.inputs.emplace_back(corpus.begin() + start, corpus.begin() + start + T);
        b.targets.emplace_back(corpus.begin() + start + 1, corpus.begin() + start + T + 1);
    }
    return b;
}

std::vector<CharBatch> char_windows(const std::vector<int>& corpus, int T, int batch) {
    if (batch < 1) throw std::invalid_argument("char_windows: batch must be positive");
    std::int64_t count = char_window_count(static_cast<std::int64_t>(corpus.size()), T);
    std::vector<CharBatch> out;
    for (std::int64_t w = 0; w < count; w += batch) {
        std::vector<std::int64_t> ids;
        for (std::int64_t i = w; i < std::min(count, w + batch); ++i) ids.push_back(i);
        out.push_back(make_char_batch(corpus, T, ids));
    }
    return out;
}

RegDataset parse_regression_tsv(const std::string& content, int L, const Vocab* shared) {
    if (L < 1) throw std::invalid_argument("regression data: pad length must be positive");
    RegDataset d;
    d.L = L;
    if (shared) d.vocab = *shared;

    std::istringstream in(content);
    std::string line;
    std::vector<std::pair<std::vector<std::string>, double>> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t tab = line.rfind('\t');
        if (tab == std::string::npos) {
            ++d.rejected;
            continue;
        }
        std::string scoreStr = line.substr(tab + 1);
        char* end = nullptr;
        double score = std::strtod(scoreStr.c_str(), &end);
        if (end == scoreStr.c_str() || *end != '\0' || score < 0.0 || score > 1.0) {
            ++d.rejected;
            continue;
        }
        std::istringstream ts(line.substr(0, tab));
        std::vector<std::string> toks;
        std::string tok;
        while (ts >> tok) toks.push_back(tok);
        if (toks.empty()) {
            ++d.rejected;
            continue;
        }
        rows.emplace_back(std::move(toks), score);
    }
    if (!shared)  // training split defines the vocabulary
        for (const auto& [toks, score] : rows)
            for (const std::string& t : toks) d.vocab.add(t);

    d.unkIdx = d.vocab.unk();
    d.padIdx = d.vocab.size() + 1;
    for (auto& [toks, score] : rows) {
        std::vector<int> ids(static_cast<std::size_t>(L), d.padIdx);
        int n = std::min<int>(L, static_cast<int>(toks.size()));
        for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = d.vocab.lookup(toks[static_cast<std::size_t>(i)]);
        d.tokens.push_back(std::move(ids));
        d.lastPos.push_back(n - 1);
        d.targets.push_back(score);
    }
    return d;
}

RegDataset load_regression_tsv(const std::string& path, int L, const Vocab* shared) {
    return parse_regression_tsv(read_text_file(path), L, shared);
}

RegBatch make_reg_batch(const RegDataset& data, const std::vector<std::int64_t>& itemIds) {
    RegBatch b;
    for (std::int64_t id : itemIds) {
        b.tokens.push_back(data.tokens[static_cast<std::size_t>(id)]);
        b.lastPos.push_back(data.lastPos[static_cast<std::size_t>(id)]);
        b.targets.push_back(data.targets[static_cast<std::size_t>(id)]);
    }
    return b;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

std::string gen_char_corpus(Rng& rng, std::int64_t nBytes) {
    if (nBytes < 2) throw std::invalid_argument("gen_char_corpus: ask for at least 2 bytes");
    // fixed dictionary drawn once from the stream
    const int dictSize = 400;
    std::vector<std::string> dict;
    dict.reserve(dictSize);
    for (int w = 0; w < dictSize; ++w) {
        int len = 2 + static_cast<int>(rng.below(8));
        std::string word;
        for (int i = 0; i < len; ++i)
            word += static_cast<char>('a' + static_cast<int>(rng.below(26)));
        dict.push_back(std::move(word));
    }
    // Zipf-ish cumulative weights
    std::vector<double> cum(dictSize);
    double acc = 0.0;
    for (int w = 0; w < dictSize; ++w) {
        acc += 1.0 / (1.0 + w);
        cum[static_cast<std::size_t>(w)] = acc;
    }
    auto drawWord = [&]() {
        double u = rng.uniform() * acc;
        return static_cast<std::size_t>(
            std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    };

    std::string out;
    out.reserve(static_cast<std::size_t>(nBytes) + 16);
    int sentenceLeft = 6 + static_cast<int>(rng.below(9));
    int sentencesOnLine = 0;
    while (static_cast<std::int64_t>(out.size()) < nBytes) {
        out += dict[drawWord()];
        if (--sentenceLeft == 0) {
            out += '.';
            sentenceLeft = 6 + static_cast<int>(rng.below(9));
            if (++sentencesOnLine >= 4) {
                out += '\n';
                sentencesOnLine = 0;
            } else {
                out += ' ';
            }
        } else {
            out += ' ';
        }
    }
    out.resize(static_cast<std::size_t>(nBytes));
    return out;
}

std::string gen_sentiment_tsv(Rng& rng, int items, int vocabSize, int len) {
    if (items < 1 || vocabSize < 30 || len < 1)
        throw std::invalid_argument("gen_sentiment_tsv: need items >= 1, vocab >= 30, len >= 1");
    int decile = vocabSize / 10;
    auto tokenName = [&](int id) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "w%02d", id);
        return std::string(buf);
    };
    std::string out;
    char buf[32];
    for (int i = 0; i < items; ++i) {
        int pos = 0, neg = 0;
        std::string text;
        for (int t = 0; t < len; ++t) {
            int id = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocabSize)));
            if (id < decile)
                ++pos;
            else if (id < 2 * decile)
                ++neg;
            if (t) text += ' ';
            text += tokenName(id);
        }
        double score = 0.5 + 0.15 * (pos - neg) + 0.05 * rng.normal();
        score = std::min(1.0, std::max(0.0, score));
        std::snprintf(buf, sizeof(buf), "%.6f", score);
        out += text;
        out += '\t';
        out += buf;
        out += '\n';
    }
    return out;
}

}  // namespace sparsevd
