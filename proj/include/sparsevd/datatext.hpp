#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sparsevd/rng.hpp"

namespace sparsevd {

// Symbol table in first-appearance order over the training split. Unseen
// evaluation symbols map to the reserved UNK index == size().
struct Vocab {
    std::vector<std::string> items;
    std::map<std::string, int> index;

    int size() const { return static_cast<int>(items.size()); }
    int unk() const { return size(); }

    int add(const std::string& s) {
        auto it = index.find(s);
        if (it != index.end()) return it->second;
        int id = size();
        items.push_back(s);
        index.emplace(s, id);
        return id;
    }
    int lookup(const std::string& s) const {
        auto it = index.find(s);
        return it == index.end() ? unk() : it->second;
    }
};

Vocab build_vocab_chars(const std::string& trainText);
std::vector<int> encode_chars(const Vocab& v, const std::string& text);
std::string decode_chars(const Vocab& v, const std::vector<int>& idx);  // UNK -> 0xFF byte

// ---- character windows ----

struct CharBatch {
    std::vector<std::vector<int>> inputs;   // [batch][T]
    std::vector<std::vector<int>> targets;  // inputs shifted by one
};

// floor((N-1)/T) disjoint windows; the remainder shorter than T+1 is dropped.
std::int64_t char_window_count(std::int64_t corpusLen, int T);

// Window w covers inputs [wT, wT+T), targets [wT+1, wT+T].
CharBatch make_char_batch(const std::vector<int>& corpus, int T,
                          const std::vector<std::int64_t>& windowIds);

// All windows in order, grouped into batches; the last batch may be smaller.
std::vector<CharBatch> char_windows(const std::vector<int>& corpus, int T, int batch);

// ---- regression data ----

struct RegDataset {
    Vocab vocab;  // words of the training split
    int L = 0;
    int unkIdx = 0;
    int padIdx = 0;
    std::vector<std::vector<int>> tokens;  // right-padded to L
    std::vector<int> lastPos;              // last non-pad position per item
    std::vector<double> targets;           // in [0, 1]
    int rejected = 0;                      // malformed / out-of-range lines

    std::int64_t size() const { return static_cast<std::int64_t>(targets.size()); }
};

// Lines of "text TAB score". Builds the vocabulary from this file when
// `shared` is null (training split); otherwise reuses it (no leakage).
RegDataset load_regression_tsv(const std::string& path, int L, const Vocab* shared);
RegDataset parse_regression_tsv(const std::string& content, int L, const Vocab* shared);

struct RegBatch {
    std::vector<std::vector<int>> tokens;
    std::vector<int> lastPos;
    std::vector<double> targets;
};

RegBatch make_reg_batch(const RegDataset& data, const std::vector<std::int64_t>& itemIds);

// ---- file helpers ----

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// ---- bundled synthetic generators (desk-scale corpora) ----

// Word-like character stream: a seeded dictionary sampled with Zipf weights,
// sentences of 6-14 words ending ". ", newline every few sentences.
std::string gen_char_corpus(Rng& rng, std::int64_t nBytes);

// Keyword regression: vocabSize tokens w00..; the first decile is positive,
// the second negative; score = clip(0.5 + 0.15 (#pos - #neg) + 0.05 noise).
std::string gen_sentiment_tsv(Rng& rng, int items, int vocabSize, int len);

}  // namespace sparsevd
