// Synthetic corpus generator for desk-scale runs: a word-like character
// stream for the language-model task and keyword-scored sequences for the
// regression task.
#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "sparsevd/datatext.hpp"

using namespace sparsevd;

int main(int argc, char** argv) {
    CLI::App app{"Seeded synthetic corpora for sparsevd"};
    app.require_subcommand(1);

    auto* ch = app.add_subcommand("charlm", "character stream");
    std::int64_t bytes = 500000;
    std::uint64_t seed = 1;
    std::string out;
    ch->add_option("--bytes", bytes, "corpus size (default 500000)");
    ch->add_option("--seed", seed, "generator seed");
    ch->add_option("--out", out, "output file")->required();

    auto* se = app.add_subcommand("sentiment", "keyword-regression tsv");
    int items = 2000, vocab = 100, len = 20;
    std::uint64_t seed2 = 1;
    std::string out2;
    se->add_option("--items", items, "number of lines (default 2000)");
    se->add_option("--vocab", vocab, "token inventory size (default 100)");
    se->add_option("--len", len, "tokens per line (default 20)");
    se->add_option("--seed", seed2, "generator seed");
    se->add_option("--out", out2, "output file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (ch->parsed()) {
            Rng rng(seed);
            write_text_file(out, gen_char_corpus(rng, bytes));
            std::cout << "wrote " << out << " (" << bytes << " bytes)\n";
        } else {
            Rng rng(seed2);
            write_text_file(out2, gen_sentiment_tsv(rng, items, vocab, len));
            std::cout << "wrote " << out2 << " (" << items << " lines)\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
