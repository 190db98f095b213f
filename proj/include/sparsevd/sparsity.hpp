#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparsevd/tensor.hpp"
#include "sparsevd/varweight.hpp"

namespace sparsevd {

// Dropout-rate diagnostic for one posterior entry:
// log alpha = logS2 - 2 log|m|, clamped to [-20, 20]; m = 0 pins to +20.
double log_alpha_of(double m, double logS2);

// Per-entry KL penalty as a function of log alpha. Nonnegative, decreasing,
// -> 0 as alpha -> infinity.
double kl_per_weight(double logAlpha);

Tensor compute_log_alpha(const VariationalWeight& vw);

double kl_total(const std::vector<const VariationalWeight*>& weights);

// Keep/drop decision per entry at a log-alpha threshold (default 3).
struct PruneMask {
    Shape shape;
    std::vector<std::uint8_t> keep;
    double threshold = 3.0;
    std::int64_t nnzCount = 0;
};

struct PruneResult {
    PruneMask mask;
    Tensor zeroedMeans;  // survivors untouched, dropped entries exactly 0
};

PruneResult prune(const VariationalWeight& vw, double threshold = 3.0);

// 100 * (1 - nnz/total) over a group of masks (LSTM gates aggregate into one
// figure). Empty group is a contract violation, not 0%.
double sparsity_percent(const std::vector<const PruneMask*>& group);

// Two-decimal percentages joined like "99.95 - 99.92".
std::string sparsity_report(const std::vector<double>& percents);

// Compressed row storage of a zeroed dense matrix.
struct CsrMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<std::int64_t> rowOffsets;  // size rows+1, nondecreasing
    std::vector<int> colIndices;           // strictly increasing within a row
    std::vector<double> values;
};

CsrMatrix to_csr(const Tensor& dense);
Tensor csr_to_dense(const CsrMatrix& m);

// y = A x for x of length cols.
std::vector<double> csr_matvec(const CsrMatrix& m, const std::vector<double>& x);
// y = x A for a row vector x of length rows.
std::vector<double> csr_vecmat(const std::vector<double>& x, const CsrMatrix& m);

}  // namespace sparsevd
