#include "sparsevd/sparsity.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "sparsevd/graph.hpp"

namespace sparsevd {

namespace {
constexpr double kClamp = 20.0;
}

double log_alpha_of(double m, double logS2) {
    if (m == 0.0) return kClamp;
    double la = logS2 - 2.0 * std::log(std::fabs(m));
    if (la > kClamp) return kClamp;
    if (la < -kClamp) return -kClamp;
    return la;
}

double kl_per_weight(double logAlpha) {
    return 0.5 * softplus(-logAlpha) - 0.64 * stable_sigmoid(1.87 + 1.49 * logAlpha) + 0.64;
}

Tensor compute_log_alpha(const VariationalWeight& vw) {
    Tensor out(vw.M.shape);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = log_alpha_of(vw.M[i], vw.logS2[i]);
    return out;
}

double kl_total(const std::vector<const VariationalWeight*>& weights) {
    double total = 0.0;
    for (const VariationalWeight* vw : weights) {
        for (std::int64_t i = 0; i < vw->M.size(); ++i)
            total += kl_per_weight(log_alpha_of(vw->M[i], vw->logS2[i]));
    }
    return total;
}

PruneResult prune(const VariationalWeight& vw, double threshold) {
    if (!std::isfinite(threshold)) throw std::invalid_argument("prune: threshold must be finite");
    PruneResult out;
    out.mask.shape = vw.M.shape;
    out.mask.threshold = threshold;
    out.mask.keep.assign(static_cast<std::size_t>(vw.M.size()), 0);
    out.zeroedMeans = vw.M;
    for (std::int64_t i = 0; i < vw.M.size(); ++i) {
        if (log_alpha_of(vw.M[i], vw.logS2[i]) <= threshold) {
            out.mask.keep[static_cast<std::size_t>(i)] = 1;
            ++out.mask.nnzCount;
        } else {
            out.zeroedMeans[i] = 0.0;
        }
    }
    return out;
}

double sparsity_percent(const std::vector<const PruneMask*>& group) {
    if (group.empty()) throw std::invalid_argument("sparsity_percent: empty mask group");
    std::int64_t nnz = 0, total = 0;
    for (const PruneMask* m : group) {
        nnz += m->nnzCount;
        total += static_cast<std::int64_t>(m->keep.size());
    }
    if (total == 0) throw std::invalid_argument("sparsity_percent: no entries");
    return 100.0 * (1.0 - static_cast<double>(nnz) / static_cast<double>(total));
}

std::string sparsity_report(const std::vector<double>& percents) {
    if (percents.empty()) throw std::invalid_argument("sparsity_report: nothing to report");
    std::string out;
    char buf[32];
    for (std::size_t i = 0; i < percents.size(); ++i) {
        if (i) out += " - ";
        std::snprintf(buf, sizeof(buf), "%.2f", percents[i]);
        out += buf;
    }
    return out;
}

CsrMatrix to_csr(const Tensor& dense) {
    if (dense.ndim() != 2) throw std::invalid_argument("to_csr: need a matrix");
    CsrMatrix m;
    m.rows = dense.rows();
    m.cols = dense.cols();
    m.rowOffsets.assign(static_cast<std::size_t>(m.rows) + 1, 0);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            double x = dense.at(r, c);
            if (x != 0.0) {
                m.colIndices.push_back(c);
                m.values.push_back(x);
            }
        }
        m.rowOffsets[static_cast<std::size_t>(r) + 1] = static_cast<std::int64_t>(m.values.size());
    }
    return m;
}

Tensor csr_to_dense(const CsrMatrix& m) {
    Tensor out({m.rows, m.cols});
    for (int r = 0; r < m.rows; ++r)
        for (std::int64_t k = m.rowOffsets[static_cast<std::size_t>(r)];
             k < m.rowOffsets[static_cast<std::size_t>(r) + 1]; ++k)
            out.at(r, m.colIndices[static_cast<std::size_t>(k)]) =
                m.values[static_cast<std::size_t>(k)];
    return out;
}

std::vector<double> csr_matvec(const CsrMatrix& m, const std::vector<double>& x) {
    if (static_cast<int>(x.size()) != m.cols)
        throw std::invalid_argument("csr_matvec: vector length " + std::to_string(x.size()) +
                                    " does not match " + std::to_string(m.cols) + " columns");
    std::vector<double> y(static_cast<std::size_t>(m.rows), 0.0);
    for (int r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        for (std::int64_t k = m.rowOffsets[static_cast<std::size_t>(r)];
             k < m.rowOffsets[static_cast<std::size_t>(r) + 1]; ++k)
            acc += m.values[static_cast<std::size_t>(k)] *
                   x[static_cast<std::size_t>(m.colIndices[static_cast<std::size_t>(k)])];
        y[static_cast<std::size_t>(r)] = acc;
    }
    return y;
}

std::vector<double> csr_vecmat(const std::vector<double>& x, const CsrMatrix& m) {
    if (static_cast<int>(x.size()) != m.rows)
        throw std::invalid_argument("csr_vecmat: vector length " + std::to_string(x.size()) +
                                    " does not match " + std::to_string(m.rows) + " rows");
    std::vector<double> y(static_cast<std::size_t>(m.cols), 0.0);
    for (int r = 0; r < m.rows; ++r) {
        double xr = x[static_cast<std::size_t>(r)];
        if (xr == 0.0) continue;
        for (std::int64_t k = m.rowOffsets[static_cast<std::size_t>(r)];
             k < m.rowOffsets[static_cast<std::size_t>(r) + 1]; ++k)
            y[static_cast<std::size_t>(m.colIndices[static_cast<std::size_t>(k)])] +=
                xr * m.values[static_cast<std::size_t>(k)];
    }
    return y;
}

}  // namespace sparsevd
