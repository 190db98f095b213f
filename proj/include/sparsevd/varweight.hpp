#pragma once

#include "sparsevd/tensor.hpp"

namespace sparsevd {

// Per-weight Gaussian posterior for one weight matrix: means M and log
// variances logS2, same shape. sigma^2 = exp(logS2) is positive by
// construction.
struct VariationalWeight {
    Tensor M;
    Tensor logS2;

    VariationalWeight() = default;
    VariationalWeight(Tensor m, Tensor ls) : M(std::move(m)), logS2(std::move(ls)) {
        require_same_shape(M, logS2, "VariationalWeight");
    }

    static VariationalWeight with_init(Tensor m, double logS2Init) {
        Tensor ls(m.shape, logS2Init);
        return VariationalWeight(std::move(m), std::move(ls));
    }
};

}  // namespace sparsevd
