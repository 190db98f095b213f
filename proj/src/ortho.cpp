#include "sparsevd/ortho.hpp"

#include <Eigen/Dense>

#include <stdexcept>

namespace sparsevd {

Tensor orthogonal_init(Rng& rng, int rows, int cols) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("orthogonal_init: bad dimensions");
    // Factor the tall orientation, transpose back if needed.
    bool flip = rows < cols;
    int m = flip ? cols : rows;
    int k = flip ? rows : cols;

    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    EMat a(m, k);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) a(i, j) = rng.normal();

    Eigen::HouseholderQR<EMat> qr(a);
    EMat q = qr.householderQ() * EMat::Identity(m, k);
    EMat r = qr.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
    for (int j = 0; j < k; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);

    Tensor out({rows, cols});
    if (flip) {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) out.at(i, j) = q(j, i);
    } else {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) out.at(i, j) = q(i, j);
    }
    return out;
}

}  // namespace sparsevd
