#pragma once

#include "sparsevd/rng.hpp"
#include "sparsevd/tensor.hpp"

namespace sparsevd {

// Orthogonal [rows x cols] matrix from a seeded normal draw: QR of the draw
// with the sign of diag(R) folded into Q so the result does not depend on the
// QR routine's sign convention. Square input gives an orthogonal matrix;
// rectangular gives orthonormal columns (rows >= cols) or rows (rows < cols).
Tensor orthogonal_init(Rng& rng, int rows, int cols);

}  // namespace sparsevd
