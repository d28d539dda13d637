// Copyright 2026 The AHTD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense kernels shared by the model and the analyses.

#ifndef AHTD_NUMERICS_H_
#define AHTD_NUMERICS_H_

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace ahtd {

// Row-major 32-bit float matrix. Row-major matches the on-disk blob layout,
// so (de)serialization is a straight memcpy.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic, Eigen::RowMajor>;

namespace numerics {

enum class Geometry { kLine1d, kGrid2d };

struct DistanceMatrix {
  int n = 0;
  Geometry geometry = Geometry::kLine1d;
  std::vector<bool> special_token_mask;
  Matrix d;  // n x n, symmetric, zero on the diagonal and on masked tokens
};

// Numerically stable softmax over each row (max subtraction).
Matrix SoftmaxRows(const Matrix& m);

// In-place variant used by the attention kernel; `m` may be a block.
template <typename Derived>
void SoftmaxRowsInPlace(Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const float mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

// Subtracts the per-column mean from every row.
Matrix CenterColumns(const Matrix& m);

// Linear (dot-product kernel) CKA between two representations of the same
// samples: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F).
// Throws kDegenerateRepresentation when a centered input has Frobenius norm
// below 1e-9, kShapeMismatch when row counts differ or are < 2.
double LinearCka(const Matrix& x, const Matrix& y);

// Pairwise token distances. Unmasked tokens are laid out in index order:
// along a line (|i - j|) or on a unit square grid (Euclidean). Masked tokens
// have no position and get zero rows/columns. Throws kBadGeometry if the
// grid has a non-square number of unmasked tokens.
DistanceMatrix TokenDistanceMatrix(int n, Geometry geometry,
                                   const std::vector<bool>& special_token_mask);

}  // namespace numerics
}  // namespace ahtd

#endif  // AHTD_NUMERICS_H_
