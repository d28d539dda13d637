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

#include "ahtd/numerics.h"

#include <cmath>
#include <string>

#include "ahtd/error.h"

namespace ahtd {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateRepresentation:
      return "DegenerateRepresentation";
    case ErrorCode::kBadGeometry:
      return "BadGeometry";
    case ErrorCode::kShapeMismatch:
      return "ShapeMismatch";
    case ErrorCode::kDivergedTraining:
      return "DivergedTraining";
    case ErrorCode::kIndexOutOfRange:
      return "IndexOutOfRange";
    case ErrorCode::kTriggerCollision:
      return "TriggerCollision";
    case ErrorCode::kRateOutOfRange:
      return "RateOutOfRange";
    case ErrorCode::kZooBuildFailure:
      return "ZooBuildFailure";
    case ErrorCode::kEmptyCleanSet:
      return "EmptyCleanSet";
    case ErrorCode::kInsufficientTrainingData:
      return "InsufficientTrainingData";
    case ErrorCode::kInvalidArgument:
      return "InvalidArgument";
    case ErrorCode::kIoError:
      return "IoError";
    case ErrorCode::kParseError:
      return "ParseError";
  }
  return "Unknown";
}

namespace numerics {

Matrix SoftmaxRows(const Matrix& m) {
  Matrix out = m;
  SoftmaxRowsInPlace(out);
  return out;
}

Matrix CenterColumns(const Matrix& m) {
  const RowVector mean = m.colwise().mean();
  return m.rowwise() - mean;
}

double LinearCka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.rows() < 2) {
    throw Error(ErrorCode::kShapeMismatch,
                "CKA needs two representations of the same >= 2 samples");
  }
  // Accumulate in double: the Gram products of float inputs lose precision
  // quickly for wide representations.
  const Eigen::MatrixXd xc = CenterColumns(x).cast<double>();
  const Eigen::MatrixXd yc = CenterColumns(y).cast<double>();
  if (xc.norm() < 1e-9 || yc.norm() < 1e-9) {
    throw Error(ErrorCode::kDegenerateRepresentation,
                "centered representation has (near) zero norm");
  }
  const double cross = (yc.transpose() * xc).squaredNorm();
  const double xx = (xc.transpose() * xc).norm();
  const double yy = (yc.transpose() * yc).norm();
  double value = cross / (xx * yy);
  if (value > 1.0) value = 1.0;
  if (value < 0.0) value = 0.0;
  return value;
}

DistanceMatrix TokenDistanceMatrix(
    int n, Geometry geometry, const std::vector<bool>& special_token_mask) {
  if (n < 1) throw Error(ErrorCode::kBadGeometry, "token count must be >= 1");
  std::vector<bool> mask = special_token_mask;
  if (mask.empty()) mask.assign(n, false);
  if (static_cast<int>(mask.size()) != n) {
    throw Error(ErrorCode::kBadGeometry, "mask length differs from n");
  }
  std::vector<int> rank(n, -1);
  int unmasked = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) rank[i] = unmasked++;
  }
  int side = 0;
  if (geometry == Geometry::kGrid2d) {
    side = static_cast<int>(std::lround(std::sqrt(unmasked)));
    if (side * side != unmasked) {
      throw Error(ErrorCode::kBadGeometry,
                  std::to_string(unmasked) +
                      " unmasked tokens do not form a square grid");
    }
  }

  DistanceMatrix out;
  out.n = n;
  out.geometry = geometry;
  out.special_token_mask = mask;
  out.d = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    if (mask[i]) continue;
    for (int j = i + 1; j < n; ++j) {
      if (mask[j]) continue;
      float dist;
      if (geometry == Geometry::kLine1d) {
        dist = static_cast<float>(std::abs(rank[i] - rank[j]));
      } else {
        const int dr = rank[i] / side - rank[j] / side;
        const int dc = rank[i] % side - rank[j] % side;
        dist = static_cast<float>(std::sqrt(double(dr * dr + dc * dc)));
      }
      out.d(i, j) = dist;
      out.d(j, i) = dist;
    }
  }
  return out;
}

}  // namespace numerics
}  // namespace ahtd
