// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <numeric>
#include <vector>

#include "mdd/common.hpp"
#include "mdd/features.hpp"

namespace mdd {

constexpr int kPatchSize = 16;

struct MaskPattern {
  MaskArray mask;  // true = masked
  double ratio = 0.0;
  int patch_size = kPatchSize;
  uint64_t seed = 0;

  int rows() const { return static_cast<int>(mask.rows()); }
  int cols() const { return static_cast<int>(mask.cols()); }
  Eigen::Index masked_cells() const { return mask.count(); }
};

inline int patch_grid_rows(int rows, int patch = kPatchSize) {
  return (rows + patch - 1) / patch;
}
inline int patch_grid_cols(int cols, int patch = kPatchSize) {
  return (cols + patch - 1) / patch;
}

// Tiles the matrix into a grid of patch_size x patch_size patches (edge
// patches are the residual rectangles and count as full patches for ratio
// accounting) and masks round(ratio * n_patches) of them, chosen uniformly
// without replacement.
inline MaskPattern sample_mask(int rows, int cols, double ratio, uint64_t seed,
                               int patch_size = kPatchSize) {
  if (rows < 1 || cols < 1) throw ShapeError("mask shape must be positive");
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw RangeError("mask ratio must lie in [0, 1], got " +
                     std::to_string(ratio));
  if (patch_size < 1) throw RangeError("patch size must be >= 1");

  int grid_r = patch_grid_rows(rows, patch_size);
  int grid_c = patch_grid_cols(cols, patch_size);
  int n_patches = grid_r * grid_c;
  int n_masked = static_cast<int>(round_half_away(ratio * n_patches));

  std::vector<int> order(n_patches);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix64(seed, 0x6d61736bull));
  for (int i = 0; i < n_masked; ++i) {
    int64_t j = rng.uniform_int(i, n_patches - 1);
    std::swap(order[i], order[j]);
  }

  MaskPattern p;
  p.ratio = ratio;
  p.patch_size = patch_size;
  p.seed = seed;
  p.mask = MaskArray::Constant(rows, cols, false);
  for (int i = 0; i < n_masked; ++i) {
    int pr = order[i] / grid_c;
    int pc = order[i] % grid_c;
    int r0 = pr * patch_size, c0 = pc * patch_size;
    int r1 = std::min(rows, r0 + patch_size);
    int c1 = std::min(cols, c0 + patch_size);
    p.mask.block(r0, c0, r1 - r0, c1 - c0).setConstant(true);
  }
  return p;
}

inline Mat apply_mask(const Mat& x0, const MaskPattern& pattern, double fill) {
  if (x0.rows() != pattern.mask.rows() || x0.cols() != pattern.mask.cols())
    throw ShapeError("mask shape " + std::to_string(pattern.mask.rows()) +
                     "x" + std::to_string(pattern.mask.cols()) +
                     " does not match input " + std::to_string(x0.rows()) +
                     "x" + std::to_string(x0.cols()));
  return pattern.mask.select(fill, x0);
}

inline MelSpectrogram apply_mask(const MelSpectrogram& x0,
                                 const MaskPattern& pattern, double fill) {
  MelSpectrogram out = x0;
  out.values = apply_mask(x0.values, pattern, fill);
  return out;
}

}  // namespace mdd
