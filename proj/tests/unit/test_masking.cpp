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

#include <catch_amalgamated.hpp>

#include "mdd/masking.hpp"

using namespace mdd;

namespace {

int masked_patches(const MaskPattern& p, int rows, int cols) {
  int grid_r = patch_grid_rows(rows, p.patch_size);
  int grid_c = patch_grid_cols(cols, p.patch_size);
  int count = 0;
  for (int gr = 0; gr < grid_r; ++gr)
    for (int gc = 0; gc < grid_c; ++gc) {
      int r0 = gr * p.patch_size, c0 = gc * p.patch_size;
      bool any = false, all = true;
      for (int r = r0; r < std::min(rows, r0 + p.patch_size); ++r)
        for (int c = c0; c < std::min(cols, c0 + p.patch_size); ++c) {
          any = any || p.mask(r, c);
          all = all && p.mask(r, c);
        }
      if (any) {
        REQUIRE(all);  // masked cells form whole patches
        ++count;
      }
    }
  return count;
}

}  // namespace

TEST_CASE("zero and full ratios produce all-false / all-true masks",
          "[masking]") {
  MaskPattern none = sample_mask(80, 160, 0.0, 1);
  REQUIRE(none.masked_cells() == 0);
  MaskPattern full = sample_mask(80, 160, 1.0, 1);
  REQUIRE(full.masked_cells() == 80 * 160);
}

TEST_CASE("ratio 0.10 on an 80x160 grid masks exactly 5 of 50 patches",
          "[masking]") {
  // grid: ceil(80/16) x ceil(160/16) = 5 x 10 = 50 patches
  MaskPattern p = sample_mask(80, 160, 0.10, 3);
  REQUIRE(patch_grid_rows(80) * patch_grid_cols(160) == 50);
  REQUIRE(masked_patches(p, 80, 160) == 5);
  REQUIRE(p.masked_cells() == 5 * 256);
  REQUIRE(static_cast<double>(p.masked_cells()) / (80 * 160) ==
          Catch::Approx(0.10));
}

TEST_CASE("masked patch count equals round(ratio * n_patches) exactly",
          "[masking]") {
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    int rows = 1 + static_cast<int>(rng.uniform_int(0, 99));
    int cols = 1 + static_cast<int>(rng.uniform_int(0, 199));
    double ratio = rng.uniform();
    int n_patches = patch_grid_rows(rows) * patch_grid_cols(cols);
    MaskPattern p = sample_mask(rows, cols, ratio, trial);
    REQUIRE(masked_patches(p, rows, cols) ==
            static_cast<int>(round_half_away(ratio * n_patches)));
  }
}

TEST_CASE("round-half-away keeps ratio accounting symmetric", "[masking]") {
  // 50 patches: 0.25 -> 13 (12.5 rounds away from zero), 0.75 -> 38
  MaskPattern a = sample_mask(80, 160, 0.25, 1);
  REQUIRE(masked_patches(a, 80, 160) == 13);
  MaskPattern b = sample_mask(80, 160, 0.75, 1);
  REQUIRE(masked_patches(b, 80, 160) == 38);
}

TEST_CASE("sampling is deterministic under the seed", "[masking]") {
  MaskPattern a = sample_mask(80, 160, 0.4, 99);
  MaskPattern b = sample_mask(80, 160, 0.4, 99);
  REQUIRE((a.mask == b.mask).all());
  MaskPattern c = sample_mask(80, 160, 0.4, 100);
  REQUIRE_FALSE((a.mask == c.mask).all());
}

TEST_CASE("edge patches are residual rectangles counted as full patches",
          "[masking]") {
  // 20x20 grid -> 2x2 patches, the right/bottom ones are 4 cells wide
  MaskPattern p = sample_mask(20, 20, 1.0, 1);
  REQUIRE(p.masked_cells() == 400);
  MaskPattern half = sample_mask(20, 20, 0.5, 1);
  REQUIRE(masked_patches(half, 20, 20) == 2);
}

TEST_CASE("ratio outside [0,1] is rejected", "[masking]") {
  REQUIRE_THROWS_AS(sample_mask(80, 160, -0.01, 1), RangeError);
  REQUIRE_THROWS_AS(sample_mask(80, 160, 1.01, 1), RangeError);
  REQUIRE_THROWS_AS(sample_mask(0, 160, 0.5, 1), ShapeError);
}

TEST_CASE("apply_mask keeps unmasked cells and fills masked ones",
          "[masking]") {
  Rng rng(5);
  Mat x = rng.normal_matrix(32, 48);

  MaskPattern none = sample_mask(32, 48, 0.0, 1);
  REQUIRE((apply_mask(x, none, 0.0) - x).norm() == 0.0);

  MaskPattern full = sample_mask(32, 48, 1.0, 1);
  REQUIRE(apply_mask(x, full, 0.0).norm() == 0.0);

  // hand-built single patch at grid (0,0)
  MaskPattern p;
  p.mask = MaskArray::Constant(32, 48, false);
  p.mask.block(0, 0, 16, 16).setConstant(true);
  Mat y = apply_mask(x, p, 0.0);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 48; ++c) {
      if (r < 16 && c < 16)
        REQUIRE(y(r, c) == 0.0);
      else
        REQUIRE(y(r, c) == x(r, c));
    }
}

TEST_CASE("apply_mask is idempotent and shape checked", "[masking]") {
  Rng rng(6);
  Mat x = rng.normal_matrix(80, 64);
  MaskPattern p = sample_mask(80, 64, 0.3, 2);
  Mat once = apply_mask(x, p, 0.5);
  Mat twice = apply_mask(once, p, 0.5);
  REQUIRE((once - twice).norm() == 0.0);

  MaskPattern wrong = sample_mask(80, 65, 0.3, 2);
  REQUIRE_THROWS_AS(apply_mask(x, wrong, 0.0), ShapeError);
}
