#pragma once

#include <vector>

#include "pani/tensor.hpp"

namespace pani {

// Non-overlapping square patches of a feature map, flattened to vectors.
// The cut uses stride == patch_size, so an (N, C, H, W) map with patch size
// s yields P = (H/s) * (W/s) patches per image, each of dimension
// d = C * s * s. Patches are ordered row-major over the patch grid and each
// vector is laid out channel-major, then row-major within the patch window.
struct PatchSet {
  std::vector<long> source_shape;  // (N, C, H, W)
  long patch_size = 0;
  Tensor data;  // (N, P, d)

  long images() const { return source_shape[0]; }
  long channels() const { return source_shape[1]; }
  long grid_h() const { return source_shape[2] / patch_size; }
  long grid_w() const { return source_shape[3] / patch_size; }
  long count() const { return grid_h() * grid_w(); }
  long dim() const { return channels() * patch_size * patch_size; }
};

// Throws DimensionError unless patch_size divides both spatial extents.
PatchSet extract_patches(const Tensor& x, long patch_size);

// Exact inverse of extract_patches.
Tensor reconstruct(const PatchSet& patches);

// Tensor-level kernels shared with the autodiff ops. Both moves are pure
// index permutations, so each is the other's adjoint.
Tensor extract_patches_data(const Tensor& x, long patch_size);
Tensor reconstruct_data(const Tensor& patches,
                        const std::vector<long>& source_shape,
                        long patch_size);

}  // namespace pani
