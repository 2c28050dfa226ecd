#include "pani/patches.hpp"

#include <string>

#include "pani/errors.hpp"

namespace pani {

namespace {

void check_map_shape(const Tensor& x, long s) {
  if (x.rank() != 4) {
    throw DimensionError("extract_patches expects (N,C,H,W), got " + shape_str(x.shape));
  }
  if (s <= 0) throw DimensionError("patch size must be positive");
  if (x.shape[2] % s != 0 || x.shape[3] % s != 0) {
    throw DimensionError("patch size " + std::to_string(s) +
                         " does not divide the spatial extents of " + shape_str(x.shape));
  }
}

}  // namespace

// Layout: patch p = r * (W/s) + c covers rows [r*s, r*s+s) and columns
// [c*s, c*s+s); within a patch the vector runs channel-major, then row-major
// over the window. reconstruct_data inverts the same walk, so the pair is an
// exact permutation and each direction is the other's adjoint.
Tensor extract_patches_data(const Tensor& x, long s) {
  check_map_shape(x, s);
  const long N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const long gh = H / s, gw = W / s, P = gh * gw, d = C * s * s;
  Tensor out({N, P, d});
  const double* src = x.data.data();
  double* dst = out.data.data();
  for (long n = 0; n < N; ++n) {
    for (long r = 0; r < gh; ++r) {
      for (long c = 0; c < gw; ++c) {
        double* patch = dst + ((n * P) + (r * gw + c)) * d;
        for (long ch = 0; ch < C; ++ch) {
          for (long dr = 0; dr < s; ++dr) {
            const double* row = src + ((n * C + ch) * H + (r * s + dr)) * W + c * s;
            for (long dc = 0; dc < s; ++dc) {
              patch[(ch * s + dr) * s + dc] = row[dc];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor reconstruct_data(const Tensor& patches,
                        const std::vector<long>& source_shape, long s) {
  if (patches.rank() != 3) {
    throw DimensionError("reconstruct expects (N,P,d) patches, got " + shape_str(patches.shape));
  }
  if (source_shape.size() != 4) {
    throw DimensionError("reconstruct needs an (N,C,H,W) source shape");
  }
  const long N = source_shape[0], C = source_shape[1], H = source_shape[2], W = source_shape[3];
  if (s <= 0 || H % s != 0 || W % s != 0) {
    throw DimensionError("patch size " + std::to_string(s) +
                         " does not divide the spatial extents of " + shape_str(source_shape));
  }
  const long gh = H / s, gw = W / s, P = gh * gw, d = C * s * s;
  if (patches.shape[0] != N || patches.shape[1] != P || patches.shape[2] != d) {
    throw DimensionError("patch tensor " + shape_str(patches.shape) +
                         " does not match source " + shape_str(source_shape) +
                         " at patch size " + std::to_string(s));
  }
  Tensor out(source_shape);
  const double* src = patches.data.data();
  double* dst = out.data.data();
  for (long n = 0; n < N; ++n) {
    for (long r = 0; r < gh; ++r) {
      for (long c = 0; c < gw; ++c) {
        const double* patch = src + ((n * P) + (r * gw + c)) * d;
        for (long ch = 0; ch < C; ++ch) {
          for (long dr = 0; dr < s; ++dr) {
            double* row = dst + ((n * C + ch) * H + (r * s + dr)) * W + c * s;
            for (long dc = 0; dc < s; ++dc) {
              row[dc] = patch[(ch * s + dr) * s + dc];
            }
          }
        }
      }
    }
  }
  return out;
}

PatchSet extract_patches(const Tensor& x, long patch_size) {
  PatchSet p;
  p.source_shape = x.shape;
  p.patch_size = patch_size;
  p.data = extract_patches_data(x, patch_size);
  return p;
}

Tensor reconstruct(const PatchSet& patches) {
  return reconstruct_data(patches.data, patches.source_shape, patches.patch_size);
}

}  // namespace pani
