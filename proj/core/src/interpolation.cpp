#include "pani/interpolation.hpp"

#include "pani/errors.hpp"

namespace pani {

Tensor interpolate_patches_data(const Tensor& patches, const NeighborIndex& g,
                                const Tensor& eta) {
  if (patches.rank() != 3) {
    throw DimensionError("interpolate expects (N,P,d) patches, got " +
                         shape_str(patches.shape));
  }
  const long N = patches.shape[0], P = patches.shape[1], d = patches.shape[2];
  if (g.n_images != N || g.n_patches != P) {
    throw DimensionError("interpolate: graph covers " + std::to_string(g.n_images) +
                         "x" + std::to_string(g.n_patches) + " patches, tensor " +
                         shape_str(patches.shape));
  }
  const long K = g.n_neighbors;
  if (eta.rank() != 3 || eta.shape[0] != N || eta.shape[1] != P || eta.shape[2] != K) {
    throw DimensionError("interpolate: eta " + shape_str(eta.shape) +
                         " does not match (N,P,K) = (" + std::to_string(N) + "," +
                         std::to_string(P) + "," + std::to_string(K) + ")");
  }
  // Every read comes from `patches`; the output buffer is never read back,
  // so update order cannot leak between rows. The k loop adds
  // eta * (neighbor - self) onto a copy of self, which keeps eta == 0 the
  // bit-exact identity.
  Tensor out = patches;
  for (long i = 0; i < N; ++i) {
    for (long p = 0; p < P; ++p) {
      const long row = i * P + p;
      const double* self = patches.data.data() + row * d;
      double* dst = out.data.data() + row * d;
      for (long k = 0; k < K; ++k) {
        const long f = g.flat(i, p, k);
        const double e = eta.data[row * K + k];
        const double* nb = patches.data.data() + (g.image[f] * P + g.patch[f]) * d;
        for (long t = 0; t < d; ++t) dst[t] += e * (nb[t] - self[t]);
      }
    }
  }
  return out;
}

PatchSet interpolate_patches(const PatchSet& patches, const NeighborIndex& g,
                             const Tensor& eta) {
  PatchSet out = patches;
  out.data = interpolate_patches_data(patches.data, g, eta);
  return out;
}

Tensor transform_layer(const Tensor& map, const NeighborIndex& g,
                       const Tensor& eta, long patch_size) {
  Tensor patches = extract_patches_data(map, patch_size);
  Tensor mixed = interpolate_patches_data(patches, g, eta);
  return reconstruct_data(mixed, map.shape, patch_size);
}

NodeId transform_layer(Tape& tape, NodeId map,
                       std::shared_ptr<const NeighborIndex> g, NodeId eta,
                       long patch_size) {
  std::vector<long> source_shape = tape.value(map).shape;
  NodeId patches = tape.extract_patches(map, patch_size);
  NodeId mixed = tape.interpolate(patches, std::move(g), eta);
  return tape.reconstruct_patches(mixed, std::move(source_shape), patch_size);
}

}  // namespace pani
