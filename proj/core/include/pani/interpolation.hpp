#pragma once

#include <memory>

#include "pani/autodiff.hpp"
#include "pani/graph.hpp"
#include "pani/patches.hpp"

namespace pani {

// Non-local patch interpolation. With eta of shape (N, P, K) aligned to the
// neighbor graph,
//
//   out[i,p] = z[i,p] + sum_k eta[i,p,k] * (z[j_k, q_k] - z[i,p])
//
// where every z on the right is read from the original patch tensor, never
// from updated rows. eta == 0 returns the input bit-exactly.
Tensor interpolate_patches_data(const Tensor& patches, const NeighborIndex& g,
                                const Tensor& eta);
PatchSet interpolate_patches(const PatchSet& patches, const NeighborIndex& g,
                             const Tensor& eta);

// extract -> interpolate -> reconstruct on a plain feature map.
Tensor transform_layer(const Tensor& map, const NeighborIndex& g,
                       const Tensor& eta, long patch_size);

// Same composition as tape ops, differentiable in both map and eta.
NodeId transform_layer(Tape& tape, NodeId map,
                       std::shared_ptr<const NeighborIndex> g, NodeId eta,
                       long patch_size);

}  // namespace pani
