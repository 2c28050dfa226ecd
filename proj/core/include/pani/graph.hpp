#pragma once

#include <iosfwd>
#include <vector>

#include "pani/patches.hpp"
#include "pani/rng.hpp"
#include "pani/tensor.hpp"

namespace pani {

// K1 candidate images per image. peers[i] never contains i. The semantic
// variant lists peers by descending similarity; the random variant lists
// them in draw order. Patch-level candidate pools preserve this order.
struct PeerSet {
  std::vector<std::vector<long>> peers;

  long images() const { return static_cast<long>(peers.size()); }
  long k1() const { return peers.empty() ? 0 : static_cast<long>(peers[0].size()); }
};

// K nearest neighbor patches for every (image, patch) pair, best first.
// Entry (i, p, k) names a source image j, a patch q within it, and the
// cosine similarity that ranked it.
struct NeighborIndex {
  long n_images = 0;
  long n_patches = 0;
  long n_neighbors = 0;
  std::vector<long> image;
  std::vector<long> patch;
  std::vector<double> similarity;

  NeighborIndex() = default;
  NeighborIndex(long images, long patches, long neighbors);

  long flat(long i, long p, long k) const {
    return (i * n_patches + p) * n_neighbors + k;
  }
};

// Cosine similarity with both norms guarded by a small epsilon so that zero
// vectors compare as dissimilar instead of dividing by zero.
inline constexpr double kCosineNormGuard = 1e-8;
double guarded_cosine(const double* u, const double* v, long n);

// Top-k1 most similar images per image by cosine over penultimate-layer
// rows; exact ties break toward the lower index.
PeerSet filter_peers_semantic(const Tensor& penultimate, long k1);

// k1 images drawn uniformly without replacement, excluding self. The stream
// is consumed in image order i = 0..n-1.
PeerSet filter_peers_random(long images, long k1, RngStream& rng);

// Exhaustive scan over all k1 * P candidate patches of each image's peers.
// Candidates are ordered by (peer list position, patch index) and ties in
// similarity break toward the lower candidate position.
NeighborIndex knn_patches(const PatchSet& patches, const PeerSet& peers,
                          long k2, int threads = 1);

// Debug dump: header plus one "i,p,k,j,q,similarity" row per entry.
void write_neighbor_csv(const NeighborIndex& g, std::ostream& out);

}  // namespace pani
