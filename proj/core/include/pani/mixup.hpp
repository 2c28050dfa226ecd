#pragma once

#include <map>
#include <vector>

#include "pani/graph.hpp"
#include "pani/patches.hpp"
#include "pani/rng.hpp"

namespace pani {

struct MixConfig {
  double a = 2.0;        // Beta(a, 1) shape for the retained mass
  long k1 = 1;           // random peer images per image
  long k = 1;            // neighbor patches per patch
  long patch_size = 16;
  double mask_ratio = 0.6;  // Bernoulli zeroing probability, applied pre-scale
};

// A fully materialized mixing recipe for one batch.
struct MixPlan {
  std::vector<double> lambda_eff;               // per image, in [0, 1]
  Tensor eta;                                   // (N, P, K), in [0, 1]
  NeighborIndex neighbors;
  std::vector<std::map<long, double>> label_mass;  // source image -> mass
};

// Independent streams for the three stochastic plan ingredients; each is
// consumed sequentially in image order.
struct MixRng {
  RngStream lambda;
  RngStream eta;
  RngStream mask;
};

// Beta(a, 1) via inverse CDF: u^(1/a).
double sample_lambda(double a, RngStream& rng);

// General Beta(a, b) through two Gamma draws (Marsaglia-Tsang); a == b == 1
// falls through to a single uniform.
double sample_beta(double a, double b, RngStream& rng);

// Raw uniform(0,1) coefficients with each entry independently zeroed with
// probability mask_ratio. All P*K eta draws precede the P*K mask draws.
Tensor masked_uniform_eta(long P, long K, double mask_ratio,
                          RngStream& eta_rng, RngStream& mask_rng);

// Per image: draw lambda ~ Beta(a, 1), draw masked raw coefficients, scale
// the survivors so sum(eta)/P == 1 - lambda, clamp entries to 1.0 without
// redistribution, and recompute lambda_eff = 1 - sum(eta)/P. Neighbors come
// from an exhaustive patch search over the peer images. A fully masked image
// degrades to the identity plan (lambda_eff == 1).
MixPlan build_mix_plan(const PatchSet& patches, const PeerSet& peers,
                       const MixConfig& cfg, MixRng& rng, int threads = 1);

struct MixedBatch {
  Tensor inputs;
  Tensor targets;
};

// Interpolates the inputs per the plan and mixes one-hot targets into
// exactly convex rows: lambda_eff * y_i + sum_j label_mass[j] * y_j.
MixedBatch apply_mix(const Tensor& inputs, const Tensor& onehot,
                     const MixPlan& plan, long patch_size);

// Image-level mixup: one lambda ~ Beta(a, a) per batch, each image paired
// with a uniformly drawn partner other than itself.
MixedBatch vanilla_mixup(const Tensor& inputs, const Tensor& onehot, double a,
                         RngStream& partner_rng, RngStream& lambda_rng);

}  // namespace pani
