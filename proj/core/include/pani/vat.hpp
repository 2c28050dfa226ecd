#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pani/model.hpp"

namespace pani {

// One perturbed layer: which tap, the patch size of its graph, the layer
// weight m, and the neighborhood size k2.
struct VatLayerConfig {
  int tap = 0;
  long patch_size = 2;
  double m = 1.0;
  long k2 = 10;
};

struct VatConfig {
  double eps = 2.0;
  double beta = 1.0;
  double xi = 1e-2;
  int power_iters = 1;
  long k1 = 10;
  std::vector<VatLayerConfig> layers;
};

// Perturbation coefficients, one tensor of shape (N, P_l, K2_l) per layer.
struct PerturbationField {
  std::vector<Tensor> layers;

  double l2() const;
  void scale_by(double c);
};

PerturbationField gaussian_field(const std::vector<std::vector<long>>& shapes,
                                 RngStream& rng);

// sqrt(sum_l ||eta_l||^2 / m_l^2).
double weighted_norm(const PerturbationField& field,
                     const std::vector<double>& m);

// Scales the field so its weighted norm equals eps exactly (one multiply per
// element). Throws DegenerateDirectionError on a zero field.
PerturbationField normalize_to_ball(PerturbationField field,
                                    const std::vector<double>& m, double eps);

struct PowerIterationResult {
  PerturbationField direction;  // unit L2 in the reparametrized variables
  int zero_grad_events = 0;
};

// Power iteration for the dominant curvature direction of a divergence.
// grad_at(d) must return the coefficient-space gradient of the divergence
// probed a small step xi along d (the callable folds xi in); the probe point
// is deliberately independent of m so that commonly rescaling all m_l only
// rescales the pullback and leaves the direction unchanged. Iterations with
// a zero gradient keep the previous direction and bump zero_grad_events.
PowerIterationResult power_iterate(
    const std::function<PerturbationField(const PerturbationField&)>& grad_at,
    const std::vector<double>& m, PerturbationField d0, int iters);

// Frozen per-batch context: reference predictions, peer set and one
// neighbor graph per configured layer, built from the unperturbed forward
// pass and reused across the inner maximization.
struct VatGraphs {
  Tensor ref_logits;
  std::vector<std::shared_ptr<const NeighborIndex>> graphs;
};

VatGraphs build_vat_graphs(const ModelConfig& mcfg, const ParamSet& params,
                           const Tensor& inputs, const VatConfig& vcfg,
                           int threads);

struct VatPerturbation {
  PerturbationField eta;        // on the constraint boundary
  PerturbationField direction;  // the unit direction that produced it
  int zero_grad_events = 0;
};

// Approximate inner maximization of the batch-mean KL under the weighted
// ball, via power iteration seeded from the given stream.
VatPerturbation compute_pani_vat_perturbation(const ModelConfig& mcfg,
                                              const ParamSet& params,
                                              const Tensor& inputs,
                                              const VatConfig& vcfg,
                                              const VatGraphs& ctx,
                                              RngStream& rng, int threads);

// Batch-mean KL against the frozen reference after injecting eta. No
// gradients; used by tests and diagnostics.
double vat_kl_at(const ModelConfig& mcfg, const ParamSet& params,
                 const Tensor& inputs, const VatConfig& vcfg,
                 const VatGraphs& ctx, const PerturbationField& eta,
                 int threads);

struct VatLossResult {
  double total = 0.0;
  double supervised = 0.0;
  double regularizer = 0.0;  // beta * KL
  std::vector<Tensor> param_grads;
  int zero_grad_events = 0;
};

// Supervised cross entropy on the labeled part plus beta times the mean KL
// between reference and perturbed predictions on labeled + unlabeled inputs.
VatLossResult pani_vat_loss(const ModelConfig& mcfg, const ParamSet& params,
                            const Tensor& labeled_x, const Tensor& labeled_y,
                            const Tensor& unlabeled_x, const VatConfig& vcfg,
                            RngStream& power_rng, int threads);

// The L = 1, identity-graph degenerate case: an elementwise perturbation of
// the raw input with a plain L2 ball of radius eps over the whole batch.
VatLossResult vanilla_vat_loss(const ModelConfig& mcfg, const ParamSet& params,
                               const Tensor& labeled_x, const Tensor& labeled_y,
                               const Tensor& unlabeled_x, const VatConfig& vcfg,
                               RngStream& power_rng, int threads);

}  // namespace pani
