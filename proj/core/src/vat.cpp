#include "pani/vat.hpp"

#include <cmath>
#include <string>

#include "pani/errors.hpp"
#include "pani/interpolation.hpp"
#include "pani/patches.hpp"

namespace pani {

namespace {

void check_layer_config(const VatConfig& cfg) {
  if (cfg.layers.empty()) throw ContractError("vat: no layers configured");
  for (const auto& l : cfg.layers) {
    if (l.m <= 0.0) throw ConfigError("vat: layer weight m must be positive");
    if (l.k2 < 1) throw ConfigError("vat: k2 must be >= 1");
  }
  if (cfg.eps <= 0.0) throw ConfigError("vat: eps must be positive");
  if (cfg.xi <= 0.0) throw ConfigError("vat: xi must be positive");
  if (cfg.power_iters < 1) throw ConfigError("vat: power_iters must be >= 1");
}

std::vector<double> layer_weights(const VatConfig& cfg) {
  std::vector<double> m;
  m.reserve(cfg.layers.size());
  for (const auto& l : cfg.layers) m.push_back(l.m);
  return m;
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.shape[1] != b.shape[1] ||
      a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3]) {
    throw DimensionError("batch concat: " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
  Tensor out({a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
  return out;
}

// Shared forward: inject one eta node per configured layer using the frozen
// graphs, return the logits node.
NodeId forward_with_field(Tape& tape, const ModelConfig& mcfg,
                          const std::vector<NodeId>& params, NodeId input,
                          const VatConfig& vcfg, const VatGraphs& ctx,
                          const std::vector<NodeId>& eta_nodes) {
  std::vector<Injection> injections;
  injections.reserve(vcfg.layers.size());
  for (size_t l = 0; l < vcfg.layers.size(); ++l) {
    injections.push_back(Injection{vcfg.layers[l].tap, vcfg.layers[l].patch_size,
                                   ctx.graphs[l], eta_nodes[l]});
  }
  return forward_with_taps(tape, mcfg, params, input, injections).logits;
}

}  // namespace

double PerturbationField::l2() const {
  double s = 0.0;
  for (const Tensor& t : layers) {
    for (double v : t.data) s += v * v;
  }
  return std::sqrt(s);
}

void PerturbationField::scale_by(double c) {
  for (Tensor& t : layers) {
    for (double& v : t.data) v *= c;
  }
}

PerturbationField gaussian_field(const std::vector<std::vector<long>>& shapes,
                                 RngStream& rng) {
  PerturbationField f;
  f.layers.reserve(shapes.size());
  for (const auto& s : shapes) {
    Tensor t(s);
    for (double& v : t.data) v = rng.normal();
    f.layers.push_back(std::move(t));
  }
  return f;
}

double weighted_norm(const PerturbationField& field,
                     const std::vector<double>& m) {
  if (field.layers.size() != m.size()) {
    throw DimensionError("weighted_norm: " + std::to_string(field.layers.size()) +
                         " layers vs " + std::to_string(m.size()) + " weights");
  }
  double s = 0.0;
  for (size_t l = 0; l < m.size(); ++l) {
    if (m[l] <= 0.0) throw ContractError("weighted_norm: m must be positive");
    double layer = 0.0;
    for (double v : field.layers[l].data) layer += v * v;
    s += layer / (m[l] * m[l]);
  }
  return std::sqrt(s);
}

PerturbationField normalize_to_ball(PerturbationField field,
                                    const std::vector<double>& m, double eps) {
  double wn = weighted_norm(field, m);
  if (wn == 0.0) {
    throw DegenerateDirectionError("cannot project a zero field onto the ball");
  }
  field.scale_by(eps / wn);
  return field;
}

PowerIterationResult power_iterate(
    const std::function<PerturbationField(const PerturbationField&)>& grad_at,
    const std::vector<double>& m, PerturbationField d0, int iters) {
  double n0 = d0.l2();
  if (n0 == 0.0) {
    throw DegenerateDirectionError("power iteration started from a zero field");
  }
  d0.scale_by(1.0 / n0);
  PowerIterationResult res;
  res.direction = std::move(d0);
  for (int it = 0; it < iters; ++it) {
    PerturbationField g = grad_at(res.direction);
    if (g.layers.size() != m.size()) {
      throw DimensionError("power iteration: gradient layer count mismatch");
    }
    // Pull the coefficient-space gradient back to the reparametrized
    // variables before normalizing.
    for (size_t l = 0; l < m.size(); ++l) {
      for (double& v : g.layers[l].data) v *= m[l];
    }
    double n = g.l2();
    if (n == 0.0) {
      ++res.zero_grad_events;
      continue;
    }
    g.scale_by(1.0 / n);
    res.direction = std::move(g);
  }
  return res;
}

VatGraphs build_vat_graphs(const ModelConfig& mcfg, const ParamSet& params,
                           const Tensor& inputs, const VatConfig& vcfg,
                           int threads) {
  check_layer_config(vcfg);
  const long N = inputs.shape[0];
  if (vcfg.k1 < 1 || vcfg.k1 > N - 1) {
    throw ContractError("vat: k1 must be in [1, N-1] for a batch of " +
                        std::to_string(N));
  }
  Tape tape(threads);
  std::vector<NodeId> ids = stage_params(tape, params, false);
  NodeId input = tape.constant(inputs);
  ForwardResult fwd = forward_with_taps(tape, mcfg, ids, input, {});

  VatGraphs ctx;
  ctx.ref_logits = tape.value(fwd.logits);
  PeerSet peers = filter_peers_semantic(tape.value(fwd.penultimate), vcfg.k1);
  for (const auto& layer : vcfg.layers) {
    if (layer.tap < 0 || layer.tap >= kTapCount) {
      throw ConfigError("vat: tap " + std::to_string(layer.tap) + " out of range");
    }
    PatchSet ps = extract_patches(tape.value(fwd.taps[layer.tap]), layer.patch_size);
    ctx.graphs.push_back(std::make_shared<const NeighborIndex>(
        knn_patches(ps, peers, layer.k2, threads)));
  }
  return ctx;
}

VatPerturbation compute_pani_vat_perturbation(const ModelConfig& mcfg,
                                              const ParamSet& params,
                                              const Tensor& inputs,
                                              const VatConfig& vcfg,
                                              const VatGraphs& ctx,
                                              RngStream& rng, int threads) {
  check_layer_config(vcfg);
  const long N = inputs.shape[0];
  std::vector<std::vector<long>> shapes;
  for (size_t l = 0; l < vcfg.layers.size(); ++l) {
    shapes.push_back({N, ctx.graphs[l]->n_patches, vcfg.layers[l].k2});
  }
  std::vector<double> m = layer_weights(vcfg);

  auto grad_at = [&](const PerturbationField& d) {
    Tape tape(threads);
    std::vector<NodeId> ids = stage_params(tape, params, false);
    NodeId input = tape.constant(inputs);
    std::vector<NodeId> eta_nodes;
    for (size_t l = 0; l < d.layers.size(); ++l) {
      Tensor probe = d.layers[l];
      for (double& v : probe.data) v *= vcfg.xi;
      eta_nodes.push_back(tape.leaf(std::move(probe)));
    }
    NodeId logits = forward_with_field(tape, mcfg, ids, input, vcfg, ctx, eta_nodes);
    Gradients grads = tape.backward(tape.kl_divergence(ctx.ref_logits, logits));
    PerturbationField g;
    for (NodeId id : eta_nodes) g.layers.push_back(grads.at(id));
    return g;
  };

  PowerIterationResult pi =
      power_iterate(grad_at, m, gaussian_field(shapes, rng), vcfg.power_iters);

  VatPerturbation out;
  out.direction = pi.direction;
  out.zero_grad_events = pi.zero_grad_events;
  PerturbationField scaled = pi.direction;
  for (size_t l = 0; l < m.size(); ++l) {
    for (double& v : scaled.layers[l].data) v *= m[l];
  }
  out.eta = normalize_to_ball(std::move(scaled), m, vcfg.eps);
  return out;
}

double vat_kl_at(const ModelConfig& mcfg, const ParamSet& params,
                 const Tensor& inputs, const VatConfig& vcfg,
                 const VatGraphs& ctx, const PerturbationField& eta,
                 int threads) {
  Tape tape(threads);
  std::vector<NodeId> ids = stage_params(tape, params, false);
  NodeId input = tape.constant(inputs);
  std::vector<NodeId> eta_nodes;
  for (const Tensor& t : eta.layers) eta_nodes.push_back(tape.constant(t));
  NodeId logits = forward_with_field(tape, mcfg, ids, input, vcfg, ctx, eta_nodes);
  return tape.value(tape.kl_divergence(ctx.ref_logits, logits)).data[0];
}

VatLossResult pani_vat_loss(const ModelConfig& mcfg, const ParamSet& params,
                            const Tensor& labeled_x, const Tensor& labeled_y,
                            const Tensor& unlabeled_x, const VatConfig& vcfg,
                            RngStream& power_rng, int threads) {
  Tensor combined = concat_batch(labeled_x, unlabeled_x);
  VatGraphs ctx = build_vat_graphs(mcfg, params, combined, vcfg, threads);
  VatPerturbation pert = compute_pani_vat_perturbation(mcfg, params, combined,
                                                       vcfg, ctx, power_rng, threads);

  Tape tape(threads);
  std::vector<NodeId> ids = stage_params(tape, params, true);
  NodeId sup_logits =
      forward_with_taps(tape, mcfg, ids, tape.constant(labeled_x), {}).logits;
  NodeId ce = tape.soft_cross_entropy(sup_logits, labeled_y);

  std::vector<NodeId> eta_nodes;
  for (const Tensor& t : pert.eta.layers) eta_nodes.push_back(tape.constant(t));
  NodeId pert_logits = forward_with_field(tape, mcfg, ids, tape.constant(combined),
                                          vcfg, ctx, eta_nodes);
  NodeId kl = tape.kl_divergence(ctx.ref_logits, pert_logits);
  NodeId total = tape.add(ce, tape.scale(kl, vcfg.beta));
  Gradients grads = tape.backward(total);

  VatLossResult out;
  out.total = tape.value(total).data[0];
  out.supervised = tape.value(ce).data[0];
  out.regularizer = vcfg.beta * tape.value(kl).data[0];
  out.param_grads = collect_param_grads(tape, grads, ids, params);
  out.zero_grad_events = pert.zero_grad_events;
  return out;
}

VatLossResult vanilla_vat_loss(const ModelConfig& mcfg, const ParamSet& params,
                               const Tensor& labeled_x, const Tensor& labeled_y,
                               const Tensor& unlabeled_x, const VatConfig& vcfg,
                               RngStream& power_rng, int threads) {
  if (vcfg.eps <= 0.0 || vcfg.xi <= 0.0 || vcfg.power_iters < 1) {
    throw ConfigError("vat: eps and xi must be positive, power_iters >= 1");
  }
  Tensor combined = concat_batch(labeled_x, unlabeled_x);

  Tape ref_tape(threads);
  std::vector<NodeId> ref_ids = stage_params(ref_tape, params, false);
  Tensor ref_logits = ref_tape.value(
      forward_with_taps(ref_tape, mcfg, ref_ids, ref_tape.constant(combined), {}).logits);

  // Single-layer field over the raw input, weight 1: the identity-graph
  // degenerate case of the patch machinery.
  std::vector<double> m{1.0};
  auto grad_at = [&](const PerturbationField& d) {
    Tape tape(threads);
    std::vector<NodeId> ids = stage_params(tape, params, false);
    Tensor probe = d.layers[0];
    for (double& v : probe.data) v *= vcfg.xi;
    NodeId r = tape.leaf(std::move(probe));
    NodeId x = tape.add(tape.constant(combined), r);
    NodeId logits = forward_with_taps(tape, mcfg, ids, x, {}).logits;
    Gradients grads = tape.backward(tape.kl_divergence(ref_logits, logits));
    PerturbationField g;
    g.layers.push_back(grads.at(r));
    return g;
  };

  PowerIterationResult pi = power_iterate(
      grad_at, m, gaussian_field({combined.shape}, power_rng), vcfg.power_iters);

  PerturbationField r_star = normalize_to_ball(pi.direction, m, vcfg.eps);
  Tensor perturbed = combined;
  for (long i = 0; i < perturbed.numel(); ++i) {
    perturbed.data[i] += r_star.layers[0].data[i];
  }

  Tape tape(threads);
  std::vector<NodeId> ids = stage_params(tape, params, true);
  NodeId sup_logits =
      forward_with_taps(tape, mcfg, ids, tape.constant(labeled_x), {}).logits;
  NodeId ce = tape.soft_cross_entropy(sup_logits, labeled_y);
  NodeId pert_logits =
      forward_with_taps(tape, mcfg, ids, tape.constant(perturbed), {}).logits;
  NodeId kl = tape.kl_divergence(ref_logits, pert_logits);
  NodeId total = tape.add(ce, tape.scale(kl, vcfg.beta));
  Gradients grads = tape.backward(total);

  VatLossResult out;
  out.total = tape.value(total).data[0];
  out.supervised = tape.value(ce).data[0];
  out.regularizer = vcfg.beta * tape.value(kl).data[0];
  out.param_grads = collect_param_grads(tape, grads, ids, params);
  out.zero_grad_events = pi.zero_grad_events;
  return out;
}

}  // namespace pani
