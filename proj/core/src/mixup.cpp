#include "pani/mixup.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pani/errors.hpp"
#include "pani/interpolation.hpp"

namespace pani {

namespace {

// Marsaglia-Tsang for shape >= 1; shapes below 1 are boosted through
// Gamma(a) = Gamma(a + 1) * U^(1/a).
double sample_gamma(double shape, RngStream& rng) {
  if (shape <= 0.0) throw ContractError("sample_gamma: shape must be positive");
  if (shape < 1.0) {
    double u = rng.uniform();
    return sample_gamma(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.normal();
    double t = 1.0 + c * x;
    if (t <= 0.0) continue;
    double v = t * t * t;
    double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

}  // namespace

double sample_lambda(double a, RngStream& rng) {
  if (a <= 0.0) throw ContractError("sample_lambda: a must be positive");
  return std::pow(rng.uniform(), 1.0 / a);
}

double sample_beta(double a, double b, RngStream& rng) {
  if (a <= 0.0 || b <= 0.0) {
    throw ContractError("sample_beta: shapes must be positive");
  }
  if (a == 1.0 && b == 1.0) return rng.uniform();
  double ga = sample_gamma(a, rng);
  double gb = sample_gamma(b, rng);
  if (ga == 0.0 && gb == 0.0) return 0.5;
  return ga / (ga + gb);
}

Tensor masked_uniform_eta(long P, long K, double mask_ratio,
                          RngStream& eta_rng, RngStream& mask_rng) {
  if (P < 1 || K < 1) throw ContractError("masked_uniform_eta: P, K must be >= 1");
  if (mask_ratio < 0.0 || mask_ratio > 1.0) {
    throw ContractError("masked_uniform_eta: mask_ratio must be in [0, 1]");
  }
  Tensor eta({P, K});
  for (double& v : eta.data) v = eta_rng.uniform();
  for (double& v : eta.data) {
    if (mask_rng.uniform() < mask_ratio) v = 0.0;
  }
  return eta;
}

MixPlan build_mix_plan(const PatchSet& patches, const PeerSet& peers,
                       const MixConfig& cfg, MixRng& rng, int threads) {
  if (cfg.a <= 0.0) throw ConfigError("mixup: a must be positive");
  if (cfg.k < 1) throw ConfigError("mixup: k must be >= 1");
  const long N = patches.images();
  const long P = patches.count();
  const long K = cfg.k;

  MixPlan plan;
  plan.neighbors = knn_patches(patches, peers, K, threads);
  plan.eta = Tensor({N, P, K});
  plan.lambda_eff.resize(static_cast<size_t>(N));
  plan.label_mass.resize(static_cast<size_t>(N));

  for (long i = 0; i < N; ++i) {
    double lambda = sample_lambda(cfg.a, rng.lambda);
    Tensor raw = masked_uniform_eta(P, K, cfg.mask_ratio, rng.eta, rng.mask);

    double raw_sum = 0.0;
    for (double v : raw.data) raw_sum += v;
    if (raw_sum == 0.0) {
      // Everything masked: identity plan, eta row stays zero.
      plan.lambda_eff[static_cast<size_t>(i)] = 1.0;
      continue;
    }

    double scale = (1.0 - lambda) * static_cast<double>(P) / raw_sum;
    double total = 0.0;
    double* row = &plan.eta.data[static_cast<size_t>(i * P * K)];
    for (long t = 0; t < P * K; ++t) {
      double v = std::min(raw.data[static_cast<size_t>(t)] * scale, 1.0);
      row[t] = v;
      total += v;
    }
    double lambda_eff = 1.0 - total / static_cast<double>(P);
    plan.lambda_eff[static_cast<size_t>(i)] =
        std::min(1.0, std::max(0.0, lambda_eff));

    auto& mass = plan.label_mass[static_cast<size_t>(i)];
    for (long p = 0; p < P; ++p) {
      for (long k = 0; k < K; ++k) {
        double v = row[p * K + k];
        if (v == 0.0) continue;
        mass[plan.neighbors.image[plan.neighbors.flat(i, p, k)]] += v;
      }
    }
    for (auto& [j, w] : mass) w /= static_cast<double>(P);
  }
  return plan;
}

MixedBatch apply_mix(const Tensor& inputs, const Tensor& onehot,
                     const MixPlan& plan, long patch_size) {
  const long N = inputs.shape[0];
  if (onehot.rank() != 2 || onehot.shape[0] != N) {
    throw DimensionError("apply_mix: targets " + shape_str(onehot.shape) +
                         " do not pair with inputs " + shape_str(inputs.shape));
  }
  const long C = onehot.shape[1];

  MixedBatch out;
  out.inputs = transform_layer(inputs, plan.neighbors, plan.eta, patch_size);
  out.targets = Tensor({N, C});
  for (long i = 0; i < N; ++i) {
    double self = plan.lambda_eff[static_cast<size_t>(i)];
    for (long c = 0; c < C; ++c) {
      out.targets.data[static_cast<size_t>(i * C + c)] =
          self * onehot.data[static_cast<size_t>(i * C + c)];
    }
    for (const auto& [j, w] : plan.label_mass[static_cast<size_t>(i)]) {
      for (long c = 0; c < C; ++c) {
        out.targets.data[static_cast<size_t>(i * C + c)] +=
            w * onehot.data[static_cast<size_t>(j * C + c)];
      }
    }
  }
  return out;
}

MixedBatch vanilla_mixup(const Tensor& inputs, const Tensor& onehot, double a,
                         RngStream& partner_rng, RngStream& lambda_rng) {
  const long N = inputs.shape[0];
  if (N < 2) throw ContractError("vanilla_mixup: needs at least two images");
  if (onehot.rank() != 2 || onehot.shape[0] != N) {
    throw DimensionError("vanilla_mixup: targets " + shape_str(onehot.shape) +
                         " do not pair with inputs " + shape_str(inputs.shape));
  }
  double lambda = sample_beta(a, a, lambda_rng);

  MixedBatch out;
  out.inputs = Tensor(inputs.shape);
  out.targets = Tensor(onehot.shape);
  const long D = inputs.numel() / N;
  const long C = onehot.shape[1];
  for (long i = 0; i < N; ++i) {
    long j = static_cast<long>(partner_rng.uniform_int(static_cast<unsigned long>(N - 1)));
    if (j >= i) ++j;
    for (long t = 0; t < D; ++t) {
      out.inputs.data[static_cast<size_t>(i * D + t)] =
          lambda * inputs.data[static_cast<size_t>(i * D + t)] +
          (1.0 - lambda) * inputs.data[static_cast<size_t>(j * D + t)];
    }
    for (long c = 0; c < C; ++c) {
      out.targets.data[static_cast<size_t>(i * C + c)] =
          lambda * onehot.data[static_cast<size_t>(i * C + c)] +
          (1.0 - lambda) * onehot.data[static_cast<size_t>(j * C + c)];
    }
  }
  return out;
}

}  // namespace pani
