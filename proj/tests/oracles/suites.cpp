#include "suites.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "graphgen.hpp"
#include "oracles.hpp"
#include "pani/data.hpp"
#include "pani/errors.hpp"
#include "pani/graph.hpp"
#include "pani/interpolation.hpp"
#include "pani/mixup.hpp"
#include "pani/model.hpp"
#include "pani/patches.hpp"
#include "pani/rng.hpp"
#include "pani/tensor.hpp"
#include "pani/vat.hpp"

namespace pani::oracles {

namespace {

constexpr int kMaxMessages = 8;

struct Ctx {
  SuiteResult r;

  explicit Ctx(const char* name) { r.name = name; }

  void check(bool ok, const std::string& msg) {
    ++r.checks;
    if (!ok) {
      ++r.failures;
      if (static_cast<int>(r.messages.size()) < kMaxMessages)
        r.messages.push_back(msg);
    }
  }
};

template <typename... Args>
std::string fmt(const char* pattern, Args... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return buf;
}

Tensor random_tensor(std::vector<long> shape, RngStream& rng, double lo,
                     double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  if (a.data.empty()) return true;
  return std::memcmp(a.data.data(), b.data.data(),
                     a.data.size() * sizeof(double)) == 0;
}

bool close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// A random neighbor graph drawing K distinct candidates per (i, p) from the
// patches of the other images, similarity left at zero.
NeighborIndex random_neighbors(long N, long P, long K, RngStream& rng) {
  NeighborIndex g(N, P, K);
  for (long i = 0; i < N; ++i) {
    for (long p = 0; p < P; ++p) {
      std::vector<long> pool =
          sample_without_replacement((N - 1) * P, K, -1, rng);
      for (long k = 0; k < K; ++k) {
        long j = pool[k] / P;
        if (j >= i) ++j;
        g.image[g.flat(i, p, k)] = j;
        g.patch[g.flat(i, p, k)] = pool[k] % P;
      }
    }
  }
  return g;
}

std::filesystem::path scratch_dir(std::uint64_t seed) {
  auto dir = std::filesystem::temp_directory_path() /
             ("pani-suite-" + std::to_string(::getpid()) + "-" +
              std::to_string(seed));
  std::filesystem::create_directories(dir);
  return dir;
}

void write_bytes(const std::filesystem::path& p,
                 const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

SuiteResult check_forward_kernels(std::uint64_t seed, int cases) {
  Ctx ctx("forward-kernels");
  RngStream rng(seed);

  {
    // 2x2 input, 1x1 kernel of value 2: pure elementwise doubling.
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k({1, 1, 1, 1}, {2});
    Tensor b({1}, {0});
    Tape tape;
    Tensor got = tape.value(
        tape.conv2d(tape.constant(x), tape.constant(k), tape.constant(b), 1, 0));
    Tensor want({1, 1, 2, 2}, {2, 4, 6, 8});
    ctx.check(bits_equal(got, want), "conv 1x1 doubling example mismatch");
    ctx.check(bits_equal(conv2d_reference(x, k, b, 1, 0), want),
              "conv reference disagrees on 1x1 example");
  }
  {
    // 3x3 ramp, 2x2 ones kernel, valid convolution: window sums.
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k({1, 1, 2, 2}, {1, 1, 1, 1});
    Tensor b({1}, {0});
    Tape tape;
    Tensor got = tape.value(
        tape.conv2d(tape.constant(x), tape.constant(k), tape.constant(b), 1, 0));
    Tensor want({1, 1, 2, 2}, {12, 16, 24, 28});
    ctx.check(bits_equal(got, want), "conv window-sum example mismatch");
    ctx.check(bits_equal(conv2d_reference(x, k, b, 1, 0), want),
              "conv reference disagrees on window-sum example");
  }

  for (int c = 0; c < cases; ++c) {
    long N = 1 + static_cast<long>(rng.uniform_int(2));
    long Cin = 1 + static_cast<long>(rng.uniform_int(2));
    long H = 2 + static_cast<long>(rng.uniform_int(4));
    long W = 2 + static_cast<long>(rng.uniform_int(4));
    long F = 1 + static_cast<long>(rng.uniform_int(3));
    long ks = 1 + static_cast<long>(rng.uniform_int(3));
    int pad = static_cast<int>(rng.uniform_int(2));
    int stride = 1 + static_cast<int>(rng.uniform_int(2));
    if (H + 2 * pad < ks || W + 2 * pad < ks) {
      ks = 1;
      pad = 0;
    }
    Tensor x = random_tensor({N, Cin, H, W}, rng, -1.0, 1.0);
    Tensor k = random_tensor({F, Cin, ks, ks}, rng, -1.0, 1.0);
    Tensor b = random_tensor({F}, rng, -0.5, 0.5);
    Tape tape;
    Tensor got = tape.value(tape.conv2d(tape.constant(x), tape.constant(k),
                                        tape.constant(b), stride, pad));
    Tensor want = conv2d_reference(x, k, b, stride, pad);
    ctx.check(got.shape == want.shape && max_abs_diff(got, want) <= 1e-12,
              fmt("conv vs reference diff %.3g (case %d)",
                  max_abs_diff(got, want), c));

    long D = 1 + static_cast<long>(rng.uniform_int(5));
    long M = 1 + static_cast<long>(rng.uniform_int(4));
    Tensor dx = random_tensor({N, D}, rng, -1.0, 1.0);
    Tensor dw = random_tensor({M, D}, rng, -1.0, 1.0);
    Tensor db = random_tensor({M}, rng, -0.5, 0.5);
    Tape dt;
    Tensor dgot = dt.value(
        dt.dense(dt.constant(dx), dt.constant(dw), dt.constant(db)));
    ctx.check(max_abs_diff(dgot, dense_reference(dx, dw, db)) <= 1e-12,
              "dense vs reference diff");

    Tensor gx = random_tensor({N, Cin, H, W}, rng, -1.0, 1.0);
    Tape gt;
    Tensor ggot = gt.value(gt.global_avg_pool(gt.constant(gx)));
    ctx.check(max_abs_diff(ggot, global_avg_pool_reference(gx)) <= 1e-12,
              "global average pool vs reference diff");

    long Ccls = 2 + static_cast<long>(rng.uniform_int(4));
    Tensor lx = random_tensor({N, Ccls}, rng, -3.0, 3.0);
    Tape lt;
    Tensor lgot = lt.value(lt.log_softmax(lt.constant(lx)));
    ctx.check(max_abs_diff(lgot, log_softmax_reference(lx)) <= 1e-9,
              "log softmax vs reference diff");

    Tensor ref = random_tensor({N, Ccls}, rng, -2.0, 2.0);
    Tensor pert = random_tensor({N, Ccls}, rng, -2.0, 2.0);
    Tape kt;
    double kgot =
        kt.value(kt.kl_divergence(ref, kt.constant(pert))).data[0];
    ctx.check(close(kgot, kl_reference(ref, pert), 1e-12),
              fmt("kl vs reference: %.17g vs %.17g", kgot,
                  kl_reference(ref, pert)));

    Tensor targets({N, Ccls});
    for (long i = 0; i < N; ++i) {
      double row = 0.0;
      for (long j = 0; j < Ccls; ++j) {
        double v = 0.05 + rng.uniform();
        targets.at({i, j}) = v;
        row += v;
      }
      for (long j = 0; j < Ccls; ++j) targets.at({i, j}) /= row;
    }
    Tape st;
    double sgot =
        st.value(st.soft_cross_entropy(st.constant(pert), targets)).data[0];
    ctx.check(close(sgot, soft_ce_reference(pert, targets), 1e-12),
              "soft cross entropy vs reference diff");
  }
  return ctx.r;
}

SuiteResult check_gradients(std::uint64_t seed, int cases) {
  Ctx ctx("gradcheck");
  RngStream rng(seed);
  bool saw_patch = false;
  for (int c = 0; c < cases; ++c) {
    GradCase gc = random_grad_case(rng);
    if (gc.description.find("patch") != std::string::npos) saw_patch = true;
    std::vector<double> ad = gc.gradient(gc.x0);
    std::vector<double> fd = numeric_gradient(gc.value, gc.x0, kFdStep);
    double worst = 0.0;
    for (size_t i = 0; i < ad.size(); ++i)
      worst = std::max(worst, gradient_error(ad[i], fd[i]));
    ctx.check(worst < kGradTol,
              fmt("gradient error %.3g (case %d): ", worst, c) +
                  gc.description);
  }
  if (cases >= 10)
    ctx.check(saw_patch, "no generated graph contained a patch interpolation");
  return ctx.r;
}

SuiteResult check_patch_roundtrip(std::uint64_t seed, int cases) {
  Ctx ctx("patches");
  RngStream rng(seed);

  {
    Tensor x({1, 1, 4, 4});
    for (long i = 0; i < 16; ++i) x.data[static_cast<size_t>(i)] = i + 1.0;
    PatchSet ps = extract_patches(x, 2);
    Tensor want({1, 4, 4}, {1, 2, 5, 6, 3, 4, 7, 8, 9, 10, 13, 14, 11, 12, 15, 16});
    ctx.check(bits_equal(ps.data, want), "4x4 patch cut example mismatch");
    ctx.check(bits_equal(reconstruct(ps), x), "4x4 reconstruct mismatch");
  }

  for (int c = 0; c < cases; ++c) {
    long N = 1 + static_cast<long>(rng.uniform_int(3));
    long C = 1 + static_cast<long>(rng.uniform_int(3));
    long s = 1 + static_cast<long>(rng.uniform_int(4));
    long gh = 1 + static_cast<long>(rng.uniform_int(3));
    long gw = 1 + static_cast<long>(rng.uniform_int(3));
    Tensor x = random_tensor({N, C, s * gh, s * gw}, rng, -2.0, 2.0);
    PatchSet ps = extract_patches(x, s);
    ctx.check(bits_equal(ps.data, extract_patches_reference(x, s)),
              fmt("patch cut vs reference (case %d)", c));
    ctx.check(bits_equal(reconstruct(ps), x),
              fmt("roundtrip not bit exact (case %d)", c));
    Tensor rec2 = reconstruct_data(ps.data, x.shape, s);
    ctx.check(bits_equal(rec2, x),
              fmt("data-level roundtrip not bit exact (case %d)", c));
  }
  return ctx.r;
}

SuiteResult check_knn(std::uint64_t seed, int cases) {
  Ctx ctx("knn");
  RngStream rng(seed);

  for (int c = 0; c < cases; ++c) {
    long N = 2 + static_cast<long>(rng.uniform_int(7));
    long s = 1 + static_cast<long>(rng.uniform_int(2));
    long gh = 1 + static_cast<long>(rng.uniform_int(4));
    long gw = 1 + static_cast<long>(rng.uniform_int(4));
    Tensor x({N, 1, s * gh, s * gw});
    bool lattice = (c % 3 == 0);
    for (double& v : x.data)
      v = lattice ? static_cast<double>(rng.uniform_int(2)) : rng.uniform();
    PatchSet ps = extract_patches(x, s);
    long P = ps.count();
    long k1 = 1 + static_cast<long>(rng.uniform_int(
                      static_cast<std::uint64_t>(std::min<long>(4, N - 1))));
    long k2 = 1 + static_cast<long>(rng.uniform_int(
                      static_cast<std::uint64_t>(std::min<long>(6, k1 * P))));
    PeerSet peers = filter_peers_random(N, k1, rng);
    NeighborIndex g = knn_patches(ps, peers, k2, 1);
    bool ok = true;
    for (long i = 0; i < N && ok; ++i) {
      for (long p = 0; p < P && ok; ++p) {
        auto ref = knn_reference(ps.data, peers.peers, i, p, k2);
        for (long k = 0; k < k2; ++k) {
          long f = g.flat(i, p, k);
          if (g.image[f] != ref[static_cast<size_t>(k)].image ||
              g.patch[f] != ref[static_cast<size_t>(k)].patch ||
              std::memcmp(&g.similarity[f],
                          &ref[static_cast<size_t>(k)].similarity,
                          sizeof(double)) != 0) {
            ok = false;
            break;
          }
        }
      }
    }
    ctx.check(ok, fmt("knn disagrees with brute force (case %d, N=%ld)", c, N));
  }

  {
    // All-identical patches: every similarity ties, so selection must follow
    // candidate order (peer list position, then patch index).
    Tensor x({3, 1, 2, 2});
    for (double& v : x.data) v = 1.0;
    PatchSet ps = extract_patches(x, 2);
    PeerSet peers;
    peers.peers = {{2, 1}, {0, 2}, {1, 0}};
    NeighborIndex g = knn_patches(ps, peers, 2, 1);
    bool ok = g.image[g.flat(0, 0, 0)] == 2 && g.image[g.flat(0, 0, 1)] == 1 &&
              g.image[g.flat(1, 0, 0)] == 0 && g.image[g.flat(1, 0, 1)] == 2 &&
              g.image[g.flat(2, 0, 0)] == 1 && g.image[g.flat(2, 0, 1)] == 0;
    ctx.check(ok, "tie break does not follow candidate order");
  }
  return ctx.r;
}

SuiteResult check_interpolation(std::uint64_t seed) {
  Ctx ctx("interpolation");
  RngStream rng(seed);

  {
    // (1,2) moved halfway to (3,4) and a quarter to (5,6) lands on (3,4).
    Tensor patches({2, 2, 2}, {1, 2, 9, 9, 3, 4, 5, 6});
    NeighborIndex g(2, 2, 2);
    for (long i = 0; i < 2; ++i)
      for (long p = 0; p < 2; ++p)
        for (long k = 0; k < 2; ++k) {
          g.image[g.flat(i, p, k)] = 1 - i;
          g.patch[g.flat(i, p, k)] = k;
        }
    Tensor eta({2, 2, 2});
    eta.at({0, 0, 0}) = 0.5;
    eta.at({0, 0, 1}) = 0.25;
    Tensor out = interpolate_patches_data(patches, g, eta);
    ctx.check(out.at({0, 0, 0}) == 3.0 && out.at({0, 0, 1}) == 4.0,
              fmt("worked example got (%.17g, %.17g)", out.at({0, 0, 0}),
                  out.at({0, 0, 1})));
    ctx.check(out.at({0, 1, 0}) == 9.0 && out.at({1, 0, 0}) == 3.0 &&
                  out.at({1, 1, 1}) == 6.0,
              "rows with zero eta changed");
  }

  {
    // eta == 0 must return the input bit pattern untouched.
    Tensor patches = random_tensor({3, 4, 5}, rng, -2.0, 2.0);
    NeighborIndex g = random_neighbors(3, 4, 2, rng);
    Tensor eta({3, 4, 2});
    ctx.check(bits_equal(interpolate_patches_data(patches, g, eta), patches),
              "identity at eta == 0 is not bit exact");
  }

  {
    // K == 1 with eta in [0, 1] stays inside the segment coordinatewise.
    Tensor patches = random_tensor({3, 2, 3}, rng, 0.0, 1.0);
    NeighborIndex g = random_neighbors(3, 2, 1, rng);
    Tensor eta({3, 2, 1});
    for (double& v : eta.data) v = rng.uniform();
    Tensor out = interpolate_patches_data(patches, g, eta);
    bool inside = true;
    for (long i = 0; i < 3; ++i)
      for (long p = 0; p < 2; ++p)
        for (long d = 0; d < 3; ++d) {
          double z = patches.at({i, p, d});
          long f = g.flat(i, p, 0);
          double w = patches.at({g.image[f], g.patch[f], d});
          double v = out.at({i, p, d});
          if (v < std::min(z, w) - 1e-12 || v > std::max(z, w) + 1e-12)
            inside = false;
        }
    ctx.check(inside, "single-neighbor interpolation left the segment");
  }

  for (int c = 0; c < 10; ++c) {
    long N = 2 + static_cast<long>(rng.uniform_int(2));
    long P = 1 + static_cast<long>(rng.uniform_int(4));
    long d = 1 + static_cast<long>(rng.uniform_int(4));
    long K = std::min(1 + static_cast<long>(rng.uniform_int(3)), (N - 1) * P);
    Tensor patches = random_tensor({N, P, d}, rng, -1.0, 1.0);
    NeighborIndex g = random_neighbors(N, P, K, rng);
    Tensor eta = random_tensor({N, P, K}, rng, -0.5, 0.5);
    Tensor got = interpolate_patches_data(patches, g, eta);
    std::vector<long> nbi(g.image.begin(), g.image.end());
    std::vector<long> nbp(g.patch.begin(), g.patch.end());
    Tensor want = interpolate_reference(patches, nbi, nbp, eta);
    ctx.check(max_abs_diff(got, want) <= 1e-12,
              fmt("interpolation vs reference diff %.3g (case %d)",
                  max_abs_diff(got, want), c));
  }

  {
    // transform_layer == cut, interpolate, stitch; checked through the
    // reference patch cut of its output.
    Tensor x = random_tensor({2, 2, 4, 4}, rng, -1.0, 1.0);
    NeighborIndex g = random_neighbors(2, 4, 2, rng);
    Tensor eta = random_tensor({2, 4, 2}, rng, 0.0, 0.5);
    Tensor out = transform_layer(x, g, eta, 2);
    PatchSet ps = extract_patches(x, 2);
    std::vector<long> nbi(g.image.begin(), g.image.end());
    std::vector<long> nbp(g.patch.begin(), g.patch.end());
    Tensor want = interpolate_reference(ps.data, nbi, nbp, eta);
    ctx.check(bits_equal(extract_patches_reference(out, 2), want),
              "transform_layer disagrees with cut-interpolate-stitch");

    Tape tape;
    auto shared = std::make_shared<NeighborIndex>(g);
    NodeId node = transform_layer(tape, tape.constant(x), shared,
                                  tape.leaf(eta), 2);
    ctx.check(bits_equal(tape.value(node), out),
              "tape transform_layer disagrees with the tensor version");
  }
  return ctx.r;
}

SuiteResult check_losses(std::uint64_t seed) {
  Ctx ctx("losses");
  RngStream rng(seed);

  {
    // softmax(0,0) = (1/2,1/2) against softmax(0,ln3) = (1/4,3/4).
    Tensor ref({1, 2}, {0.0, 0.0});
    Tensor pert({1, 2}, {0.0, std::log(3.0)});
    double want = 0.5 * std::log(4.0 / 3.0);
    Tape tape;
    double got = tape.value(tape.kl_divergence(ref, tape.constant(pert))).data[0];
    ctx.check(close(got, want, 1e-12), fmt("kl example %.17g vs %.17g", got, want));
    ctx.check(close(kl_reference(ref, pert), want, 1e-12),
              "kl reference disagrees on the example");
    ctx.check(close(want, 0.14384103622589045, 1e-15),
              "frozen kl constant drifted");
  }
  {
    Tensor logits({1, 4}, {0.0, 0.0, 0.0, 0.0});
    Tensor targets({1, 4}, {0.25, 0.25, 0.25, 0.25});
    Tape tape;
    double got =
        tape.value(tape.soft_cross_entropy(tape.constant(logits), targets))
            .data[0];
    ctx.check(close(got, std::log(4.0), 1e-12),
              fmt("uniform soft ce %.17g vs ln 4", got));
  }
  {
    Tensor logits = random_tensor({3, 5}, rng, -3.0, 3.0);
    Tape tape;
    double got =
        tape.value(tape.kl_divergence(logits, tape.constant(logits))).data[0];
    ctx.check(got == 0.0, fmt("kl of identical logits is %.3g, not zero", got));
  }
  for (int c = 0; c < 50; ++c) {
    long N = 1 + static_cast<long>(rng.uniform_int(3));
    long C = 2 + static_cast<long>(rng.uniform_int(4));
    Tensor ref = random_tensor({N, C}, rng, -3.0, 3.0);
    Tensor pert = random_tensor({N, C}, rng, -3.0, 3.0);
    Tape tape;
    double got = tape.value(tape.kl_divergence(ref, tape.constant(pert))).data[0];
    ctx.check(got >= 0.0, fmt("negative kl %.3g (case %d)", got, c));
    ctx.check(close(got, kl_reference(ref, pert), 1e-12),
              fmt("kl vs reference (case %d)", c));
  }
  {
    // Mean over rows: one divergent row plus one identical row halves the
    // single-row value.
    Tensor ref({2, 2}, {0.0, 0.0, 1.0, 2.0});
    Tensor pert({2, 2}, {0.0, std::log(3.0), 1.0, 2.0});
    Tape tape;
    double got = tape.value(tape.kl_divergence(ref, tape.constant(pert))).data[0];
    ctx.check(close(got, 0.5 * 0.5 * std::log(4.0 / 3.0), 1e-12),
              "kl row mean wrong");
  }
  {
    Tensor logits({1, 3}, {0.1, 0.2, 0.3});
    Tensor bad({1, 3}, {0.5, 0.3, 0.1});  // sums to 0.9
    Tape tape;
    bool threw = false;
    try {
      tape.soft_cross_entropy(tape.constant(logits), bad);
    } catch (const ContractError&) {
      threw = true;
    }
    ctx.check(threw, "soft ce accepted a non-distribution target row");
  }
  return ctx.r;
}

SuiteResult check_mix_plans(std::uint64_t seed, int cases) {
  Ctx ctx("mixplan");
  RngStream meta(seed);
  RngStream peer_rng = RngStream::derive(seed, "suite-mix-peers");
  MixRng mix{RngStream::derive(seed, "suite-mix-lambda"),
             RngStream::derive(seed, "suite-mix-eta"),
             RngStream::derive(seed, "suite-mix-mask")};

  for (int c = 0; c < cases; ++c) {
    long N = 2 + static_cast<long>(meta.uniform_int(3));
    long s = 1 + static_cast<long>(meta.uniform_int(2));
    long gh = 1 + static_cast<long>(meta.uniform_int(2));
    long gw = 1 + static_cast<long>(meta.uniform_int(2));
    Tensor x = random_tensor({N, 1, s * gh, s * gw}, meta, 0.0, 1.0);
    PatchSet ps = extract_patches(x, s);
    long P = ps.count();
    MixConfig cfg;
    cfg.a = 0.3 + 3.0 * meta.uniform();
    cfg.k1 = 1 + static_cast<long>(meta.uniform_int(
                     static_cast<std::uint64_t>(std::min<long>(3, N - 1))));
    cfg.k = 1 + static_cast<long>(
                    meta.uniform_int(static_cast<std::uint64_t>(
                        std::min<long>(4, cfg.k1 * P))));
    cfg.patch_size = s;
    cfg.mask_ratio = (c % 7 == 0) ? 1.0 : (c % 11 == 0 ? 0.0 : meta.uniform());

    PeerSet peers = filter_peers_random(N, cfg.k1, peer_rng);
    MixRng replay = mix;  // copies of all three streams, pre-consumption
    MixPlan plan = build_mix_plan(ps, peers, cfg, mix, 1);

    bool eta_range = true;
    for (double v : plan.eta.data)
      if (v < 0.0 || v > 1.0) eta_range = false;
    ctx.check(eta_range, fmt("eta left [0,1] (case %d)", c));

    bool replay_ok = true, budget_ok = true, mass_ok = true;
    for (long i = 0; i < N; ++i) {
      double lambda = sample_lambda(cfg.a, replay.lambda);
      Tensor raw =
          masked_uniform_eta(P, cfg.k, cfg.mask_ratio, replay.eta, replay.mask);
      double raw_sum = 0.0;
      for (double v : raw.data) raw_sum += v;
      double clamped_sum = 0.0;
      if (raw_sum == 0.0) {
        if (plan.lambda_eff[static_cast<size_t>(i)] != 1.0) replay_ok = false;
        for (long p = 0; p < P; ++p)
          for (long k = 0; k < cfg.k; ++k)
            if (plan.eta.at({i, p, k}) != 0.0) replay_ok = false;
        if (!plan.label_mass[static_cast<size_t>(i)].empty()) replay_ok = false;
      } else {
        double scale = (1.0 - lambda) * static_cast<double>(P) / raw_sum;
        double unclamped = 0.0;
        for (long p = 0; p < P; ++p)
          for (long k = 0; k < cfg.k; ++k) {
            double v = raw.at({p, k}) * scale;
            unclamped += v;
            double want = std::min(v, 1.0);
            if (plan.eta.at({i, p, k}) != want) replay_ok = false;
            clamped_sum += want;
          }
        if (std::abs(unclamped / static_cast<double>(P) - (1.0 - lambda)) >=
            1e-9)
          budget_ok = false;
        double lam_eff =
            std::clamp(1.0 - clamped_sum / static_cast<double>(P), 0.0, 1.0);
        if (plan.lambda_eff[static_cast<size_t>(i)] != lam_eff)
          replay_ok = false;
      }
      double mass = plan.lambda_eff[static_cast<size_t>(i)];
      for (const auto& [j, v] : plan.label_mass[static_cast<size_t>(i)]) {
        if (v < 0.0 || j == i) mass_ok = false;
        mass += v;
      }
      if (std::abs(mass - 1.0) >= 1e-9) mass_ok = false;
    }
    ctx.check(replay_ok, fmt("plan does not replay from its streams (case %d)", c));
    ctx.check(budget_ok, fmt("pre-clamp budget violated (case %d)", c));
    ctx.check(mass_ok, fmt("lambda_eff plus label mass is not 1 (case %d)", c));

    Tensor onehot({N, 3});
    for (long i = 0; i < N; ++i)
      onehot.at({i, static_cast<long>(meta.uniform_int(3))}) = 1.0;
    MixedBatch mb = apply_mix(x, onehot, plan, s);
    bool rows_ok = true;
    for (long i = 0; i < N; ++i) {
      double row = 0.0;
      for (long j = 0; j < 3; ++j) {
        double v = mb.targets.at({i, j});
        if (v < 0.0) rows_ok = false;
        row += v;
      }
      if (std::abs(row - 1.0) >= 1e-9) rows_ok = false;
    }
    ctx.check(rows_ok, fmt("mixed targets are not distributions (case %d)", c));
  }
  return ctx.r;
}

SuiteResult check_weighted_ball(std::uint64_t seed, int cases) {
  Ctx ctx("ball");
  RngStream rng(seed);

  for (int c = 0; c < cases; ++c) {
    int L = 1 + static_cast<int>(rng.uniform_int(2));
    std::vector<std::vector<long>> shapes;
    std::vector<double> m;
    for (int l = 0; l < L; ++l) {
      shapes.push_back({1 + static_cast<long>(rng.uniform_int(3)),
                        1 + static_cast<long>(rng.uniform_int(6)),
                        1 + static_cast<long>(rng.uniform_int(4))});
      m.push_back(0.25 + 3.75 * rng.uniform());
    }
    double eps = 0.1 + 4.0 * rng.uniform();
    PerturbationField field = gaussian_field(shapes, rng);
    PerturbationField onto = normalize_to_ball(field, m, eps);
    double wn = weighted_norm_reference(onto.layers, m);
    ctx.check(std::abs(wn - eps) / eps <= 1e-6,
              fmt("weighted norm %.12g after projection to eps %.12g", wn, eps));
    ctx.check(close(weighted_norm(onto, m), wn, 1e-12),
              "library weighted norm disagrees with reference");
  }

  {
    PerturbationField zero;
    zero.layers.emplace_back(std::vector<long>{2, 2, 1});
    bool threw = false;
    try {
      normalize_to_ball(zero, {1.0}, 1.0);
    } catch (const DegenerateDirectionError&) {
      threw = true;
    }
    ctx.check(threw, "zero field was projected instead of rejected");
  }
  return ctx.r;
}

SuiteResult check_power_iteration(std::uint64_t seed, int trials) {
  Ctx ctx("power-iteration");
  RngStream rng(seed);

  {
    // One step from (1,1)/sqrt(2) under diag(3,1) lands on (3,1)/sqrt(10).
    std::vector<std::vector<double>> A = {{3.0, 0.0}, {0.0, 1.0}};
    auto grad_at = [&](const PerturbationField& d) {
      PerturbationField g;
      g.layers.emplace_back(std::vector<long>{2});
      for (int r = 0; r < 2; ++r)
        g.layers[0].data[static_cast<size_t>(r)] =
            A[r][0] * d.layers[0].data[0] + A[r][1] * d.layers[0].data[1];
      return g;
    };
    PerturbationField d0;
    d0.layers.emplace_back(std::vector<long>{2});
    d0.layers[0].data = {1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)};
    PowerIterationResult res = power_iterate(grad_at, {1.0}, d0, 1);
    double want0 = 3.0 / std::sqrt(10.0), want1 = 1.0 / std::sqrt(10.0);
    ctx.check(std::abs(res.direction.layers[0].data[0] - want0) <= 1e-12 &&
                  std::abs(res.direction.layers[0].data[1] - want1) <= 1e-12,
              "diag(3,1) single step mismatch");
    ctx.check(res.zero_grad_events == 0, "unexpected zero-gradient event");
  }

  for (int t = 0; t < trials; ++t) {
    long n = 2 + static_cast<long>(rng.uniform_int(5));
    // Orthonormal basis by Gram-Schmidt over gaussian draws.
    std::vector<std::vector<double>> Q;
    while (static_cast<long>(Q.size()) < n) {
      std::vector<double> v(static_cast<size_t>(n));
      for (double& x : v) x = rng.normal();
      for (const auto& q : Q) {
        double d = 0.0;
        for (long i = 0; i < n; ++i)
          d += q[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
        for (long i = 0; i < n; ++i)
          v[static_cast<size_t>(i)] -= d * q[static_cast<size_t>(i)];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (double& x : v) x /= norm;
      Q.push_back(v);
    }
    std::vector<double> eig(static_cast<size_t>(n));
    double lam2 = 0.5 + rng.uniform();
    double ratio = 1.5 + 1.5 * rng.uniform();
    eig[0] = ratio * lam2;
    if (n > 1) eig[1] = lam2;
    for (long i = 2; i < n; ++i)
      eig[static_cast<size_t>(i)] = lam2 * (0.05 + 0.9 * rng.uniform());

    auto matvec = [&](const std::vector<double>& x) {
      std::vector<double> out(static_cast<size_t>(n), 0.0);
      for (long k = 0; k < n; ++k) {
        double proj = 0.0;
        for (long i = 0; i < n; ++i)
          proj += Q[static_cast<size_t>(k)][static_cast<size_t>(i)] *
                  x[static_cast<size_t>(i)];
        proj *= eig[static_cast<size_t>(k)];
        for (long i = 0; i < n; ++i)
          out[static_cast<size_t>(i)] +=
              proj * Q[static_cast<size_t>(k)][static_cast<size_t>(i)];
      }
      return out;
    };
    auto grad_at = [&](const PerturbationField& d) {
      PerturbationField g;
      g.layers.emplace_back(std::vector<long>{n});
      g.layers[0].data = matvec(d.layers[0].data);
      return g;
    };

    // Redraw starts that are nearly orthogonal to the dominant eigenvector;
    // they converge too slowly for a fixed ten-step budget.
    PerturbationField d0;
    d0.layers.emplace_back(std::vector<long>{n});
    double overlap = 0.0;
    do {
      double norm = 0.0;
      for (long i = 0; i < n; ++i) {
        d0.layers[0].data[static_cast<size_t>(i)] = rng.normal();
        norm += d0.layers[0].data[static_cast<size_t>(i)] *
                d0.layers[0].data[static_cast<size_t>(i)];
      }
      norm = std::sqrt(norm);
      overlap = 0.0;
      for (long i = 0; i < n; ++i)
        overlap += d0.layers[0].data[static_cast<size_t>(i)] *
                   Q[0][static_cast<size_t>(i)] / norm;
    } while (std::abs(overlap) < 0.2);

    PowerIterationResult res = power_iterate(grad_at, {1.0}, d0, 10);
    double cos = 0.0, norm = 0.0;
    for (long i = 0; i < n; ++i) {
      cos += res.direction.layers[0].data[static_cast<size_t>(i)] *
             Q[0][static_cast<size_t>(i)];
      norm += res.direction.layers[0].data[static_cast<size_t>(i)] *
              res.direction.layers[0].data[static_cast<size_t>(i)];
    }
    cos = std::abs(cos) / std::sqrt(norm);
    ctx.check(cos > 0.99,
              fmt("|cos| = %.6f after 10 iterations (trial %d, gap %.2f)",
                  cos, t, ratio));
  }
  return ctx.r;
}

SuiteResult check_serialization(std::uint64_t seed) {
  Ctx ctx("serialization");
  RngStream rng(seed);
  auto dir = scratch_dir(seed);

  {
    ModelConfig mcfg;
    mcfg.in_channels = 1;
    mcfg.height = 8;
    mcfg.width = 8;
    mcfg.num_classes = 3;
    ParamSet params = init_params(mcfg, rng);
    auto path = (dir / "params.bin").string();
    save_checkpoint(path, params);
    ParamSet back = load_checkpoint(path);
    bool ok = back.names == params.names && back.count() == params.count();
    for (long i = 0; ok && i < params.count(); ++i)
      ok = bits_equal(back.tensors[static_cast<size_t>(i)],
                      params.tensors[static_cast<size_t>(i)]);
    ctx.check(ok, "checkpoint roundtrip is not bit exact");

    std::error_code ec;
    auto full = std::filesystem::file_size(path, ec);
    std::filesystem::resize_file(path, full - 4, ec);
    bool threw = false;
    try {
      load_checkpoint(path);
    } catch (const FormatError&) {
      threw = true;
    }
    ctx.check(threw, "truncated checkpoint was accepted");
  }

  const std::vector<unsigned char> magic = {0x00, 0x00, 0x08, 0x03};
  auto be32 = [](std::vector<unsigned char>& v, unsigned long x) {
    v.push_back(static_cast<unsigned char>((x >> 24) & 0xff));
    v.push_back(static_cast<unsigned char>((x >> 16) & 0xff));
    v.push_back(static_cast<unsigned char>((x >> 8) & 0xff));
    v.push_back(static_cast<unsigned char>(x & 0xff));
  };
  auto golden = [&](const std::vector<unsigned char>& m) {
    std::vector<unsigned char> bytes(m);
    std::vector<unsigned char> rest;
    be32(rest, 2);
    be32(rest, 28);
    be32(rest, 28);
    bytes.insert(bytes.end(), rest.begin(), rest.end());
    for (long i = 0; i < 2 * 28 * 28; ++i)
      bytes.push_back(static_cast<unsigned char>(i % 251));
    return bytes;
  };
  auto labels_file = (dir / "labels.idx").string();
  {
    std::vector<unsigned char> lb = {0x00, 0x00, 0x08, 0x01};
    be32(lb, 2);
    lb.push_back(1);
    lb.push_back(0);
    write_bytes(labels_file, lb);
  }
  {
    auto images_file = (dir / "golden.idx").string();
    write_bytes(images_file, golden(magic));
    Dataset d = load_idx(images_file, labels_file);
    bool ok = d.size() == 2 && d.images.shape == std::vector<long>{2, 1, 28, 28} &&
              d.labels == std::vector<long>{1, 0} && d.num_classes == 2 &&
              d.images.data[0] == 0.0 && d.images.data[1] == 1.0 / 255.0;
    ctx.check(ok, "golden 28x28 header parsed wrong");
  }

  int rejected = 0;
  const unsigned char flips[4] = {0x01, 0x08, 0x80, 0xff};
  for (int pos = 0; pos < 4; ++pos) {
    for (unsigned char flip : flips) {
      std::vector<unsigned char> bad = magic;
      bad[static_cast<size_t>(pos)] ^= flip;
      auto path = (dir / ("bad-" + std::to_string(pos) + "-" +
                          std::to_string(static_cast<int>(flip)) + ".idx"))
                      .string();
      write_bytes(path, golden(bad));
      try {
        load_idx(path, labels_file);
      } catch (const FormatError&) {
        ++rejected;
      }
    }
  }
  ctx.check(rejected == 16,
            fmt("only %d of 16 corrupted magics were rejected", rejected));

  {
    std::vector<std::uint8_t> pixels;
    for (long i = 0; i < 3 * 4 * 5; ++i)
      pixels.push_back(static_cast<std::uint8_t>(rng.uniform_int(256)));
    std::vector<std::uint8_t> labels = {0, 2, 1};
    auto ip = (dir / "round.idx").string();
    auto lp = (dir / "round-labels.idx").string();
    write_idx_images(ip, pixels, 3, 4, 5);
    write_idx_labels(lp, labels);
    Dataset d = load_idx(ip, lp);
    bool ok = d.images.shape == std::vector<long>{3, 1, 4, 5} &&
              d.labels == std::vector<long>{0, 2, 1} && d.num_classes == 3;
    for (size_t i = 0; ok && i < pixels.size(); ++i)
      ok = d.images.data[i] == static_cast<double>(pixels[i]) / 255.0;
    ctx.check(ok, "idx write/read roundtrip mismatch");

    std::vector<unsigned char> short_file = golden(magic);
    short_file.pop_back();
    auto sp = (dir / "short.idx").string();
    write_bytes(sp, short_file);
    bool threw = false;
    try {
      load_idx(sp, labels_file);
    } catch (const FormatError&) {
      threw = true;
    }
    ctx.check(threw, "truncated idx payload was accepted");

    std::vector<unsigned char> long_file = golden(magic);
    long_file.push_back(0x00);
    auto gp = (dir / "trailing.idx").string();
    write_bytes(gp, long_file);
    threw = false;
    try {
      load_idx(gp, labels_file);
    } catch (const FormatError&) {
      threw = true;
    }
    ctx.check(threw, "trailing idx bytes were accepted");
  }

  std::error_code ec;
  std::filesystem::remove_all(dir, ec);
  return ctx.r;
}

namespace {

SuiteResult quick_forward(std::uint64_t s) { return check_forward_kernels(s, 40); }
SuiteResult quick_grad(std::uint64_t s) { return check_gradients(s, 10); }
SuiteResult quick_patches(std::uint64_t s) { return check_patch_roundtrip(s, 25); }
SuiteResult quick_knn(std::uint64_t s) { return check_knn(s, 15); }
SuiteResult quick_mix(std::uint64_t s) { return check_mix_plans(s, 200); }
SuiteResult quick_ball(std::uint64_t s) { return check_weighted_ball(s, 100); }
SuiteResult quick_power(std::uint64_t s) { return check_power_iteration(s, 20); }

}  // namespace

const std::vector<Suite>& all_suites() {
  static const std::vector<Suite> suites = {
      {"forward-kernels", quick_forward},
      {"gradcheck", quick_grad},
      {"patches", quick_patches},
      {"knn", quick_knn},
      {"interpolation", check_interpolation},
      {"losses", check_losses},
      {"mixplan", quick_mix},
      {"ball", quick_ball},
      {"power-iteration", quick_power},
      {"serialization", check_serialization},
  };
  return suites;
}

}  // namespace pani::oracles
