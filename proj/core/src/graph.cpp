#include "pani/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <utility>

#include "pani/errors.hpp"
#include "pani/parallel.hpp"

namespace pani {

NeighborIndex::NeighborIndex(long images, long patches, long neighbors)
    : n_images(images), n_patches(patches), n_neighbors(neighbors) {
  long total = images * patches * neighbors;
  image.assign(total, -1);
  patch.assign(total, -1);
  similarity.assign(total, 0.0);
}

double guarded_cosine(const double* u, const double* v, long n) {
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (long i = 0; i < n; ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  return uv / ((std::sqrt(uu) + kCosineNormGuard) * (std::sqrt(vv) + kCosineNormGuard));
}

PeerSet filter_peers_semantic(const Tensor& penultimate, long k1) {
  if (penultimate.rank() != 2) {
    throw DimensionError("filter_peers_semantic expects (N,D) features, got " +
                         shape_str(penultimate.shape));
  }
  const long N = penultimate.shape[0], D = penultimate.shape[1];
  if (k1 < 1 || k1 > N - 1) {
    throw ContractError("filter_peers_semantic: k1 must be in [1, N-1]");
  }
  const double* rows = penultimate.data.data();
  PeerSet out;
  out.peers.assign(N, {});
  for (long i = 0; i < N; ++i) {
    std::vector<std::pair<double, long>> sims;
    sims.reserve(N - 1);
    for (long j = 0; j < N; ++j) {
      if (j == i) continue;
      sims.emplace_back(guarded_cosine(rows + i * D, rows + j * D, D), j);
    }
    // Descending similarity, exact ties toward the lower index. The order is
    // strict and total, so the sort result never depends on the algorithm.
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    out.peers[i].reserve(k1);
    for (long k = 0; k < k1; ++k) out.peers[i].push_back(sims[k].second);
  }
  return out;
}

PeerSet filter_peers_random(long images, long k1, RngStream& rng) {
  if (k1 < 1 || k1 > images - 1) {
    throw ContractError("filter_peers_random: k1 must be in [1, N-1]");
  }
  PeerSet out;
  out.peers.reserve(images);
  for (long i = 0; i < images; ++i) {
    out.peers.push_back(sample_without_replacement(images, k1, i, rng));
  }
  return out;
}

NeighborIndex knn_patches(const PatchSet& patches, const PeerSet& peers,
                          long k2, int threads) {
  const long N = patches.images(), P = patches.count(), d = patches.dim();
  const long k1 = peers.k1();
  if (peers.images() != N) {
    throw DimensionError("knn_patches: peer set covers " +
                         std::to_string(peers.images()) + " images, patches " +
                         std::to_string(N));
  }
  const long pool = k1 * P;
  if (k2 < 1 || k2 > pool) {
    throw ContractError("knn_patches: k2 must be in [1, k1 * P]");
  }
  NeighborIndex out(N, P, k2);
  const double* base = patches.data.data.data();
  parallel_for(N, threads, [&](long lo, long hi) {
    std::vector<std::pair<double, long>> cand(pool);
    for (long i = lo; i < hi; ++i) {
      const auto& plist = peers.peers[i];
      for (long p = 0; p < P; ++p) {
        const double* query = base + (i * P + p) * d;
        for (long r = 0; r < k1; ++r) {
          const long j = plist[r];
          for (long q = 0; q < P; ++q) {
            cand[r * P + q] = {guarded_cosine(query, base + (j * P + q) * d, d),
                               r * P + q};
          }
        }
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
          if (a.first != b.first) return a.first > b.first;
          return a.second < b.second;
        });
        for (long k = 0; k < k2; ++k) {
          long f = out.flat(i, p, k);
          out.image[f] = plist[cand[k].second / P];
          out.patch[f] = cand[k].second % P;
          out.similarity[f] = cand[k].first;
        }
      }
    }
  });
  return out;
}

void write_neighbor_csv(const NeighborIndex& g, std::ostream& out) {
  out << "i,p,k,j,q,similarity\n";
  char buf[64];
  for (long i = 0; i < g.n_images; ++i) {
    for (long p = 0; p < g.n_patches; ++p) {
      for (long k = 0; k < g.n_neighbors; ++k) {
        long f = g.flat(i, p, k);
        std::snprintf(buf, sizeof buf, "%.9g", g.similarity[f]);
        out << i << ',' << p << ',' << k << ',' << g.image[f] << ','
            << g.patch[f] << ',' << buf << '\n';
      }
    }
  }
}

}  // namespace pani
