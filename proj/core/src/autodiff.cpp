#include "pani/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pani/errors.hpp"
#include "pani/interpolation.hpp"
#include "pani/parallel.hpp"
#include "pani/patches.hpp"

namespace pani {

namespace {

constexpr double kTargetRowTolerance = 1e-9;

// Row-wise log softmax with max subtraction.
Tensor log_softmax_rows(const Tensor& logits) {
  const long N = logits.shape[0], C = logits.shape[1];
  Tensor out(logits.shape);
  for (long n = 0; n < N; ++n) {
    const double* row = logits.data.data() + n * C;
    double* dst = out.data.data() + n * C;
    double m = row[0];
    for (long c = 1; c < C; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (long c = 0; c < C; ++c) sum += std::exp(row[c] - m);
    double lse = m + std::log(sum);
    for (long c = 0; c < C; ++c) dst[c] = row[c] - lse;
  }
  return out;
}

void check_logits(const Tensor& t, const char* who) {
  if (t.rank() != 2 || t.shape[1] < 2) {
    throw DimensionError(std::string(who) + " expects (N,C) logits with C >= 2, got " +
                         shape_str(t.shape));
  }
}

void ensure_grad(Tensor& g, const std::vector<long>& shape) {
  if (g.data.empty()) g = Tensor(shape);
}

void accumulate(Tensor& into, const Tensor& from) {
  for (long i = 0; i < from.numel(); ++i) into.data[i] += from.data[i];
}

struct ConvDims {
  long N, Ci, H, W, F, KH, KW, OH, OW;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel,
                   const Tensor& bias, int stride, int pad) {
  if (input.rank() != 4) {
    throw DimensionError("conv2d input must be (N,Cin,H,W), got " + shape_str(input.shape));
  }
  if (kernel.rank() != 4) {
    throw DimensionError("conv2d kernel must be (F,Cin,kh,kw), got " + shape_str(kernel.shape));
  }
  if (bias.rank() != 1 || bias.shape[0] != kernel.shape[0]) {
    throw DimensionError("conv2d bias must be (F,), got " + shape_str(bias.shape));
  }
  if (kernel.shape[1] != input.shape[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape) +
                         ", kernel " + shape_str(kernel.shape));
  }
  if (stride < 1 || pad < 0) throw ContractError("conv2d: stride >= 1, pad >= 0");
  ConvDims d{input.shape[0], input.shape[1], input.shape[2], input.shape[3],
             kernel.shape[0], kernel.shape[2], kernel.shape[3], 0, 0, stride, pad};
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  if (d.H + 2 * pad < d.KH || d.W + 2 * pad < d.KW) {
    throw DimensionError("conv2d kernel larger than padded input");
  }
  return d;
}

// Valid output range along one axis for a fixed kernel offset: indices o
// with 0 <= o*stride - pad + k < extent.
inline void axis_bounds(long extent, long out_extent, int stride, int pad,
                        long k, long& lo, long& hi) {
  long shift = k - pad;  // in = o*stride + shift
  lo = shift < 0 ? (-shift + stride - 1) / stride : 0;
  hi = std::min(out_extent, (extent - 1 - shift) / stride + 1);
  if (hi < lo) hi = lo;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel,
                      const Tensor& bias, const ConvDims& d, int threads) {
  Tensor out({d.N, d.F, d.OH, d.OW});
  const double* in = input.data.data();
  const double* ker = kernel.data.data();
  const double* b = bias.data.data();
  double* o = out.data.data();
  parallel_for(d.N, threads, [&](long lo_n, long hi_n) {
    for (long n = lo_n; n < hi_n; ++n) {
      for (long f = 0; f < d.F; ++f) {
        double* plane = o + (n * d.F + f) * d.OH * d.OW;
        std::fill(plane, plane + d.OH * d.OW, b[f]);
        for (long c = 0; c < d.Ci; ++c) {
          const double* iplane = in + (n * d.Ci + c) * d.H * d.W;
          for (long kh = 0; kh < d.KH; ++kh) {
            long oh_lo, oh_hi;
            axis_bounds(d.H, d.OH, d.stride, d.pad, kh, oh_lo, oh_hi);
            for (long kw = 0; kw < d.KW; ++kw) {
              long ow_lo, ow_hi;
              axis_bounds(d.W, d.OW, d.stride, d.pad, kw, ow_lo, ow_hi);
              double w = ker[((f * d.Ci + c) * d.KH + kh) * d.KW + kw];
              for (long oh = oh_lo; oh < oh_hi; ++oh) {
                const double* irow = iplane + (oh * d.stride - d.pad + kh) * d.W;
                double* orow = plane + oh * d.OW;
                for (long ow = ow_lo; ow < ow_hi; ++ow) {
                  orow[ow] += w * irow[ow * d.stride - d.pad + kw];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

void conv2d_backward_input(const Tensor& grad_out, const Tensor& kernel,
                           const ConvDims& d, Tensor& grad_in, int threads) {
  const double* g = grad_out.data.data();
  const double* ker = kernel.data.data();
  double* gi = grad_in.data.data();
  parallel_for(d.N, threads, [&](long lo_n, long hi_n) {
    for (long n = lo_n; n < hi_n; ++n) {
      for (long f = 0; f < d.F; ++f) {
        const double* plane = g + (n * d.F + f) * d.OH * d.OW;
        for (long c = 0; c < d.Ci; ++c) {
          double* giplane = gi + (n * d.Ci + c) * d.H * d.W;
          for (long kh = 0; kh < d.KH; ++kh) {
            long oh_lo, oh_hi;
            axis_bounds(d.H, d.OH, d.stride, d.pad, kh, oh_lo, oh_hi);
            for (long kw = 0; kw < d.KW; ++kw) {
              long ow_lo, ow_hi;
              axis_bounds(d.W, d.OW, d.stride, d.pad, kw, ow_lo, ow_hi);
              double w = ker[((f * d.Ci + c) * d.KH + kh) * d.KW + kw];
              for (long oh = oh_lo; oh < oh_hi; ++oh) {
                double* girow = giplane + (oh * d.stride - d.pad + kh) * d.W;
                const double* grow = plane + oh * d.OW;
                for (long ow = ow_lo; ow < ow_hi; ++ow) {
                  girow[ow * d.stride - d.pad + kw] += w * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
}

// Parallel over output units: each unit's weight and bias slices are owned
// by one chunk and accumulated in fixed (n, oh, ow) order, so the result is
// independent of the thread count.
void conv2d_backward_kernel(const Tensor& grad_out, const Tensor& input,
                            const ConvDims& d, Tensor& grad_kernel,
                            int threads) {
  const double* g = grad_out.data.data();
  const double* in = input.data.data();
  double* gk = grad_kernel.data.data();
  parallel_for(d.F, threads, [&](long lo_f, long hi_f) {
    for (long f = lo_f; f < hi_f; ++f) {
      for (long n = 0; n < d.N; ++n) {
        const double* plane = g + (n * d.F + f) * d.OH * d.OW;
        for (long c = 0; c < d.Ci; ++c) {
          const double* iplane = in + (n * d.Ci + c) * d.H * d.W;
          for (long kh = 0; kh < d.KH; ++kh) {
            long oh_lo, oh_hi;
            axis_bounds(d.H, d.OH, d.stride, d.pad, kh, oh_lo, oh_hi);
            for (long kw = 0; kw < d.KW; ++kw) {
              long ow_lo, ow_hi;
              axis_bounds(d.W, d.OW, d.stride, d.pad, kw, ow_lo, ow_hi);
              double acc = 0.0;
              for (long oh = oh_lo; oh < oh_hi; ++oh) {
                const double* irow = iplane + (oh * d.stride - d.pad + kh) * d.W;
                const double* grow = plane + oh * d.OW;
                for (long ow = ow_lo; ow < ow_hi; ++ow) {
                  acc += grow[ow] * irow[ow * d.stride - d.pad + kw];
                }
              }
              gk[((f * d.Ci + c) * d.KH + kh) * d.KW + kw] += acc;
            }
          }
        }
      }
    }
  });
}

void conv2d_backward_bias(const Tensor& grad_out, const ConvDims& d,
                          Tensor& grad_bias) {
  const double* g = grad_out.data.data();
  for (long f = 0; f < d.F; ++f) {
    double acc = 0.0;
    for (long n = 0; n < d.N; ++n) {
      const double* plane = g + (n * d.F + f) * d.OH * d.OW;
      for (long i = 0; i < d.OH * d.OW; ++i) acc += plane[i];
    }
    grad_bias.data[f] += acc;
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kDense: return "dense";
    case OpKind::kRelu: return "relu";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kExtractPatches: return "extract_patches";
    case OpKind::kInterpolate: return "interpolate";
    case OpKind::kReconstructPatches: return "reconstruct_patches";
    case OpKind::kKlDivergence: return "kl_divergence";
    case OpKind::kSoftCrossEntropy: return "soft_cross_entropy";
  }
  return "unknown";
}

const Tensor& Gradients::at(NodeId leaf) const {
  auto it = by_leaf.find(leaf.index);
  if (it == by_leaf.end()) {
    throw ContractError("no gradient recorded for node " + std::to_string(leaf.index));
  }
  return it->second;
}

bool Gradients::contains(NodeId leaf) const {
  return by_leaf.count(leaf.index) > 0;
}

Tape::Tape(int threads) : threads_(threads < 1 ? 1 : threads) {}

NodeId Tape::push(Node node) {
  node.value.check_finite(op_name(node.kind));
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(NodeId id) const {
  if (!id.valid() || id.index >= static_cast<int>(nodes_.size())) {
    throw ContractError("invalid node id");
  }
  return nodes_[id.index];
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

bool Tape::is_leaf(NodeId id) const { return node(id).kind == OpKind::kLeaf; }

NodeId Tape::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::conv2d(NodeId input, NodeId kernel, NodeId bias, int stride,
                    int pad) {
  const Node &ni = node(input), &nk = node(kernel), &nb = node(bias);
  ConvDims d = conv_dims(ni.value, nk.value, nb.value, stride, pad);
  Node n;
  n.kind = OpKind::kConv2d;
  n.a = input.index;
  n.b = kernel.index;
  n.c = bias.index;
  n.stride = stride;
  n.pad = pad;
  n.requires_grad = ni.requires_grad || nk.requires_grad || nb.requires_grad;
  n.value = conv2d_forward(ni.value, nk.value, nb.value, d, threads_);
  return push(std::move(n));
}

NodeId Tape::dense(NodeId input, NodeId weight, NodeId bias) {
  const Node &ni = node(input), &nw = node(weight), &nb = node(bias);
  if (ni.value.rank() != 2 || nw.value.rank() != 2 ||
      ni.value.shape[1] != nw.value.shape[1]) {
    throw DimensionError("dense: input " + shape_str(ni.value.shape) +
                         " vs weight " + shape_str(nw.value.shape));
  }
  if (nb.value.rank() != 1 || nb.value.shape[0] != nw.value.shape[0]) {
    throw DimensionError("dense: bias " + shape_str(nb.value.shape));
  }
  const long N = ni.value.shape[0], D = ni.value.shape[1], M = nw.value.shape[0];
  Node n;
  n.kind = OpKind::kDense;
  n.a = input.index;
  n.b = weight.index;
  n.c = bias.index;
  n.requires_grad = ni.requires_grad || nw.requires_grad || nb.requires_grad;
  n.value = Tensor({N, M});
  const double* x = ni.value.data.data();
  const double* w = nw.value.data.data();
  const double* b = nb.value.data.data();
  double* y = n.value.data.data();
  for (long i = 0; i < N; ++i) {
    for (long m = 0; m < M; ++m) {
      double acc = b[m];
      const double* xr = x + i * D;
      const double* wr = w + m * D;
      for (long dd = 0; dd < D; ++dd) acc += xr[dd] * wr[dd];
      y[i * M + m] = acc;
    }
  }
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
  const Node& nx = node(x);
  Node n;
  n.kind = OpKind::kRelu;
  n.a = x.index;
  n.requires_grad = nx.requires_grad;
  n.value = nx.value;
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

NodeId Tape::global_avg_pool(NodeId x) {
  const Node& nx = node(x);
  if (nx.value.rank() != 4) {
    throw DimensionError("global_avg_pool expects (N,C,H,W), got " + shape_str(nx.value.shape));
  }
  const long N = nx.value.shape[0], C = nx.value.shape[1];
  const long HW = nx.value.shape[2] * nx.value.shape[3];
  Node n;
  n.kind = OpKind::kGlobalAvgPool;
  n.a = x.index;
  n.requires_grad = nx.requires_grad;
  n.value = Tensor({N, C});
  const double* src = nx.value.data.data();
  for (long i = 0; i < N * C; ++i) {
    double acc = 0.0;
    for (long j = 0; j < HW; ++j) acc += src[i * HW + j];
    n.value.data[i] = acc / static_cast<double>(HW);
  }
  return push(std::move(n));
}

NodeId Tape::log_softmax(NodeId x) {
  const Node& nx = node(x);
  check_logits(nx.value, "log_softmax");
  Node n;
  n.kind = OpKind::kLogSoftmax;
  n.a = x.index;
  n.requires_grad = nx.requires_grad;
  n.value = log_softmax_rows(nx.value);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Node &na = node(a), &nb = node(b);
  if (!na.value.same_shape(nb.value)) {
    throw DimensionError("add: shapes " + shape_str(na.value.shape) + " vs " +
                         shape_str(nb.value.shape));
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.a = a.index;
  n.b = b.index;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  n.value = na.value;
  for (long i = 0; i < n.value.numel(); ++i) n.value.data[i] += nb.value.data[i];
  return push(std::move(n));
}

NodeId Tape::scale(NodeId x, double factor) {
  const Node& nx = node(x);
  Node n;
  n.kind = OpKind::kScale;
  n.a = x.index;
  n.factor = factor;
  n.requires_grad = nx.requires_grad;
  n.value = nx.value;
  for (double& v : n.value.data) v *= factor;
  return push(std::move(n));
}

NodeId Tape::extract_patches(NodeId map, long patch_size) {
  const Node& nm = node(map);
  Node n;
  n.kind = OpKind::kExtractPatches;
  n.a = map.index;
  n.patch_size = patch_size;
  n.source_shape = nm.value.shape;
  n.requires_grad = nm.requires_grad;
  n.value = extract_patches_data(nm.value, patch_size);
  return push(std::move(n));
}

NodeId Tape::reconstruct_patches(NodeId patches, std::vector<long> source_shape,
                                 long patch_size) {
  const Node& np = node(patches);
  Node n;
  n.kind = OpKind::kReconstructPatches;
  n.a = patches.index;
  n.patch_size = patch_size;
  n.source_shape = std::move(source_shape);
  n.requires_grad = np.requires_grad;
  n.value = reconstruct_data(np.value, n.source_shape, patch_size);
  return push(std::move(n));
}

NodeId Tape::interpolate(NodeId patches,
                         std::shared_ptr<const NeighborIndex> graph,
                         NodeId eta) {
  const Node &np = node(patches), &ne = node(eta);
  if (!graph) throw ContractError("interpolate: missing neighbor graph");
  Node n;
  n.kind = OpKind::kInterpolate;
  n.a = patches.index;
  n.b = eta.index;
  n.graph = std::move(graph);
  n.requires_grad = np.requires_grad || ne.requires_grad;
  n.value = interpolate_patches_data(np.value, *n.graph, ne.value);
  return push(std::move(n));
}

NodeId Tape::kl_divergence(const Tensor& ref_logits, NodeId pert_logits) {
  const Node& np = node(pert_logits);
  check_logits(ref_logits, "kl_divergence");
  check_logits(np.value, "kl_divergence");
  if (!ref_logits.same_shape(np.value)) {
    throw DimensionError("kl_divergence: ref " + shape_str(ref_logits.shape) +
                         " vs pert " + shape_str(np.value.shape));
  }
  const long N = ref_logits.shape[0], C = ref_logits.shape[1];
  Node n;
  n.kind = OpKind::kKlDivergence;
  n.a = pert_logits.index;
  n.requires_grad = np.requires_grad;
  n.aux = log_softmax_rows(ref_logits);  // ref is a constant by construction
  Tensor pert_lp = log_softmax_rows(np.value);
  double acc = 0.0;
  for (long i = 0; i < N; ++i) {
    for (long c = 0; c < C; ++c) {
      double lr = n.aux.data[i * C + c];
      acc += std::exp(lr) * (lr - pert_lp.data[i * C + c]);
    }
  }
  n.value = Tensor::scalar(acc / static_cast<double>(N));
  return push(std::move(n));
}

NodeId Tape::soft_cross_entropy(NodeId logits, const Tensor& targets) {
  const Node& nl = node(logits);
  check_logits(nl.value, "soft_cross_entropy");
  if (!targets.same_shape(nl.value)) {
    throw DimensionError("soft_cross_entropy: targets " + shape_str(targets.shape) +
                         " vs logits " + shape_str(nl.value.shape));
  }
  const long N = targets.shape[0], C = targets.shape[1];
  for (long i = 0; i < N; ++i) {
    double row = 0.0;
    for (long c = 0; c < C; ++c) {
      double t = targets.data[i * C + c];
      if (t < 0.0) throw ContractError("soft_cross_entropy: negative target entry");
      row += t;
    }
    if (std::abs(row - 1.0) > kTargetRowTolerance) {
      throw ContractError("soft_cross_entropy: target row " + std::to_string(i) +
                          " sums to " + std::to_string(row));
    }
  }
  Node n;
  n.kind = OpKind::kSoftCrossEntropy;
  n.a = logits.index;
  n.requires_grad = nl.requires_grad;
  n.aux = targets;
  Tensor lp = log_softmax_rows(nl.value);
  double acc = 0.0;
  for (long i = 0; i < N * C; ++i) acc -= targets.data[i] * lp.data[i];
  n.value = Tensor::scalar(acc / static_cast<double>(N));
  return push(std::move(n));
}

Gradients Tape::backward(NodeId output) const {
  const Node& out = node(output);
  if (!out.value.is_scalar()) {
    throw ContractError("backward needs a scalar output, got " + shape_str(out.value.shape));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[output.index] = Tensor(out.value.shape);
  grads[output.index].data[0] = 1.0;

  for (int i = output.index; i >= 0; --i) {
    const Node& nd = nodes_[i];
    if (!nd.requires_grad || grads[i].data.empty()) continue;
    const Tensor& g = grads[i];
    auto parent_wants = [&](int p) { return p >= 0 && nodes_[p].requires_grad; };
    auto parent_grad = [&](int p) -> Tensor& {
      ensure_grad(grads[p], nodes_[p].value.shape);
      return grads[p];
    };
    switch (nd.kind) {
      case OpKind::kConstant:
      case OpKind::kLeaf:
        break;
      case OpKind::kConv2d: {
        const Tensor& input = nodes_[nd.a].value;
        const Tensor& kernel = nodes_[nd.b].value;
        const Tensor& bias = nodes_[nd.c].value;
        ConvDims d = conv_dims(input, kernel, bias, nd.stride, nd.pad);
        if (parent_wants(nd.a)) {
          conv2d_backward_input(g, kernel, d, parent_grad(nd.a), threads_);
        }
        if (parent_wants(nd.b)) {
          conv2d_backward_kernel(g, input, d, parent_grad(nd.b), threads_);
        }
        if (parent_wants(nd.c)) {
          conv2d_backward_bias(g, d, parent_grad(nd.c));
        }
        break;
      }
      case OpKind::kDense: {
        const Tensor& x = nodes_[nd.a].value;
        const Tensor& w = nodes_[nd.b].value;
        const long N = x.shape[0], D = x.shape[1], M = w.shape[0];
        if (parent_wants(nd.a)) {
          Tensor& gx = parent_grad(nd.a);
          for (long n = 0; n < N; ++n) {
            for (long m = 0; m < M; ++m) {
              double gv = g.data[n * M + m];
              for (long dd = 0; dd < D; ++dd) {
                gx.data[n * D + dd] += gv * w.data[m * D + dd];
              }
            }
          }
        }
        if (parent_wants(nd.b)) {
          Tensor& gw = parent_grad(nd.b);
          for (long n = 0; n < N; ++n) {
            for (long m = 0; m < M; ++m) {
              double gv = g.data[n * M + m];
              for (long dd = 0; dd < D; ++dd) {
                gw.data[m * D + dd] += gv * x.data[n * D + dd];
              }
            }
          }
        }
        if (parent_wants(nd.c)) {
          Tensor& gb = parent_grad(nd.c);
          for (long n = 0; n < N; ++n) {
            for (long m = 0; m < M; ++m) gb.data[m] += g.data[n * M + m];
          }
        }
        break;
      }
      case OpKind::kRelu: {
        if (parent_wants(nd.a)) {
          Tensor& gx = parent_grad(nd.a);
          const Tensor& x = nodes_[nd.a].value;
          for (long j = 0; j < g.numel(); ++j) {
            if (x.data[j] > 0.0) gx.data[j] += g.data[j];
          }
        }
        break;
      }
      case OpKind::kGlobalAvgPool: {
        if (parent_wants(nd.a)) {
          Tensor& gx = parent_grad(nd.a);
          const Tensor& x = nodes_[nd.a].value;
          const long HW = x.shape[2] * x.shape[3];
          const double inv = 1.0 / static_cast<double>(HW);
          for (long i2 = 0; i2 < g.numel(); ++i2) {
            double gv = g.data[i2] * inv;
            for (long j = 0; j < HW; ++j) gx.data[i2 * HW + j] += gv;
          }
        }
        break;
      }
      case OpKind::kLogSoftmax: {
        if (parent_wants(nd.a)) {
          Tensor& gx = parent_grad(nd.a);
          const long N = nd.value.shape[0], C = nd.value.shape[1];
          for (long n = 0; n < N; ++n) {
            double gsum = 0.0;
            for (long c = 0; c < C; ++c) gsum += g.data[n * C + c];
            for (long c = 0; c < C; ++c) {
              gx.data[n * C + c] +=
                  g.data[n * C + c] - std::exp(nd.value.data[n * C + c]) * gsum;
            }
          }
        }
        break;
      }
      case OpKind::kAdd: {
        if (parent_wants(nd.a)) accumulate(parent_grad(nd.a), g);
        if (parent_wants(nd.b)) accumulate(parent_grad(nd.b), g);
        break;
      }
      case OpKind::kScale: {
        if (parent_wants(nd.a)) {
          Tensor& gx = parent_grad(nd.a);
          for (long j = 0; j < g.numel(); ++j) gx.data[j] += nd.factor * g.data[j];
        }
        break;
      }
      case OpKind::kExtractPatches: {
        if (parent_wants(nd.a)) {
          accumulate(parent_grad(nd.a),
                     reconstruct_data(g, nd.source_shape, nd.patch_size));
        }
        break;
      }
      case OpKind::kReconstructPatches: {
        if (parent_wants(nd.a)) {
          accumulate(parent_grad(nd.a), extract_patches_data(g, nd.patch_size));
        }
        break;
      }
      case OpKind::kInterpolate: {
        const Tensor& z = nodes_[nd.a].value;
        const Tensor& eta = nodes_[nd.b].value;
        const NeighborIndex& gr = *nd.graph;
        const long N = z.shape[0], P = z.shape[1], d = z.shape[2];
        const long K = gr.n_neighbors;
        bool want_z = parent_wants(nd.a);
        bool want_eta = parent_wants(nd.b);
        Tensor* gz = want_z ? &parent_grad(nd.a) : nullptr;
        Tensor* ge = want_eta ? &parent_grad(nd.b) : nullptr;
        for (long i2 = 0; i2 < N; ++i2) {
          for (long p = 0; p < P; ++p) {
            const long row = (i2 * P + p);
            const double* gout = g.data.data() + row * d;
            const double* self = z.data.data() + row * d;
            double eta_sum = 0.0;
            for (long k = 0; k < K; ++k) {
              const long f = gr.flat(i2, p, k);
              const double e = eta.data[row * K + k];
              eta_sum += e;
              const double* nb = z.data.data() + (gr.image[f] * P + gr.patch[f]) * d;
              if (want_eta) {
                double acc = 0.0;
                for (long t = 0; t < d; ++t) acc += gout[t] * (nb[t] - self[t]);
                ge->data[row * K + k] += acc;
              }
              if (want_z) {
                double* gnb = gz->data.data() + (gr.image[f] * P + gr.patch[f]) * d;
                for (long t = 0; t < d; ++t) gnb[t] += e * gout[t];
              }
            }
            if (want_z) {
              double* gself = gz->data.data() + row * d;
              const double w = 1.0 - eta_sum;
              for (long t = 0; t < d; ++t) gself[t] += w * gout[t];
            }
          }
        }
        break;
      }
      case OpKind::kKlDivergence: {
        if (parent_wants(nd.a)) {
          // d/dz of mean KL: (softmax(pert) - softmax(ref)) / N.
          const Tensor& pert = nodes_[nd.a].value;
          Tensor pert_lp = log_softmax_rows(pert);
          Tensor& gx = parent_grad(nd.a);
          const long N = pert.shape[0], C = pert.shape[1];
          const double gv = g.data[0] / static_cast<double>(N);
          for (long j = 0; j < N * C; ++j) {
            gx.data[j] += gv * (std::exp(pert_lp.data[j]) - std::exp(nd.aux.data[j]));
          }
        }
        break;
      }
      case OpKind::kSoftCrossEntropy: {
        if (parent_wants(nd.a)) {
          const Tensor& logits = nodes_[nd.a].value;
          Tensor lp = log_softmax_rows(logits);
          Tensor& gx = parent_grad(nd.a);
          const long N = logits.shape[0], C = logits.shape[1];
          const double gv = g.data[0] / static_cast<double>(N);
          for (long j = 0; j < N * C; ++j) {
            gx.data[j] += gv * (std::exp(lp.data[j]) - nd.aux.data[j]);
          }
        }
        break;
      }
    }
  }

  Gradients result;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind != OpKind::kLeaf) continue;
    if (grads[i].data.empty()) grads[i] = Tensor(nodes_[i].value.shape);
    grads[i].check_finite("backward");
    result.by_leaf[static_cast<int>(i)] = std::move(grads[i]);
  }
  return result;
}

}  // namespace pani
