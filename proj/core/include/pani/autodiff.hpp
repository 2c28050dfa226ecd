#pragma once

#include <map>
#include <memory>
#include <vector>

#include "pani/graph.hpp"
#include "pani/tensor.hpp"

namespace pani {

struct NodeId {
  int index = -1;
  bool valid() const { return index >= 0; }
};

enum class OpKind {
  kConstant,
  kLeaf,
  kConv2d,
  kDense,
  kRelu,
  kGlobalAvgPool,
  kLogSoftmax,
  kAdd,
  kScale,
  kExtractPatches,
  kInterpolate,
  kReconstructPatches,
  kKlDivergence,
  kSoftCrossEntropy,
};

const char* op_name(OpKind kind);

// Gradients of one scalar output with respect to every leaf, keyed by the
// leaf's node index.
struct Gradients {
  std::map<int, Tensor> by_leaf;

  const Tensor& at(NodeId leaf) const;
  bool contains(NodeId leaf) const;
};

// Reverse-mode tape. Nodes are appended in topological order (every parent
// precedes its children), values are stored eagerly, and every op checks its
// output for NaN/Inf before the node is admitted. Tapes carry no global
// state, so independent tapes may run concurrently.
class Tape {
 public:
  explicit Tape(int threads = 1);

  NodeId constant(Tensor value);
  NodeId leaf(Tensor value);

  // input (N, Cin, H, W) * kernel (F, Cin, kh, kw) + bias (F), zero padding.
  NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int pad);
  // input (N, D) * weight (M, D)^T + bias (M).
  NodeId dense(NodeId input, NodeId weight, NodeId bias);
  NodeId relu(NodeId x);
  // (N, C, H, W) -> (N, C), mean over the spatial extents.
  NodeId global_avg_pool(NodeId x);
  // Row-wise, numerically stabilized by max subtraction.
  NodeId log_softmax(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);

  // Patch moves; see patches.hpp for the layout contract.
  NodeId extract_patches(NodeId map, long patch_size);
  NodeId reconstruct_patches(NodeId patches, std::vector<long> source_shape,
                             long patch_size);
  // Non-local patch interpolation, differentiable in patches and eta.
  NodeId interpolate(NodeId patches,
                     std::shared_ptr<const NeighborIndex> graph, NodeId eta);

  // Mean KL(softmax(ref) || softmax(pert)) over rows. ref is a plain tensor
  // and acts as a constant: no gradient flows into it.
  NodeId kl_divergence(const Tensor& ref_logits, NodeId pert_logits);
  // Mean over rows of -sum_c target * log_softmax(logits). Each target row
  // must be a distribution (non-negative, sums to 1 within 1e-9).
  NodeId soft_cross_entropy(NodeId logits, const Tensor& targets);

  const Tensor& value(NodeId id) const;
  bool is_leaf(NodeId id) const;
  long size() const { return static_cast<long>(nodes_.size()); }
  int threads() const { return threads_; }

  // Reverse pass from a scalar output. Gradient buffers are only allocated
  // along paths that reach a leaf; constants cost nothing.
  Gradients backward(NodeId output) const;

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    bool requires_grad = false;
    int a = -1, b = -1, c = -1;  // parents
    Tensor value;
    int stride = 1, pad = 0;                      // conv2d
    long patch_size = 0;                          // patch moves
    std::vector<long> source_shape;               // reconstruct target
    double factor = 1.0;                          // scale
    std::shared_ptr<const NeighborIndex> graph;   // interpolate
    Tensor aux;  // kl: ref log-probs; soft ce: targets
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
  int threads_ = 1;
};

}  // namespace pani
